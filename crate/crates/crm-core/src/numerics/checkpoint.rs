//! Tensor checkpoint files.
//!
//! Layout: an 8-byte magic, then zero or more records, each
//!
//! ```text
//! [name_len: u64 LE][name: utf-8 bytes][rows: u64 LE][cols: u64 LE]
//! [rows * cols * 4 bytes of row-major f32 LE]
//! ```
//!
//! Records are read until end of file. Payloads are raw `f32` bits, so a
//! save/load round trip is bit-exact. Duplicate tensor names are rejected on
//! both write and read.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// File magic for checkpoint files.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRMCKPT1";

/// Write named tensors in the order given.
pub fn write_checkpoint(path: &Path, tensors: &[(&str, &Matrix<f32>)]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, _) in tensors {
        if !seen.insert(*name) {
            return Err(Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!("duplicate tensor name '{name}'"),
            });
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&(tensor.rows() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(tensor.cols() as u64).to_le_bytes())
            .map_err(io_err)?;
        let mut payload = Vec::with_capacity(tensor.data().len() * 4);
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read every tensor record, in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Matrix<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::CheckpointFormat {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
    {
        return Err(bad("missing or wrong magic".to_string()));
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut tensors = Vec::new();
    let mut seen = BTreeSet::new();
    let read_u64 = |bytes: &[u8], pos: &mut usize, what: &str| -> Result<u64> {
        if *pos + 8 > bytes.len() {
            return Err(bad(format!("truncated while reading {what} at offset {pos}", pos = *pos)));
        }
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[*pos..*pos + 8]);
        *pos += 8;
        Ok(u64::from_le_bytes(raw))
    };
    while pos < bytes.len() {
        let name_len = read_u64(&bytes, &mut pos, "name length")? as usize;
        if pos + name_len > bytes.len() {
            return Err(bad(format!("truncated tensor name at offset {pos}")));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| bad(format!("tensor name at offset {pos} is not utf-8")))?
            .to_string();
        pos += name_len;
        if !seen.insert(name.clone()) {
            return Err(bad(format!("duplicate tensor name '{name}'")));
        }
        let rows = read_u64(&bytes, &mut pos, &format!("rows of '{name}'"))? as usize;
        let cols = read_u64(&bytes, &mut pos, &format!("cols of '{name}'"))? as usize;
        let n_values = rows
            .checked_mul(cols)
            .ok_or_else(|| bad(format!("tensor '{name}' dims overflow")))?;
        let n_bytes = n_values
            .checked_mul(4)
            .ok_or_else(|| bad(format!("tensor '{name}' payload overflows")))?;
        if pos + n_bytes > bytes.len() {
            return Err(bad(format!(
                "truncated payload of '{name}': need {n_bytes} bytes at offset {pos}, file has {}",
                bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(n_values);
        for chunk in bytes[pos..pos + n_bytes].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        pos += n_bytes;
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(tensors)
}

/// Find one tensor by name in a loaded checkpoint.
pub fn find_tensor<'a>(
    tensors: &'a [(String, Matrix<f32>)],
    name: &str,
    path: &Path,
) -> Result<&'a Matrix<f32>> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg: format!("missing tensor '{name}'"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::<f32>::randn(7, 3, 10.0, &mut rng);
        let mut b = Matrix::<f32>::zeros(2, 2);
        // Awkward values: negative zero, subnormal, extremes.
        b.set(0, 0, -0.0);
        b.set(0, 1, f32::MIN_POSITIVE / 2.0);
        b.set(1, 0, f32::MAX);
        b.set(1, 1, -1.5e-30);
        write_checkpoint(&path, &[("a", &a), ("deep/name", &b)]).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a");
        assert_eq!(loaded[1].0, "deep/name");
        for (orig, (_, got)) in [&a, &b].iter().zip(loaded.iter()) {
            assert_eq!(orig.shape(), got.shape());
            for (x, y) in orig.data().iter().zip(got.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_sized_tensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let empty = Matrix::<f32>::zeros(0, 4);
        write_checkpoint(&path, &[("empty", &empty)]).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded[0].1.shape(), (0, 4));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let m = Matrix::<f32>::zeros(4, 4);
        write_checkpoint(&path, &[("m", &m)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let m = Matrix::<f32>::zeros(1, 1);
        let err = write_checkpoint(&path, &[("m", &m), ("m", &m)]).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }
}
