//! Embedding table: a `Param` indexed by id, with id 0 reserved as padding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::param::Param;
use crate::numerics::scalar::Scalar;

/// Lookup table of `vocab + 1` rows of width `dim`.
///
/// Row 0 is the padding row; real ids run `1..=vocab`. The padding row is
/// initialized to zero and, because lookups of id 0 are rejected, never
/// receives gradient.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<S: Scalar = f32> {
    kind: String,
    vocab: u32,
    param: Param<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    /// Random-normal initialization with standard deviation `std`; the pad
    /// row is forced back to zero.
    pub fn randn(
        name: impl Into<String>,
        kind: impl Into<String>,
        vocab: u32,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut value = Matrix::randn(vocab as usize + 1, dim, std, rng);
        value.row_mut(0).iter_mut().for_each(|v| *v = S::ZERO);
        EmbeddingTable {
            kind: kind.into(),
            vocab,
            param: Param::new(name, value),
        }
    }

    /// Wrap an existing table (checkpoint restore). Expects `vocab + 1` rows.
    pub fn from_matrix(
        name: impl Into<String>,
        kind: impl Into<String>,
        vocab: u32,
        value: Matrix<S>,
    ) -> Result<Self> {
        if value.rows() != vocab as usize + 1 {
            return Err(Error::shape(
                "EmbeddingTable::from_matrix",
                format!("{} rows", vocab + 1),
                format!("{}", value.rows()),
            ));
        }
        Ok(EmbeddingTable {
            kind: kind.into(),
            vocab,
            param: Param::new(name, value),
        })
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.param.value.cols()
    }

    pub fn param(&self) -> &Param<S> {
        &self.param
    }

    pub fn param_mut(&mut self) -> &mut Param<S> {
        &mut self.param
    }

    /// Row for a real id. Id 0 (padding) and ids beyond the vocabulary are
    /// rejected.
    pub fn lookup(&self, id: u32) -> Result<&[S]> {
        self.check_id(id)?;
        Ok(self.param.value.row(id as usize))
    }

    /// Add `delta` into the gradient row for `id`.
    pub fn accumulate_grad_row(&mut self, id: u32, delta: &[S]) -> Result<()> {
        self.check_id(id)?;
        if delta.len() != self.dim() {
            return Err(Error::shape(
                format!("grad row of '{}'", self.param.name()),
                format!("{}", self.dim()),
                format!("{}", delta.len()),
            ));
        }
        for (g, &d) in self
            .param
            .grad
            .row_mut(id as usize)
            .iter_mut()
            .zip(delta.iter())
        {
            *g += d;
        }
        Ok(())
    }

    fn check_id(&self, id: u32) -> Result<()> {
        if id == 0 || id > self.vocab {
            return Err(Error::IdOutOfBounds {
                kind: self.kind.clone(),
                id,
                max: self.vocab,
            });
        }
        Ok(())
    }
}
