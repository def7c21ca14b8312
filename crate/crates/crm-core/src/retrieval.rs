//! Nearest-neighbor retrieval over item vectors.
//!
//! Two index kinds share one search interface. `Exact` scans every item;
//! `Ivf` clusters items with seeded k-means at build time and scans only the
//! posting lists of the `n_probe` centroids closest to the query. Item
//! vectors are expected to be L2-normalized by the producing model, which
//! makes maximum inner product, cosine, and nearest-Euclidean rankings
//! agree — centroid probing uses Euclidean distance for exactly that
//! reason.
//!
//! Scoring accumulates in `f64`; between equal scores the smaller item id
//! wins, so rankings are fully deterministic.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{find_tensor, read_checkpoint, write_checkpoint};
use crate::numerics::matrix::Matrix;

/// Number of Lloyd iterations used by the IVF builder.
pub const KMEANS_ITERS: usize = 20;

/// Ids must stay exactly representable in the f32 checkpoint payload.
const MAX_EXACT_ID: u32 = 1 << 24;

/// One retrieved item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub item_id: u32,
    pub score: f32,
}

/// K-means output: centroids, per-point assignment, and the objective
/// (mean squared distance) recorded after every assignment step.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Matrix<f32>,
    pub assignments: Vec<usize>,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
struct IvfData {
    centroids: Matrix<f32>,
    /// Row indices per cluster; together a partition of `0..n_rows`.
    postings: Vec<Vec<u32>>,
    n_probe: usize,
}

/// An immutable nearest-neighbor index over item vectors.
#[derive(Debug, Clone)]
pub struct ItemIndex {
    ids: Vec<u32>,
    vectors: Matrix<f32>,
    ivf: Option<IvfData>,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Seeded k-means with k-means++ initialization and a fixed number of Lloyd
/// iterations.
///
/// Clusters that come up empty after an update are re-seeded to the point
/// farthest from its current centroid, which cannot increase the objective.
/// The objective trace is therefore non-increasing, and tests assert that.
pub fn kmeans(vectors: &Matrix<f32>, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = vectors.rows();
    let dim = vectors.cols();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= n_points, got k={k} with {n} points"
        )));
    }
    vectors.ensure_finite("k-means input vectors")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first centroid uniform, the rest D^2-weighted.
    let mut centroid_rows: Vec<usize> = Vec::with_capacity(k);
    centroid_rows.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(vectors.row(i), vectors.row(centroid_rows[0])))
        .collect();
    while centroid_rows.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; any point works.
            rng.random_range(0..n)
        } else {
            let mut draw: f64 = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                draw -= w;
                if draw <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroid_rows.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = squared_distance(vectors.row(i), vectors.row(next));
            if nd < *d {
                *d = nd;
            }
        }
    }
    let mut centroids = Matrix::zeros(k, dim);
    for (c, &row) in centroid_rows.iter().enumerate() {
        centroids.set_row(c, vectors.row(row))?;
    }

    let mut assignments = vec![0usize; n];
    let mut objective_trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        // Assignment step, recording the objective it achieves.
        let mut objective = 0f64;
        for i in 0..n {
            let row = vectors.row(i);
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d = squared_distance(row, centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            assignments[i] = best.0;
            objective += best.1;
        }
        objective_trace.push(objective / n as f64);

        // Update step: means in f64.
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(vectors.row(i)) {
                *s += v as f64;
            }
        }
        let mut empty: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                empty.push(c);
                continue;
            }
            for j in 0..dim {
                centroids.set(c, j, (sums[c * dim + j] / counts[c] as f64) as f32);
            }
        }
        // Re-seed empty clusters to the points currently farthest from
        // their centroids (each empty cluster takes a distinct point).
        if !empty.is_empty() {
            let mut by_distance: Vec<(usize, f64)> = (0..n)
                .map(|i| {
                    (
                        i,
                        squared_distance(vectors.row(i), centroids.row(assignments[i])),
                    )
                })
                .collect();
            by_distance.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite distances"));
            for (slot, c) in empty.into_iter().enumerate() {
                let (row, _) = by_distance[slot.min(n - 1)];
                centroids.set_row(c, vectors.row(row))?;
            }
        }
    }

    Ok(KMeans {
        centroids,
        assignments,
        objective_trace,
    })
}

impl ItemIndex {
    /// Exhaustive index: search scans every vector.
    pub fn build_exact(ids: Vec<u32>, vectors: Matrix<f32>) -> Result<ItemIndex> {
        Self::validate_items(&ids, &vectors)?;
        Ok(ItemIndex {
            ids,
            vectors,
            ivf: None,
        })
    }

    /// Inverted-file index over `n_clusters` k-means cells, probing
    /// `n_probe` cells per query.
    pub fn build_ivf(
        ids: Vec<u32>,
        vectors: Matrix<f32>,
        n_clusters: usize,
        n_probe: usize,
        seed: u64,
    ) -> Result<ItemIndex> {
        Self::validate_items(&ids, &vectors)?;
        if n_clusters == 0 || n_clusters > vectors.rows() {
            return Err(Error::Config(format!(
                "ivf needs 1 <= n_clusters <= n_items, got {n_clusters} for {} items",
                vectors.rows()
            )));
        }
        if n_probe == 0 || n_probe > n_clusters {
            return Err(Error::Config(format!(
                "ivf needs 1 <= n_probe <= n_clusters, got n_probe={n_probe}, n_clusters={n_clusters}"
            )));
        }
        let km = kmeans(&vectors, n_clusters, KMEANS_ITERS, seed)?;
        let mut postings = vec![Vec::new(); n_clusters];
        for (row, &c) in km.assignments.iter().enumerate() {
            postings[c].push(row as u32);
        }
        Ok(ItemIndex {
            ids,
            vectors,
            ivf: Some(IvfData {
                centroids: km.centroids,
                postings,
                n_probe,
            }),
        })
    }

    fn validate_items(ids: &[u32], vectors: &Matrix<f32>) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Config("an index needs at least one item".to_string()));
        }
        if ids.len() != vectors.rows() {
            return Err(Error::shape(
                "ItemIndex",
                format!("{} vectors", ids.len()),
                format!("{}", vectors.rows()),
            ));
        }
        vectors.ensure_finite("index vectors")?;
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::Config(format!(
                    "duplicate item id {} in index",
                    pair[0]
                )));
            }
        }
        for &id in ids {
            if id == 0 {
                return Err(Error::Config("item id 0 is reserved for padding".to_string()));
            }
            if id > MAX_EXACT_ID {
                return Err(Error::Config(format!(
                    "item id {id} exceeds the checkpoint-exact limit {MAX_EXACT_ID}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn is_ivf(&self) -> bool {
        self.ivf.is_some()
    }

    pub fn n_probe(&self) -> Option<usize> {
        self.ivf.as_ref().map(|i| i.n_probe)
    }

    /// Change the probe width of an IVF index (clusters are untouched).
    pub fn set_probes(&mut self, n_probe: usize) -> Result<()> {
        let Some(ivf) = self.ivf.as_mut() else {
            return Err(Error::Config(
                "cannot set probes on an exact index".to_string(),
            ));
        };
        if n_probe == 0 || n_probe > ivf.postings.len() {
            return Err(Error::Config(format!(
                "n_probe must lie in 1..={}, got {n_probe}",
                ivf.postings.len()
            )));
        }
        ivf.n_probe = n_probe;
        Ok(())
    }

    /// Top-`k` items by inner product with `query`, highest first; equal
    /// scores break toward the smaller item id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if query.len() != self.dim() {
            return Err(Error::shape(
                "index query",
                format!("{} dims", self.dim()),
                format!("{}", query.len()),
            ));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index query".to_string()));
        }
        if k == 0 {
            return Err(Error::Config("search needs k >= 1".to_string()));
        }
        if k > self.len() {
            return Err(Error::KMismatch {
                k,
                available: self.len(),
            });
        }

        let mut candidates: Vec<(u32, f64)> = Vec::new();
        match &self.ivf {
            None => {
                candidates.reserve(self.len());
                for row in 0..self.len() {
                    candidates.push((row as u32, dot(query, self.vectors.row(row))));
                }
            }
            Some(ivf) => {
                // Nearest centroids by Euclidean distance.
                let mut cells: Vec<(usize, f64)> = (0..ivf.centroids.rows())
                    .map(|c| (c, squared_distance(query, ivf.centroids.row(c))))
                    .collect();
                cells.sort_by(|a, b| {
                    a.1.partial_cmp(&b.1)
                        .expect("finite distances")
                        .then(a.0.cmp(&b.0))
                });
                for &(c, _) in cells.iter().take(ivf.n_probe) {
                    for &row in &ivf.postings[c] {
                        candidates.push((row, dot(query, self.vectors.row(row as usize))));
                    }
                }
            }
        }

        if candidates.len() < k {
            return Err(Error::KMismatch {
                k,
                available: candidates.len(),
            });
        }
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then(self.ids[a.0 as usize].cmp(&self.ids[b.0 as usize]))
        });
        Ok(candidates[..k]
            .iter()
            .map(|&(row, score)| SearchHit {
                item_id: self.ids[row as usize],
                score: score as f32,
            })
            .collect())
    }

    /// Persist to a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let ids = Matrix::from_vec(n, 1, self.ids.iter().map(|&i| i as f32).collect())?;
        let mut tensors: Vec<(&str, &Matrix<f32>)> = Vec::new();
        let meta;
        let assignments_m;
        match &self.ivf {
            None => {
                meta = Matrix::from_vec(1, 4, vec![0.0, 0.0, 0.0, self.dim() as f32])?;
                tensors.push(("index/meta", &meta));
            }
            Some(ivf) => {
                meta = Matrix::from_vec(
                    1,
                    4,
                    vec![
                        1.0,
                        ivf.n_probe as f32,
                        ivf.postings.len() as f32,
                        self.dim() as f32,
                    ],
                )?;
                tensors.push(("index/meta", &meta));
                let mut assignments = vec![0f32; n];
                for (c, rows) in ivf.postings.iter().enumerate() {
                    for &row in rows {
                        assignments[row as usize] = c as f32;
                    }
                }
                assignments_m = Matrix::from_vec(n, 1, assignments)?;
                tensors.push(("index/assignments", &assignments_m));
                tensors.push(("index/centroids", &ivf.centroids));
            }
        }
        tensors.push(("index/ids", &ids));
        tensors.push(("index/vectors", &self.vectors));
        write_checkpoint(path, &tensors)
    }

    /// Load an index saved by [`ItemIndex::save`].
    pub fn load(path: &Path) -> Result<ItemIndex> {
        let tensors = read_checkpoint(path)?;
        let bad = |msg: String| Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg,
        };
        let meta = find_tensor(&tensors, "index/meta", path)?;
        if meta.shape() != (1, 4) {
            return Err(bad(format!("index/meta must be 1x4, got {:?}", meta.shape())));
        }
        let kind = meta.get(0, 0);
        let vectors = find_tensor(&tensors, "index/vectors", path)?.clone();
        let ids_m = find_tensor(&tensors, "index/ids", path)?;
        let ids: Vec<u32> = ids_m.data().iter().map(|&v| v as u32).collect();
        let dim = meta.get(0, 3) as usize;
        if vectors.cols() != dim {
            return Err(bad(format!(
                "index dim {} disagrees with vectors width {}",
                dim,
                vectors.cols()
            )));
        }
        let ivf = if kind == 1.0 {
            let n_probe = meta.get(0, 1) as usize;
            let n_clusters = meta.get(0, 2) as usize;
            let centroids = find_tensor(&tensors, "index/centroids", path)?.clone();
            if centroids.rows() != n_clusters {
                return Err(bad(format!(
                    "expected {n_clusters} centroids, got {}",
                    centroids.rows()
                )));
            }
            let assignments = find_tensor(&tensors, "index/assignments", path)?;
            if assignments.rows() != ids.len() {
                return Err(bad("assignment rows disagree with item count".to_string()));
            }
            let mut postings = vec![Vec::new(); n_clusters];
            for (row, &c) in assignments.data().iter().enumerate() {
                let c = c as usize;
                if c >= n_clusters {
                    return Err(bad(format!("assignment {c} out of {n_clusters} clusters")));
                }
                postings[c].push(row as u32);
            }
            Some(IvfData {
                centroids,
                postings,
                n_probe,
            })
        } else if kind == 0.0 {
            None
        } else {
            return Err(bad(format!("unknown index kind {kind}")));
        };
        let index = ItemIndex { ids, vectors, ivf };
        Self::validate_items(&index.ids, &index.vectors)?;
        Ok(index)
    }
}
