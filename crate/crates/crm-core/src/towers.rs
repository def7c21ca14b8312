//! Pooled two-tower retrieval model.
//!
//! The user tower mean-pools embeddings of the user's watched items and of
//! log-bucketed watch times, optionally appends a *condition* embedding (a
//! target watch time for the next recommendation), and maps the
//! concatenation through an MLP to a unit-length user vector. The item
//! tower maps an item embedding through its own MLP to a unit-length item
//! vector. Retrieval scores are inner products.
//!
//! Baseline and conditioned variants share one architecture: the condition
//! block of the user input is a learned bucket embedding when a condition
//! is supplied and a zero vector when it is not, so flipping the variant
//! never changes a tensor shape. In the conditioned variant, training
//! teacher-forces the condition to the realized watch time of the target
//! item — the model learns "this is what a user who is about to watch for
//! `w` seconds looks like" — and at serving time the caller picks the
//! condition (see [`crate::policy`]) and thereby steers retrieval. The
//! baseline variant trains with the zero slot and is served the same way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::datasets::Batch;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{find_tensor, read_checkpoint, write_checkpoint};
use crate::numerics::embedding::EmbeddingTable;
use crate::numerics::layers::{
    l2_normalize_rows, l2_normalize_rows_backward, Activation, Linear, Mlp,
};
use crate::numerics::loss::in_batch_softmax_loss;
use crate::numerics::matrix::Matrix;
use crate::numerics::param::{HasParams, Param};

/// Map a non-negative duration to a logarithmic bucket:
/// `floor(log2(1 + seconds / tau))`, clamped to `0..n_buckets`.
///
/// Bucket widths double as durations grow, which matches how differently a
/// 5-second and a 10-second watch read versus a 250- and a 255-second one.
pub fn log_bucket(seconds: f64, tau: f64, n_buckets: usize) -> Result<usize> {
    if !(seconds.is_finite() && seconds >= 0.0) {
        return Err(Error::Config(format!(
            "cannot bucket watch time {seconds}; need a finite non-negative duration"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) || n_buckets == 0 {
        return Err(Error::Config(format!(
            "bucketing needs tau > 0 and at least one bucket, got tau={tau}, n_buckets={n_buckets}"
        )));
    }
    let raw = (1.0 + seconds / tau).log2().floor();
    Ok((raw as usize).min(n_buckets - 1))
}

/// A condition value as the model consumes it: raw seconds plus the bucket
/// it falls into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionFeature {
    pub raw_seconds: f64,
    pub bucket: usize,
}

impl ConditionFeature {
    pub fn from_seconds(seconds: f64, tau: f64, n_buckets: usize) -> Result<ConditionFeature> {
        Ok(ConditionFeature {
            raw_seconds: seconds,
            bucket: log_bucket(seconds, tau, n_buckets)?,
        })
    }
}

/// Shape of a [`TwoTowerModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct TowersConfig {
    pub n_items: u32,
    /// Item embedding width.
    pub embed_dim: usize,
    /// Watch-time bucket embedding width.
    pub watch_dim: usize,
    /// Condition bucket embedding width. The slot always exists; it is
    /// filled with zeros when no condition is supplied.
    pub cond_dim: usize,
    /// Hidden widths of the user MLP (input and output widths are implied).
    pub user_hidden: Vec<usize>,
    /// Hidden widths of the item MLP.
    pub item_hidden: Vec<usize>,
    /// Width of the final user/item vectors.
    pub output_dim: usize,
    /// Number of logarithmic buckets for watch times and conditions.
    pub n_watch_buckets: usize,
    /// Time scale of the buckets, in seconds.
    pub tau: f64,
    /// Whether training teacher-forces the condition to the target watch
    /// time. Off means the plain baseline: the condition slot stays zero
    /// during training and serving. The architecture is identical either
    /// way.
    pub conditioned: bool,
}

impl Default for TowersConfig {
    fn default() -> Self {
        TowersConfig {
            n_items: 0,
            embed_dim: 32,
            watch_dim: 16,
            cond_dim: 16,
            user_hidden: vec![64],
            item_hidden: vec![],
            output_dim: 32,
            n_watch_buckets: 16,
            tau: 1.0,
            conditioned: false,
        }
    }
}

impl TowersConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Config("towers need at least one item".to_string()));
        }
        if self.embed_dim == 0 || self.watch_dim == 0 || self.cond_dim == 0 || self.output_dim == 0
        {
            return Err(Error::Config(format!("tower dims must be positive: {self:?}")));
        }
        if self.n_watch_buckets == 0 || !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "bucket config invalid: n_watch_buckets={}, tau={}",
                self.n_watch_buckets, self.tau
            )));
        }
        Ok(())
    }

    /// Width of the pooled user-tower input.
    pub fn user_input_dim(&self) -> usize {
        self.embed_dim + self.watch_dim + self.cond_dim
    }

    fn user_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.user_input_dim()];
        sizes.extend_from_slice(&self.user_hidden);
        sizes.push(self.output_dim);
        sizes
    }

    fn item_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.embed_dim];
        sizes.extend_from_slice(&self.item_hidden);
        sizes.push(self.output_dim);
        sizes
    }
}

/// Two-tower retrieval model; see the module docs.
#[derive(Debug, Clone)]
pub struct TwoTowerModel {
    config: TowersConfig,
    item_embeddings: EmbeddingTable,
    /// Watch-time bucket embeddings, `n_watch_buckets x watch_dim`, 0-based.
    watch_buckets: Param,
    /// Condition bucket embeddings, `n_watch_buckets x cond_dim`, 0-based.
    cond_buckets: Param,
    user_mlp: Mlp,
    item_mlp: Mlp,
}

impl TwoTowerModel {
    pub fn new(config: TowersConfig, seed: u64) -> Result<TwoTowerModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let item_embeddings = EmbeddingTable::randn(
            "emb/item",
            "item",
            config.n_items,
            config.embed_dim,
            1.0 / (config.embed_dim as f64).sqrt(),
            &mut rng,
        );
        let watch_buckets = Param::new(
            "emb/watch",
            Matrix::randn(
                config.n_watch_buckets,
                config.watch_dim,
                1.0 / (config.watch_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        let cond_buckets = Param::new(
            "emb/cond",
            Matrix::randn(
                config.n_watch_buckets,
                config.cond_dim,
                1.0 / (config.cond_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        let user_mlp = Mlp::new("user_mlp", &config.user_sizes(), &mut rng)?;
        let item_mlp = Mlp::new("item_mlp", &config.item_sizes(), &mut rng)?;
        Ok(TwoTowerModel {
            config,
            item_embeddings,
            watch_buckets,
            cond_buckets,
            user_mlp,
            item_mlp,
        })
    }

    pub fn config(&self) -> &TowersConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn is_conditioned(&self) -> bool {
        self.config.conditioned
    }

    /// Pooled user-tower input features for one example, plus the pieces
    /// needed to scatter gradients back.
    ///
    /// Both pools sum in sorted order, so any permutation of the history
    /// produces bitwise-identical features — the pooled representation is a
    /// true multiset summary, not an order-sensitive one.
    fn user_features(
        &self,
        ids: &[u32],
        watches: &[f32],
        condition: Option<f64>,
    ) -> Result<(Vec<f32>, Vec<u32>, Vec<usize>, Option<usize>)> {
        if ids.is_empty() {
            return Err(Error::EmptyHistory(
                "user tower needs at least one watched item".to_string(),
            ));
        }
        debug_assert_eq!(ids.len(), watches.len());
        let cfg = &self.config;
        let mut features = vec![0f32; cfg.user_input_dim()];
        let inv_len = 1.0 / ids.len() as f64;

        // Mean item embedding.
        let mut sorted_ids = ids.to_vec();
        sorted_ids.sort_unstable();
        let mut acc = vec![0f64; cfg.embed_dim];
        for &id in &sorted_ids {
            for (a, &v) in acc.iter_mut().zip(self.item_embeddings.lookup(id)?) {
                *a += v as f64;
            }
        }
        for (f, a) in features[..cfg.embed_dim].iter_mut().zip(acc.iter()) {
            *f = (a * inv_len) as f32;
        }

        // Mean watch-bucket embedding.
        let mut buckets = Vec::with_capacity(watches.len());
        for &w in watches {
            buckets.push(log_bucket(w as f64, cfg.tau, cfg.n_watch_buckets)?);
        }
        buckets.sort_unstable();
        let mut acc = vec![0f64; cfg.watch_dim];
        for &b in &buckets {
            for (a, &v) in acc.iter_mut().zip(self.watch_buckets.value.row(b)) {
                *a += v as f64;
            }
        }
        for (f, a) in features[cfg.embed_dim..cfg.embed_dim + cfg.watch_dim]
            .iter_mut()
            .zip(acc.iter())
        {
            *f = (a * inv_len) as f32;
        }

        // Condition embedding, or zeros when no condition is given.
        let cond_bucket = match condition {
            Some(seconds) => {
                let feature =
                    ConditionFeature::from_seconds(seconds, cfg.tau, cfg.n_watch_buckets)?;
                let dst = &mut features[cfg.embed_dim + cfg.watch_dim..];
                dst.copy_from_slice(self.cond_buckets.value.row(feature.bucket));
                Some(feature.bucket)
            }
            None => None,
        };

        Ok((features, sorted_ids, buckets, cond_bucket))
    }

    /// Unit-length user vector for a history of `(item_id, watch_time)`
    /// pairs, oldest first. `condition` is a target watch time in seconds;
    /// pass `None` to leave the condition slot zero (how the baseline is
    /// always served).
    pub fn user_vector(&self, prefix: &[(u32, f32)], condition: Option<f64>) -> Result<Vec<f32>> {
        let ids: Vec<u32> = prefix.iter().map(|p| p.0).collect();
        let watches: Vec<f32> = prefix.iter().map(|p| p.1).collect();
        let (features, _, _, _) = self.user_features(&ids, &watches, condition)?;
        let x = Matrix::from_vec(1, features.len(), features)?;
        let out = self.user_mlp.forward(&x)?;
        let (normalized, _) = l2_normalize_rows(&out);
        Ok(normalized.row(0).to_vec())
    }

    /// Unit-length item vector.
    pub fn item_vector(&self, item_id: u32) -> Result<Vec<f32>> {
        let row = self.item_embeddings.lookup(item_id)?;
        let x = Matrix::from_vec(1, row.len(), row.to_vec())?;
        let out = self.item_mlp.forward(&x)?;
        let (normalized, _) = l2_normalize_rows(&out);
        Ok(normalized.row(0).to_vec())
    }

    /// All item vectors, in id order `1..=n_items`, for index building.
    pub fn all_item_vectors(&self) -> Result<(Vec<u32>, Matrix<f32>)> {
        let n = self.config.n_items as usize;
        let mut input = Matrix::zeros(n, self.config.embed_dim);
        for id in 1..=n {
            input.set_row(id - 1, self.item_embeddings.lookup(id as u32)?)?;
        }
        let out = self.item_mlp.forward(&input)?;
        let (normalized, _) = l2_normalize_rows(&out);
        Ok(((1..=n as u32).collect(), normalized))
    }

    /// One training forward/backward over a batch: computes the in-batch
    /// softmax loss with the condition teacher-forced to each example's
    /// realized target watch time, and *accumulates* gradients. Does not
    /// update parameters.
    pub fn accumulate_batch(&mut self, batch: &Batch, temperature: f64) -> Result<f32> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::Config(format!(
                "training batch must have at least 2 examples, got {b}"
            )));
        }

        // Assemble user features and remember scatter targets.
        let cfg = self.config.clone();
        let mut x = Matrix::zeros(b, cfg.user_input_dim());
        let mut scatter: Vec<(Vec<u32>, Vec<usize>, Option<usize>)> = Vec::with_capacity(b);
        for row in 0..b {
            let (ids, watches) = batch.real_prefix(row);
            let condition = if cfg.conditioned {
                Some(batch.target_watches[row] as f64)
            } else {
                None
            };
            let (features, sorted_ids, buckets, cond_bucket) =
                self.user_features(ids, watches, condition)?;
            x.set_row(row, &features)?;
            scatter.push((sorted_ids, buckets, cond_bucket));
        }

        // Item-side inputs: target embeddings.
        let mut e = Matrix::zeros(b, cfg.embed_dim);
        for row in 0..b {
            e.set_row(row, self.item_embeddings.lookup(batch.targets[row])?)?;
        }

        // Forward.
        let (u_out, user_cache) = self.user_mlp.forward_cached(&x)?;
        let (u_norm, u_norm_cache) = l2_normalize_rows(&u_out);
        let (v_out, item_cache) = self.item_mlp.forward_cached(&e)?;
        let (v_norm, v_norm_cache) = l2_normalize_rows(&v_out);
        let loss = in_batch_softmax_loss(&u_norm, &v_norm, temperature)?;

        // Backward.
        let du_out = l2_normalize_rows_backward(&u_norm_cache, &loss.d_users)?;
        let dx = self.user_mlp.backward(&user_cache, &du_out)?;
        let dv_out = l2_normalize_rows_backward(&v_norm_cache, &loss.d_items)?;
        let de = self.item_mlp.backward(&item_cache, &dv_out)?;

        // Scatter pooled-feature gradients into the tables.
        for row in 0..b {
            let (ids, buckets, cond_bucket) = &scatter[row];
            let inv_len = 1.0 / ids.len() as f32;
            let dx_row = dx.row(row);

            let d_emb: Vec<f32> = dx_row[..cfg.embed_dim]
                .iter()
                .map(|&g| g * inv_len)
                .collect();
            for &id in ids {
                self.item_embeddings.accumulate_grad_row(id, &d_emb)?;
            }

            let d_watch = &dx_row[cfg.embed_dim..cfg.embed_dim + cfg.watch_dim];
            for &bucket in buckets {
                for (g, &d) in self
                    .watch_buckets
                    .grad
                    .row_mut(bucket)
                    .iter_mut()
                    .zip(d_watch.iter())
                {
                    *g += d * inv_len;
                }
            }

            if let Some(bucket) = cond_bucket {
                let d_cond = &dx_row[cfg.embed_dim + cfg.watch_dim..];
                for (g, &d) in self
                    .cond_buckets
                    .grad
                    .row_mut(*bucket)
                    .iter_mut()
                    .zip(d_cond.iter())
                {
                    *g += d;
                }
            }

            // Item-tower input gradients flow to the target embeddings.
            self.item_embeddings
                .accumulate_grad_row(batch.targets[row], de.row(row))?;
        }

        Ok(loss.loss)
    }

    /// Persist all parameters plus enough metadata to rebuild the model.
    /// A `meta/variant/...` tensor tags the checkpoint's model family
    /// (`two_tower` baseline or the conditioned `crm_dnn`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.config;
        let variant = Matrix::from_vec(1, 1, vec![1.0])?;
        let hparams = Matrix::from_vec(
            1,
            10,
            vec![
                if cfg.conditioned { 1.0 } else { 0.0 },
                cfg.n_items as f32,
                cfg.embed_dim as f32,
                cfg.watch_dim as f32,
                cfg.cond_dim as f32,
                cfg.output_dim as f32,
                cfg.n_watch_buckets as f32,
                cfg.tau as f32,
                self.user_mlp.layers.len() as f32,
                self.item_mlp.layers.len() as f32,
            ],
        )?;
        let variant_name = if cfg.conditioned {
            "meta/variant/crm_dnn"
        } else {
            "meta/variant/two_tower"
        };
        let mut tensors: Vec<(&str, &Matrix<f32>)> = vec![
            ("meta/hparams", &hparams),
            (variant_name, &variant),
            ("emb/item", &self.item_embeddings.param().value),
            ("emb/watch", &self.watch_buckets.value),
            ("emb/cond", &self.cond_buckets.value),
        ];
        // Layer params are already named "user_mlp/{i}/w" etc. by Mlp::new.
        for layer in self.user_mlp.layers.iter().chain(self.item_mlp.layers.iter()) {
            tensors.push((layer.weight.name(), &layer.weight.value));
            tensors.push((layer.bias.name(), &layer.bias.value));
        }
        write_checkpoint(path, &tensors)
    }

    /// Load a model saved by [`TwoTowerModel::save`].
    pub fn load(path: &Path) -> Result<TwoTowerModel> {
        let tensors = read_checkpoint(path)?;
        let bad = |msg: String| Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg,
        };
        let hparams = find_tensor(&tensors, "meta/hparams", path)?;
        if hparams.shape() != (1, 10) {
            return Err(bad(format!(
                "meta/hparams must be 1x10, got {:?}",
                hparams.shape()
            )));
        }
        let h = hparams.row(0);
        let conditioned = h[0] == 1.0;
        let variant_name = if conditioned {
            "meta/variant/crm_dnn"
        } else {
            "meta/variant/two_tower"
        };
        if find_tensor(&tensors, variant_name, path).is_err() {
            return Err(bad(format!(
                "not a pooled two-tower checkpoint (missing {variant_name} tag)"
            )));
        }
        let n_items = h[1] as u32;
        let n_user_layers = h[8] as usize;
        let n_item_layers = h[9] as usize;

        let load_mlp = |prefix: &str, n_layers: usize| -> Result<Mlp> {
            let mut layers = Vec::with_capacity(n_layers);
            for i in 0..n_layers {
                let w = find_tensor(&tensors, &format!("{prefix}/{i}/w"), path)?.clone();
                let b = find_tensor(&tensors, &format!("{prefix}/{i}/b"), path)?.clone();
                let activation = if i + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                layers.push(Linear::from_params(
                    Param::new(format!("{prefix}/{i}/w"), w),
                    Param::new(format!("{prefix}/{i}/b"), b),
                    activation,
                )?);
            }
            Mlp::from_layers(prefix, layers)
        };
        let user_mlp = load_mlp("user_mlp", n_user_layers)?;
        let item_mlp = load_mlp("item_mlp", n_item_layers)?;

        let user_sizes: Vec<usize> = user_mlp.layers.iter().map(|l| l.out_dim()).collect();
        let item_sizes: Vec<usize> = item_mlp.layers.iter().map(|l| l.out_dim()).collect();
        let config = TowersConfig {
            n_items,
            embed_dim: h[2] as usize,
            watch_dim: h[3] as usize,
            cond_dim: h[4] as usize,
            output_dim: h[5] as usize,
            n_watch_buckets: h[6] as usize,
            tau: h[7] as f64,
            user_hidden: user_sizes[..user_sizes.len().saturating_sub(1)].to_vec(),
            item_hidden: item_sizes[..item_sizes.len().saturating_sub(1)].to_vec(),
            conditioned,
        };
        config.validate()?;

        let item_embeddings = EmbeddingTable::from_matrix(
            "emb/item",
            "item",
            n_items,
            find_tensor(&tensors, "emb/item", path)?.clone(),
        )?;
        let watch_buckets = Param::new(
            "emb/watch",
            find_tensor(&tensors, "emb/watch", path)?.clone(),
        );
        let cond_buckets = Param::new(
            "emb/cond",
            find_tensor(&tensors, "emb/cond", path)?.clone(),
        );

        let model = TwoTowerModel {
            config,
            item_embeddings,
            watch_buckets,
            cond_buckets,
            user_mlp,
            item_mlp,
        };
        if model.user_mlp.in_dim() != model.config.user_input_dim() {
            return Err(bad(format!(
                "user mlp expects {} inputs but the feature layout provides {}",
                model.user_mlp.in_dim(),
                model.config.user_input_dim()
            )));
        }
        Ok(model)
    }
}

impl HasParams for TwoTowerModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![
            self.item_embeddings.param(),
            &self.watch_buckets,
            &self.cond_buckets,
        ];
        out.extend(self.user_mlp.params());
        out.extend(self.item_mlp.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            self.item_embeddings.param_mut(),
            &mut self.watch_buckets,
            &mut self.cond_buckets,
        ];
        out.extend(self.user_mlp.params_mut());
        out.extend(self.item_mlp.params_mut());
        out
    }
}
