//! Decision-sequence retrieval model.
//!
//! The user side encodes the interleaved token stream
//!
//! ```text
//! W_1, x_1, W_2, x_2, …, x_n, W_{n+1}
//! ```
//!
//! with a causal transformer, where `x_i` are watched items and `W_i` is
//! the *watch-time-to-go* from step `i` onward: `W_i = Σ_{j=i..n+1} w_j`.
//! The trailing `W_{n+1}` is the condition — at training time the realized
//! watch time of the target item, at serving time whatever the caller asks
//! for (see [`crate::policy`]). The hidden state at that final token,
//! concatenated with a few static history features, is projected and
//! L2-normalized into the user vector. Item vectors come from a dedicated
//! output embedding table (optionally shared with the token table) and are
//! L2-normalized, so retrieval scores are inner products, exactly as in
//! [`crate::towers`].
//!
//! Watch times and conditions are snapped to the logging grid (see
//! [`crate::simulator::quantize_watch_time`]) when a sequence is built.
//! Grid values are dyadic rationals small enough that every cumulative sum
//! and difference is exact in `f64`, which makes the telescoping identity
//! `W_i − W_{i+1} = w_i` hold bit for bit — not merely to within rounding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::datasets::Batch;
use crate::error::{Error, Result};
use crate::numerics::attention::{CausalTransformer, TransformerCache, TransformerConfig};
use crate::numerics::checkpoint::{find_tensor, read_checkpoint, write_checkpoint};
use crate::numerics::embedding::EmbeddingTable;
use crate::numerics::layers::{l2_normalize_rows, l2_normalize_rows_backward, Activation, Linear};
use crate::numerics::loss::in_batch_softmax_loss;
use crate::numerics::matrix::Matrix;
use crate::numerics::param::{HasParams, Param};
use crate::simulator::quantize_watch_time;
use crate::towers::log_bucket;

/// Width of [`history_static_features`].
pub const STATIC_FEATURE_DIM: usize = 4;

/// A history plus condition, rewritten as watch-time-to-go values.
///
/// `wtg[i]` (0-based) holds `W_{i+1}` in seconds; `items[i]` holds `x_{i+1}`.
/// There is always exactly one more watch-time-to-go value than items: the
/// final entry is the condition `W_{n+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSequence {
    pub wtg: Vec<f64>,
    pub items: Vec<u32>,
}

impl DecisionSequence {
    /// Number of history items `n`.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of tokens in the interleaved stream, `2n + 1`.
    pub fn token_len(&self) -> usize {
        2 * self.items.len() + 1
    }
}

/// Rewrite a watch history and a condition into cumulative
/// watch-time-to-go form: `W_{n+1} = condition` and `W_i = W_{i+1} + w_i`
/// walking backwards.
///
/// All inputs are snapped to the watch-time logging grid first, so the sums
/// are exact and `W_i − W_{i+1}` recovers each `w_i` bit for bit.
pub fn build_decision_sequence(
    items: &[u32],
    watches: &[f32],
    condition_seconds: f64,
) -> Result<DecisionSequence> {
    if items.is_empty() {
        return Err(Error::EmptyHistory(
            "a decision sequence needs at least one watched item".to_string(),
        ));
    }
    if items.len() != watches.len() {
        return Err(Error::shape(
            "decision sequence",
            format!("{} watch times", items.len()),
            format!("{}", watches.len()),
        ));
    }
    if !(condition_seconds.is_finite() && condition_seconds >= 0.0) {
        return Err(Error::Config(format!(
            "condition must be a finite non-negative watch time, got {condition_seconds}"
        )));
    }
    let n = items.len();
    let mut wtg = vec![0f64; n + 1];
    wtg[n] = quantize_watch_time(condition_seconds);
    for i in (0..n).rev() {
        let w = watches[i] as f64;
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Config(format!(
                "watch times must be finite and non-negative, got {w} at position {i}"
            )));
        }
        wtg[i] = wtg[i + 1] + quantize_watch_time(w);
    }
    Ok(DecisionSequence {
        wtg,
        items: items.to_vec(),
    })
}

/// Static side-channel features summarizing the history: a constant, the
/// log history length, and the mean and max watch time in minutes. These
/// stand in for stable per-user attributes, which the synthetic world does
/// not model explicitly; they are derived from the telescoped watch times,
/// so they agree bitwise between training and serving.
pub fn history_static_features(seq: &DecisionSequence) -> Vec<f32> {
    let n = seq.items.len();
    let mut sum = 0f64;
    let mut max = 0f64;
    for i in 0..n {
        let w = seq.wtg[i] - seq.wtg[i + 1];
        sum += w;
        if w > max {
            max = w;
        }
    }
    let mean = sum / n as f64;
    vec![
        1.0,
        (1.0 + n as f64).ln() as f32,
        (mean / 60.0) as f32,
        (max / 60.0) as f32,
    ]
}

/// Shape of a [`DtModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct DtConfig {
    pub n_items: u32,
    /// Transformer width; also the token embedding width.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_multiplier: usize,
    /// Maximum history length `n`; the context holds `2n + 1` tokens.
    pub max_seq_len: usize,
    /// Buckets for watch-time-to-go values. Cumulative sums reach far past
    /// single watch times, so this is larger than the watch-bucket count
    /// used by the pooled towers.
    pub n_wtg_buckets: usize,
    /// Time scale of the buckets, in seconds.
    pub tau: f64,
    /// Width of the static feature vector concatenated after the
    /// transformer.
    pub static_dim: usize,
    /// Width of the final user/item vectors.
    pub output_dim: usize,
    /// Reuse the token item-embedding table as the item output table
    /// (requires `d_model == output_dim`).
    pub share_item_embeddings: bool,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            n_items: 0,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            ff_multiplier: 4,
            max_seq_len: 32,
            n_wtg_buckets: 24,
            tau: 1.0,
            static_dim: STATIC_FEATURE_DIM,
            output_dim: 32,
            share_item_embeddings: false,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::Config(
                "decision-sequence model needs at least one item".to_string(),
            ));
        }
        self.transformer_config().validate()?;
        if self.max_seq_len == 0 || self.output_dim == 0 || self.n_wtg_buckets == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive: {self:?}"
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.share_item_embeddings && self.d_model != self.output_dim {
            return Err(Error::Config(format!(
                "shared item embeddings need d_model == output_dim, got {} and {}",
                self.d_model, self.output_dim
            )));
        }
        Ok(())
    }

    fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ff_multiplier: self.ff_multiplier,
        }
    }

    /// Maximum token count the context window holds.
    pub fn max_tokens(&self) -> usize {
        2 * self.max_seq_len + 1
    }
}

/// Decision-sequence retrieval model; see the module docs.
#[derive(Debug, Clone)]
pub struct DtModel {
    config: DtConfig,
    /// Watch-time-to-go bucket embeddings, `n_wtg_buckets x d_model`.
    wtg_buckets: Param,
    /// Item token embeddings.
    item_tokens: EmbeddingTable,
    /// Learned positional embeddings, `max_tokens x d_model`.
    positions: Param,
    transformer: CausalTransformer,
    /// Projects `hidden ++ static features` to the user vector.
    proj: Linear,
    /// Item output embeddings; `None` when shared with the token table.
    item_out: Option<EmbeddingTable>,
}

impl DtModel {
    pub fn new(config: DtConfig, seed: u64) -> Result<DtModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (config.d_model as f64).sqrt();
        let wtg_buckets = Param::new(
            "emb/wtg",
            Matrix::randn(config.n_wtg_buckets, config.d_model, std, &mut rng),
        );
        let item_tokens = EmbeddingTable::randn(
            "emb/item_token",
            "item",
            config.n_items,
            config.d_model,
            std,
            &mut rng,
        );
        let positions = Param::new(
            "emb/pos",
            Matrix::randn(config.max_tokens(), config.d_model, std, &mut rng),
        );
        let transformer = CausalTransformer::new(config.transformer_config(), &mut rng)?;
        let proj = Linear::new(
            "proj",
            config.d_model + config.static_dim,
            config.output_dim,
            Activation::Identity,
            &mut rng,
        );
        let item_out = if config.share_item_embeddings {
            None
        } else {
            Some(EmbeddingTable::randn(
                "emb/item_out",
                "item",
                config.n_items,
                config.output_dim,
                1.0 / (config.output_dim as f64).sqrt(),
                &mut rng,
            ))
        };
        Ok(DtModel {
            config,
            wtg_buckets,
            item_tokens,
            positions,
            transformer,
            proj,
            item_out,
        })
    }

    pub fn config(&self) -> &DtConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn item_output_table(&self) -> &EmbeddingTable {
        self.item_out.as_ref().unwrap_or(&self.item_tokens)
    }

    /// Embed a sequence into the token matrix (content + position), and
    /// report each watch-time-to-go token's bucket for gradient scatter.
    fn tokens(&self, seq: &DecisionSequence) -> Result<(Matrix<f32>, Vec<usize>)> {
        let len = seq.token_len();
        if len > self.config.max_tokens() {
            return Err(Error::ContextOverflow {
                got: len,
                max: self.config.max_tokens(),
            });
        }
        let d = self.config.d_model;
        let mut wtg_buckets = Vec::with_capacity(seq.wtg.len());
        for &w in &seq.wtg {
            wtg_buckets.push(log_bucket(w, self.config.tau, self.config.n_wtg_buckets)?);
        }
        let mut tokens = Matrix::zeros(len, d);
        for pos in 0..len {
            let content: &[f32] = if pos % 2 == 0 {
                self.wtg_buckets.value.row(wtg_buckets[pos / 2])
            } else {
                self.item_tokens.lookup(seq.items[pos / 2])?
            };
            let position = self.positions.value.row(pos);
            for c in 0..d {
                tokens.set(pos, c, content[c] + position[c]);
            }
        }
        Ok((tokens, wtg_buckets))
    }

    /// Transformer hidden states for every token of the sequence. Row `2i`
    /// is the state at `W_{i+1}`, row `2i+1` the state at `x_{i+1}`; under
    /// the causal mask, row `p` depends only on tokens at positions `<= p`.
    pub fn hidden_states(&self, seq: &DecisionSequence) -> Result<Matrix<f32>> {
        let (tokens, _) = self.tokens(seq)?;
        self.transformer.forward(&tokens)
    }

    /// Unit-length user vector for a prepared sequence and explicit static
    /// features (must be `static_dim` wide).
    pub fn encode_sequence(
        &self,
        seq: &DecisionSequence,
        static_features: &[f32],
    ) -> Result<Vec<f32>> {
        if static_features.len() != self.config.static_dim {
            return Err(Error::shape(
                "static features",
                format!("{}", self.config.static_dim),
                format!("{}", static_features.len()),
            ));
        }
        let hidden = self.hidden_states(seq)?;
        let mut features = hidden.row(seq.token_len() - 1).to_vec();
        features.extend_from_slice(static_features);
        let x = Matrix::from_vec(1, features.len(), features)?;
        let out = self.proj.forward(&x)?;
        let (normalized, _) = l2_normalize_rows(&out);
        Ok(normalized.row(0).to_vec())
    }

    /// Unit-length user vector for a history of `(item_id, watch_time)`
    /// pairs, oldest first, conditioned on a target watch time in seconds.
    /// Uses [`history_static_features`], so `static_dim` must equal
    /// [`STATIC_FEATURE_DIM`].
    pub fn user_vector(&self, prefix: &[(u32, f32)], condition_seconds: f64) -> Result<Vec<f32>> {
        self.require_default_static()?;
        let items: Vec<u32> = prefix.iter().map(|p| p.0).collect();
        let watches: Vec<f32> = prefix.iter().map(|p| p.1).collect();
        let seq = build_decision_sequence(&items, &watches, condition_seconds)?;
        self.encode_sequence(&seq, &history_static_features(&seq))
    }

    fn require_default_static(&self) -> Result<()> {
        if self.config.static_dim != STATIC_FEATURE_DIM {
            return Err(Error::Config(format!(
                "model was configured with static_dim {} but the built-in history features \
                 are {STATIC_FEATURE_DIM} wide; use encode_sequence with explicit features",
                self.config.static_dim
            )));
        }
        Ok(())
    }

    /// Unit-length item vector.
    pub fn item_vector(&self, item_id: u32) -> Result<Vec<f32>> {
        let row = self.item_output_table().lookup(item_id)?;
        let x = Matrix::from_vec(1, row.len(), row.to_vec())?;
        let (normalized, _) = l2_normalize_rows(&x);
        Ok(normalized.row(0).to_vec())
    }

    /// All item vectors, in id order `1..=n_items`, for index building.
    pub fn all_item_vectors(&self) -> Result<(Vec<u32>, Matrix<f32>)> {
        let n = self.config.n_items as usize;
        let table = self.item_output_table();
        let mut gathered = Matrix::zeros(n, table.dim());
        for id in 1..=n {
            gathered.set_row(id - 1, table.lookup(id as u32)?)?;
        }
        let (normalized, _) = l2_normalize_rows(&gathered);
        Ok(((1..=n as u32).collect(), normalized))
    }

    /// One training forward/backward over a batch: the condition token is
    /// teacher-forced to each example's realized target watch time, user
    /// and target item vectors feed the in-batch softmax loss, and
    /// gradients are *accumulated*. Does not update parameters.
    pub fn accumulate_batch(&mut self, batch: &Batch, temperature: f64) -> Result<f32> {
        self.require_default_static()?;
        let b = batch.len();
        if b < 2 {
            return Err(Error::Config(format!(
                "training batch must have at least 2 examples, got {b}"
            )));
        }
        let d = self.config.d_model;

        // Per-example sequence encodings.
        struct ExampleState {
            seq: DecisionSequence,
            wtg_buckets: Vec<usize>,
            cache: TransformerCache,
        }
        let mut states: Vec<ExampleState> = Vec::with_capacity(b);
        let mut user_feats = Matrix::zeros(b, d + self.config.static_dim);
        for row in 0..b {
            let (ids, watches) = batch.real_prefix(row);
            let seq =
                build_decision_sequence(ids, watches, batch.target_watches[row] as f64)?;
            let (tokens, wtg_buckets) = self.tokens(&seq)?;
            let (hidden, cache) = self.transformer.forward_cached(&tokens)?;
            let mut features = hidden.row(seq.token_len() - 1).to_vec();
            features.extend_from_slice(&history_static_features(&seq));
            user_feats.set_row(row, &features)?;
            states.push(ExampleState {
                seq,
                wtg_buckets,
                cache,
            });
        }

        // Item side: gather target output embeddings.
        let out_dim = self.item_output_table().dim();
        let mut item_feats = Matrix::zeros(b, out_dim);
        for row in 0..b {
            item_feats.set_row(row, self.item_output_table().lookup(batch.targets[row])?)?;
        }

        // Forward heads + loss.
        let (u_out, proj_cache) = self.proj.forward_cached(&user_feats)?;
        let (u_norm, u_norm_cache) = l2_normalize_rows(&u_out);
        let (v_norm, v_norm_cache) = l2_normalize_rows(&item_feats);
        let loss = in_batch_softmax_loss(&u_norm, &v_norm, temperature)?;

        // Item-side backward: straight into the output table.
        let d_item = l2_normalize_rows_backward(&v_norm_cache, &loss.d_items)?;
        for row in 0..b {
            let target = batch.targets[row];
            let delta = d_item.row(row).to_vec();
            match &mut self.item_out {
                Some(table) => table.accumulate_grad_row(target, &delta)?,
                None => self.item_tokens.accumulate_grad_row(target, &delta)?,
            }
        }

        // User-side backward through projection and transformer. The
        // static-feature slice of the input gradient is dropped: those
        // features are functions of the raw history, not parameters.
        let du_out = l2_normalize_rows_backward(&u_norm_cache, &loss.d_users)?;
        let d_feats = self.proj.backward(&proj_cache, &du_out)?;
        for (row, state) in states.iter().enumerate() {
            let len = state.seq.token_len();
            let mut d_hidden = Matrix::zeros(len, d);
            d_hidden.set_row(len - 1, &d_feats.row(row)[..d])?;
            let d_tokens = self.transformer.backward(&state.cache, &d_hidden)?;
            for pos in 0..len {
                let delta = d_tokens.row(pos).to_vec();
                if pos % 2 == 0 {
                    for (g, &x) in self
                        .wtg_buckets
                        .grad
                        .row_mut(state.wtg_buckets[pos / 2])
                        .iter_mut()
                        .zip(delta.iter())
                    {
                        *g += x;
                    }
                } else {
                    self.item_tokens
                        .accumulate_grad_row(state.seq.items[pos / 2], &delta)?;
                }
                for (g, &x) in self.positions.grad.row_mut(pos).iter_mut().zip(delta.iter()) {
                    *g += x;
                }
            }
        }

        Ok(loss.loss)
    }

    /// Persist all parameters plus enough metadata to rebuild the model.
    /// The tensor `meta/variant/crm_dt` tags the checkpoint's model family.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.config;
        let hparams = Matrix::from_vec(
            1,
            11,
            vec![
                cfg.n_items as f32,
                cfg.d_model as f32,
                cfg.n_heads as f32,
                cfg.n_layers as f32,
                cfg.ff_multiplier as f32,
                cfg.max_seq_len as f32,
                cfg.n_wtg_buckets as f32,
                cfg.tau as f32,
                cfg.static_dim as f32,
                cfg.output_dim as f32,
                if cfg.share_item_embeddings { 1.0 } else { 0.0 },
            ],
        )?;
        let variant = Matrix::from_vec(1, 1, vec![1.0])?;
        let mut tensors: Vec<(&str, &Matrix<f32>)> = vec![
            ("meta/hparams", &hparams),
            ("meta/variant/crm_dt", &variant),
        ];
        for p in self.params() {
            tensors.push((p.name(), &p.value));
        }
        write_checkpoint(path, &tensors)
    }

    /// Load a model saved by [`DtModel::save`].
    pub fn load(path: &Path) -> Result<DtModel> {
        let tensors = read_checkpoint(path)?;
        let bad = |msg: String| Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg,
        };
        if find_tensor(&tensors, "meta/variant/crm_dt", path).is_err() {
            return Err(bad(
                "not a decision-sequence model checkpoint (missing variant tag)".to_string(),
            ));
        }
        let hparams = find_tensor(&tensors, "meta/hparams", path)?;
        if hparams.shape() != (1, 11) {
            return Err(bad(format!(
                "meta/hparams must be 1x11, got {:?}",
                hparams.shape()
            )));
        }
        let h = hparams.row(0);
        let config = DtConfig {
            n_items: h[0] as u32,
            d_model: h[1] as usize,
            n_heads: h[2] as usize,
            n_layers: h[3] as usize,
            ff_multiplier: h[4] as usize,
            max_seq_len: h[5] as usize,
            n_wtg_buckets: h[6] as usize,
            tau: h[7] as f64,
            static_dim: h[8] as usize,
            output_dim: h[9] as usize,
            share_item_embeddings: h[10] == 1.0,
        };
        let mut model = DtModel::new(config, 0)?;
        for p in model.params_mut() {
            let stored = find_tensor(&tensors, p.name(), path)?;
            if stored.shape() != p.value.shape() {
                return Err(Error::CheckpointFormat {
                    path: path.to_path_buf(),
                    msg: format!(
                        "tensor '{}' has shape {:?}, expected {:?}",
                        p.name(),
                        stored.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = stored.clone();
        }
        Ok(model)
    }
}

impl HasParams for DtModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.wtg_buckets, self.item_tokens.param(), &self.positions];
        out.extend(self.transformer.params());
        out.push(&self.proj.weight);
        out.push(&self.proj.bias);
        if let Some(table) = &self.item_out {
            out.push(table.param());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            &mut self.wtg_buckets,
            self.item_tokens.param_mut(),
            &mut self.positions,
        ];
        out.extend(self.transformer.params_mut());
        out.push(&mut self.proj.weight);
        out.push(&mut self.proj.bias);
        if let Some(table) = &mut self.item_out {
            out.push(table.param_mut());
        }
        out
    }
}
