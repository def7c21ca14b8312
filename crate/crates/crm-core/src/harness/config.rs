//! Pipeline configuration: one TOML file drives every stage.
//!
//! `seed` and `variant` are required; every other key has a documented
//! default, so a two-line file is a complete experiment description.
//! Unknown keys are rejected (typos fail loudly), and a missing required
//! key errors naming the key.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use std::fmt;
use std::path::Path;

use crate::crm_dt::DtConfig;
use crate::error::{Error, Result};
use crate::policy::ConditionSpec;
use crate::simulator::{SessionConfig, SimConfig};
use crate::towers::TowersConfig;

/// Which retrieval model the pipeline trains and serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Pooled two-tower baseline; the condition slot stays zero.
    TwoTower,
    /// Pooled two-tower with a teacher-forced condition input.
    CrmDnn,
    /// Causal transformer over the watch-time-to-go token stream.
    CrmDt,
}

impl ModelVariant {
    /// Whether serving this variant requires a condition value.
    pub fn needs_condition(&self) -> bool {
        !matches!(self, ModelVariant::TwoTower)
    }

    pub fn parse(text: &str) -> Result<ModelVariant> {
        match text.trim() {
            "two_tower" => Ok(ModelVariant::TwoTower),
            "crm_dnn" => Ok(ModelVariant::CrmDnn),
            "crm_dt" => Ok(ModelVariant::CrmDt),
            other => Err(Error::Config(format!(
                "unknown variant '{other}'; expected two_tower, crm_dnn, or crm_dt"
            ))),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ModelVariant::TwoTower => "two_tower",
            ModelVariant::CrmDnn => "crm_dnn",
            ModelVariant::CrmDt => "crm_dt",
        };
        f.write_str(name)
    }
}

/// World and session generation; see [`SimConfig`] and [`SessionConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_users: u32,
    pub n_items: u32,
    pub latent_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub noise_sigma: f64,
    pub duration_lo: f64,
    pub duration_hi: f64,
    pub sessions_per_user: u32,
    pub session_len: u32,
    pub candidates_per_step: usize,
    pub sample_temperature: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        let session = SessionConfig::default();
        SimulateSection {
            n_users: 500,
            n_items: 2000,
            latent_dim: sim.latent_dim,
            alpha: sim.alpha,
            beta: sim.beta,
            noise_sigma: sim.noise_sigma,
            duration_lo: sim.duration_range.0,
            duration_hi: sim.duration_range.1,
            sessions_per_user: session.sessions_per_user,
            session_len: session.session_len,
            // Sharper choices than the library defaults: with 2000 items a
            // wide candidate pool and a cold pick temperature keep enough
            // preference signal in the logs for retrieval metrics to move.
            candidates_per_step: 50,
            sample_temperature: 0.05,
        }
    }
}

/// Split, batching, optimization, and model-shape settings. Tower-only and
/// transformer-only keys are ignored by the other variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// History window: batch prefixes and the transformer context use at
    /// most this many trailing events.
    pub window: usize,
    pub max_examples_per_user: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Softmax temperature of the training loss.
    pub temperature: f64,
    /// Item embedding width (pooled towers).
    pub embed_dim: usize,
    pub watch_dim: usize,
    pub cond_dim: usize,
    pub user_hidden: Vec<usize>,
    pub item_hidden: Vec<usize>,
    /// Final user/item vector width for both model families.
    pub output_dim: usize,
    pub n_watch_buckets: usize,
    pub tau: f64,
    /// Transformer width (decision-sequence model).
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_multiplier: usize,
    pub n_wtg_buckets: usize,
    pub share_item_embeddings: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let towers = TowersConfig::default();
        let dt = DtConfig::default();
        TrainSection {
            window: 10,
            // Tuned for the pooled-tower variants on the default world; the
            // decision-sequence variant trains well with fewer examples per
            // user (8) and epochs (10), at a much higher cost per example.
            max_examples_per_user: 38,
            batch_size: 64,
            epochs: 40,
            lr: 0.3,
            temperature: 0.2,
            embed_dim: towers.embed_dim,
            watch_dim: towers.watch_dim,
            cond_dim: towers.cond_dim,
            user_hidden: vec![],
            item_hidden: towers.item_hidden,
            output_dim: towers.output_dim,
            n_watch_buckets: towers.n_watch_buckets,
            tau: towers.tau,
            d_model: dt.d_model,
            n_heads: dt.n_heads,
            n_layers: dt.n_layers,
            ff_multiplier: dt.ff_multiplier,
            n_wtg_buckets: dt.n_wtg_buckets,
            share_item_embeddings: dt.share_item_embeddings,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Exact,
    Ivf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub kind: IndexKind,
    pub n_clusters: usize,
    pub n_probes: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        IndexSection {
            kind: IndexKind::Exact,
            n_clusters: 64,
            n_probes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cutoffs for hit rate, ascending.
    pub ks: Vec<usize>,
    /// Top-K over which the oracle expected watch time is averaged.
    pub oracle_k: usize,
    /// Condition policy: `avg`, `max`, `mux:<p>`, or `value:<seconds>`.
    pub condition: String,
    /// Trailing-window length for the condition policy.
    pub policy_window: usize,
    /// Simulated time buckets in the condition-trace report.
    pub trace_buckets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![10, 50, 100],
            oracle_k: 50,
            condition: "avg".to_string(),
            policy_window: 5,
            trace_buckets: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Explicit condition values, strictly ascending, in seconds.
    pub grid: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            // Stays inside the simulated duration support (5..300 s); the
            // retrieved lists stop tracking the condition beyond it.
            grid: vec![5.0, 15.0, 45.0, 90.0, 180.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub variant: ModelVariant,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub index: IndexSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl PipelineConfig {
    /// A config with required keys filled and defaults everywhere else.
    pub fn with_defaults(seed: u64, variant: ModelVariant) -> PipelineConfig {
        PipelineConfig {
            seed,
            variant,
            simulate: SimulateSection::default(),
            train: TrainSection::default(),
            index: IndexSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The config with every default made explicit, as TOML. This is what
    /// gets written into the run directory and hashed into every report
    /// row.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config().validate()?;
        match self.variant {
            ModelVariant::CrmDt => self.dt_config().validate()?,
            _ => self.towers_config().validate()?,
        }
        let t = &self.train;
        if t.batch_size < 2 || t.epochs == 0 || t.window == 0 || t.max_examples_per_user == 0 {
            return Err(Error::Config(format!(
                "training needs batch_size >= 2, epochs >= 1, window >= 1, \
                 max_examples_per_user >= 1; got batch_size={}, epochs={}, window={}, \
                 max_examples_per_user={}",
                t.batch_size, t.epochs, t.window, t.max_examples_per_user
            )));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", t.lr)));
        }
        if !(t.temperature.is_finite() && t.temperature > 0.0) {
            return Err(Error::Config(format!(
                "loss temperature must be positive, got {}",
                t.temperature
            )));
        }
        let e = &self.eval;
        if e.ks.is_empty() || e.ks.windows(2).any(|w| w[0] >= w[1]) || e.ks[0] == 0 {
            return Err(Error::Config(format!(
                "eval ks must be non-empty, positive, strictly ascending; got {:?}",
                e.ks
            )));
        }
        if e.oracle_k == 0 {
            return Err(Error::Config("oracle_k must be at least 1".to_string()));
        }
        if e.policy_window == 0 {
            return Err(Error::Config("policy_window must be at least 1".to_string()));
        }
        if e.trace_buckets == 0 {
            return Err(Error::Config("trace_buckets must be at least 1".to_string()));
        }
        ConditionSpec::parse(&e.condition)?;
        let g = &self.sweep.grid;
        if g.is_empty() || g.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!(
                "sweep grid must be non-empty and strictly ascending, got {g:?}"
            )));
        }
        if g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "sweep grid values must be finite and non-negative, got {g:?}"
            )));
        }
        if self.index.kind == IndexKind::Ivf {
            if self.index.n_clusters == 0 || self.index.n_probes == 0 {
                return Err(Error::Config(
                    "ivf index needs n_clusters >= 1 and n_probes >= 1".to_string(),
                ));
            }
            if self.index.n_probes > self.index.n_clusters {
                return Err(Error::Config(format!(
                    "n_probes {} exceeds n_clusters {}",
                    self.index.n_probes, self.index.n_clusters
                )));
            }
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulate;
        SimConfig {
            n_users: s.n_users,
            n_items: s.n_items,
            latent_dim: s.latent_dim,
            seed: stage_seed(self.seed, "simulate"),
            alpha: s.alpha,
            beta: s.beta,
            noise_sigma: s.noise_sigma,
            duration_range: (s.duration_lo, s.duration_hi),
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        let s = &self.simulate;
        SessionConfig {
            sessions_per_user: s.sessions_per_user,
            session_len: s.session_len,
            candidates_per_step: s.candidates_per_step,
            sample_temperature: s.sample_temperature,
        }
    }

    pub fn towers_config(&self) -> TowersConfig {
        let t = &self.train;
        TowersConfig {
            n_items: self.simulate.n_items,
            embed_dim: t.embed_dim,
            watch_dim: t.watch_dim,
            cond_dim: t.cond_dim,
            user_hidden: t.user_hidden.clone(),
            item_hidden: t.item_hidden.clone(),
            output_dim: t.output_dim,
            n_watch_buckets: t.n_watch_buckets,
            tau: t.tau,
            conditioned: self.variant == ModelVariant::CrmDnn,
        }
    }

    pub fn dt_config(&self) -> DtConfig {
        let t = &self.train;
        DtConfig {
            n_items: self.simulate.n_items,
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_layers: t.n_layers,
            ff_multiplier: t.ff_multiplier,
            max_seq_len: t.window,
            n_wtg_buckets: t.n_wtg_buckets,
            tau: t.tau,
            static_dim: crate::crm_dt::STATIC_FEATURE_DIM,
            output_dim: t.output_dim,
            share_item_embeddings: t.share_item_embeddings,
        }
    }

    pub fn condition_spec(&self) -> Result<ConditionSpec> {
        ConditionSpec::parse(&self.eval.condition)
    }
}

/// Derive a per-stage seed from the run seed, so stages draw from
/// independent streams and adding randomness to one stage never shifts
/// another's.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Short fingerprint (first 12 hex digits of SHA-256) of the resolved
/// config text; stamped into every report row for traceability.
pub fn config_hash(resolved_toml: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(resolved_toml.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(12);
    for byte in digest.iter().take(6) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
