//! Variant-agnostic training: one loop drives either model family and
//! yields a wrapper the evaluation code can query uniformly.

use std::path::Path;

use crate::crm_dt::DtModel;
use crate::datasets::{make_batches, Example};
use crate::error::{Error, Result};
use crate::harness::config::{stage_seed, ModelVariant, PipelineConfig};
use crate::numerics::checkpoint::read_checkpoint;
use crate::numerics::matrix::Matrix;
use crate::numerics::param::{sgd_step, HasParams};
use crate::towers::TwoTowerModel;

/// A trained retrieval model of either family.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Towers(TwoTowerModel),
    Dt(DtModel),
}

impl TrainedModel {
    pub fn variant(&self) -> ModelVariant {
        match self {
            TrainedModel::Towers(m) if m.is_conditioned() => ModelVariant::CrmDnn,
            TrainedModel::Towers(_) => ModelVariant::TwoTower,
            TrainedModel::Dt(_) => ModelVariant::CrmDt,
        }
    }

    /// Whether serving needs a condition value. The unconditioned baseline
    /// is always served with its condition slot zeroed, so callers must
    /// pass `None` for it and `Some` for the conditioned variants.
    pub fn needs_condition(&self) -> bool {
        self.variant().needs_condition()
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TrainedModel::Towers(m) => m.output_dim(),
            TrainedModel::Dt(m) => m.output_dim(),
        }
    }

    /// Unit-length user vector for a `(item_id, watch_time)` history.
    pub fn user_vector(&self, prefix: &[(u32, f32)], condition: Option<f64>) -> Result<Vec<f32>> {
        match self {
            TrainedModel::Towers(m) if !m.is_conditioned() => {
                if condition.is_some() {
                    return Err(Error::Config(
                        "the unconditioned baseline takes no condition; pass None".to_string(),
                    ));
                }
                m.user_vector(prefix, None)
            }
            TrainedModel::Towers(m) => {
                let c = condition.ok_or_else(|| {
                    Error::Config("this variant needs a condition value".to_string())
                })?;
                m.user_vector(prefix, Some(c))
            }
            TrainedModel::Dt(m) => {
                let c = condition.ok_or_else(|| {
                    Error::Config("this variant needs a condition value".to_string())
                })?;
                m.user_vector(prefix, c)
            }
        }
    }

    /// All item vectors in id order, for index building.
    pub fn all_item_vectors(&self) -> Result<(Vec<u32>, Matrix<f32>)> {
        match self {
            TrainedModel::Towers(m) => m.all_item_vectors(),
            TrainedModel::Dt(m) => m.all_item_vectors(),
        }
    }

    pub fn accumulate_batch(&mut self, batch: &crate::datasets::Batch, temperature: f64) -> Result<f32> {
        match self {
            TrainedModel::Towers(m) => m.accumulate_batch(batch, temperature),
            TrainedModel::Dt(m) => m.accumulate_batch(batch, temperature),
        }
    }

    pub fn sgd_step(&mut self, lr: f32) -> Result<()> {
        match self {
            TrainedModel::Towers(m) => sgd_step(m.params_mut(), lr),
            TrainedModel::Dt(m) => sgd_step(m.params_mut(), lr),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedModel::Towers(m) => m.save(path),
            TrainedModel::Dt(m) => m.save(path),
        }
    }

    /// Load a checkpoint of either family, dispatching on its variant tag.
    pub fn load(path: &Path) -> Result<TrainedModel> {
        let tensors = read_checkpoint(path)?;
        let has = |name: &str| tensors.iter().any(|(n, _)| n == name);
        if has("meta/variant/crm_dt") {
            Ok(TrainedModel::Dt(DtModel::load(path)?))
        } else if has("meta/variant/crm_dnn") || has("meta/variant/two_tower") {
            Ok(TrainedModel::Towers(TwoTowerModel::load(path)?))
        } else {
            Err(Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: "no model variant tag found".to_string(),
            })
        }
    }
}

/// A trained model plus its per-step loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// `(step, loss)` for every optimizer step, in order.
    pub loss_trace: Vec<(usize, f32)>,
    /// Examples dropped by distinct-target batch packing, summed over
    /// epochs.
    pub dropped_examples: usize,
}

/// Train the configured variant on the given examples.
///
/// Batches are reshuffled each epoch from an epoch-specific seed. A
/// non-finite loss or gradient aborts with a divergence error naming the
/// epoch and batch.
pub fn train_model(config: &PipelineConfig, examples: &[Example]) -> Result<TrainOutcome> {
    let t = &config.train;
    let mut model = match config.variant {
        ModelVariant::CrmDt => TrainedModel::Dt(DtModel::new(
            config.dt_config(),
            stage_seed(config.seed, "model-init"),
        )?),
        _ => TrainedModel::Towers(TwoTowerModel::new(
            config.towers_config(),
            stage_seed(config.seed, "model-init"),
        )?),
    };

    let mut loss_trace = Vec::new();
    let mut dropped_examples = 0;
    let mut step = 0;
    for epoch in 0..t.epochs {
        let shuffle_seed = stage_seed(config.seed, "batch-shuffle").wrapping_add(epoch as u64);
        let batch_set = make_batches(examples, t.batch_size, t.window, shuffle_seed)?;
        dropped_examples += batch_set.dropped;
        for (batch_idx, batch) in batch_set.batches.iter().enumerate() {
            let diverged = |msg: String| Error::Diverged {
                epoch,
                batch: batch_idx,
                msg,
            };
            let loss = match model.accumulate_batch(batch, t.temperature) {
                Ok(loss) => loss,
                Err(Error::NonFinite(what)) => {
                    return Err(diverged(format!("non-finite values in {what}")))
                }
                Err(other) => return Err(other),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss became {loss}")));
            }
            match model.sgd_step(t.lr as f32) {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    return Err(diverged(format!("non-finite values in {what}")))
                }
                Err(other) => return Err(other),
            }
            loss_trace.push((step, loss));
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        loss_trace,
        dropped_examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::PipelineConfig;

    fn small_config(variant: ModelVariant) -> PipelineConfig {
        let mut cfg = PipelineConfig::with_defaults(11, variant);
        cfg.simulate.n_users = 30;
        cfg.simulate.n_items = 40;
        cfg.simulate.session_len = 8;
        cfg.train.window = 5;
        cfg.train.batch_size = 8;
        cfg.train.epochs = 2;
        cfg.train.embed_dim = 8;
        cfg.train.watch_dim = 4;
        cfg.train.cond_dim = 4;
        cfg.train.user_hidden = vec![16];
        cfg.train.output_dim = 8;
        cfg.train.d_model = 8;
        cfg.train.n_layers = 1;
        cfg.train.ff_multiplier = 2;
        cfg
    }

    fn example_set(cfg: &PipelineConfig) -> Vec<Example> {
        use crate::datasets::{group_histories, split_leave_one_out};
        use crate::simulator::SimWorld;
        let world = SimWorld::generate(&cfg.sim_config()).unwrap();
        let events = world.generate_sessions(&cfg.session_config()).unwrap();
        let split = split_leave_one_out(
            &group_histories(&events),
            cfg.train.window,
            cfg.train.max_examples_per_user,
        )
        .unwrap();
        split.train
    }

    #[test]
    fn each_variant_trains_and_round_trips_through_a_checkpoint() {
        for variant in [
            ModelVariant::TwoTower,
            ModelVariant::CrmDnn,
            ModelVariant::CrmDt,
        ] {
            let cfg = small_config(variant);
            let examples = example_set(&cfg);
            let outcome = train_model(&cfg, &examples).unwrap();
            assert_eq!(outcome.model.variant(), variant);
            assert!(!outcome.loss_trace.is_empty());
            assert!(outcome.loss_trace.iter().all(|(_, l)| l.is_finite()));

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.ckpt");
            outcome.model.save(&path).unwrap();
            let loaded = TrainedModel::load(&path).unwrap();
            assert_eq!(loaded.variant(), variant);

            let prefix = [(1u32, 5.0f32), (2, 30.0)];
            let condition = if variant.needs_condition() {
                Some(20.0)
            } else {
                None
            };
            assert_eq!(
                outcome.model.user_vector(&prefix, condition).unwrap(),
                loaded.user_vector(&prefix, condition).unwrap(),
                "{variant}: loaded model must reproduce vectors bitwise"
            );
        }
    }

    #[test]
    fn training_is_deterministic_in_the_config_seed() {
        let cfg = small_config(ModelVariant::CrmDnn);
        let examples = example_set(&cfg);
        let a = train_model(&cfg, &examples).unwrap();
        let b = train_model(&cfg, &examples).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn condition_contract_is_enforced_per_variant() {
        let cfg = small_config(ModelVariant::TwoTower);
        let examples = example_set(&cfg);
        let model = train_model(&cfg, &examples).unwrap().model;
        let prefix = [(1u32, 5.0f32)];
        assert!(model.user_vector(&prefix, Some(10.0)).is_err());
        assert!(model.user_vector(&prefix, None).is_ok());

        let cfg = small_config(ModelVariant::CrmDt);
        let examples = example_set(&cfg);
        let model = train_model(&cfg, &examples).unwrap().model;
        assert!(model.user_vector(&prefix, None).is_err());
        assert!(model.user_vector(&prefix, Some(10.0)).is_ok());
    }
}
