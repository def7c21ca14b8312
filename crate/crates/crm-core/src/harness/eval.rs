//! Offline evaluation: leave-one-out hit rates and the simulator-oracle
//! watch time of what gets retrieved, plus condition sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::harness::stats::{mean, std_error};
use crate::harness::train::TrainedModel;
use crate::policy::{select_condition, ConditionSpec};
use crate::retrieval::ItemIndex;
use crate::simulator::SimWorld;

/// Evaluation knobs; see [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalParams {
    /// Hit-rate cutoffs, ascending.
    pub ks: Vec<usize>,
    /// Top-K over which the oracle expected watch time is averaged.
    pub oracle_k: usize,
    pub condition: ConditionSpec,
    /// Trailing-window length for the condition policy.
    pub policy_window: usize,
    pub seed: u64,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Test users evaluated.
    pub n: usize,
    /// `(k, hit rate)` per requested cutoff.
    pub hit_rates: Vec<(usize, f64)>,
    /// Mean over users of the mean oracle expected watch time of the
    /// retrieved top `oracle_k`.
    pub mean_oracle_watch: f64,
    /// Standard error of that mean.
    pub oracle_se: f64,
    /// Per-user oracle means, in test-example order (for paired tests).
    pub per_user_oracle: Vec<f64>,
    /// Condition values actually fed to the model, in the same order
    /// (empty for the unconditioned baseline).
    pub conditions_used: Vec<f64>,
}

impl EvalOutcome {
    pub fn hit_rate(&self, k: usize) -> Option<f64> {
        self.hit_rates.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Evaluate one trained model against one index.
///
/// For every test example: pick a condition from the example's history per
/// the policy (skipped for the unconditioned baseline), encode the user,
/// retrieve the top `max(ks ∪ {oracle_k})` items, score a hit when the
/// held-out item appears in the top `k`, and average the world's oracle
/// expected watch time over the top `oracle_k` retrieved items.
pub fn evaluate(
    model: &TrainedModel,
    index: &ItemIndex,
    tests: &[Example],
    world: &SimWorld,
    params: &EvalParams,
) -> Result<EvalOutcome> {
    if model.output_dim() != index.dim() {
        return Err(Error::shape(
            "evaluation",
            format!("index dim {}", model.output_dim()),
            format!("index dim {}", index.dim()),
        ));
    }
    if tests.is_empty() {
        return Err(Error::Config("evaluation needs at least one test example".to_string()));
    }
    if params.ks.is_empty() || params.ks.windows(2).any(|w| w[0] >= w[1]) || params.ks[0] == 0 {
        return Err(Error::Config(format!(
            "hit-rate cutoffs must be non-empty, positive, strictly ascending; got {:?}",
            params.ks
        )));
    }
    if params.oracle_k == 0 {
        return Err(Error::Config("oracle_k must be at least 1".to_string()));
    }
    let k_max = params.ks.iter().copied().max().unwrap().max(params.oracle_k);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut hits = vec![0usize; params.ks.len()];
    let mut per_user_oracle = Vec::with_capacity(tests.len());
    let mut conditions_used = Vec::new();

    for example in tests {
        let condition = if model.needs_condition() {
            let watches: Vec<f32> = example.prefix.iter().map(|p| p.1).collect();
            let value =
                select_condition(params.condition, &watches, params.policy_window, &mut rng)?;
            conditions_used.push(value);
            Some(value)
        } else {
            None
        };
        let query = model.user_vector(&example.prefix, condition)?;
        let ranked = index.search(&query, k_max)?;

        for (slot, &k) in params.ks.iter().enumerate() {
            if ranked.iter().take(k).any(|hit| hit.item_id == example.target_item) {
                hits[slot] += 1;
            }
        }

        let mut oracle_sum = 0f64;
        let top = params.oracle_k.min(ranked.len());
        for hit in &ranked[..top] {
            oracle_sum += world.expected_watch_time(example.user_id, hit.item_id)?;
        }
        per_user_oracle.push(oracle_sum / top as f64);
    }

    let n = tests.len();
    let hit_rates = params
        .ks
        .iter()
        .zip(hits.iter())
        .map(|(&k, &h)| (k, h as f64 / n as f64))
        .collect();
    Ok(EvalOutcome {
        n,
        hit_rates,
        mean_oracle_watch: mean(&per_user_oracle),
        oracle_se: std_error(&per_user_oracle),
        per_user_oracle,
        conditions_used,
    })
}

/// One row of a condition sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub condition: f64,
    pub hit_rates: Vec<(usize, f64)>,
    pub mean_oracle_watch: f64,
    pub oracle_se: f64,
    pub n: usize,
}

/// Evaluate the model at each fixed condition value of an ascending grid;
/// rows come back in grid order.
pub fn sweep_condition(
    model: &TrainedModel,
    index: &ItemIndex,
    tests: &[Example],
    world: &SimWorld,
    grid: &[f64],
    base: &EvalParams,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid must not be empty".to_string()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "sweep grid must be strictly ascending, got {grid:?}"
        )));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let params = EvalParams {
            condition: ConditionSpec::Fixed { seconds: value },
            ..base.clone()
        };
        let outcome = evaluate(model, index, tests, world, &params)?;
        rows.push(SweepRow {
            condition: value,
            hit_rates: outcome.hit_rates,
            mean_oracle_watch: outcome.mean_oracle_watch,
            oracle_se: outcome.oracle_se,
            n: outcome.n,
        });
    }
    Ok(rows)
}
