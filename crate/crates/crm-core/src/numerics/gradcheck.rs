//! Finite-difference verification of analytic gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::param::HasParams;
use crate::numerics::scalar::Scalar;

/// Knobs for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step size.
    pub step: f64,
    /// Number of parameter coordinates to probe (sampled without
    /// replacement across all parameters; capped at the total count).
    pub samples: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            samples: 100,
            seed: 0,
        }
    }
}

/// One probed coordinate, for reporting.
#[derive(Debug, Clone)]
pub struct GradCheckRecord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Result of a gradient check: the worst relative error and its coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probed: usize,
    pub worst: Option<GradCheckRecord>,
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn` must be deterministic and must *accumulate gradients from
/// zeroed accumulators*: it is called once to collect the analytic
/// gradients, then twice per probed coordinate with a perturbed parameter.
/// Relative error per coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`, so tiny gradients are judged
/// on absolute terms and large ones on relative terms.
pub fn grad_check<S, M, F>(
    model: &mut M,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    S: Scalar,
    M: HasParams<S>,
    F: FnMut(&mut M) -> Result<S>,
{
    // Collect analytic gradients at the starting point.
    model.zero_grads();
    let base = loss_fn(model)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad check base loss".to_string()));
    }
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| {
            (
                p.name().to_string(),
                p.grad.data().iter().map(|g| g.to_f64()).collect(),
            )
        })
        .collect();

    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    if total == 0 {
        return Err(Error::Config("grad check on a model with no parameters".into()));
    }
    let n_probes = cfg.samples.min(total);

    // Sample distinct flat coordinates.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < n_probes {
        picked.insert(rng.random_range(0..total));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probed: 0,
        worst: None,
    };

    for flat in picked {
        // Locate (param, index) for the flat coordinate.
        let mut remaining = flat;
        let mut param_idx = 0;
        for (i, (_, g)) in analytic.iter().enumerate() {
            if remaining < g.len() {
                param_idx = i;
                break;
            }
            remaining -= g.len();
        }
        let index = remaining;

        // Perturb, evaluate, and restore the original bits exactly.
        let numeric = {
            let original = model.params()[param_idx].value.data()[index];
            let probe = |model: &mut M, delta: f64, loss_fn: &mut F| -> Result<f64> {
                {
                    let mut params = model.params_mut();
                    let data = params[param_idx].value.data_mut();
                    data[index] = S::from_f64(original.to_f64() + delta);
                }
                model.zero_grads();
                let loss = loss_fn(model)?;
                {
                    let mut params = model.params_mut();
                    params[param_idx].value.data_mut()[index] = original;
                }
                Ok(loss.to_f64())
            };
            let plus = probe(model, cfg.step, &mut loss_fn)?;
            let minus = probe(model, -cfg.step, &mut loss_fn)?;
            (plus - minus) / (2.0 * cfg.step)
        };

        let a = analytic[param_idx].1[index];
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        report.probed += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(GradCheckRecord {
                param: analytic[param_idx].0.clone(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }

    // Restore the analytic gradients so callers can inspect them; the
    // perturbation probes above clobbered the accumulators.
    model.zero_grads();
    let _ = loss_fn(model)?;
    Ok(report)
}
