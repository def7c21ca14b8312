//! Condition selection: turning a user's recent watch times into the single
//! condition value fed to a conditioned user tower.
//!
//! Three base strategies exist. `Average` asks the model for "a typical
//! next watch", `Max` asks for "the best recent outcome again", and
//! `Multiplexed` mixes the two per request so one trained model can serve
//! both intents: with probability `p` use the max, otherwise the average.

use rand::Rng;

use crate::error::{Error, Result};

/// How to derive the condition from the last `n` watch times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionSpec {
    /// Mean of the trailing window.
    Average,
    /// Maximum of the trailing window.
    Max,
    /// `Max` with probability `p`, else `Average`.
    Multiplexed { p: f64 },
    /// A fixed value in seconds, ignoring history (used by sweeps).
    Fixed { seconds: f64 },
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConditionSpec::Multiplexed { p } => {
                if !(0.0..=1.0).contains(p) || !p.is_finite() {
                    return Err(Error::Config(format!(
                        "multiplex probability must lie in [0, 1], got {p}"
                    )));
                }
            }
            ConditionSpec::Fixed { seconds } => {
                if !(seconds.is_finite() && *seconds >= 0.0) {
                    return Err(Error::Config(format!(
                        "fixed condition must be a non-negative number of seconds, got {seconds}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Parse the CLI/config surface form: `avg`, `max`, `mux:<p>`,
    /// or `value:<seconds>`.
    pub fn parse(text: &str) -> Result<ConditionSpec> {
        let spec = match text.trim() {
            "avg" => ConditionSpec::Average,
            "max" => ConditionSpec::Max,
            other => {
                if let Some(p) = other.strip_prefix("mux:") {
                    let p: f64 = p.parse().map_err(|e| {
                        Error::Config(format!("bad multiplex probability '{p}': {e}"))
                    })?;
                    ConditionSpec::Multiplexed { p }
                } else if let Some(v) = other.strip_prefix("value:") {
                    let seconds: f64 = v.parse().map_err(|e| {
                        Error::Config(format!("bad fixed condition '{v}': {e}"))
                    })?;
                    ConditionSpec::Fixed { seconds }
                } else {
                    return Err(Error::Config(format!(
                        "unknown condition '{other}' (expected avg, max, mux:<p>, or value:<seconds>)"
                    )));
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl std::fmt::Display for ConditionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditionSpec::Average => write!(f, "avg"),
            ConditionSpec::Max => write!(f, "max"),
            ConditionSpec::Multiplexed { p } => write!(f, "mux:{p}"),
            ConditionSpec::Fixed { seconds } => write!(f, "value:{seconds}"),
        }
    }
}

/// Trailing window of the last `window` watch times; shorter histories use
/// everything they have. Empty histories are an error — there is no neutral
/// condition to fall back to.
pub fn trailing_window(recent_watches: &[f32], window: usize) -> Result<&[f32]> {
    if recent_watches.is_empty() {
        return Err(Error::EmptyHistory(
            "condition selection needs at least one watch time".to_string(),
        ));
    }
    if window == 0 {
        return Err(Error::Config(
            "condition window must be at least 1".to_string(),
        ));
    }
    let start = recent_watches.len().saturating_sub(window);
    Ok(&recent_watches[start..])
}

/// Pick the condition value in seconds for one request.
///
/// `recent_watches` is the user's watch history, oldest first; only the
/// trailing `window` entries are consulted. The RNG is used solely by
/// [`ConditionSpec::Multiplexed`], which draws one uniform number per call,
/// so `Average`, `Max` and `Fixed` are deterministic.
pub fn select_condition(
    spec: ConditionSpec,
    recent_watches: &[f32],
    window: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    spec.validate()?;
    if let ConditionSpec::Fixed { seconds } = spec {
        return Ok(seconds);
    }
    let tail = trailing_window(recent_watches, window)?;
    for (i, w) in tail.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::Config(format!(
                "watch time {w} at window position {i} is not a valid duration"
            )));
        }
    }
    let max = tail.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = tail.iter().map(|&w| w as f64).sum();
    let avg = sum / tail.len() as f64;
    let value = match spec {
        ConditionSpec::Average => avg,
        ConditionSpec::Max => max,
        ConditionSpec::Multiplexed { p } => {
            let draw: f64 = rng.random();
            if draw < p {
                max
            } else {
                avg
            }
        }
        ConditionSpec::Fixed { .. } => unreachable!("handled above"),
    };
    Ok(value)
}
