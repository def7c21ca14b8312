//! Small statistics toolkit for evaluation reports: means, standard
//! errors, a paired one-sided t-test, and rank/linear correlation.
//!
//! Everything accumulates in `f64`. The t-distribution CDF comes from
//! `statrs`; the statistics themselves are assembled here and pinned by
//! hand-computed tests.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Result of [`paired_t_test_greater`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for the alternative `mean(a − b) > 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test of `mean(a − b) > 0`.
///
/// Degenerate case: when every pair differs by exactly the same amount the
/// t statistic is unbounded; the p-value is then 0 for a positive mean
/// difference, 1 for a negative one, and 0.5 for all-zero differences.
pub fn paired_t_test_greater(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "paired t-test",
            format!("{} paired values", a.len()),
            format!("{}", b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(Error::Config(format!(
            "paired t-test needs at least 2 pairs, got {}",
            a.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired t-test differences".to_string()));
    }
    let mean_diff = mean(&diffs);
    let sd = sample_std(&diffs);
    let df = (diffs.len() - 1) as f64;
    if sd == 0.0 {
        let (t, p_value) = if mean_diff > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean_diff < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(PairedTest {
            mean_diff,
            t,
            df,
            p_value,
        });
    }
    let t = mean_diff / (sd / (diffs.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Config(format!("bad t-distribution (df={df}): {e}")))?;
    Ok(PairedTest {
        mean_diff,
        t,
        df,
        p_value: 1.0 - dist.cdf(t),
    })
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "correlation",
            format!("{} paired values", x.len()),
            format!("{}", y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::Config(format!(
            "correlation needs at least 2 pairs, got {}",
            x.len()
        )));
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0f64;
    let mut sxx = 0f64;
    let mut syy = 0f64;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config(
            "correlation is undefined for a constant sequence".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks with ties averaged (the usual fractional ranking), 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
    let mut out = vec![0f64; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j share the value; each gets the average rank.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg_rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank correlation input".to_string()));
    }
    if x.len() != y.len() {
        return Err(Error::shape(
            "correlation",
            format!("{} paired values", x.len()),
            format!("{}", y.len()),
        ));
    }
    pearson(&ranks(x), &ranks(y))
}
