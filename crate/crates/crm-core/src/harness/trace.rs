//! Condition trace over simulated time: what the average- and max-watch
//! policies would each have asked for at every step of the logged
//! sessions, bucketed by session position and averaged across users.

use crate::datasets::UserHistory;
use crate::error::{Error, Result};
use crate::policy::trailing_window;

/// One simulated time bucket of the condition trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Bucket index, `0..n_buckets`.
    pub bucket: usize,
    /// Mean avg-policy condition over every step in the bucket.
    pub avg_mean: f64,
    /// Mean max-policy condition over every step in the bucket.
    pub max_mean: f64,
    /// Steps that landed in the bucket.
    pub n: usize,
}

/// Walk every step of every history that has at least one preceding watch,
/// compute the trailing-window average and max watch time (the two
/// deterministic condition policies), and average them per time bucket.
///
/// Buckets split session positions evenly: step `s` of a log whose largest
/// step is `S` lands in bucket `s * n_buckets / (S + 1)`. Empty buckets are
/// omitted. Since a window maximum can never fall below the same window's
/// mean, `max_mean >= avg_mean` holds row by row.
pub fn condition_trace(
    histories: &[UserHistory],
    window: usize,
    n_buckets: usize,
) -> Result<Vec<TraceRow>> {
    if window == 0 {
        return Err(Error::Config("trace window must be at least 1".to_string()));
    }
    if n_buckets == 0 {
        return Err(Error::Config("trace needs at least one bucket".to_string()));
    }
    let max_step = histories
        .iter()
        .flat_map(|h| h.events.iter())
        .map(|e| e.step)
        .max()
        .ok_or_else(|| Error::Config("trace needs at least one event".to_string()))?;

    let mut avg_sum = vec![0f64; n_buckets];
    let mut max_sum = vec![0f64; n_buckets];
    let mut count = vec![0usize; n_buckets];

    for history in histories {
        let watches: Vec<f32> = history.events.iter().map(|e| e.watch_time).collect();
        for t in 1..history.events.len() {
            let recent = trailing_window(&watches[..t], window)?;
            let avg = recent.iter().map(|&w| w as f64).sum::<f64>() / recent.len() as f64;
            let max = recent.iter().copied().fold(f32::MIN, f32::max) as f64;
            let bucket =
                (history.events[t].step as usize * n_buckets) / (max_step as usize + 1);
            avg_sum[bucket] += avg;
            max_sum[bucket] += max;
            count[bucket] += 1;
        }
    }

    let rows: Vec<TraceRow> = (0..n_buckets)
        .filter(|&b| count[b] > 0)
        .map(|b| TraceRow {
            bucket: b,
            avg_mean: avg_sum[b] / count[b] as f64,
            max_mean: max_sum[b] / count[b] as f64,
            n: count[b],
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Config(
            "every history was too short to trace (need at least two events)".to_string(),
        ));
    }
    Ok(rows)
}
