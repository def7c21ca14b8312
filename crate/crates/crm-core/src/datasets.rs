//! Event-log IO, leave-one-out splitting, and batch assembly.
//!
//! The on-disk event log is a TSV file with the exact header
//! `user_id\titem_id\twatch_time\tstep`, UTF-8, LF line endings. Watch
//! times are written with Rust's shortest round-trip float formatting, so a
//! write/read cycle reproduces every `f32` bit for bit.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::simulator::InteractionEvent;

/// Expected TSV header.
pub const EVENTS_HEADER: &str = "user_id\titem_id\twatch_time\tstep";

/// One user's interactions, ordered by step.
#[derive(Debug, Clone)]
pub struct UserHistory {
    pub user_id: u32,
    pub events: Vec<InteractionEvent>,
}

/// One supervised example: the interactions before the target, the target
/// item, and how long the user actually watched it.
#[derive(Debug, Clone)]
pub struct Example {
    pub user_id: u32,
    /// `(item_id, watch_time)` pairs, oldest first.
    pub prefix: Vec<(u32, f32)>,
    pub target_item: u32,
    pub target_watch: f32,
}

/// Output of [`split_leave_one_out`].
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Users with fewer than 3 events, which cannot contribute both a train
    /// example and a test example with history.
    pub skipped_users: usize,
}

/// A training batch with mutually distinct target items.
///
/// History arrays are left-padded to `window` with the reserved pad id 0
/// (watch slots padded with 0.0): the real events of row `b` are the
/// trailing `lengths[b]` entries.
#[derive(Debug, Clone)]
pub struct Batch {
    pub window: usize,
    pub ids: Vec<Vec<u32>>,
    pub watches: Vec<Vec<f32>>,
    pub lengths: Vec<usize>,
    pub targets: Vec<u32>,
    pub target_watches: Vec<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// The real (unpadded) prefix of row `b` as `(ids, watches)` slices.
    pub fn real_prefix(&self, b: usize) -> (&[u32], &[f32]) {
        let start = self.window - self.lengths[b];
        (&self.ids[b][start..], &self.watches[b][start..])
    }
}

/// Output of [`make_batches`].
#[derive(Debug, Clone)]
pub struct BatchSet {
    pub batches: Vec<Batch>,
    /// Examples that could not be placed in any distinct-target batch of
    /// size >= 2 (duplicates of a target with nothing left to pair with).
    pub dropped: usize,
}

/// Write events as TSV. Floats use shortest round-trip formatting.
pub fn write_events(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "{EVENTS_HEADER}").map_err(io_err)?;
    for e in events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user_id, e.item_id, e.watch_time, e.step)
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read and validate an event log.
///
/// Rows must parse, ids must fall in `1..=n_users` / `1..=n_items`, watch
/// times must be finite and non-negative. Returns events sorted by
/// `(user_id, step)`; a duplicated `(user_id, step)` pair is an error since
/// it leaves the interaction order undefined.
pub fn load_events(path: &Path, n_users: u32, n_items: u32) -> Result<Vec<InteractionEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == EVENTS_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad header '{header}', expected '{EVENTS_HEADER}'"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty event log".to_string(),
            })
        }
    }

    let mut events = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let mut next_field = |what: &str| {
            fields.next().ok_or(Error::Parse {
                line: line_no,
                msg: format!("missing field '{what}'"),
            })
        };
        let user_id: u32 = next_field("user_id")?.parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("user_id: {e}"),
        })?;
        let item_id: u32 = next_field("item_id")?.parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("item_id: {e}"),
        })?;
        let watch_time: f32 = next_field("watch_time")?.parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("watch_time: {e}"),
        })?;
        let step: u32 = next_field("step")?.parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("step: {e}"),
        })?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "too many fields".to_string(),
            });
        }
        if user_id == 0 || user_id > n_users {
            return Err(Error::IdOutOfBounds {
                kind: format!("user (line {line_no})"),
                id: user_id,
                max: n_users,
            });
        }
        if item_id == 0 || item_id > n_items {
            return Err(Error::IdOutOfBounds {
                kind: format!("item (line {line_no})"),
                id: item_id,
                max: n_items,
            });
        }
        if !watch_time.is_finite() || watch_time < 0.0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("watch_time {watch_time} must be finite and non-negative"),
            });
        }
        events.push(InteractionEvent {
            user_id,
            item_id,
            watch_time,
            step,
        });
    }

    events.sort_by_key(|e| (e.user_id, e.step));
    for pair in events.windows(2) {
        if pair[0].user_id == pair[1].user_id && pair[0].step == pair[1].step {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "user {} has two events at step {}; interaction order is ambiguous",
                    pair[0].user_id, pair[0].step
                ),
            });
        }
    }
    Ok(events)
}

/// Group events (already sorted by user and step) into per-user histories.
pub fn group_histories(events: &[InteractionEvent]) -> Vec<UserHistory> {
    let mut by_user: BTreeMap<u32, Vec<InteractionEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user_id).or_default().push(*e);
    }
    by_user
        .into_iter()
        .map(|(user_id, mut events)| {
            events.sort_by_key(|e| e.step);
            UserHistory { user_id, events }
        })
        .collect()
}

/// Leave-one-out split.
///
/// The last event of each user becomes the test target; every earlier
/// event (except the first, which has no history) becomes a training
/// target. All prefixes — test and train alike — are the trailing `window`
/// events before the target, so every model variant sees the same amount
/// of history at train and test time and bounded-context encoders fit by
/// construction. `max_examples_per_user` (0 = no cap) keeps only each
/// user's latest training examples, which bounds training cost on long
/// histories.
pub fn split_leave_one_out(
    histories: &[UserHistory],
    window: usize,
    max_examples_per_user: usize,
) -> Result<SplitResult> {
    if window == 0 {
        return Err(Error::Config("split window must be at least 1".to_string()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut skipped_users = 0usize;
    for h in histories {
        let n = h.events.len();
        if n < 3 {
            skipped_users += 1;
            continue;
        }
        let pairs: Vec<(u32, f32)> = h.events.iter().map(|e| (e.item_id, e.watch_time)).collect();

        // Training targets: events 1..n-1 (exclusive of the held-out last).
        let first_target = if max_examples_per_user > 0 {
            (n - 1).saturating_sub(max_examples_per_user).max(1)
        } else {
            1
        };
        for t in first_target..n - 1 {
            let start = t.saturating_sub(window);
            train.push(Example {
                user_id: h.user_id,
                prefix: pairs[start..t].to_vec(),
                target_item: pairs[t].0,
                target_watch: pairs[t].1,
            });
        }

        let test_start = (n - 1).saturating_sub(window);
        test.push(Example {
            user_id: h.user_id,
            prefix: pairs[test_start..n - 1].to_vec(),
            target_item: pairs[n - 1].0,
            target_watch: pairs[n - 1].1,
        });
    }
    Ok(SplitResult {
        train,
        test,
        skipped_users,
    })
}

/// Shuffle examples and pack them into batches whose targets are mutually
/// distinct (a requirement of the in-batch softmax, where every other row
/// serves as a negative).
///
/// Duplicate targets are deferred to later batches rather than duplicated
/// or silently re-labeled; when only unpairable duplicates remain they are
/// dropped and counted in [`BatchSet::dropped`]. The final batch may be
/// smaller than `batch_size` but never smaller than 2.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    window: usize,
    seed: u64,
) -> Result<BatchSet> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2 for in-batch negatives, got {batch_size}"
        )));
    }
    if window == 0 {
        return Err(Error::Config("batch window must be at least 1".to_string()));
    }
    for ex in examples {
        if ex.prefix.is_empty() {
            return Err(Error::EmptyHistory(format!(
                "training example for user {} has no history",
                ex.user_id
            )));
        }
        if ex.prefix.len() > window {
            return Err(Error::Config(format!(
                "training example for user {} has prefix of {} > window {window}",
                ex.user_id,
                ex.prefix.len()
            )));
        }
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut remaining: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    let mut dropped = 0usize;
    while !remaining.is_empty() {
        let mut chosen: Vec<usize> = Vec::with_capacity(batch_size);
        let mut seen = std::collections::BTreeSet::new();
        let mut deferred: Vec<usize> = Vec::new();
        while chosen.len() < batch_size {
            let Some(i) = remaining.pop_front() else {
                break;
            };
            if seen.insert(examples[i].target_item) {
                chosen.push(i);
            } else {
                deferred.push(i);
            }
        }
        // Deferred duplicates go back first, preserving their order.
        for i in deferred.into_iter().rev() {
            remaining.push_front(i);
        }
        if chosen.len() >= 2 {
            batches.push(pack_batch(examples, &chosen, window));
        } else {
            // Everything left shares one target item; nothing can pair up.
            dropped += chosen.len() + remaining.len();
            break;
        }
    }
    Ok(BatchSet { batches, dropped })
}

fn pack_batch(examples: &[Example], chosen: &[usize], window: usize) -> Batch {
    let mut batch = Batch {
        window,
        ids: Vec::with_capacity(chosen.len()),
        watches: Vec::with_capacity(chosen.len()),
        lengths: Vec::with_capacity(chosen.len()),
        targets: Vec::with_capacity(chosen.len()),
        target_watches: Vec::with_capacity(chosen.len()),
    };
    for &i in chosen {
        let ex = &examples[i];
        let len = ex.prefix.len();
        let mut ids = vec![0u32; window];
        let mut watches = vec![0f32; window];
        for (k, &(item, watch)) in ex.prefix.iter().enumerate() {
            ids[window - len + k] = item;
            watches[window - len + k] = watch;
        }
        batch.ids.push(ids);
        batch.watches.push(watches);
        batch.lengths.push(len);
        batch.targets.push(ex.target_item);
        batch.target_watches.push(ex.target_watch);
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(user_id: u32, item_id: u32, watch_time: f32, step: u32) -> InteractionEvent {
        InteractionEvent {
            user_id,
            item_id,
            watch_time,
            step,
        }
    }

    fn history(user_id: u32, items: &[(u32, f32)]) -> UserHistory {
        UserHistory {
            user_id,
            events: items
                .iter()
                .enumerate()
                .map(|(i, &(item, w))| event(user_id, item, w, i as u32))
                .collect(),
        }
    }

    #[test]
    fn tsv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        let events = vec![
            event(1, 2, 0.1, 0),
            event(1, 3, 123.456_79, 1),
            event(2, 1, 1.0e-7, 0),
            event(2, 2, 299.999_97, 1),
        ];
        write_events(&path, &events).unwrap();
        let loaded = load_events(&path, 10, 10).unwrap();
        assert_eq!(loaded.len(), events.len());
        for (a, b) in events.iter().zip(loaded.iter()) {
            assert_eq!(a.user_id, b.user_id);
            assert_eq!(a.item_id, b.item_id);
            assert_eq!(a.watch_time.to_bits(), b.watch_time.to_bits());
            assert_eq!(a.step, b.step);
        }
    }

    #[test]
    fn malformed_rows_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.tsv");

        std::fs::write(&path, "wrong\theader\n").unwrap();
        let err = load_events(&path, 10, 10).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        std::fs::write(&path, format!("{EVENTS_HEADER}\n1\t2\tnot_a_float\t0\n")).unwrap();
        let err = load_events(&path, 10, 10).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        std::fs::write(&path, format!("{EVENTS_HEADER}\n1\t2\t3.0\n")).unwrap();
        let err = load_events(&path, 10, 10).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");

        // Id 0 is the pad id and must never appear in a log.
        std::fs::write(&path, format!("{EVENTS_HEADER}\n0\t2\t3.0\t0\n")).unwrap();
        assert!(load_events(&path, 10, 10).is_err());

        std::fs::write(&path, format!("{EVENTS_HEADER}\n1\t11\t3.0\t0\n")).unwrap();
        let err = load_events(&path, 10, 10).unwrap_err();
        assert!(err.to_string().contains("out of bounds"), "{err}");

        // Duplicate (user, step).
        std::fs::write(
            &path,
            format!("{EVENTS_HEADER}\n1\t2\t3.0\t0\n1\t3\t4.0\t0\n"),
        )
        .unwrap();
        let err = load_events(&path, 10, 10).unwrap_err();
        assert!(err.to_string().contains("ambiguous"), "{err}");
    }

    #[test]
    fn split_takes_last_event_as_test_with_trailing_window_prefix() {
        let histories = vec![history(
            1,
            &[(10, 1.0), (11, 2.0), (12, 3.0), (13, 4.0), (14, 5.0)],
        )];
        let split = split_leave_one_out(&histories, 3, 0).unwrap();
        assert_eq!(split.test.len(), 1);
        let test = &split.test[0];
        assert_eq!(test.target_item, 14);
        assert_eq!(
            test.prefix,
            vec![(11, 2.0), (12, 3.0), (13, 4.0)],
            "test prefix is the trailing window before the held-out event"
        );
        // Train targets are events 1..=3, windows capped at 3.
        assert_eq!(split.train.len(), 3);
        assert_eq!(split.train[0].target_item, 11);
        assert_eq!(split.train[0].prefix, vec![(10, 1.0)]);
        assert_eq!(split.train[2].target_item, 13);
        assert_eq!(split.train[2].prefix, vec![(10, 1.0), (11, 2.0), (12, 3.0)]);
    }

    #[test]
    fn short_histories_are_skipped_and_counted() {
        let histories = vec![
            history(1, &[(10, 1.0)]),
            history(2, &[(10, 1.0), (11, 2.0)]),
            history(3, &[(10, 1.0), (11, 2.0), (12, 3.0)]),
        ];
        let split = split_leave_one_out(&histories, 4, 0).unwrap();
        assert_eq!(split.skipped_users, 2);
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.train.len(), 1);
    }

    #[test]
    fn per_user_example_cap_keeps_the_latest() {
        let histories = vec![history(
            1,
            &[(10, 1.0), (11, 2.0), (12, 3.0), (13, 4.0), (14, 5.0), (15, 6.0)],
        )];
        let split = split_leave_one_out(&histories, 8, 2).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.train[0].target_item, 13);
        assert_eq!(split.train[1].target_item, 14);
    }

    #[test]
    fn batches_left_pad_and_expose_real_prefix() {
        let examples = vec![
            Example {
                user_id: 1,
                prefix: vec![(7, 1.5), (8, 2.5)],
                target_item: 9,
                target_watch: 3.0,
            },
            Example {
                user_id: 2,
                prefix: vec![(5, 1.0), (6, 2.0), (7, 3.0), (8, 4.0)],
                target_item: 10,
                target_watch: 4.5,
            },
        ];
        let set = make_batches(&examples, 2, 4, 0).unwrap();
        assert_eq!(set.batches.len(), 1);
        assert_eq!(set.dropped, 0);
        let batch = &set.batches[0];
        for b in 0..2 {
            let row = batch
                .targets
                .iter()
                .position(|&t| t == examples[b].target_item)
                .unwrap();
            let (ids, watches) = batch.real_prefix(row);
            let want_ids: Vec<u32> = examples[b].prefix.iter().map(|p| p.0).collect();
            let want_watch: Vec<f32> = examples[b].prefix.iter().map(|p| p.1).collect();
            assert_eq!(ids, want_ids.as_slice());
            assert_eq!(watches, want_watch.as_slice());
            // Left padding is all pad-id/zero.
            let pad = batch.window - ids.len();
            assert!(batch.ids[row][..pad].iter().all(|&i| i == 0));
            assert!(batch.watches[row][..pad].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn duplicate_targets_are_split_across_batches_never_within() {
        // Six examples, three of them targeting item 1.
        let mk = |user_id, target| Example {
            user_id,
            prefix: vec![(2, 1.0)],
            target_item: target,
            target_watch: 1.0,
        };
        let examples = vec![mk(1, 1), mk(2, 1), mk(3, 1), mk(4, 2), mk(5, 3), mk(6, 4)];
        let set = make_batches(&examples, 4, 2, 1).unwrap();
        let total: usize = set.batches.iter().map(Batch::len).sum();
        assert_eq!(total + set.dropped, 6);
        for batch in &set.batches {
            let mut targets = batch.targets.clone();
            targets.sort_unstable();
            targets.dedup();
            assert_eq!(targets.len(), batch.len(), "duplicate target inside a batch");
        }
    }

    #[test]
    fn unpairable_duplicates_are_dropped_not_duplicated() {
        let mk = |user_id| Example {
            user_id,
            prefix: vec![(2, 1.0)],
            target_item: 1,
            target_watch: 1.0,
        };
        let examples = vec![mk(1), mk(2), mk(3)];
        let set = make_batches(&examples, 2, 2, 0).unwrap();
        assert!(set.batches.is_empty());
        assert_eq!(set.dropped, 3);
    }

    #[test]
    fn batch_size_one_is_rejected() {
        assert!(make_batches(&[], 1, 4, 0).is_err());
    }

    proptest! {
        /// Oracle: a user with n >= 3 events yields exactly n - 2 training
        /// examples (uncapped) and one test example; shorter users yield
        /// nothing. Every produced prefix is non-empty and within window.
        #[test]
        fn split_counts_match_oracle(
            lens in proptest::collection::vec(1usize..12, 1..8),
            window in 1usize..6,
        ) {
            let histories: Vec<UserHistory> = lens
                .iter()
                .enumerate()
                .map(|(u, &len)| {
                    let items: Vec<(u32, f32)> =
                        (0..len).map(|i| (i as u32 + 1, i as f32 + 0.5)).collect();
                    history(u as u32 + 1, &items)
                })
                .collect();
            let split = split_leave_one_out(&histories, window, 0).unwrap();
            let want_train: usize = lens.iter().map(|&l| l.saturating_sub(2)).sum();
            let want_test = lens.iter().filter(|&&l| l >= 3).count();
            let want_skipped = lens.iter().filter(|&&l| l < 3).count();
            prop_assert_eq!(split.train.len(), want_train);
            prop_assert_eq!(split.test.len(), want_test);
            prop_assert_eq!(split.skipped_users, want_skipped);
            for ex in &split.train {
                prop_assert!(!ex.prefix.is_empty());
                prop_assert!(ex.prefix.len() <= window);
            }
            for ex in &split.test {
                prop_assert!(!ex.prefix.is_empty());
                prop_assert!(ex.prefix.len() <= window);
            }
        }

        /// Batches partition the examples (minus drops), never duplicate a
        /// target within a batch, and every batch has at least 2 rows.
        #[test]
        fn batching_invariants(
            targets in proptest::collection::vec(1u32..10, 2..40),
            batch_size in 2usize..8,
            seed in 0u64..5,
        ) {
            let examples: Vec<Example> = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| Example {
                    user_id: i as u32 + 1,
                    prefix: vec![(1, 1.0)],
                    target_item: t,
                    target_watch: 1.0,
                })
                .collect();
            let set = make_batches(&examples, batch_size, 2, seed).unwrap();
            let placed: usize = set.batches.iter().map(Batch::len).sum();
            prop_assert_eq!(placed + set.dropped, examples.len());
            for batch in &set.batches {
                prop_assert!(batch.len() >= 2);
                prop_assert!(batch.len() <= batch_size);
                let mut t = batch.targets.clone();
                t.sort_unstable();
                t.dedup();
                prop_assert_eq!(t.len(), batch.len());
            }
        }
    }
}
