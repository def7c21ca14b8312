//! Desk-scale laboratory for condition-controllable retrieval models.
//!
//! The crate trains small two-tower retrieval models on a synthetic
//! watch-time world and lets the caller steer them at inference time with a
//! *condition*: a target watch time fed to the user tower. Everything runs
//! on the CPU with hand-written forward and backward passes, so every number
//! in a report can be traced to a few hundred lines of plain Rust.
//!
//! Module map, roughly bottom-up:
//!
//! * [`numerics`] — matrices, layers, attention, the in-batch softmax loss,
//!   finite-difference gradient checking, and the checkpoint format.
//! * [`simulator`] — the synthetic world: latent user/item vectors, item
//!   durations, and a seeded session generator with a ground-truth oracle.
//! * [`datasets`] — event-log IO, leave-one-out splitting, and batching.
//! * [`policy`] — maps a user's recent watch times to a condition value.
//! * [`towers`] — pooled two-tower model, with or without the condition
//!   feature.
//! * [`crm_dt`] — decision-transformer user tower over interleaved
//!   watch-time-to-go and item tokens.
//! * [`retrieval`] — exact and inverted-file nearest-neighbor search.
//! * [`harness`] — experiment pipeline: config, training loop, evaluation,
//!   condition sweeps, plots, and reproducible report files.

pub mod crm_dt;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod retrieval;
pub mod simulator;
pub mod towers;

pub use error::{Error, Result};
