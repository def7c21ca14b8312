//! Experiment harness: configuration, the training loop, evaluation,
//! condition sweeps, trace reports, and the end-to-end pipeline.
//!
//! The harness is the layer that turns the model crates into experiments:
//! a [`config::PipelineConfig`] plus a seed fully determines a run
//! directory of checkpoints, TSV tables, and SVG plots, and rerunning the
//! same config reproduces every table bitwise. Per-stage seeds are derived
//! by hashing, so the stages draw from independent random streams.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod trace;
pub mod train;

pub use config::{config_hash, stage_seed, IndexKind, ModelVariant, PipelineConfig};
pub use eval::{evaluate, sweep_condition, EvalOutcome, EvalParams, SweepRow};
pub use pipeline::{
    run_pipeline, stage_eval, stage_index, stage_report, stage_simulate, stage_sweep,
    stage_train, write_resolved_config,
};
pub use report::{line_plot_svg, tsv_float, write_tsv, PlotSpec, Series};
pub use stats::{mean, paired_t_test_greater, pearson, spearman, std_error, PairedTest};
pub use trace::{condition_trace, TraceRow};
pub use train::{train_model, TrainOutcome, TrainedModel};
