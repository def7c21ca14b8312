//! End-to-end runs: simulate → train → index → eval → sweep → report,
//! every stage writing its artifacts into one run directory.
//!
//! Stages are plain functions over (config, directory) so the CLI can run
//! any one of them in isolation; each loads what it needs from the
//! directory and writes its outputs back. [`run_pipeline`] chains them,
//! records per-stage wall time in `runtime.txt` (the one file that is NOT
//! expected to reproduce across reruns), and leaves `status.txt` holding
//! either `ok` or the name of the stage that failed. Partial outputs are
//! kept on failure.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::datasets::{group_histories, load_events, split_leave_one_out, SplitResult};
use crate::error::{Error, Result};
use crate::harness::config::{config_hash, stage_seed, IndexKind, ModelVariant, PipelineConfig};
use crate::harness::eval::{evaluate, sweep_condition, EvalOutcome, EvalParams, SweepRow};
use crate::harness::report::{line_plot_svg, tsv_float, write_tsv, PlotSpec, Series};
use crate::harness::trace::condition_trace;
use crate::harness::train::{train_model, TrainedModel};
use crate::policy::ConditionSpec;
use crate::retrieval::ItemIndex;
use crate::simulator::SimWorld;

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const WORLD_FILE: &str = "world.ckpt";
pub const EVENTS_FILE: &str = "events.tsv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_TRACE_FILE: &str = "loss_trace.tsv";
pub const LOSS_PLOT_FILE: &str = "loss.svg";
pub const INDEX_FILE: &str = "index.ckpt";
pub const EVAL_FILE: &str = "eval.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const SWEEP_PLOT_FILE: &str = "sweep.svg";
pub const TRACE_FILE: &str = "trace.tsv";
pub const TRACE_PLOT_FILE: &str = "trace.svg";
pub const REPORT_FILE: &str = "report.md";
pub const STATUS_FILE: &str = "status.txt";
pub const RUNTIME_FILE: &str = "runtime.txt";

/// Write the fully resolved config into the run directory and return its
/// hash, which every report row carries.
pub fn write_resolved_config(config: &PipelineConfig, dir: &Path) -> Result<String> {
    let toml = config.resolved_toml()?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, &toml).map_err(|e| Error::io(&path, e))?;
    Ok(config_hash(&toml))
}

fn hash_of(config: &PipelineConfig) -> Result<String> {
    Ok(config_hash(&config.resolved_toml()?))
}

fn load_split(config: &PipelineConfig, dir: &Path) -> Result<SplitResult> {
    let events = load_events(
        &dir.join(EVENTS_FILE),
        config.simulate.n_users,
        config.simulate.n_items,
    )?;
    split_leave_one_out(
        &group_histories(&events),
        config.train.window,
        config.train.max_examples_per_user,
    )
}

/// Generate the synthetic world and its interaction log.
pub fn stage_simulate(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let world = SimWorld::generate(&config.sim_config())?;
    world.save(&dir.join(WORLD_FILE))?;
    let events = world.generate_sessions(&config.session_config())?;
    crate::datasets::write_events(&dir.join(EVENTS_FILE), &events)
}

/// Train the configured variant on the logged events.
pub fn stage_train(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let hash = hash_of(config)?;
    let split = load_split(config, dir)?;
    let outcome = train_model(config, &split.train)?;
    outcome.model.save(&dir.join(MODEL_FILE))?;

    let rows: Vec<Vec<String>> = outcome
        .loss_trace
        .iter()
        .map(|&(step, loss)| vec![step.to_string(), tsv_float(loss as f64), hash.clone()])
        .collect();
    write_tsv(&dir.join(LOSS_TRACE_FILE), &["step", "loss", "config"], &rows)?;
    line_plot_svg(
        &dir.join(LOSS_PLOT_FILE),
        &PlotSpec {
            title: format!("training loss ({})", config.variant),
            x_label: "optimizer step".to_string(),
            y_label: "batch loss".to_string(),
            series: vec![Series {
                label: "train".to_string(),
                points: outcome
                    .loss_trace
                    .iter()
                    .map(|&(s, l)| (s as f64, l as f64))
                    .collect(),
            }],
        },
    )
}

/// Build the retrieval index over the trained model's item vectors.
pub fn stage_index(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let model = TrainedModel::load(&dir.join(MODEL_FILE))?;
    let (ids, vectors) = model.all_item_vectors()?;
    let index = match config.index.kind {
        IndexKind::Exact => ItemIndex::build_exact(ids, vectors)?,
        IndexKind::Ivf => ItemIndex::build_ivf(
            ids,
            vectors,
            config.index.n_clusters,
            config.index.n_probes,
            stage_seed(config.seed, "index"),
        )?,
    };
    index.save(&dir.join(INDEX_FILE))
}

fn eval_params(config: &PipelineConfig, condition: ConditionSpec, stage: &str) -> EvalParams {
    EvalParams {
        ks: config.eval.ks.clone(),
        oracle_k: config.eval.oracle_k,
        condition,
        policy_window: config.eval.policy_window,
        seed: stage_seed(config.seed, stage),
    }
}

/// Run [`evaluate`] against the stored artifacts. Returns the outcome so
/// callers (tests, the CLI) can inspect it beyond the written table.
///
/// `condition_override` replaces the config's condition policy for this
/// evaluation only; the table then records the override, and the config
/// hash still identifies everything else about the run.
pub fn stage_eval(
    config: &PipelineConfig,
    dir: &Path,
    condition_override: Option<&str>,
) -> Result<EvalOutcome> {
    let hash = hash_of(config)?;
    let model = TrainedModel::load(&dir.join(MODEL_FILE))?;
    let index = ItemIndex::load(&dir.join(INDEX_FILE))?;
    let world = SimWorld::load(&dir.join(WORLD_FILE))?;
    let split = load_split(config, dir)?;

    let surface = condition_override.unwrap_or(&config.eval.condition).to_string();
    let spec = ConditionSpec::parse(&surface)?;
    let outcome = evaluate(
        &model,
        &index,
        &split.test,
        &world,
        &eval_params(config, spec, "eval"),
    )?;

    let shown = if model.needs_condition() { surface.as_str() } else { "-" };
    let mut rows: Vec<Vec<String>> = Vec::new();
    for &(k, rate) in &outcome.hit_rates {
        let se = (rate * (1.0 - rate) / outcome.n as f64).sqrt();
        rows.push(vec![
            format!("hit_rate@{k}"),
            shown.to_string(),
            tsv_float(rate),
            tsv_float(se),
            outcome.n.to_string(),
            hash.clone(),
        ]);
    }
    rows.push(vec![
        format!("oracle_watch@{}", config.eval.oracle_k),
        shown.to_string(),
        tsv_float(outcome.mean_oracle_watch),
        tsv_float(outcome.oracle_se),
        outcome.n.to_string(),
        hash.clone(),
    ]);
    write_tsv(
        &dir.join(EVAL_FILE),
        &["metric", "condition", "value", "stderr", "n", "config"],
        &rows,
    )?;
    Ok(outcome)
}

fn sweep_header(config: &PipelineConfig) -> Vec<String> {
    let mut header = vec!["condition_seconds".to_string()];
    for &k in &config.eval.ks {
        header.push(format!("hit_rate@{k}"));
    }
    header.extend(
        ["oracle_watch", "oracle_se", "n", "config"].iter().map(|s| s.to_string()),
    );
    header
}

/// Sweep the condition grid. For the unconditioned baseline the sweep is
/// not applicable: the table is written header-only and no plot is drawn.
pub fn stage_sweep(config: &PipelineConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    let hash = hash_of(config)?;
    let header = sweep_header(config);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();

    let model = TrainedModel::load(&dir.join(MODEL_FILE))?;
    if !model.needs_condition() {
        write_tsv(&dir.join(SWEEP_FILE), &header_refs, &[])?;
        return Ok(Vec::new());
    }
    let index = ItemIndex::load(&dir.join(INDEX_FILE))?;
    let world = SimWorld::load(&dir.join(WORLD_FILE))?;
    let split = load_split(config, dir)?;

    let swept = sweep_condition(
        &model,
        &index,
        &split.test,
        &world,
        &config.sweep.grid,
        &eval_params(config, ConditionSpec::Average, "sweep"),
    )?;

    let rows: Vec<Vec<String>> = swept
        .iter()
        .map(|row| {
            let mut cells = vec![tsv_float(row.condition)];
            for &(_, rate) in &row.hit_rates {
                cells.push(tsv_float(rate));
            }
            cells.push(tsv_float(row.mean_oracle_watch));
            cells.push(tsv_float(row.oracle_se));
            cells.push(row.n.to_string());
            cells.push(hash.clone());
            cells
        })
        .collect();
    write_tsv(&dir.join(SWEEP_FILE), &header_refs, &rows)?;

    line_plot_svg(
        &dir.join(SWEEP_PLOT_FILE),
        &PlotSpec {
            title: format!("condition sweep ({})", config.variant),
            x_label: "condition (seconds)".to_string(),
            y_label: "mean oracle watch time of retrieved top-K".to_string(),
            series: vec![Series {
                label: "oracle watch".to_string(),
                points: swept.iter().map(|r| (r.condition, r.mean_oracle_watch)).collect(),
            }],
        },
    )?;
    Ok(swept)
}

fn tsv_as_markdown(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = match lines.next() {
        Some(h) => h.split('\t').collect(),
        None => return Ok("(empty table)\n".to_string()),
    };
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    let mut any = false;
    for line in lines {
        out.push_str(&format!("| {} |\n", line.split('\t').collect::<Vec<_>>().join(" | ")));
        any = true;
    }
    if !any {
        out.push_str(&format!("| {} |\n", vec!["(none)"; header.len()].join(" | ")));
    }
    Ok(out)
}

/// Build the condition trace and the run summary.
pub fn stage_report(config: &PipelineConfig, dir: &Path) -> Result<()> {
    let hash = hash_of(config)?;
    let events = load_events(
        &dir.join(EVENTS_FILE),
        config.simulate.n_users,
        config.simulate.n_items,
    )?;
    let histories = group_histories(&events);
    let trace = condition_trace(&histories, config.eval.policy_window, config.eval.trace_buckets)?;

    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|row| {
            vec![
                row.bucket.to_string(),
                tsv_float(row.avg_mean),
                tsv_float(row.max_mean),
                row.n.to_string(),
                hash.clone(),
            ]
        })
        .collect();
    write_tsv(
        &dir.join(TRACE_FILE),
        &["bucket", "avg_condition", "max_condition", "n", "config"],
        &rows,
    )?;
    line_plot_svg(
        &dir.join(TRACE_PLOT_FILE),
        &PlotSpec {
            title: "condition by simulated time bucket".to_string(),
            x_label: "time bucket".to_string(),
            y_label: "condition (seconds)".to_string(),
            series: vec![
                Series {
                    label: "avg policy".to_string(),
                    points: trace.iter().map(|r| (r.bucket as f64, r.avg_mean)).collect(),
                },
                Series {
                    label: "max policy".to_string(),
                    points: trace.iter().map(|r| (r.bucket as f64, r.max_mean)).collect(),
                },
            ],
        },
    )?;

    let split = split_leave_one_out(
        &histories,
        config.train.window,
        config.train.max_examples_per_user,
    )?;
    let mut md = String::new();
    md.push_str("# Run report\n\n");
    md.push_str(&format!("- config hash: `{hash}`\n"));
    md.push_str(&format!("- variant: `{}`\n", config.variant));
    md.push_str(&format!("- seed: {}\n\n", config.seed));
    md.push_str("## Data\n\n");
    md.push_str(&format!(
        "- users: {}, items: {}, logged events: {}\n",
        config.simulate.n_users,
        config.simulate.n_items,
        events.len()
    ));
    md.push_str(&format!(
        "- train examples: {}, test examples: {}, users skipped (too short): {}\n\n",
        split.train.len(),
        split.test.len(),
        split.skipped_users
    ));
    md.push_str("## Evaluation\n\n");
    let eval_path = dir.join(EVAL_FILE);
    if eval_path.exists() {
        md.push_str(&tsv_as_markdown(&eval_path)?);
    } else {
        md.push_str("(no evaluation table found)\n");
    }
    md.push_str("\n## Condition sweep\n\n");
    let sweep_path = dir.join(SWEEP_FILE);
    if config.variant == ModelVariant::TwoTower {
        md.push_str("Not applicable: this variant takes no condition input.\n");
    } else if sweep_path.exists() {
        md.push_str(&tsv_as_markdown(&sweep_path)?);
    } else {
        md.push_str("(no sweep table found)\n");
    }
    md.push_str("\n## Condition trace\n\n");
    let ordered = trace.iter().filter(|r| r.max_mean >= r.avg_mean).count();
    md.push_str(&format!(
        "Max-policy mean >= avg-policy mean in {ordered} of {} buckets; \
         full table in `{TRACE_FILE}`, plot in `{TRACE_PLOT_FILE}`.\n",
        trace.len()
    ));
    let report_path = dir.join(REPORT_FILE);
    fs::write(&report_path, md).map_err(|e| Error::io(&report_path, e))
}

fn run_stage(
    name: &'static str,
    runtimes: &mut Vec<(&'static str, f64)>,
    f: impl FnOnce() -> Result<()>,
) -> Result<()> {
    let start = Instant::now();
    let result = f().map_err(|e| e.in_stage(name));
    runtimes.push((name, start.elapsed().as_secs_f64()));
    result
}

fn write_runtimes(dir: &Path, runtimes: &[(&'static str, f64)]) {
    let mut text = String::new();
    for (stage, secs) in runtimes {
        text.push_str(&format!("{stage}\t{secs:.3}\n"));
    }
    // Best-effort: runtime accounting must never mask the real outcome.
    let _ = fs::write(dir.join(RUNTIME_FILE), text);
}

/// Run every stage in order. `status.txt` ends up holding `ok` or the
/// failure, `runtime.txt` the per-stage wall times; everything else in the
/// directory is a pure function of the config.
pub fn run_pipeline(config: &PipelineConfig, dir: &Path) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_resolved_config(config, dir)?;

    let mut runtimes: Vec<(&'static str, f64)> = Vec::new();
    let result = (|| {
        run_stage("simulate", &mut runtimes, || stage_simulate(config, dir))?;
        run_stage("train", &mut runtimes, || stage_train(config, dir))?;
        run_stage("index", &mut runtimes, || stage_index(config, dir))?;
        run_stage("eval", &mut runtimes, || stage_eval(config, dir, None).map(|_| ()))?;
        run_stage("sweep", &mut runtimes, || stage_sweep(config, dir).map(|_| ()))?;
        run_stage("report", &mut runtimes, || stage_report(config, dir))
    })();

    write_runtimes(dir, &runtimes);
    let status = match &result {
        Ok(()) => "ok\n".to_string(),
        Err(e) => format!("failed: {e}\n"),
    };
    let status_path = dir.join(STATUS_FILE);
    fs::write(&status_path, status).map_err(|e| Error::io(&status_path, e))?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(variant: ModelVariant, seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::with_defaults(seed, variant);
        cfg.simulate.n_users = 24;
        cfg.simulate.n_items = 40;
        cfg.simulate.session_len = 10;
        cfg.train.window = 5;
        cfg.train.max_examples_per_user = 4;
        cfg.train.batch_size = 8;
        cfg.train.epochs = 1;
        cfg.train.embed_dim = 8;
        cfg.train.watch_dim = 4;
        cfg.train.cond_dim = 4;
        cfg.train.user_hidden = vec![];
        cfg.train.output_dim = 8;
        cfg.train.d_model = 8;
        cfg.train.n_heads = 2;
        cfg.train.n_layers = 1;
        cfg.train.ff_multiplier = 2;
        cfg.eval.ks = vec![5, 10];
        cfg.eval.oracle_k = 5;
        cfg.eval.trace_buckets = 4;
        cfg.sweep.grid = vec![10.0, 100.0];
        cfg
    }

    const STABLE_FILES: [&str; 11] = [
        CONFIG_FILE,
        EVENTS_FILE,
        LOSS_TRACE_FILE,
        LOSS_PLOT_FILE,
        EVAL_FILE,
        SWEEP_FILE,
        TRACE_FILE,
        TRACE_PLOT_FILE,
        REPORT_FILE,
        STATUS_FILE,
        MODEL_FILE,
    ];

    #[test]
    fn rerunning_the_same_config_reproduces_every_table_bitwise() {
        let cfg = tiny_config(ModelVariant::CrmDnn, 11);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        run_pipeline(&cfg, &a).unwrap();
        run_pipeline(&cfg, &b).unwrap();
        for name in STABLE_FILES {
            let left = fs::read(a.join(name)).unwrap();
            let right = fs::read(b.join(name)).unwrap();
            assert_eq!(left, right, "{name} differs between identical runs");
        }
        for name in [WORLD_FILE, INDEX_FILE, SWEEP_PLOT_FILE] {
            assert_eq!(
                fs::read(a.join(name)).unwrap(),
                fs::read(b.join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
        assert_eq!(fs::read_to_string(a.join(STATUS_FILE)).unwrap(), "ok\n");
    }

    #[test]
    fn every_variant_runs_from_the_same_config_surface() {
        for (i, variant) in
            [ModelVariant::TwoTower, ModelVariant::CrmDnn, ModelVariant::CrmDt]
                .into_iter()
                .enumerate()
        {
            let cfg = tiny_config(variant, 20 + i as u64);
            let dir = tempfile::tempdir().unwrap();
            run_pipeline(&cfg, dir.path()).unwrap();
            assert_eq!(
                fs::read_to_string(dir.path().join(STATUS_FILE)).unwrap(),
                "ok\n",
                "{variant}"
            );
            for name in STABLE_FILES {
                assert!(dir.path().join(name).exists(), "{variant} missing {name}");
            }
            let sweep = fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
            if variant == ModelVariant::TwoTower {
                assert_eq!(sweep.lines().count(), 1, "baseline sweep should be header-only");
                assert!(!dir.path().join(SWEEP_PLOT_FILE).exists());
            } else {
                assert_eq!(sweep.lines().count(), 1 + cfg.sweep.grid.len());
                assert!(dir.path().join(SWEEP_PLOT_FILE).exists());
            }
        }
    }

    #[test]
    fn every_report_row_carries_the_config_hash() {
        let cfg = tiny_config(ModelVariant::CrmDnn, 31);
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&cfg, dir.path()).unwrap();
        let hash = config_hash(&cfg.resolved_toml().unwrap());
        assert_eq!(hash.len(), 12);
        for name in [LOSS_TRACE_FILE, EVAL_FILE, SWEEP_FILE, TRACE_FILE] {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            let mut lines = text.lines();
            let header = lines.next().unwrap();
            assert!(header.ends_with("\tconfig"), "{name} header: {header}");
            for line in lines {
                assert!(
                    line.ends_with(&hash),
                    "{name} row missing config hash: {line}"
                );
            }
        }
    }

    #[test]
    fn a_failing_stage_is_named_and_partial_outputs_are_kept() {
        let cfg = tiny_config(ModelVariant::TwoTower, 41);
        let dir = tempfile::tempdir().unwrap();
        // A directory squatting on the model path makes the train stage's
        // checkpoint write fail after simulate has already succeeded.
        fs::create_dir_all(dir.path().join(MODEL_FILE)).unwrap();
        let err = run_pipeline(&cfg, dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "train"), "{err}");
        let status = fs::read_to_string(dir.path().join(STATUS_FILE)).unwrap();
        assert!(status.starts_with("failed: stage 'train'"), "{status}");
        assert!(dir.path().join(EVENTS_FILE).exists());
        assert!(dir.path().join(WORLD_FILE).exists());
        assert!(dir.path().join(RUNTIME_FILE).exists());
    }

    #[test]
    fn eval_respects_a_condition_override() {
        let cfg = tiny_config(ModelVariant::CrmDnn, 51);
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&cfg, dir.path()).unwrap();
        let default_eval = fs::read_to_string(dir.path().join(EVAL_FILE)).unwrap();
        assert!(default_eval.contains("\tavg\t"));
        stage_eval(&cfg, dir.path(), Some("value:250")).unwrap();
        let overridden = fs::read_to_string(dir.path().join(EVAL_FILE)).unwrap();
        assert!(overridden.contains("\tvalue:250\t"), "{overridden}");
        assert!(stage_eval(&cfg, dir.path(), Some("nonsense")).is_err());
    }
}
