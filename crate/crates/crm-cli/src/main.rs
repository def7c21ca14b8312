//! `crm`: command-line front end for the retrieval laboratory.
//!
//! `crm run` drives the whole pipeline into a run directory; the other
//! subcommands run single stages against an existing directory so long
//! stages can be repeated or resumed individually. Every run directory is
//! self-describing: it carries the fully resolved config and all tables
//! reference its hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crm_core::harness::config::{config_hash, ModelVariant, PipelineConfig};
use crm_core::harness::pipeline;

#[derive(Parser)]
#[command(
    name = "crm",
    version,
    about = "Train and probe condition-controllable retrieval models on a synthetic watch-time world"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every stage in order: simulate, train, index, eval, sweep, report
    Run {
        /// Config file (TOML); see `crm --help` for keys and defaults
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: runs/run-<unix-seconds>-<config-hash>)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic world and its interaction log
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Run directory to write artifacts into
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model variant on the logged events
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the nearest-neighbor index over the trained item vectors
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score held-out events: hit rates and oracle watch time of the top-K
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's condition policy for this evaluation:
        /// avg | max | mux:<p> | value:<seconds>
        #[arg(long)]
        condition: Option<String>,
    },
    /// Evaluate across the condition grid and plot the curve
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the condition-trace table/plot and the run summary
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Top-level help carries the full default config so every key is
/// documented in one place.
fn command_with_config_help() -> clap::Command {
    let defaults = PipelineConfig::with_defaults(0, ModelVariant::TwoTower)
        .resolved_toml()
        .unwrap_or_default();
    Cli::command().after_long_help(format!(
        "Config file: TOML. `seed` (integer) and `variant` (two_tower | crm_dnn | \
         crm_dt) are required; every other key is optional with these defaults:\n\n{}",
        defaults
            .lines()
            .map(|l| format!("    {l}"))
            .collect::<Vec<_>>()
            .join("\n")
    ))
    .after_help(
        "Config file: TOML; required keys `seed` and `variant`. \
         Run `crm --help` (long form) for the full key list and defaults.",
    )
}

fn load_config(path: &Path) -> anyhow::Result<PipelineConfig> {
    PipelineConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

/// Make a run directory usable by a single-stage command: create it and
/// pin the resolved config, warning when it already holds a different one.
fn prepare_dir(config: &PipelineConfig, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(pipeline::CONFIG_FILE);
    let resolved = config.resolved_toml()?;
    match fs::read_to_string(&path) {
        Ok(existing) if existing != resolved => {
            eprintln!(
                "warning: {} was produced by a different config; this directory now mixes runs",
                path.display()
            );
        }
        Ok(_) => {}
        Err(_) => fs::write(&path, resolved).with_context(|| format!("writing {}", path.display()))?,
    }
    Ok(())
}

fn default_run_dir(config: &PipelineConfig) -> anyhow::Result<PathBuf> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .context("system clock is before the unix epoch")?
        .as_secs();
    let hash = config_hash(&config.resolved_toml()?);
    Ok(PathBuf::from("runs").join(format!("run-{secs}-{hash}")))
}

fn main() -> anyhow::Result<()> {
    let matches = command_with_config_help().get_matches();
    let cli = Cli::from_arg_matches(&matches)?;

    match cli.command {
        Cmd::Run { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let dir = match out {
                Some(dir) => dir,
                None => default_run_dir(&cfg)?,
            };
            pipeline::run_pipeline(&cfg, &dir)?;
            println!("ok: {}", dir.display());
        }
        Cmd::Simulate { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            prepare_dir(&cfg, &out)?;
            pipeline::stage_simulate(&cfg, &out)?;
            println!("ok: {}", out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            prepare_dir(&cfg, &out)?;
            pipeline::stage_train(&cfg, &out)?;
            println!("ok: {}", out.display());
        }
        Cmd::BuildIndex { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            prepare_dir(&cfg, &out)?;
            pipeline::stage_index(&cfg, &out)?;
            println!("ok: {}", out.display());
        }
        Cmd::Eval { config, out, condition } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            prepare_dir(&cfg, &out)?;
            let outcome = pipeline::stage_eval(&cfg, &out, condition.as_deref())?;
            for &(k, rate) in &outcome.hit_rates {
                println!("hit_rate@{k}\t{rate:.6}");
            }
            println!(
                "oracle_watch@{}\t{:.6}\t(se {:.6}, n {})",
                cfg.eval.oracle_k, outcome.mean_oracle_watch, outcome.oracle_se, outcome.n
            );
        }
        Cmd::Sweep { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            prepare_dir(&cfg, &out)?;
            let rows = pipeline::stage_sweep(&cfg, &out)?;
            if rows.is_empty() {
                println!("sweep not applicable: the {} variant takes no condition input", cfg.variant);
            } else {
                for row in rows {
                    println!(
                        "condition {:.3}\toracle_watch {:.6}\t(se {:.6}, n {})",
                        row.condition, row.mean_oracle_watch, row.oracle_se, row.n
                    );
                }
            }
        }
        Cmd::Report { config, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            prepare_dir(&cfg, &out)?;
            pipeline::stage_report(&cfg, &out)?;
            println!("ok: {}", out.join(pipeline::REPORT_FILE).display());
        }
    }
    Ok(())
}
