use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedq_core::harness::{
    emit_plot_data, load_config, median, run_experiment_with, smooth, sweep, ExperimentConfig,
    MetricsRow, SweepVar, NO_SWEEP_VALUE,
};
use fedq_core::TrainingMode;

/// Federated deep Q-learning for computation offloading.
#[derive(Debug, Parser)]
#[command(name = "fedq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured mode and seed and write metrics.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// Save the global model after every round under OUT/checkpoints.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Repeat the experiment for each value of one variable.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// batch_size, architecture or f_update.
        #[arg(long)]
        var: SweepVar,
        /// Comma-separated values, e.g. `10,30`. Architecture values are a
        /// number of stacked blocks or a dash-separated width list.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Split a metrics file into one tidy CSV per figure.
    PlotData {
        /// metrics.csv written by `run` or `sweep`.
        metrics: PathBuf,
        /// Output directory; defaults to the metrics file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; built-in full-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Training mode; repeat for several (overrides the config).
    #[arg(long = "mode")]
    modes: Vec<TrainingMode>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if !self.modes.is_empty() {
            config.modes = self.modes.clone();
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

/// Per-round mean costs of each seed, in file order.
type Runs = Vec<Vec<f64>>;

/// Final smoothed cost per (mode, sweep value), median over seeds.
fn summarize(rows: &[MetricsRow], window: usize) {
    let mut groups: BTreeMap<(String, String), Runs> = BTreeMap::new();
    for r in rows {
        let runs = groups
            .entry((r.mode.clone(), r.sweep_value.clone()))
            .or_default();
        if r.round == 1 {
            runs.push(Vec::new());
        }
        if let Some(run) = runs.last_mut() {
            run.push(r.mean_cost);
        }
    }
    for ((mode, value), runs) in groups {
        let mut finals: Vec<f64> = runs
            .iter()
            .filter_map(|c| smooth(c, window).last().copied())
            .collect();
        if finals.is_empty() {
            continue;
        }
        let label = if value == NO_SWEEP_VALUE {
            mode
        } else {
            format!("{mode} [{value}]")
        };
        println!(
            "  {label:<24} final smoothed cost {:.4} (median of {})",
            median(&mut finals),
            finals.len()
        );
    }
}

fn report_written(out: &Path, rows: usize) {
    println!("wrote {rows} rows to {}", out.join("metrics.csv").display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            common,
            checkpoints,
        } => {
            let config = common.resolve()?;
            let out = config.out_dir.clone();
            let rows = run_experiment_with(&config, &out, checkpoints)
                .with_context(|| format!("run into {}", out.display()))?;
            report_written(&out, rows.len());
            summarize(&rows, config.smoothing_window);
        }
        Command::Sweep {
            common,
            var,
            values,
        } => {
            let config = common.resolve()?;
            let out = config.out_dir.clone();
            let rows = sweep(&config, var, &values, &out)
                .with_context(|| format!("{} sweep into {}", var.name(), out.display()))?;
            report_written(&out, rows.len());
            summarize(&rows, config.smoothing_window);
        }
        Command::PlotData { metrics, out } => {
            let out = out.unwrap_or_else(|| {
                metrics
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
            });
            for path in emit_plot_data(&metrics, &out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
