//! Experiment configuration, execution and metrics output.
//!
//! Config files are flat TOML key/value lists; every key is optional and
//! unknown keys are rejected. A run trains every (mode, seed) pair and writes
//! one CSV row per round. Sweeps vary one agent/network parameter and share
//! seeds across values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, EpsilonSchedule};
use crate::env::EnvConfig;
use crate::federation::{
    run_training, run_training_with, FedConfig, FedError, TrainingConfig, TrainingMode,
};
use crate::neural::{save_checkpoint, LayerSpec, BASE_HIDDEN, STACK_BLOCK};
use crate::subsolvers::{RadioParams, ServerParams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read config {path}: {source}")]
    MissingConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown config key(s): {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid value for `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("io error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("malformed metrics at line {line}: {msg}")]
    Metrics { line: u64, msg: String },
    #[error(transparent)]
    Training(#[from] FedError),
}

fn invalid(field: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// On-disk form of the configuration. Counts are signed so that negative
/// values reach validation and get reported by field name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    n_devices: i64,
    n_selected: i64,
    n_rounds: i64,
    modes: Vec<String>,
    seed: u64,
    n_seeds: i64,
    smoothing_window: i64,
    out_dir: String,

    hidden: Vec<i64>,
    gamma: f64,
    batch_size: i64,
    f_update: i64,
    epsilon_start: f64,
    epsilon_decay: f64,
    epsilon_min: f64,
    epsilon_decay_per: String,
    memory_capacity: i64,
    learning_rate: f64,

    queue_len: i64,
    max_steps: i64,
    bits_lo: f64,
    bits_hi: f64,
    cycles_per_bit_lo: f64,
    cycles_per_bit_hi: f64,
    deadline_lo: f64,
    deadline_hi: f64,
    gain_at_1m: f64,
    path_loss_exp: f64,
    distance_lo: f64,
    distance_hi: f64,
    capacity_jitter: f64,
    f_max: f64,
    p_max: f64,
    e_max: f64,
    kappa: f64,
    lambda_weight: f64,
    penalty_factor: f64,
    bandwidth_hz: f64,
    noise_w: f64,
    f_edge: f64,
    f_cloud: f64,
    psi_s: f64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile::from(&ExperimentConfig::default())
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub hidden: Vec<usize>,
    pub n_selected: usize,
    pub n_rounds: usize,
    pub modes: Vec<TrainingMode>,
    /// First seed; seeds are `seed, seed + 1, …`.
    pub seed: u64,
    pub n_seeds: usize,
    pub smoothing_window: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// Full-scale network: 100 devices, 20 selected per round.
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            hidden: BASE_HIDDEN.to_vec(),
            n_selected: 20,
            n_rounds: 200,
            modes: vec![TrainingMode::FedDdqn],
            seed: 1,
            n_seeds: 1,
            smoothing_window: 10,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: 20 devices, 5 selected, 60 rounds, 5 seeds.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.env.n_devices = 20;
        c.n_selected = 5;
        c.n_rounds = 60;
        c.n_seeds = 5;
        c
    }

    pub fn n_devices(&self) -> usize {
        self.env.n_devices
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |k| self.seed.wrapping_add(k))
    }

    pub fn layers(&self) -> Result<LayerSpec, HarnessError> {
        LayerSpec::offloading(&self.hidden).map_err(|e| invalid("hidden", e.to_string()))
    }

    pub fn training_config(
        &self,
        mode: TrainingMode,
        seed: u64,
    ) -> Result<TrainingConfig, HarnessError> {
        let mut agent = self.agent.clone();
        agent.target_mode = mode.target_mode();
        Ok(TrainingConfig {
            env: self.env.clone(),
            agent,
            layers: self.layers()?,
            fed: FedConfig {
                n_devices: self.env.n_devices,
                n_selected: self.n_selected,
                n_rounds: self.n_rounds,
                mode,
            },
            seed,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.modes.is_empty() {
            return Err(invalid("modes", "at least one mode is required"));
        }
        if self.n_seeds == 0 {
            return Err(invalid("n_seeds", "must be at least 1"));
        }
        if self.smoothing_window == 0 {
            return Err(invalid("smoothing_window", "must be at least 1"));
        }
        if self.n_selected == 0 || self.n_selected > self.env.n_devices {
            return Err(invalid(
                "n_selected",
                format!(
                    "must be in 1..={}, got {}",
                    self.env.n_devices, self.n_selected
                ),
            ));
        }
        if self.n_rounds == 0 {
            return Err(invalid("n_rounds", "must be at least 1"));
        }
        self.layers()?;
        self.agent.validate().map_err(|m| invalid("agent", m))?;
        self.env
            .validate()
            .map_err(|e| invalid("env", e.to_string()))?;
        Ok(())
    }

    /// Parses a config file body. Empty input yields the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))?;
        let known = toml::Table::try_from(ConfigFile::default()).expect("config serializes");
        let unknown: Vec<String> = table
            .keys()
            .filter(|k| !known.contains_key(*k))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(HarnessError::UnknownKeys(unknown));
        }
        let file: ConfigFile = table
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))?;
        let config = ExperimentConfig::try_from(file)?;
        config.validate()?;
        Ok(config)
    }

    /// Flat TOML echo of the effective configuration.
    pub fn to_toml(&self) -> String {
        let header =
            "# Effective configuration. Physical defaults are invented values, not measurements.\n";
        format!(
            "{header}{}",
            toml::to_string(&ConfigFile::from(self)).expect("config serializes")
        )
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("effective_config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

fn count(field: &str, v: i64, min: i64) -> Result<usize, HarnessError> {
    if v < min {
        return Err(invalid(field, format!("must be at least {min}, got {v}")));
    }
    usize::try_from(v).map_err(|_| invalid(field, format!("out of range: {v}")))
}

impl TryFrom<ConfigFile> for ExperimentConfig {
    type Error = HarnessError;

    fn try_from(f: ConfigFile) -> Result<Self, HarnessError> {
        let modes = f
            .modes
            .iter()
            .map(|m| m.parse::<TrainingMode>().map_err(|e| invalid("modes", e)))
            .collect::<Result<Vec<_>, _>>()?;
        let hidden = f
            .hidden
            .iter()
            .map(|&w| count("hidden", w, 1))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            env: EnvConfig {
                n_devices: count("n_devices", f.n_devices, 1)?,
                queue_len: count("queue_len", f.queue_len, 0)?,
                max_steps: count("max_steps", f.max_steps, 1)?,
                bits_lo: f.bits_lo,
                bits_hi: f.bits_hi,
                cycles_per_bit_lo: f.cycles_per_bit_lo,
                cycles_per_bit_hi: f.cycles_per_bit_hi,
                deadline_lo: f.deadline_lo,
                deadline_hi: f.deadline_hi,
                gain_at_1m: f.gain_at_1m,
                path_loss_exp: f.path_loss_exp,
                distance_lo: f.distance_lo,
                distance_hi: f.distance_hi,
                capacity_jitter: f.capacity_jitter,
                f_max: f.f_max,
                p_max: f.p_max,
                e_max: f.e_max,
                kappa: f.kappa,
                lambda_weight: f.lambda_weight,
                penalty_factor: f.penalty_factor,
                radio: RadioParams {
                    bandwidth_hz: f.bandwidth_hz,
                    noise_w: f.noise_w,
                },
                servers: ServerParams {
                    f_edge: f.f_edge,
                    f_cloud: f.f_cloud,
                    psi_s: f.psi_s,
                },
            },
            agent: AgentConfig {
                gamma: f.gamma,
                batch_size: count("batch_size", f.batch_size, 1)?,
                f_update: count("f_update", f.f_update, 1)?,
                epsilon: EpsilonSchedule {
                    start: f.epsilon_start,
                    decay: f.epsilon_decay,
                    min: f.epsilon_min,
                    unit: f
                        .epsilon_decay_per
                        .parse()
                        .map_err(|e: String| invalid("epsilon_decay_per", e))?,
                },
                memory_capacity: count("memory_capacity", f.memory_capacity, 1)?,
                learning_rate: f.learning_rate,
                target_mode: crate::agent::TargetMode::Ddqn,
            },
            hidden,
            n_selected: count("n_selected", f.n_selected, 1)?,
            n_rounds: count("n_rounds", f.n_rounds, 1)?,
            modes,
            seed: f.seed,
            n_seeds: count("n_seeds", f.n_seeds, 1)?,
            smoothing_window: count("smoothing_window", f.smoothing_window, 1)?,
            out_dir: PathBuf::from(f.out_dir),
        })
    }
}

impl From<&ExperimentConfig> for ConfigFile {
    fn from(c: &ExperimentConfig) -> Self {
        let e = &c.env;
        let a = &c.agent;
        Self {
            n_devices: e.n_devices as i64,
            n_selected: c.n_selected as i64,
            n_rounds: c.n_rounds as i64,
            modes: c.modes.iter().map(ToString::to_string).collect(),
            seed: c.seed,
            n_seeds: c.n_seeds as i64,
            smoothing_window: c.smoothing_window as i64,
            out_dir: c.out_dir.to_string_lossy().into_owned(),
            hidden: c.hidden.iter().map(|&w| w as i64).collect(),
            gamma: a.gamma,
            batch_size: a.batch_size as i64,
            f_update: a.f_update as i64,
            epsilon_start: a.epsilon.start,
            epsilon_decay: a.epsilon.decay,
            epsilon_min: a.epsilon.min,
            epsilon_decay_per: a.epsilon.unit.to_string(),
            memory_capacity: a.memory_capacity as i64,
            learning_rate: a.learning_rate,
            queue_len: e.queue_len as i64,
            max_steps: e.max_steps as i64,
            bits_lo: e.bits_lo,
            bits_hi: e.bits_hi,
            cycles_per_bit_lo: e.cycles_per_bit_lo,
            cycles_per_bit_hi: e.cycles_per_bit_hi,
            deadline_lo: e.deadline_lo,
            deadline_hi: e.deadline_hi,
            gain_at_1m: e.gain_at_1m,
            path_loss_exp: e.path_loss_exp,
            distance_lo: e.distance_lo,
            distance_hi: e.distance_hi,
            capacity_jitter: e.capacity_jitter,
            f_max: e.f_max,
            p_max: e.p_max,
            e_max: e.e_max,
            kappa: e.kappa,
            lambda_weight: e.lambda_weight,
            penalty_factor: e.penalty_factor,
            bandwidth_hz: e.radio.bandwidth_hz,
            noise_w: e.radio.noise_w,
            f_edge: e.servers.f_edge,
            f_cloud: e.servers.f_cloud,
            psi_s: e.servers.psi_s,
        }
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::MissingConfig {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::parse(&text)
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SweepVar {
    BatchSize,
    Architecture,
    FUpdate,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::BatchSize => "batch_size",
            SweepVar::Architecture => "architecture",
            SweepVar::FUpdate => "f_update",
        }
    }

    /// Returns a copy of `base` with this variable set to `value`.
    ///
    /// Architecture values are either a count of `[16, 32, 32]` blocks
    /// stacked on the base network, or an explicit dash-separated list of
    /// hidden widths such as `30-64`.
    pub fn apply(
        self,
        base: &ExperimentConfig,
        value: &str,
    ) -> Result<ExperimentConfig, HarnessError> {
        let mut c = base.clone();
        let positive = |v: &str| -> Result<usize, HarnessError> {
            match v.trim().parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(invalid(
                    self.name(),
                    format!("expected a positive integer, got {v:?}"),
                )),
            }
        };
        match self {
            SweepVar::BatchSize => {
                c.agent.batch_size = positive(value)?;
                c.agent.memory_capacity = c.agent.memory_capacity.max(c.agent.batch_size);
            }
            SweepVar::FUpdate => c.agent.f_update = positive(value)?,
            SweepVar::Architecture => {
                let v = value.trim();
                c.hidden = if let Ok(blocks) = v.parse::<usize>() {
                    let mut h = BASE_HIDDEN.to_vec();
                    for _ in 0..blocks {
                        h.extend_from_slice(&STACK_BLOCK);
                    }
                    h
                } else {
                    v.split('-').map(positive).collect::<Result<Vec<_>, _>>()?
                };
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepVar {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch_size" => Ok(SweepVar::BatchSize),
            "architecture" => Ok(SweepVar::Architecture),
            "f_update" => Ok(SweepVar::FUpdate),
            other => Err(invalid(
                "sweep variable",
                format!("{other:?} is not one of batch_size, architecture, f_update"),
            )),
        }
    }
}

pub const NO_SWEEP: &str = "none";
pub const NO_SWEEP_VALUE: &str = "-";

/// One CSV row: a single round of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub mode: String,
    pub seed: u64,
    pub sweep_var: String,
    pub sweep_value: String,
    pub mean_cost: f64,
    pub smoothed_cost: f64,
}

/// Trailing moving average; the window is clipped at the start.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// First 1-based round after which the curve stays within `rel_tol` of its
/// final value.
pub fn settling_round(curve: &[f64], rel_tol: f64) -> usize {
    let Some(&last) = curve.last() else {
        return 0;
    };
    let band = rel_tol * last.abs();
    let outside = curve.iter().rposition(|v| (v - last).abs() > band);
    outside.map_or(1, |i| i + 2)
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-round mean costs of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurve {
    pub mode: TrainingMode,
    pub seed: u64,
    pub costs: Vec<f64>,
}

/// Trains every (mode, seed) pair of `config`, in parallel, returning curves
/// in (mode, seed) order.
pub fn run_curves(config: &ExperimentConfig) -> Result<Vec<RunCurve>, HarnessError> {
    run_curves_with(config, None)
}

/// File holding the global model of one run after `round` (0-based).
pub fn checkpoint_path(dir: &Path, mode: TrainingMode, seed: u64, round: usize) -> PathBuf {
    dir.join(format!("{mode}_seed{seed}_round{:04}.txt", round + 1))
}

/// [`run_curves`], optionally saving the global model after every round
/// into `checkpoint_dir`.
pub fn run_curves_with(
    config: &ExperimentConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<RunCurve>, HarnessError> {
    config.validate()?;
    let jobs: Vec<(TrainingMode, u64)> = config
        .modes
        .iter()
        .flat_map(|&m| config.seeds().map(move |s| (m, s)))
        .collect();
    jobs.par_iter()
        .map(|&(mode, seed)| {
            let tc = config.training_config(mode, seed)?;
            let reports = match checkpoint_dir {
                None => run_training(&tc)?,
                Some(dir) => run_training_with(&tc, |report, global| {
                    save_checkpoint(global, &checkpoint_path(dir, mode, seed, report.round))?;
                    Ok(())
                })?,
            };
            Ok(RunCurve {
                mode,
                seed,
                costs: reports.iter().map(|r| r.mean_cost()).collect(),
            })
        })
        .collect()
}

fn curves_to_rows(
    curves: &[RunCurve],
    window: usize,
    sweep_var: &str,
    sweep_value: &str,
) -> Vec<MetricsRow> {
    curves
        .iter()
        .flat_map(|c| {
            let smoothed = smooth(&c.costs, window);
            c.costs
                .iter()
                .zip(smoothed)
                .enumerate()
                .map(move |(r, (&mean_cost, smoothed_cost))| MetricsRow {
                    round: r + 1,
                    mode: c.mode.to_string(),
                    seed: c.seed,
                    sweep_var: sweep_var.to_string(),
                    sweep_value: sweep_value.to_string(),
                    mean_cost,
                    smoothed_cost,
                })
        })
        .collect()
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let expected = [
        "round",
        "mode",
        "seed",
        "sweep_var",
        "sweep_value",
        "mean_cost",
        "smoothed_cost",
    ];
    let headers = r.headers().map_err(|e| HarnessError::Metrics {
        line: 1,
        msg: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(HarnessError::Metrics {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<MetricsRow>() {
        let row = rec.map_err(|e| HarnessError::Metrics {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Runs every mode and seed of `config` and writes `metrics.csv` plus the
/// config echo into `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<MetricsRow>, HarnessError> {
    run_experiment_with(config, out_dir, false)
}

/// [`run_experiment`], optionally checkpointing every round's global model
/// under `out_dir/checkpoints`.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    out_dir: &Path,
    checkpoints: bool,
) -> Result<Vec<MetricsRow>, HarnessError> {
    let dir = out_dir.join("checkpoints");
    if checkpoints {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let curves = run_curves_with(config, checkpoints.then_some(dir.as_path()))?;
    let rows = curves_to_rows(&curves, config.smoothing_window, NO_SWEEP, NO_SWEEP_VALUE);
    config.write_echo(out_dir)?;
    write_metrics(&rows, &out_dir.join("metrics.csv"))?;
    Ok(rows)
}

/// Runs the experiment once per sweep value and writes one combined
/// `metrics.csv`.
pub fn sweep(
    config: &ExperimentConfig,
    var: SweepVar,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<MetricsRow>, HarnessError> {
    if values.is_empty() {
        return Err(invalid(var.name(), "sweep needs at least one value"));
    }
    let variants = values
        .iter()
        .map(|v| var.apply(config, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (value, variant) in values.iter().zip(&variants) {
        let curves = run_curves(variant)?;
        rows.extend(curves_to_rows(
            &curves,
            variant.smoothing_window,
            var.name(),
            value.trim(),
        ));
    }
    config.write_echo(out_dir)?;
    let sweep_note = out_dir.join("sweep.txt");
    fs::write(
        &sweep_note,
        format!("{} = {}\n", var.name(), values.join(", ")),
    )
    .map_err(|e| io_err(&sweep_note, e))?;
    write_metrics(&rows, &out_dir.join("metrics.csv"))?;
    Ok(rows)
}

fn figure_file(sweep_var: &str) -> &'static str {
    match sweep_var {
        "architecture" => "fig2_architecture.csv",
        "batch_size" => "fig3_batch_size.csv",
        "f_update" => "fig4_f_update.csv",
        _ => "fig5_modes.csv",
    }
}

/// Splits a metrics file into one tidy `series,seed,round,smoothed_cost`
/// file per figure. Series are modes for plain runs and sweep values (prefixed
/// with the mode when several modes are present) for sweeps. Nothing is
/// written unless the whole input parses.
pub fn emit_plot_data(metrics: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    // Read raw records so smoothed values are copied verbatim.
    let mut reader = csv::Reader::from_path(metrics).map_err(|e| io_err(metrics, e))?;
    read_metrics(metrics)?;
    let mut figures: BTreeMap<&'static str, Vec<[String; 4]>> = BTreeMap::new();
    let mut modes_per_fig: BTreeMap<&'static str, std::collections::BTreeSet<String>> =
        BTreeMap::new();
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| HarnessError::Metrics {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let fig = figure_file(&rec[3]);
        modes_per_fig
            .entry(fig)
            .or_default()
            .insert(rec[1].to_string());
        records.push(rec);
    }
    if records.is_empty() {
        return Err(HarnessError::Metrics {
            line: 1,
            msg: "no metrics rows".into(),
        });
    }
    for rec in &records {
        let fig = figure_file(&rec[3]);
        let series = if &rec[3] == NO_SWEEP {
            rec[1].to_string()
        } else if modes_per_fig[fig].len() > 1 {
            format!("{}/{}", &rec[1], &rec[4])
        } else {
            rec[4].to_string()
        };
        figures.entry(fig).or_default().push([
            series,
            rec[2].to_string(),
            rec[0].to_string(),
            rec[6].to_string(),
        ]);
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();
    for (name, rows) in figures {
        let path = out_dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(["series", "seed", "round", "smoothed_cost"])
            .map_err(|e| io_err(&path, e))?;
        for r in rows {
            w.write_record(&r).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.n_devices(), 100);
        assert_eq!(c.n_selected, 20);
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn negative_count_names_field() {
        let err = ExperimentConfig::parse("n_devices = -1").unwrap_err();
        match err {
            HarnessError::Invalid { field, .. } => assert_eq!(field, "n_devices"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = ExperimentConfig::parse("n_devices = 4\nfoo = 1\nbar = 2").unwrap_err();
        match err {
            HarnessError::UnknownKeys(keys) => {
                assert!(keys.contains(&"foo".to_string()));
                assert!(keys.contains(&"bar".to_string()));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert!(matches!(
            ExperimentConfig::parse("n_devices = = 3"),
            Err(HarnessError::Parse(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("n_devices = \"many\""),
            Err(HarnessError::Parse(_))
        ));
        assert!(matches!(
            load_config(Path::new("/nonexistent/cfg.toml")),
            Err(HarnessError::MissingConfig { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("modes = [\"central\"]"),
            Err(HarnessError::Invalid { .. })
        ));
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let mut c = ExperimentConfig::desk();
        c.modes = TrainingMode::ALL.to_vec();
        c.agent.batch_size = 10;
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn smoothing_window_boundary() {
        let raw = [4.0, 2.0, 6.0, 8.0];
        let s = smooth(&raw, 2);
        assert_eq!(s, vec![4.0, 3.0, 4.0, 7.0]);
        assert_eq!(smooth(&raw, 10)[0], 4.0);
    }

    #[test]
    fn settling_round_definition() {
        assert_eq!(settling_round(&[10.0, 5.0, 2.05, 2.0], 0.1), 3);
        assert_eq!(settling_round(&[2.0, 2.0], 0.1), 1);
        // Dipping inside the band and leaving again does not count.
        assert_eq!(settling_round(&[2.0, 5.0, 2.0, 2.0], 0.1), 3);
    }

    #[test]
    fn sweep_values_are_validated() {
        let base = ExperimentConfig::desk();
        assert!(SweepVar::BatchSize.apply(&base, "0").is_err());
        assert!(SweepVar::FUpdate.apply(&base, "x").is_err());
        assert_eq!(
            SweepVar::BatchSize
                .apply(&base, "10")
                .unwrap()
                .agent
                .batch_size,
            10
        );
        let deep = SweepVar::Architecture.apply(&base, "2").unwrap();
        assert_eq!(deep.hidden.len(), 11);
        let shallow = SweepVar::Architecture.apply(&base, "30-64").unwrap();
        assert_eq!(shallow.hidden, vec![30, 64]);
        assert!("gamma".parse::<SweepVar>().is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
