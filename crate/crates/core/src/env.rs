//! Per-device offloading environment.
//!
//! Each device owns a FIFO queue of tasks, a fading channel to the base
//! station and a private random stream. A step solves the resource
//! allocation for the head task under the chosen action; a feasible task
//! leaves the queue, an infeasible one stays at the head and the step is
//! charged a penalty. The channel is redrawn after every step.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::rng::{stream_rng, Stream, StreamRng};
use crate::subsolvers::{
    solve_local_cpu, solve_transmit_power, RadioParams, ServerParams, SolverResult,
};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("device {device} does not exist (have {count})")]
    UnknownDevice { device: usize, count: usize },
    #[error("episode of device {0} is over; reset before stepping")]
    EpisodeDone(usize),
}

/// One computation task: size, CPU demand and completion deadline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub size_bits: f64,
    pub cpu_cycles: f64,
    pub deadline_s: f64,
}

/// Static per-device limits and coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceProfile {
    /// Local CPU capacity, cycles/s.
    pub f_max: f64,
    /// Energy cap per step, joules.
    pub e_max: f64,
    /// Transmit power cap, watts.
    pub p_max: f64,
    /// Effective switched capacitance of the chip.
    pub kappa: f64,
    /// Seconds charged per joule.
    pub lambda_weight: f64,
    pub distance_m: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("f_max", self.f_max),
            ("e_max", self.e_max),
            ("p_max", self.p_max),
            ("kappa", self.kappa),
            ("distance_m", self.distance_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return Err(EnvError::Config(format!(
                "lambda_weight must be nonnegative, got {}",
                self.lambda_weight
            )));
        }
        Ok(())
    }

    /// Selection metric `d·P_max / F_max`.
    pub fn heterogeneity_metric(&self) -> f64 {
        self.distance_m * self.p_max / self.f_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    /// Linear power gain between device and base station.
    pub path_gain: f64,
    /// Id of the random stream the gain was drawn from (the device id).
    pub stream: usize,
}

/// The three mutually exclusive offloading decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Local,
    Edge,
    Cloud,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Local, Action::Edge, Action::Cloud];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Local => "local",
            Action::Edge => "edge",
            Action::Cloud => "cloud",
        })
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Action::Local),
            "edge" => Ok(Action::Edge),
            "cloud" => Ok(Action::Cloud),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

/// Number of state features seen by an agent.
pub const STATE_DIM: usize = 6;

/// What an agent observes about its device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub queue_len: usize,
    pub path_gain: f64,
    pub task_bits: f64,
    pub task_cycles: f64,
    pub e_max: f64,
    pub f_max: f64,
    /// Features scaled by the config references, in the field order above.
    pub features: [f64; STATE_DIM],
}

impl Observation {
    pub fn is_terminal(&self) -> bool {
        self.queue_len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub action: Action,
    /// `delay + λ·energy` when feasible, the penalty otherwise.
    pub cost: f64,
    pub delay_s: f64,
    pub energy_j: f64,
    pub feasible: bool,
    /// Optimal CPU frequency (local) or transmit power (offload).
    pub resource: Option<f64>,
}

/// Environment parameters. Defaults are desk-scale physics with a 1 MHz
/// uplink, 10 GHz edge and 100 GHz cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub n_devices: usize,
    /// Tasks queued at the start of every episode.
    pub queue_len: usize,
    /// Step cap per episode.
    pub max_steps: usize,
    pub bits_lo: f64,
    pub bits_hi: f64,
    pub cycles_per_bit_lo: f64,
    pub cycles_per_bit_hi: f64,
    pub deadline_lo: f64,
    pub deadline_hi: f64,
    /// Path gain at 1 m.
    pub gain_at_1m: f64,
    pub path_loss_exp: f64,
    pub distance_lo: f64,
    pub distance_hi: f64,
    /// Relative jitter applied to `f_max` and `e_max` across devices.
    pub capacity_jitter: f64,
    pub f_max: f64,
    pub p_max: f64,
    pub e_max: f64,
    pub kappa: f64,
    pub lambda_weight: f64,
    /// Infeasible-step cost is `penalty_factor·(deadline + λ·E_max)`.
    pub penalty_factor: f64,
    pub radio: RadioParams,
    pub servers: ServerParams,
}

/// 23 dBm in watts.
pub const DEFAULT_P_MAX: f64 = 0.199_526_231_496_887_96;

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_devices: 100,
            queue_len: 30,
            max_steps: 200,
            bits_lo: 1e5,
            bits_hi: 1e6,
            cycles_per_bit_lo: 100.0,
            cycles_per_bit_hi: 5000.0,
            deadline_lo: 0.5,
            deadline_hi: 5.0,
            gain_at_1m: 1e-3,
            path_loss_exp: 3.0,
            distance_lo: 10.0,
            distance_hi: 200.0,
            capacity_jitter: 0.3,
            f_max: 1e9,
            p_max: DEFAULT_P_MAX,
            e_max: DEFAULT_P_MAX * 1.0,
            kappa: 1e-27,
            lambda_weight: 1.0,
            penalty_factor: 2.0,
            radio: RadioParams::default(),
            servers: ServerParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Config(m));
        if self.n_devices == 0 {
            return err("n_devices must be at least 1".into());
        }
        if self.max_steps == 0 {
            return err("max_steps must be at least 1".into());
        }
        let positive = [
            ("bits_lo", self.bits_lo),
            ("cycles_per_bit_lo", self.cycles_per_bit_lo),
            ("deadline_lo", self.deadline_lo),
            ("gain_at_1m", self.gain_at_1m),
            ("path_loss_exp", self.path_loss_exp),
            ("distance_lo", self.distance_lo),
            ("f_max", self.f_max),
            ("p_max", self.p_max),
            ("e_max", self.e_max),
            ("kappa", self.kappa),
            ("penalty_factor", self.penalty_factor),
            ("bandwidth_hz", self.radio.bandwidth_hz),
            ("noise_w", self.radio.noise_w),
            ("f_edge", self.servers.f_edge),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        let ranges = [
            ("bits", self.bits_lo, self.bits_hi),
            (
                "cycles_per_bit",
                self.cycles_per_bit_lo,
                self.cycles_per_bit_hi,
            ),
            ("deadline", self.deadline_lo, self.deadline_hi),
            ("distance", self.distance_lo, self.distance_hi),
        ];
        for (name, lo, hi) in ranges {
            if !(hi >= lo && hi.is_finite()) {
                return err(format!(
                    "{name}_hi ({hi}) must be at least {name}_lo ({lo})"
                ));
            }
        }
        if !(self.capacity_jitter >= 0.0 && self.capacity_jitter < 1.0) {
            return err(format!(
                "capacity_jitter must be in [0, 1), got {}",
                self.capacity_jitter
            ));
        }
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return err(format!(
                "lambda_weight must be nonnegative, got {}",
                self.lambda_weight
            ));
        }
        if !(self.servers.f_cloud >= self.servers.f_edge && self.servers.f_cloud.is_finite()) {
            return err("f_cloud must be at least f_edge".into());
        }
        if !(self.servers.psi_s >= 0.0 && self.servers.psi_s.is_finite()) {
            return err(format!(
                "psi_s must be nonnegative, got {}",
                self.servers.psi_s
            ));
        }
        Ok(())
    }

    /// Reference values used to scale observation features.
    pub fn feature_scale(&self) -> [f64; STATE_DIM] {
        [
            self.queue_len.max(1) as f64,
            self.gain_at_1m * self.distance_lo.powf(-self.path_loss_exp),
            self.bits_hi,
            self.cycles_per_bit_hi * self.bits_hi,
            self.e_max,
            self.f_max,
        ]
    }

    /// Draws heterogeneous device profiles from the profile stream of `seed`.
    pub fn draw_profiles(&self, seed: u64) -> Vec<DeviceProfile> {
        let mut rng = stream_rng(seed, Stream::Profiles);
        let j = self.capacity_jitter;
        (0..self.n_devices)
            .map(|_| {
                let distance_m = uniform(&mut rng, self.distance_lo, self.distance_hi);
                let f_scale = uniform(&mut rng, 1.0 - j, 1.0 + j);
                let e_scale = uniform(&mut rng, 1.0 - j, 1.0 + j);
                DeviceProfile {
                    f_max: self.f_max * f_scale,
                    e_max: self.e_max * e_scale,
                    p_max: self.p_max,
                    kappa: self.kappa,
                    lambda_weight: self.lambda_weight,
                    distance_m,
                }
            })
            .collect()
    }
}

fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// State machine of one device. Devices share nothing mutable, so they can
/// be stepped from different threads.
#[derive(Debug, Clone)]
pub struct DeviceEnv {
    id: usize,
    profile: DeviceProfile,
    config: Arc<EnvConfig>,
    scale: [f64; STATE_DIM],
    seed: u64,
    episode: u64,
    rng: StreamRng,
    queue: VecDeque<TaskSpec>,
    channel: ChannelState,
    t: usize,
    done: bool,
}

impl DeviceEnv {
    pub fn new(id: usize, profile: DeviceProfile, config: Arc<EnvConfig>, seed: u64) -> Self {
        let scale = config.feature_scale();
        let mut env = Self {
            id,
            profile,
            scale,
            seed,
            episode: 0,
            rng: stream_rng(seed, Stream::Episode(id, 0)),
            queue: VecDeque::new(),
            channel: ChannelState {
                path_gain: 0.0,
                stream: id,
            },
            t: 0,
            done: true,
            config,
        };
        env.reset_episode();
        env
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn channel(&self) -> ChannelState {
        self.channel
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn queue(&self) -> impl ExactSizeIterator<Item = &TaskSpec> {
        self.queue.iter()
    }

    /// Episodes started so far, including the current one.
    pub fn episodes(&self) -> u64 {
        self.episode
    }

    /// Refills the queue, redraws the channel and rewinds the clock. Each
    /// episode draws from its own stream.
    pub fn reset_episode(&mut self) -> Observation {
        self.rng = stream_rng(self.seed, Stream::Episode(self.id, self.episode));
        self.episode += 1;
        self.queue.clear();
        for _ in 0..self.config.queue_len {
            let task = self.generate_task();
            self.queue.push_back(task);
        }
        self.update_channel();
        self.t = 0;
        self.done = self.queue.is_empty();
        self.observe()
    }

    /// Draws a task from the configured uniform bounds.
    pub fn generate_task(&mut self) -> TaskSpec {
        let c = &self.config;
        let size_bits = uniform(&mut self.rng, c.bits_lo, c.bits_hi);
        let cpb = uniform(&mut self.rng, c.cycles_per_bit_lo, c.cycles_per_bit_hi);
        let deadline_s = uniform(&mut self.rng, c.deadline_lo, c.deadline_hi);
        TaskSpec {
            size_bits,
            cpu_cycles: cpb * size_bits,
            deadline_s,
        }
    }

    /// Redraws the gain as distance path loss times exponential(1) fading.
    pub fn update_channel(&mut self) -> ChannelState {
        let fading: f64 = Exp1.sample(&mut self.rng);
        self.channel.path_gain = path_gain(
            self.config.gain_at_1m,
            self.profile.distance_m,
            self.config.path_loss_exp,
            fading,
        );
        self.channel
    }

    pub fn observe(&self) -> Observation {
        let (task_bits, task_cycles) = self
            .queue
            .front()
            .map_or((0.0, 0.0), |t| (t.size_bits, t.cpu_cycles));
        let raw = [
            self.queue.len() as f64,
            self.channel.path_gain,
            task_bits,
            task_cycles,
            self.profile.e_max,
            self.profile.f_max,
        ];
        let mut features = [0.0; STATE_DIM];
        for (f, (r, s)) in features.iter_mut().zip(raw.iter().zip(&self.scale)) {
            *f = r / s;
        }
        Observation {
            queue_len: self.queue.len(),
            path_gain: self.channel.path_gain,
            task_bits,
            task_cycles,
            e_max: self.profile.e_max,
            f_max: self.profile.f_max,
            features,
        }
    }

    /// Cost charged for an infeasible decision on `task`.
    pub fn penalty(&self, task: &TaskSpec) -> f64 {
        self.config.penalty_factor
            * (task.deadline_s + self.profile.lambda_weight * self.profile.e_max)
    }

    /// Evaluates `action` on the head task without changing any state.
    pub fn evaluate(&self, action: Action) -> Option<StepOutcome> {
        let task = self.queue.front()?;
        Some(self.evaluate_task(task, action))
    }

    fn evaluate_task(&self, task: &TaskSpec, action: Action) -> StepOutcome {
        let result = match action {
            Action::Local => solve_local_cpu(task, &self.profile),
            Action::Edge | Action::Cloud => solve_transmit_power(
                task,
                action,
                self.channel.path_gain,
                &self.profile,
                &self.config.radio,
                &self.config.servers,
            )
            .expect("offloading action with positive gain"),
        };
        match result {
            SolverResult::Feasible(a) => StepOutcome {
                action,
                cost: a.cost,
                delay_s: a.delay_s,
                energy_j: a.energy_j,
                feasible: true,
                resource: Some(a.optimizer),
            },
            SolverResult::Infeasible => StepOutcome {
                action,
                cost: self.penalty(task),
                delay_s: f64::NAN,
                energy_j: f64::NAN,
                feasible: false,
                resource: None,
            },
        }
    }

    /// Applies `action` to the head task and advances one time step.
    pub fn step(&mut self, action: Action) -> Result<(StepOutcome, Observation, bool), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone(self.id));
        }
        let task = *self.queue.front().ok_or(EnvError::EpisodeDone(self.id))?;
        let outcome = self.evaluate_task(&task, action);
        if outcome.feasible {
            self.queue.pop_front();
        }
        self.t += 1;
        self.update_channel();
        self.done = self.queue.is_empty() || self.t >= self.config.max_steps;
        Ok((outcome, self.observe(), self.done))
    }
}

/// `A·d^(−α)·g`.
pub fn path_gain(gain_at_1m: f64, distance_m: f64, exponent: f64, fading: f64) -> f64 {
    gain_at_1m * distance_m.powf(-exponent) * fading
}

/// All devices of one network.
#[derive(Debug, Clone)]
pub struct OffloadEnv {
    config: Arc<EnvConfig>,
    devices: Vec<DeviceEnv>,
}

impl OffloadEnv {
    /// Builds the network with profiles drawn from `seed` and starts the
    /// first episode on every device.
    pub fn reset(config: EnvConfig, seed: u64) -> Result<(Self, Vec<Observation>), EnvError> {
        config.validate()?;
        let profiles = config.draw_profiles(seed);
        Self::with_profiles(config, profiles, seed)
    }

    pub fn with_profiles(
        config: EnvConfig,
        profiles: Vec<DeviceProfile>,
        seed: u64,
    ) -> Result<(Self, Vec<Observation>), EnvError> {
        config.validate()?;
        if profiles.len() != config.n_devices {
            return Err(EnvError::Config(format!(
                "expected {} profiles, got {}",
                config.n_devices,
                profiles.len()
            )));
        }
        for p in &profiles {
            p.validate()?;
        }
        let config = Arc::new(config);
        let devices: Vec<DeviceEnv> = profiles
            .into_iter()
            .enumerate()
            .map(|(i, p)| DeviceEnv::new(i, p, Arc::clone(&config), seed))
            .collect();
        let obs = devices.iter().map(DeviceEnv::observe).collect();
        Ok((Self { config, devices }, obs))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn profiles(&self) -> Vec<DeviceProfile> {
        self.devices.iter().map(|d| d.profile).collect()
    }

    pub fn device(&self, id: usize) -> Result<&DeviceEnv, EnvError> {
        let count = self.devices.len();
        self.devices
            .get(id)
            .ok_or(EnvError::UnknownDevice { device: id, count })
    }

    pub fn device_mut(&mut self, id: usize) -> Result<&mut DeviceEnv, EnvError> {
        let count = self.devices.len();
        self.devices
            .get_mut(id)
            .ok_or(EnvError::UnknownDevice { device: id, count })
    }

    pub fn devices(&self) -> &[DeviceEnv] {
        &self.devices
    }

    pub fn into_devices(self) -> Vec<DeviceEnv> {
        self.devices
    }

    pub fn step(
        &mut self,
        device: usize,
        action: Action,
    ) -> Result<(StepOutcome, Observation, bool), EnvError> {
        self.device_mut(device)?.step(action)
    }

    pub fn update_channel(&mut self, device: usize) -> Result<ChannelState, EnvError> {
        Ok(self.device_mut(device)?.update_channel())
    }

    pub fn generate_task(&mut self, device: usize) -> Result<TaskSpec, EnvError> {
        Ok(self.device_mut(device)?.generate_task())
    }
}
