//! Federated training loop.
//!
//! Every round: broadcast the global model to all devices, pick the
//! participating devices, let each participant run one episode of DDQN
//! training on its own queue, then average the participants' online
//! networks into the new global model.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, TargetMode, Transition};
use crate::env::{Action, DeviceEnv, DeviceProfile, EnvConfig, EnvError, OffloadEnv};
use crate::neural::{init_network, LayerSpec, NeuralError, ParamVector};
use crate::rng::{derive_seed, stream_rng, Stream, StreamRng};

#[derive(Debug, Error, PartialEq)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("cannot select {requested} of {available} devices")]
    Selection { requested: usize, available: usize },
    #[error("nothing to aggregate")]
    EmptyAggregate,
    #[error("parameter shapes differ between participants")]
    ShapeMismatch,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Which algorithm a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainingMode {
    /// Federated double DQN.
    FedDdqn,
    /// Federated DQN (target network both selects and evaluates).
    FedDqn,
    /// Every device trains its own DDQN; no selection, no aggregation.
    DistDdqn,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [
        TrainingMode::FedDdqn,
        TrainingMode::FedDqn,
        TrainingMode::DistDdqn,
    ];

    pub fn target_mode(self) -> TargetMode {
        match self {
            TrainingMode::FedDqn => TargetMode::Dqn,
            TrainingMode::FedDdqn | TrainingMode::DistDdqn => TargetMode::Ddqn,
        }
    }

    pub fn is_federated(self) -> bool {
        self != TrainingMode::DistDdqn
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::FedDdqn => "fed-ddqn",
            TrainingMode::FedDqn => "fed-dqn",
            TrainingMode::DistDdqn => "dist-ddqn",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fed-ddqn" => Ok(TrainingMode::FedDdqn),
            "fed-dqn" => Ok(TrainingMode::FedDqn),
            "dist-ddqn" => Ok(TrainingMode::DistDdqn),
            other => Err(format!(
                "unknown mode {other:?} (expected fed-ddqn, fed-dqn or dist-ddqn)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FedConfig {
    pub n_devices: usize,
    pub n_selected: usize,
    pub n_rounds: usize,
    pub mode: TrainingMode,
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.n_devices == 0 {
            return Err(FedError::Config("n_devices must be at least 1".into()));
        }
        if self.n_selected == 0 || self.n_selected > self.n_devices {
            return Err(FedError::Config(format!(
                "n_selected must be in 1..={}, got {}",
                self.n_devices, self.n_selected
            )));
        }
        if self.n_rounds == 0 {
            return Err(FedError::Config("n_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub layers: LayerSpec,
    pub fed: FedConfig,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        self.fed.validate()?;
        if self.env.n_devices != self.fed.n_devices {
            return Err(FedError::Config(format!(
                "environment has {} devices, federation expects {}",
                self.env.n_devices, self.fed.n_devices
            )));
        }
        self.env.validate()?;
        self.agent.validate().map_err(FedError::Config)?;
        let dims = (self.layers.inputs(), self.layers.outputs());
        if dims != (crate::env::STATE_DIM, Action::COUNT) {
            return Err(FedError::Config(format!(
                "network must map {} features to {} actions, got {:?}",
                crate::env::STATE_DIM,
                Action::COUNT,
                self.layers.sizes()
            )));
        }
        Ok(())
    }
}

/// Picks the `n_selected` devices whose `d·P_max/F_max` values deviate most
/// from the population mean; ties go to the lower id. The result is sorted
/// by descending deviation.
///
/// Greedily taking the largest deviations from the mean maximizes the
/// spread of the selected subset, which is what the heterogeneity criterion
/// asks for.
pub fn select_devices(
    profiles: &[DeviceProfile],
    n_selected: usize,
) -> Result<Vec<usize>, FedError> {
    if n_selected > profiles.len() {
        return Err(FedError::Selection {
            requested: n_selected,
            available: profiles.len(),
        });
    }
    let metric: Vec<f64> = profiles
        .iter()
        .map(DeviceProfile::heterogeneity_metric)
        .collect();
    let mean = metric.iter().sum::<f64>() / metric.len().max(1) as f64;
    let mut ids: Vec<usize> = (0..profiles.len()).collect();
    ids.sort_by(|&a, &b| {
        let da = (metric[a] - mean).abs();
        let db = (metric[b] - mean).abs();
        db.total_cmp(&da).then(a.cmp(&b))
    });
    ids.truncate(n_selected);
    Ok(ids)
}

/// Unweighted element-wise mean. Summation runs in slice order so results
/// are reproducible bit for bit.
pub fn aggregate_fedavg(params: &[&ParamVector]) -> Result<ParamVector, FedError> {
    let first = params.first().ok_or(FedError::EmptyAggregate)?;
    if params.iter().any(|p| p.spec() != first.spec()) {
        return Err(FedError::ShapeMismatch);
    }
    if params.len() == 1 {
        return Ok((*first).clone());
    }
    let k = params.len() as f64;
    let mut out = ParamVector::zeros(first.spec().clone());
    let mut column = Vec::with_capacity(params.len());
    for (j, o) in out.values_mut().iter_mut().enumerate() {
        column.clear();
        column.extend(params.iter().map(|p| p.values()[j]));
        // Summing in sorted order makes the result independent of device order.
        column.sort_unstable_by(f64::total_cmp);
        let mean = column.iter().sum::<f64>() / k;
        // Rounding can push the mean a hair outside the inputs' range.
        *o = mean.clamp(column[0], column[column.len() - 1]);
    }
    Ok(out)
}

/// Outcome of one federation round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    /// Devices that trained this round, in selection order.
    pub selected: Vec<usize>,
    /// Mean step cost of each selected device's episode.
    pub device_costs: Vec<f64>,
    pub steps: Vec<usize>,
    /// Fingerprint of the global model after the round.
    pub global_id: u64,
    pub wall_time: Duration,
}

impl RoundReport {
    pub fn mean_cost(&self) -> f64 {
        self.device_costs.iter().sum::<f64>() / self.device_costs.len() as f64
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RoundReport) -> bool {
        self.round == other.round
            && self.selected == other.selected
            && self.device_costs == other.device_costs
            && self.steps == other.steps
            && self.global_id == other.global_id
    }
}

/// One device together with its learner and exploration stream.
#[derive(Debug, Clone)]
pub struct Participant {
    pub env: DeviceEnv,
    pub agent: Agent,
    rng: StreamRng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub mean_cost: f64,
    pub steps: usize,
}

impl Participant {
    pub fn new(env: DeviceEnv, agent: Agent, seed: u64) -> Self {
        let rng = stream_rng(seed, Stream::Agent(env.id()));
        Self { env, agent, rng }
    }

    /// Runs one episode: interact, store, learn, until the queue empties or
    /// the step cap is hit.
    pub fn run_episode(&mut self) -> Result<EpisodeStats, FedError> {
        let mut obs = self.env.reset_episode();
        let mut total = 0.0;
        let mut steps = 0;
        while !self.env.is_done() {
            let state = obs.features;
            let a = self.agent.select_action(&state, &mut self.rng);
            let action = Action::from_index(a).expect("agent has one output per action");
            let (outcome, next, done) = self.env.step(action)?;
            self.agent.remember(Transition {
                state: state.to_vec(),
                action: a,
                cost: outcome.cost,
                next_state: next.features.to_vec(),
                done: next.is_terminal(),
            });
            self.agent.learn_step(&mut self.rng)?;
            total += outcome.cost;
            steps += 1;
            obs = next;
            if done {
                break;
            }
        }
        Ok(EpisodeStats {
            mean_cost: if steps > 0 { total / steps as f64 } else { 0.0 },
            steps,
        })
    }
}

/// A network of participants plus the global model.
#[derive(Debug, Clone)]
pub struct Federation {
    config: TrainingConfig,
    participants: Vec<Participant>,
    global: ParamVector,
    selected: Vec<usize>,
}

impl Federation {
    pub fn new(config: TrainingConfig) -> Result<Self, FedError> {
        config.validate()?;
        let (env, _) = OffloadEnv::reset(config.env.clone(), config.seed)?;
        let global = init_network(
            &config.layers,
            derive_seed(config.seed, Stream::NetworkInit),
        );
        let mut agent_cfg = config.agent.clone();
        agent_cfg.target_mode = config.fed.mode.target_mode();
        let profiles = env.profiles();
        let participants = env
            .into_devices()
            .into_iter()
            .map(|d| {
                Participant::new(
                    d,
                    Agent::new(agent_cfg.clone(), global.clone()),
                    config.seed,
                )
            })
            .collect();
        let selected = if config.fed.mode.is_federated() {
            select_devices(&profiles, config.fed.n_selected)?
        } else {
            (0..config.fed.n_devices).collect()
        };
        Ok(Self {
            config,
            participants,
            global,
            selected,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn participants(&self) -> &[Participant] {
        &self.participants
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Sets every agent's online and target networks to the global model.
    pub fn broadcast(&mut self) {
        let global = &self.global;
        for p in &mut self.participants {
            p.agent.load_global(global);
        }
    }

    /// One round. Federated modes broadcast, train the selected devices and
    /// aggregate; the distributed baseline trains every device on its own
    /// model and leaves the global model untouched.
    pub fn run_round(&mut self, round: usize) -> Result<RoundReport, FedError> {
        let start = Instant::now();
        let federated = self.config.fed.mode.is_federated();
        if federated {
            self.broadcast();
        }
        for p in &mut self.participants {
            p.agent.begin_round(round);
        }

        let selected = self.selected.clone();
        let mut chosen: Vec<&mut Participant> = {
            let mut slots: Vec<Option<&mut Participant>> =
                self.participants.iter_mut().map(Some).collect();
            selected
                .iter()
                .map(|&i| slots[i].take().expect("selected ids are distinct"))
                .collect()
        };
        let stats: Vec<EpisodeStats> = chosen
            .par_iter_mut()
            .map(|p| p.run_episode())
            .collect::<Result<_, _>>()?;

        if federated {
            let models: Vec<&ParamVector> = selected
                .iter()
                .map(|&i| self.participants[i].agent.online())
                .collect();
            self.global = aggregate_fedavg(&models)?;
        }

        Ok(RoundReport {
            round,
            device_costs: stats.iter().map(|s| s.mean_cost).collect(),
            steps: stats.iter().map(|s| s.steps).collect(),
            selected,
            global_id: self.global.fingerprint(),
            wall_time: start.elapsed(),
        })
    }
}

/// Runs all configured rounds and returns one report per round.
pub fn run_training(config: &TrainingConfig) -> Result<Vec<RoundReport>, FedError> {
    run_training_with(config, |_, _| Ok(()))
}

/// Like [`run_training`], calling `after_round` with each report and the
/// global model as it stands after that round.
pub fn run_training_with<F>(
    config: &TrainingConfig,
    mut after_round: F,
) -> Result<Vec<RoundReport>, FedError>
where
    F: FnMut(&RoundReport, &ParamVector) -> Result<(), FedError>,
{
    let mut fed = Federation::new(config.clone())?;
    (0..config.fed.n_rounds)
        .map(|r| {
            let report = fed.run_round(r)?;
            after_round(&report, fed.global())?;
            Ok(report)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(d: f64, p: f64, f: f64) -> DeviceProfile {
        DeviceProfile {
            f_max: f,
            e_max: 0.2,
            p_max: p,
            kappa: 1e-27,
            lambda_weight: 1.0,
            distance_m: d,
        }
    }

    #[test]
    fn selection_picks_the_most_spread_pair() {
        // m = d·P/F = 1, 2, 3, 10
        let profiles: Vec<_> = [1.0, 2.0, 3.0, 10.0]
            .iter()
            .map(|&d| profile(d, 1.0, 1.0))
            .collect();
        let mut sel = select_devices(&profiles, 2).unwrap();
        sel.sort();
        assert_eq!(sel, vec![0, 3]);
    }

    #[test]
    fn selection_tie_rule_and_full_selection() {
        let profiles: Vec<_> = (0..5).map(|_| profile(50.0, 0.2, 1e9)).collect();
        assert_eq!(select_devices(&profiles, 3).unwrap(), vec![0, 1, 2]);
        let mut all = select_devices(&profiles, 5).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(
            select_devices(&profiles, 6),
            Err(FedError::Selection {
                requested: 6,
                available: 5
            })
        );
    }

    #[test]
    fn fedavg_examples() {
        let spec = LayerSpec::new(vec![1, 1]).unwrap();
        let a = ParamVector::from_values(spec.clone(), vec![1.0, 2.0]).unwrap();
        let b = ParamVector::from_values(spec.clone(), vec![3.0, 4.0]).unwrap();
        assert_eq!(aggregate_fedavg(&[&a, &b]).unwrap().values(), &[2.0, 3.0]);
        assert_eq!(aggregate_fedavg(&[&a]).unwrap(), a);
        let c = ParamVector::from_values(spec, vec![0.1, 0.7]).unwrap();
        assert_eq!(aggregate_fedavg(&[&c, &c, &c]).unwrap(), c);
        assert_eq!(aggregate_fedavg(&[]), Err(FedError::EmptyAggregate));
        let other = ParamVector::zeros(LayerSpec::new(vec![2, 1]).unwrap());
        assert_eq!(
            aggregate_fedavg(&[&a, &other]),
            Err(FedError::ShapeMismatch)
        );
    }

    #[test]
    fn mode_strings() {
        for m in TrainingMode::ALL {
            assert_eq!(m.to_string().parse::<TrainingMode>(), Ok(m));
        }
        assert!("central".parse::<TrainingMode>().is_err());
    }

    #[test]
    fn fed_config_validation() {
        let ok = FedConfig {
            n_devices: 4,
            n_selected: 2,
            n_rounds: 1,
            mode: TrainingMode::FedDdqn,
        };
        assert!(ok.validate().is_ok());
        assert!(FedConfig { n_rounds: 0, ..ok }.validate().is_err());
        assert!(FedConfig {
            n_selected: 5,
            ..ok
        }
        .validate()
        .is_err());
        assert!(FedConfig {
            n_selected: 0,
            ..ok
        }
        .validate()
        .is_err());
    }
}
