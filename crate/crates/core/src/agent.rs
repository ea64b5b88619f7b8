//! Double deep Q-learning agent that minimizes expected discounted cost.
//!
//! Q-values are expected costs, so the greedy action is the argmin and the
//! bootstrap term picks the argmin of the online network, evaluated by the
//! target network. The plain DQN baseline bootstraps with the target
//! network's own minimum.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::neural::{
    loss_and_gradients_into, AdamState, LayerSpec, NeuralError, ParamVector, Scratch,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO experience store.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes since creation, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct transitions drawn uniformly, or `None` when fewer are
    /// stored.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Option<Vec<&Transition>> {
        if n > self.items.len() {
            return None;
        }
        Some(
            sample(rng, self.items.len(), n)
                .into_iter()
                .map(|i| &self.items[i])
                .collect(),
        )
    }
}

/// How the bootstrap action is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetMode {
    /// Online network picks, target network evaluates.
    Ddqn,
    /// Target network picks and evaluates.
    Dqn,
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::Ddqn => "ddqn",
            TargetMode::Dqn => "dqn",
        })
    }
}

impl FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ddqn" => Ok(TargetMode::Ddqn),
            "dqn" => Ok(TargetMode::Dqn),
            other => Err(format!(
                "unknown target mode {other:?} (expected ddqn or dqn)"
            )),
        }
    }
}

/// What advances the exploration schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecayUnit {
    /// Once per federation round, identically on every device.
    Round,
    /// Once per gradient step of the individual agent.
    LearnStep,
}

impl fmt::Display for DecayUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayUnit::Round => "round",
            DecayUnit::LearnStep => "learn_step",
        })
    }
}

impl FromStr for DecayUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round" => Ok(DecayUnit::Round),
            "learn_step" => Ok(DecayUnit::LearnStep),
            other => Err(format!(
                "unknown decay unit {other:?} (expected round or learn_step)"
            )),
        }
    }
}

/// `ε = max(min, start · decay^k)` where `k` counts rounds or learn-steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decay: f64,
    pub min: f64,
    pub unit: DecayUnit,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            decay: 0.95,
            min: 0.05,
            unit: DecayUnit::LearnStep,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, k: u64) -> f64 {
        let exp = i32::try_from(k).unwrap_or(i32::MAX);
        (self.start * self.decay.powi(exp)).max(self.min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch_size: usize,
    /// Learn-steps between hard target syncs.
    pub f_update: usize,
    pub epsilon: EpsilonSchedule,
    pub memory_capacity: usize,
    pub learning_rate: f64,
    pub target_mode: TargetMode,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            batch_size: 30,
            f_update: 20,
            epsilon: EpsilonSchedule::default(),
            memory_capacity: 10_000,
            learning_rate: 1e-3,
            target_mode: TargetMode::Ddqn,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.f_update == 0 {
            return Err("f_update must be at least 1".into());
        }
        if self.memory_capacity < self.batch_size {
            return Err(format!(
                "memory_capacity ({}) must be at least batch_size ({})",
                self.memory_capacity, self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        let e = &self.epsilon;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(e.start) && in_unit(e.decay) && in_unit(e.min)) {
            return Err("epsilon start/decay/min must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn bootstrap_targets(
    online: &ParamVector,
    target: &ParamVector,
    scratch: &mut Scratch,
    gamma: f64,
    batch: &[&Transition],
    mode: TargetMode,
) -> Vec<f64> {
    batch
        .iter()
        .map(|t| {
            if t.done || gamma == 0.0 {
                return t.cost;
            }
            let bootstrap = match mode {
                TargetMode::Ddqn => {
                    let a = argmin(scratch.forward(online, &t.next_state));
                    scratch.forward(target, &t.next_state)[a]
                }
                TargetMode::Dqn => scratch
                    .forward(target, &t.next_state)
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min),
            };
            t.cost + gamma * bootstrap
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    online: ParamVector,
    target: ParamVector,
    adam: AdamState,
    memory: ReplayMemory,
    learn_steps: u64,
    epsilon: f64,
    scratch: Scratch,
    grad: ParamVector,
}

impl Agent {
    /// Agent whose online and target networks both start at `params`.
    pub fn new(config: AgentConfig, params: ParamVector) -> Self {
        let spec = params.spec().clone();
        Self {
            adam: AdamState::new(params.len(), config.learning_rate),
            memory: ReplayMemory::new(config.memory_capacity),
            learn_steps: 0,
            epsilon: config.epsilon.at(0),
            scratch: Scratch::new(&spec),
            grad: ParamVector::zeros(spec),
            target: params.clone(),
            online: params,
            config,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn spec(&self) -> &LayerSpec {
        self.online.spec()
    }

    pub fn online(&self) -> &ParamVector {
        &self.online
    }

    pub fn target(&self) -> &ParamVector {
        &self.target
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon;
    }

    /// Sets ε from the schedule for federation round `round`.
    pub fn begin_round(&mut self, round: usize) {
        if self.config.epsilon.unit == DecayUnit::Round {
            self.epsilon = self.config.epsilon.at(round as u64);
        }
    }

    /// Overwrites both networks with `params`. Optimizer moments and the
    /// replay memory are kept.
    pub fn load_global(&mut self, params: &ParamVector) {
        self.online.clone_from(params);
        self.target.clone_from(params);
    }

    pub fn remember(&mut self, t: Transition) {
        self.memory.push(t);
    }

    pub fn q_values(&mut self, state: &[f64]) -> Vec<f64> {
        self.scratch.forward(&self.online, state).to_vec()
    }

    /// ε-greedy over the online network's Q-values.
    pub fn select_action<R: Rng + ?Sized>(&mut self, state: &[f64], rng: &mut R) -> usize {
        let n = self.online.spec().outputs();
        if self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon {
            rng.random_range(0..n)
        } else {
            argmin(self.scratch.forward(&self.online, state))
        }
    }

    /// Bootstrapped regression targets for a batch.
    pub fn compute_targets(&mut self, batch: &[&Transition], mode: TargetMode) -> Vec<f64> {
        bootstrap_targets(
            &self.online,
            &self.target,
            &mut self.scratch,
            self.config.gamma,
            batch,
            mode,
        )
    }

    /// One gradient step on a uniformly sampled batch. Returns `None`
    /// without touching anything while the memory holds fewer than
    /// `batch_size` transitions.
    pub fn learn_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>, NeuralError> {
        let n = self.config.batch_size;
        if self.memory.len() < n {
            return Ok(None);
        }
        let batch: Vec<&Transition> = sample(rng, self.memory.len(), n)
            .into_iter()
            .map(|i| &self.memory.items[i])
            .collect();
        let targets = bootstrap_targets(
            &self.online,
            &self.target,
            &mut self.scratch,
            self.config.gamma,
            &batch,
            self.config.target_mode,
        );
        let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let loss = loss_and_gradients_into(
            &self.online,
            &states,
            &actions,
            &targets,
            &mut self.scratch,
            &mut self.grad,
        )?;
        self.adam.apply_update(&mut self.online, &self.grad)?;
        self.learn_steps += 1;
        if self.config.epsilon.unit == DecayUnit::LearnStep {
            self.epsilon = self.config.epsilon.at(self.learn_steps);
        }
        if self.learn_steps.is_multiple_of(self.config.f_update as u64) {
            self.sync_target();
        }
        Ok(Some(loss))
    }

    /// Hard copy of the online network into the target network.
    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
    }

    /// Greedy action for `state`.
    pub fn greedy(&mut self, state: &[f64]) -> usize {
        argmin(self.scratch.forward(&self.online, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::init_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(i: usize) -> Transition {
        Transition {
            state: vec![i as f64; 6],
            action: i % 3,
            cost: i as f64,
            next_state: vec![0.0; 6],
            done: false,
        }
    }

    /// Network whose output equals its output bias regardless of input.
    fn constant_net(q: [f64; 3]) -> ParamVector {
        let spec = LayerSpec::new(vec![6, 3]).unwrap();
        let mut v = vec![0.0; spec.param_count()];
        let n = v.len();
        v[n - 3..].copy_from_slice(&q);
        ParamVector::from_values(spec, v).unwrap()
    }

    #[test]
    fn memory_evicts_oldest() {
        let mut m = ReplayMemory::new(5);
        for i in 0..8 {
            m.push(transition(i));
        }
        assert_eq!(m.len(), 5);
        assert_eq!(m.inserted(), 8);
        let costs: Vec<f64> = m.iter().map(|t| t.cost).collect();
        assert_eq!(costs, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.sample(&mut rng, 6).is_none());
        assert_eq!(m.sample(&mut rng, 5).unwrap().len(), 5);
    }

    #[test]
    fn greedy_is_argmin_with_low_index_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Agent::new(AgentConfig::default(), constant_net([0.5, 0.2, 0.9]));
        a.set_epsilon(0.0);
        assert_eq!(a.select_action(&[0.0; 6], &mut rng), 1);
        let mut b = Agent::new(AgentConfig::default(), constant_net([0.2, 0.2, 0.9]));
        b.set_epsilon(0.0);
        assert_eq!(b.select_action(&[0.0; 6], &mut rng), 0);
    }

    #[test]
    fn ddqn_target_direct_evaluation() {
        let cfg = AgentConfig {
            gamma: 0.9,
            ..AgentConfig::default()
        };
        let mut a = Agent::new(cfg, constant_net([1.0, 5.0, 3.0]));
        a.target = constant_net([2.0, 0.0, 7.0]);
        let t = Transition {
            cost: 1.0,
            ..transition(0)
        };
        let ddqn = a.compute_targets(&[&t], TargetMode::Ddqn);
        assert!((ddqn[0] - 2.8).abs() < 1e-12);
        let dqn = a.compute_targets(&[&t], TargetMode::Dqn);
        assert!((dqn[0] - 1.0).abs() < 1e-12);
        let terminal = Transition { done: true, ..t };
        assert_eq!(a.compute_targets(&[&terminal], TargetMode::Ddqn), vec![1.0]);
    }

    #[test]
    fn myopic_targets_equal_costs() {
        let cfg = AgentConfig {
            gamma: 0.0,
            ..AgentConfig::default()
        };
        let mut a = Agent::new(cfg, init_network(&LayerSpec::stacked(0), 3));
        let batch: Vec<Transition> = (0..5).map(transition).collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        for mode in [TargetMode::Ddqn, TargetMode::Dqn] {
            let t = a.compute_targets(&refs, mode);
            assert_eq!(t, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn learn_step_guard_and_counters() {
        let cfg = AgentConfig {
            batch_size: 4,
            f_update: 3,
            ..AgentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Agent::new(cfg, init_network(&LayerSpec::stacked(0), 3));
        for i in 0..3 {
            a.remember(transition(i));
        }
        let before = a.online().clone();
        assert_eq!(a.learn_step(&mut rng).unwrap(), None);
        assert_eq!(a.online(), &before);
        assert_eq!(a.learn_steps(), 0);

        a.remember(transition(3));
        for k in 1..=3 {
            assert!(a.learn_step(&mut rng).unwrap().is_some());
            assert_eq!(a.learn_steps(), k);
            if k < 3 {
                assert_ne!(a.target(), a.online());
            }
        }
        assert_eq!(a.target(), a.online());
    }

    #[test]
    fn sync_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AgentConfig {
            batch_size: 2,
            f_update: 1000,
            ..AgentConfig::default()
        };
        let mut a = Agent::new(cfg, init_network(&LayerSpec::stacked(0), 3));
        for i in 0..4 {
            a.remember(transition(i));
        }
        a.learn_step(&mut rng).unwrap();
        a.sync_target();
        assert_eq!(a.target(), a.online());
        let snapshot = a.target().clone();
        a.sync_target();
        assert_eq!(a.target(), &snapshot);
        a.learn_step(&mut rng).unwrap();
        assert_eq!(a.target(), &snapshot);
        assert_ne!(a.online(), &snapshot);
    }

    #[test]
    fn epsilon_schedule_is_bounded_and_monotone() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.at(0), 1.0);
        let values: Vec<f64> = (0..200u64).map(|r| s.at(r)).collect();
        assert!(values.windows(2).all(|w| w[1] <= w[0]));
        assert!(values.iter().all(|&e| e >= 0.05));
        assert_eq!(s.at(199), 0.05);
    }

    #[test]
    fn target_mode_parsing() {
        assert_eq!("DDQN".parse::<TargetMode>(), Ok(TargetMode::Ddqn));
        assert_eq!("dqn".parse::<TargetMode>(), Ok(TargetMode::Dqn));
        assert!("sarsa".parse::<TargetMode>().is_err());
    }
}
