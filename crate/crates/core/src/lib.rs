//! Federated double deep Q-learning for joint delay/energy-minimizing
//! computation offloading.
//!
//! Each IoT device is a DDQN agent choosing between local execution, the
//! edge server and the cloud. The immediate cost of a decision comes from
//! solving a single-variable convex resource allocation (CPU frequency for
//! local execution, transmit power when offloading). Agents are periodically
//! averaged into a global model.
//!
//! Module map:
//! - [`env`]: per-device task queues, fading channels and step dynamics.
//! - [`subsolvers`]: rate/delay/energy primitives and the per-step solvers.
//! - [`neural`]: small fully-connected network, backprop, Adam, checkpoints.
//! - [`agent`]: replay memory, epsilon-greedy policy and DDQN/DQN targets.
//! - [`federation`]: device selection, FedAvg and the round loop.
//! - [`harness`]: experiment configs, runs, sweeps and CSV output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod env;
pub mod federation;
pub mod harness;
pub mod neural;
pub mod rng;
pub mod subsolvers;

pub use agent::{
    Agent, AgentConfig, DecayUnit, EpsilonSchedule, ReplayMemory, TargetMode, Transition,
};
pub use env::{
    Action, ChannelState, DeviceEnv, DeviceProfile, EnvConfig, EnvError, Observation, OffloadEnv,
    StepOutcome, TaskSpec,
};
pub use federation::{
    aggregate_fedavg, run_training, run_training_with, select_devices, FedConfig, FedError,
    Federation, RoundReport, TrainingConfig, TrainingMode,
};
pub use harness::{ExperimentConfig, HarnessError, MetricsRow, SweepVar};
pub use neural::{AdamState, LayerSpec, NeuralError, ParamVector};
pub use subsolvers::{Allocation, RadioParams, ServerParams, SolverError, SolverResult};
