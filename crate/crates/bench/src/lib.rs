//! Fixtures shared by the benchmarks.

use fedq_core::env::{DeviceProfile, TaskSpec};
use fedq_core::neural::init_network;
use fedq_core::{Agent, AgentConfig, LayerSpec, ParamVector, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn profile() -> DeviceProfile {
    DeviceProfile {
        f_max: 1e9,
        e_max: 0.2,
        p_max: 0.1995,
        kappa: 1e-27,
        lambda_weight: 1.0,
        distance_m: 50.0,
    }
}

pub fn task() -> TaskSpec {
    TaskSpec {
        size_bits: 5e5,
        cpu_cycles: 5e8,
        deadline_s: 2.0,
    }
}

/// The default offloading network.
pub fn base_network(seed: u64) -> ParamVector {
    init_network(
        &LayerSpec::offloading(&fedq_core::neural::BASE_HIDDEN).unwrap(),
        seed,
    )
}

pub fn random_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..6).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Agent on the default network whose memory already holds `fill`
/// random transitions.
pub fn warm_agent(fill: usize, batch_size: usize) -> Agent {
    let config = AgentConfig {
        batch_size,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(config, base_network(1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..fill {
        agent.remember(Transition {
            state: random_state(&mut rng),
            action: rng.random_range(0..3),
            cost: rng.random_range(0.0..1.0),
            next_state: random_state(&mut rng),
            done: rng.random_bool(0.1),
        });
    }
    agent
}
