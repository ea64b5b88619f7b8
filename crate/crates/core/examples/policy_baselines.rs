//! Mean step cost of fixed policies on a 20-device default network.
//!
//! `myopic` picks the action with the lowest immediate cost and is a useful
//! floor for the learned policies' training curves.

use fedq_core::env::{Action, DeviceEnv, EnvConfig, OffloadEnv};

type Policy = fn(&DeviceEnv, u64) -> Action;

fn myopic(d: &DeviceEnv, _: u64) -> Action {
    let cost = |a: Action| d.evaluate(a).expect("episode in progress").cost;
    Action::ALL
        .into_iter()
        .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
        .expect("three actions")
}

fn main() {
    let cfg = EnvConfig {
        n_devices: 20,
        ..EnvConfig::default()
    };
    let policies: [(&str, Policy); 5] = [
        ("local", |_, _| Action::Local),
        ("edge", |_, _| Action::Edge),
        ("cloud", |_, _| Action::Cloud),
        // Cheap deterministic scramble of the step counter.
        ("random", |_, k| {
            Action::ALL[(k.wrapping_mul(2_654_435_761) % 3) as usize]
        }),
        ("myopic", myopic),
    ];
    let episodes = 20;
    for (name, policy) in policies {
        let (env, _) = OffloadEnv::reset(cfg.clone(), 3).expect("default config is valid");
        let mut devices = env.into_devices();
        let (mut total, mut steps, mut infeasible) = (0.0, 0usize, 0usize);
        let mut k = 0u64;
        for d in devices.iter_mut() {
            for _ in 0..episodes {
                d.reset_episode();
                while !d.is_done() {
                    k += 1;
                    let (o, _, _) = d.step(policy(d, k)).expect("episode in progress");
                    total += o.cost;
                    steps += 1;
                    infeasible += usize::from(!o.feasible);
                }
            }
        }
        println!(
            "{name:>7}: mean step cost {:.4}, infeasible steps {:.3}, steps/episode {:.1}",
            total / steps as f64,
            infeasible as f64 / steps as f64,
            steps as f64 / (episodes * devices.len()) as f64,
        );
    }
}
