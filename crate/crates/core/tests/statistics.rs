//! Monte-Carlo checks of the random parts against their closed-form moments.

use fedq_core::neural::{init_network, loss_and_gradients};
use fedq_core::{
    AdamState, Agent, AgentConfig, DecayUnit, EnvConfig, EpsilonSchedule, LayerSpec, OffloadEnv,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> EnvConfig {
    EnvConfig {
        n_devices: 1,
        ..EnvConfig::default()
    }
}

#[test]
fn fading_has_unit_mean() {
    let cfg = config();
    let (mut env, _) = OffloadEnv::reset(cfg.clone(), 11).unwrap();
    let d = env.device(0).unwrap().profile().distance_m;
    let path_loss = cfg.gain_at_1m * d.powf(-cfg.path_loss_exp);
    let n = 100_000;
    let mean = (0..n)
        .map(|_| env.update_channel(0).unwrap().path_gain / path_loss)
        .sum::<f64>()
        / n as f64;
    // Exp(1) has unit variance, so the standard error is 1/sqrt(n).
    assert!(
        (mean - 1.0).abs() < 5.0 / (n as f64).sqrt(),
        "mean fading {mean}"
    );
}

#[test]
fn task_sizes_are_uniform_on_their_bounds() {
    let cfg = config();
    let (mut env, _) = OffloadEnv::reset(cfg.clone(), 12).unwrap();
    let n = 100_000;
    let sizes: Vec<f64> = (0..n)
        .map(|_| env.generate_task(0).unwrap().size_bits)
        .collect();
    assert!(sizes
        .iter()
        .all(|s| (cfg.bits_lo..=cfg.bits_hi).contains(s)));
    let mean = sizes.iter().sum::<f64>() / n as f64;
    let width = cfg.bits_hi - cfg.bits_lo;
    let sd = width / 12f64.sqrt();
    let expected = 0.5 * (cfg.bits_lo + cfg.bits_hi);
    assert!(
        (mean - expected).abs() < 5.0 * sd / (n as f64).sqrt(),
        "mean size {mean}"
    );
}

#[test]
fn first_layer_weights_have_he_variance() {
    let spec = LayerSpec::new(vec![6, 4, 3]).unwrap();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for seed in 0..10_000 {
        let p = init_network(&spec, seed);
        let (w, _) = p.layer(0);
        for &x in w {
            sum += x;
            sum_sq += x * x;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let var = sum_sq / count as f64 - mean * mean;
    let expected = 2.0 / 6.0;
    assert!((var - expected).abs() <= 0.1 * expected, "variance {var}");
}

#[test]
fn full_exploration_is_uniform_over_actions() {
    let spec = LayerSpec::new(vec![6, 5, 3]).unwrap();
    let mut agent = Agent::new(AgentConfig::default(), init_network(&spec, 1));
    agent.set_epsilon(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let state = [0.5; 6];
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        counts[agent.select_action(&state, &mut rng)] += 1;
    }
    for c in counts {
        assert!(
            (c as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.02,
            "{counts:?}"
        );
    }
}

#[test]
fn adam_fits_a_fixed_batch() {
    let spec = LayerSpec::new(vec![6, 16, 16, 3]).unwrap();
    let mut params = init_network(&spec, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let states: Vec<Vec<f64>> = (0..32)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let actions: Vec<usize> = (0..32).map(|_| rng.random_range(0..3)).collect();
    let targets: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut adam = AdamState::new(params.len(), 1e-2);
    let (initial, _) = loss_and_gradients(&params, &states, &actions, &targets).unwrap();
    for _ in 0..2000 {
        let (_, grad) = loss_and_gradients(&params, &states, &actions, &targets).unwrap();
        adam.apply_update(&mut params, &grad).unwrap();
    }
    let (last, _) = loss_and_gradients(&params, &states, &actions, &targets).unwrap();
    assert!(last * 100.0 <= initial, "loss {initial} -> {last}");
}

#[test]
fn epsilon_decays_per_learn_step_to_its_floor() {
    let spec = LayerSpec::new(vec![6, 4, 3]).unwrap();
    let config = AgentConfig {
        batch_size: 2,
        epsilon: EpsilonSchedule {
            start: 1.0,
            decay: 0.9,
            min: 0.2,
            unit: DecayUnit::LearnStep,
        },
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(config, init_network(&spec, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut last = agent.epsilon();
    for i in 0..40 {
        agent.remember(fedq_core::Transition {
            state: vec![i as f64 / 40.0; 6],
            action: i % 3,
            cost: 1.0,
            next_state: vec![0.0; 6],
            done: true,
        });
        agent.learn_step(&mut rng).unwrap();
        assert!(agent.epsilon() <= last && agent.epsilon() >= 0.2);
        last = agent.epsilon();
    }
    assert_eq!(last, 0.2);
}
