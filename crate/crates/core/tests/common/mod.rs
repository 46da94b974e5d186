//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use aoii_lab::belief::Belief;
use aoii_lab::chain::TransitionMatrix;
use aoii_lab::dqn::{Activations, Learner, TrainConfig, ValueNetwork};
use aoii_lab::rng::{seeded, RandomSource};
use aoii_lab::{Action, Estimator};
use rand::Rng;

/// Step for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// A belief with random positive mass everywhere.
pub fn random_belief(n: usize, delta_max: usize, rng: &mut RandomSource) -> Belief {
    let mut mass: Vec<f64> = (0..n * (delta_max + 1)).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    Belief::from_flat(n, delta_max, mass).expect("normalized")
}

fn loss(net: &ValueNetwork, input: &[f64], action: Action, target: f64) -> f64 {
    let (q0, q1) = net.evaluate(input, &mut Activations::default()).expect("input size");
    let q = if action.is_pull() { q1 } else { q0 };
    (q - target) * (q - target)
}

/// Outcome of comparing backpropagation against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub checks: usize,
    pub worst_relative_error: f64,
}

/// Compares one randomly chosen partial derivative per check, each on a
/// fresh random (input, action, target). Relative error is measured
/// against the larger magnitude of the two estimates; two exact zeros agree.
pub fn gradient_check(net: &ValueNetwork, n: usize, delta_max: usize, checks: usize, rng: &mut RandomSource) -> GradientCheck {
    let mut worst = 0.0f64;
    let mut acts = Activations::default();
    let mut grad = Vec::new();
    for _ in 0..checks {
        let b = random_belief(n, delta_max, rng);
        let action = Action::from_bool(rng.gen_bool(0.5));
        let target = rng.gen_range(-2.0..2.0);
        net.gradient(b.as_slice(), action, target, &mut acts, &mut grad).expect("input size");
        let k = rng.gen_range(0..net.param_count());

        let mut plus = net.clone();
        *plus.params_mut().nth(k).expect("index in range") += FD_STEP;
        let mut minus = net.clone();
        *minus.params_mut().nth(k).expect("index in range") -= FD_STEP;
        let numeric = (loss(&plus, b.as_slice(), action, target) - loss(&minus, b.as_slice(), action, target)) / (2.0 * FD_STEP);

        let scale = grad[k].abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (grad[k] - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    GradientCheck { checks, worst_relative_error: worst }
}

/// A network of the default shape for `p`, after `updates` training steps on random beliefs.
pub fn trained_network(p: &TransitionMatrix, delta_max: usize, updates: usize, seed: u64) -> ValueNetwork {
    let cfg = TrainConfig { delta_max, lambda: 1.0, ..TrainConfig::default() };
    let mut rng = seeded(seed, 0);
    let mut main = ValueNetwork::new(&ValueNetwork::sizes_for(p.n(), delta_max, &cfg.hidden), &mut rng);
    let target = main.clone();
    let mut learner = Learner::new(&main, &cfg);
    for _ in 0..updates {
        let b = random_belief(p.n(), delta_max, &mut rng);
        let a = Action::from_bool(rng.gen_bool(0.5));
        learner.train_step(&mut main, &target, &b, a, p, &Estimator::map(), &cfg).expect("finite");
    }
    main
}
