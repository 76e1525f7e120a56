//! Random instance generation for oracle and theory checks.

use rand::Rng;
use rand_distr::Exp1;

use crate::mdp::{TabularMdp, TabularPolicy};

/// A Dirichlet(1, …, 1) sample, i.e. uniform on the simplex.
pub fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1).max(1e-300)).collect();
    let total: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= total);
    x
}

/// Dirichlet(1) transition rows, rewards uniform in [-1, 1], uniform `d0`.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(dirichlet_ones(rng, n_states));
    }
    let reward = (0..n_states * n_actions * n_states).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let d0 = vec![1.0 / n_states as f64; n_states];
    TabularMdp::new(n_states, n_actions, transition, reward, d0, gamma)
        .expect("generated MDP satisfies its invariants")
}

/// A full-support policy with Dirichlet(1) rows.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> TabularPolicy {
    let probs = (0..n_states).flat_map(|_| dirichlet_ones(rng, n_actions)).collect();
    TabularPolicy::new(n_states, n_actions, probs).expect("Dirichlet rows are normalized")
}

/// `(1 - τ) π + τ · noise` with Dirichlet(1) noise rows.
pub fn perturb_policy<R: Rng + ?Sized>(rng: &mut R, pi: &TabularPolicy, tau: f64) -> TabularPolicy {
    let noise = random_policy(rng, pi.n_states(), pi.n_actions());
    let probs = pi.probs().iter().zip(noise.probs()).map(|(p, z)| (1.0 - tau) * p + tau * z).collect();
    TabularPolicy::new(pi.n_states(), pi.n_actions(), probs).expect("mixture stays on the simplex")
}
