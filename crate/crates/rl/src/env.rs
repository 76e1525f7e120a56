//! Desk-scale environments: a gridworld, a chain and a cart-pole.
//!
//! Tabular environments simulate an explicit [`TabularMdp`] and expose it, so
//! training runs can be scored by exact evaluation.

use brrl_core::TabularMdp;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlError};

pub const ENV_NAMES: [&str; 3] = ["gridworld_5x5", "chain", "cartpole_lite"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    /// Box of the given dimension; environments clamp as they see fit.
    Continuous(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
    /// Integer state for tabular environments.
    pub state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    /// Set only by the horizon, never together with `terminated`.
    pub truncated: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &str;
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation;
    fn step(&mut self, action: &Action, rng: &mut ChaCha8Rng) -> Result<EnvStep>;

    /// The exact model behind a tabular environment.
    fn tabular_mdp(&self) -> Option<&TabularMdp> {
        None
    }

    /// Observation features of tabular state `s`.
    fn state_features(&self, _s: usize) -> Option<Vec<f64>> {
        None
    }
}

/// Knobs for [`make_env`]. Unset fields take per-environment defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    pub slip: Option<f64>,
    pub chain_length: Option<usize>,
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
    /// cartpole_lite: one continuous force dimension instead of two discrete pushes.
    pub continuous: bool,
    /// cartpole_lite: start exactly upright at rest.
    pub zero_init: bool,
}

pub fn make_env(name: &str, params: &EnvParams) -> Result<Box<dyn Environment>> {
    match name {
        "gridworld_5x5" => Ok(Box::new(gridworld(5, params.slip.unwrap_or(0.0), params.horizon.unwrap_or(100), params.gamma.unwrap_or(0.99))?)),
        "chain" => Ok(Box::new(chain(
            params.chain_length.unwrap_or(5),
            params.slip.unwrap_or(0.1),
            params.horizon.unwrap_or(100),
            params.gamma.unwrap_or(0.99),
        )?)),
        "cartpole_lite" => Ok(Box::new(CartPole::new(params.continuous, params.zero_init, params.horizon.unwrap_or(500)))),
        other => Err(RlError::Usage(format!("unknown environment {other:?}; expected one of {}", ENV_NAMES.join(", ")))),
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn sample_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the last partial sum: take the last positive entry.
    p.iter().rposition(|x| *x > 0.0).unwrap_or(p.len() - 1)
}

/// A simulated [`TabularMdp`] with terminal states and a step horizon.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    name: String,
    mdp: TabularMdp,
    terminal: Vec<bool>,
    horizon: usize,
    state: usize,
    t: usize,
}

impl TabularEnv {
    pub fn new(name: impl Into<String>, mdp: TabularMdp, terminal: Vec<bool>, horizon: usize) -> Result<Self> {
        if terminal.len() != mdp.n_states() {
            return Err(RlError::Shape(format!("{} terminal flags for {} states", terminal.len(), mdp.n_states())));
        }
        if horizon == 0 {
            return Err(RlError::Usage("horizon must be at least 1".into()));
        }
        Ok(TabularEnv { name: name.into(), mdp, terminal, horizon, state: 0, t: 0 })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    fn observe(&self) -> Observation {
        Observation { features: one_hot(self.mdp.n_states(), self.state), state: Some(self.state) }
    }
}

impl Environment for TabularEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn observation_dim(&self) -> usize {
        self.mdp.n_states()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.mdp.n_actions())
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation {
        self.state = sample_index(self.mdp.initial_dist(), rng);
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &Action, rng: &mut ChaCha8Rng) -> Result<EnvStep> {
        let a = match action {
            Action::Discrete(a) if *a < self.mdp.n_actions() => *a,
            other => return Err(RlError::Env { step: self.t, message: format!("invalid action {other:?}") }),
        };
        let s = self.state;
        let next = sample_index(self.mdp.transition(s, a), rng);
        let reward = self.mdp.reward(s, a)[next];
        self.state = next;
        self.t += 1;
        let terminated = self.terminal[next];
        let truncated = !terminated && self.t >= self.horizon;
        Ok(EnvStep { observation: self.observe(), reward, terminated, truncated })
    }

    fn tabular_mdp(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }

    fn state_features(&self, s: usize) -> Option<Vec<f64>> {
        (s < self.mdp.n_states()).then(|| one_hot(self.mdp.n_states(), s))
    }
}

fn check_slip(slip: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&slip) {
        return Err(RlError::Usage(format!("slip must lie in [0, 1], got {slip}")));
    }
    Ok(())
}

/// `size x size` grid from the top-left corner to an absorbing bottom-right goal.
///
/// Actions are up, right, down, left; moves into a wall stay put. With
/// probability `slip` the action is replaced by a uniformly random one.
/// Entering the goal pays 1, every other transition pays 0.
pub fn gridworld(size: usize, slip: f64, horizon: usize, gamma: f64) -> Result<TabularEnv> {
    check_slip(slip)?;
    let n = size * size;
    let goal = n - 1;
    let moves: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
    let target = |s: usize, m: usize| {
        let (r, c) = ((s / size) as isize, (s % size) as isize);
        let (nr, nc) = (r + moves[m].0, c + moves[m].1);
        if nr < 0 || nc < 0 || nr >= size as isize || nc >= size as isize {
            s
        } else {
            nr as usize * size + nc as usize
        }
    };
    let mut p = vec![0.0; n * 4 * n];
    let mut r = vec![0.0; n * 4 * n];
    for s in 0..n {
        for a in 0..4 {
            let base = (s * 4 + a) * n;
            if s == goal {
                p[base + goal] = 1.0;
                continue;
            }
            for m in 0..4 {
                let w = if m == a { 1.0 - slip + slip / 4.0 } else { slip / 4.0 };
                p[base + target(s, m)] += w;
            }
            r[base + goal] = 1.0;
        }
    }
    let mut d0 = vec![0.0; n];
    d0[0] = 1.0;
    let mdp = TabularMdp::new(n, 4, p, r, d0, gamma)?;
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    TabularEnv::new(format!("gridworld_{size}x{size}"), mdp, terminal, horizon)
}

/// `n`-state chain. Action 0 moves forward (staying at the far end), action 1
/// returns to the start. With probability `slip` the other action is taken.
/// Arriving at the start pays 0.2; staying at the far end pays 1.0.
pub fn chain(n: usize, slip: f64, horizon: usize, gamma: f64) -> Result<TabularEnv> {
    check_slip(slip)?;
    if n < 2 {
        return Err(RlError::Usage(format!("chain length must be at least 2, got {n}")));
    }
    let mut p = vec![0.0; n * 2 * n];
    let mut r = vec![0.0; n * 2 * n];
    for s in 0..n {
        let forward = (s + 1).min(n - 1);
        for a in 0..2 {
            let base = (s * 2 + a) * n;
            let p_forward = if a == 0 { 1.0 - slip } else { slip };
            p[base + forward] += p_forward;
            p[base] += 1.0 - p_forward;
            r[base] = 0.2;
            if s == n - 1 {
                r[base + n - 1] = 1.0;
            }
        }
    }
    let mut d0 = vec![0.0; n];
    d0[0] = 1.0;
    let mdp = TabularMdp::new(n, 2, p, r, d0, gamma)?;
    TabularEnv::new("chain", mdp, vec![false; n], horizon)
}

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const HALF_LENGTH: f64 = 0.5;
const FORCE: f64 = 10.0;
const DT: f64 = 0.02;
const X_LIMIT: f64 = 2.4;
const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;

/// Cart-pole balancing with Euler integration and +1 per surviving step.
#[derive(Debug, Clone)]
pub struct CartPole {
    continuous: bool,
    zero_init: bool,
    horizon: usize,
    state: [f64; 4],
    t: usize,
}

impl CartPole {
    pub fn new(continuous: bool, zero_init: bool, horizon: usize) -> Self {
        CartPole { continuous, zero_init, horizon: horizon.max(1), state: [0.0; 4], t: 0 }
    }

    /// `(x, x_dot, theta, theta_dot)`.
    pub fn physical_state(&self) -> [f64; 4] {
        self.state
    }

    fn observe(&self) -> Observation {
        Observation { features: self.state.to_vec(), state: None }
    }
}

impl Environment for CartPole {
    fn name(&self) -> &str {
        "cartpole_lite"
    }

    fn observation_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        if self.continuous {
            ActionSpace::Continuous(1)
        } else {
            ActionSpace::Discrete(2)
        }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation {
        self.t = 0;
        self.state = if self.zero_init { [0.0; 4] } else { std::array::from_fn(|_| rng.random_range(-0.05..0.05)) };
        self.observe()
    }

    fn step(&mut self, action: &Action, _rng: &mut ChaCha8Rng) -> Result<EnvStep> {
        let force = match (action, self.continuous) {
            (Action::Discrete(0), false) => -FORCE,
            (Action::Discrete(1), false) => FORCE,
            (Action::Continuous(a), true) if a.len() == 1 && a[0].is_finite() => FORCE * a[0].clamp(-1.0, 1.0),
            (other, _) => return Err(RlError::Env { step: self.t, message: format!("invalid action {other:?}") }),
        };
        let [x, x_dot, theta, theta_dot] = self.state;
        let total = MASS_CART + MASS_POLE;
        let pml = MASS_POLE * HALF_LENGTH;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pml * theta_dot * theta_dot * sin) / total;
        let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        self.state = [x + DT * x_dot, x_dot + DT * x_acc, theta + DT * theta_dot, theta_dot + DT * theta_acc];
        self.t += 1;
        let terminated = self.state[0].abs() > X_LIMIT || self.state[2].abs() > ANGLE_LIMIT;
        let truncated = !terminated && self.t >= self.horizon;
        Ok(EnvStep { observation: self.observe(), reward: 1.0, terminated, truncated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use brrl_core::mdp::{evaluate_policy, value_iteration};
    use rand::SeedableRng;

    #[test]
    fn gridworld_optimum_is_discounted_shortest_path() {
        let env = gridworld(5, 0.0, 100, 0.99).unwrap();
        let (_, eta) = value_iteration(env.tabular_mdp().unwrap(), 1e-13).unwrap();
        assert!((eta - 0.99f64.powi(7)).abs() < 1e-9, "{eta}");
    }

    #[test]
    fn chain_uniform_value_is_finite_and_positive() {
        let env = chain(5, 0.1, 100, 0.99).unwrap();
        let mdp = env.tabular_mdp().unwrap();
        let pi = brrl_core::TabularPolicy::uniform(5, 2);
        let eta = evaluate_policy(mdp, &pi).unwrap().eta;
        assert!(eta > 0.0 && eta < 100.0);
    }

    #[test]
    fn cartpole_equilibrium_holds_for_the_full_horizon() {
        let mut env = CartPole::new(true, true, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        for t in 0..500 {
            let step = env.step(&Action::Continuous(vec![0.0]), &mut rng).unwrap();
            assert!(!step.terminated);
            assert_eq!(step.truncated, t == 499);
        }
        assert_eq!(env.physical_state(), [0.0; 4]);
    }

    #[test]
    fn truncation_and_termination_are_exclusive() {
        // The goal is 8 moves away; with horizon 8 the last move both ends the
        // horizon and reaches the goal, which must count as termination.
        let mut env = gridworld(5, 0.0, 8, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let mut last = None;
        for a in [1, 1, 1, 1, 2, 2, 2, 2] {
            last = Some(env.step(&Action::Discrete(a), &mut rng).unwrap());
        }
        let last = last.unwrap();
        assert!(last.terminated && !last.truncated);
        assert_eq!(last.reward, 1.0);
    }

    #[test]
    fn unknown_name_is_a_usage_error() {
        assert!(matches!(make_env("pong", &EnvParams::default()), Err(RlError::Usage(_))));
    }
}
