//! Finite MDPs with exact policy evaluation.
//!
//! Value functions come from dense LU solves of `(I - γ P_π) v = r_π`. The
//! visitation distribution is kept unnormalized (total mass `1/(1-γ)`), so
//! expectations over it are plain weighted sums.

use nalgebra::{DMatrix, DVector};

use crate::error::{BrrlError, Result};

/// Largest state count accepted by validation.
pub const MAX_STATES: usize = 200;

const STOCHASTIC_TOL: f64 = 1e-12;
const POLICY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 1_000_000;

/// A finite MDP `(S, A, P, r, d0, γ)` with rewards on `(s, a, s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    gamma: f64,
}

fn check_distribution(row: &[f64], tol: f64, what: impl Fn() -> String) -> Result<()> {
    if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(BrrlError::domain(format!("{} has invalid entry {x}", what())));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(BrrlError::domain(format!("{} sums to {total}, expected 1", what())));
    }
    Ok(())
}

impl TabularMdp {
    /// Builds an MDP from flat row-major tensors indexed `[s][a][s']`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(BrrlError::shape("n_states and n_actions must be at least 1"));
        }
        if n_states > MAX_STATES {
            return Err(BrrlError::domain(format!(
                "n_states = {n_states} exceeds the limit of {MAX_STATES}"
            )));
        }
        let len = n_states * n_actions * n_states;
        if transition.len() != len || reward.len() != len {
            return Err(BrrlError::shape(format!(
                "transition/reward need {len} entries, got {}/{}",
                transition.len(),
                reward.len()
            )));
        }
        if initial_dist.len() != n_states {
            return Err(BrrlError::shape(format!(
                "initial_dist has {} entries, expected {n_states}",
                initial_dist.len()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(BrrlError::domain(format!("gamma = {gamma} must lie in (0, 1)")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let start = (s * n_actions + a) * n_states;
                check_distribution(&transition[start..start + n_states], STOCHASTIC_TOL, || {
                    format!("transition[{s}][{a}]")
                })?;
            }
        }
        if let Some(i) = reward.iter().position(|r| !r.is_finite()) {
            return Err(BrrlError::domain(format!("reward entry {i} is not finite")));
        }
        check_distribution(&initial_dist, STOCHASTIC_TOL, || "initial_dist".to_string())?;
        Ok(TabularMdp { n_states, n_actions, transition, reward, initial_dist, gamma })
    }

    /// Builds an MDP from nested `[s][a][s']` tensors.
    pub fn from_nested(
        transition: &[Vec<Vec<f64>>],
        reward: &[Vec<Vec<f64>>],
        initial_dist: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        let flatten = |t: &[Vec<Vec<f64>>], name: &str| -> Result<Vec<f64>> {
            if t.len() != n_states {
                return Err(BrrlError::shape(format!("{name} has {} states, expected {n_states}", t.len())));
            }
            let mut out = Vec::with_capacity(n_states * n_actions * n_states);
            for (s, row) in t.iter().enumerate() {
                if row.len() != n_actions {
                    return Err(BrrlError::shape(format!("{name}[{s}] has {} actions, expected {n_actions}", row.len())));
                }
                for (a, next) in row.iter().enumerate() {
                    if next.len() != n_states {
                        return Err(BrrlError::shape(format!(
                            "{name}[{s}][{a}] has {} entries, expected {n_states}",
                            next.len()
                        )));
                    }
                    out.extend_from_slice(next);
                }
            }
            Ok(out)
        };
        let p = flatten(transition, "transition")?;
        let r = flatten(reward, "reward")?;
        Self::new(n_states, n_actions, p, r, initial_dist, gamma)
    }

    /// Parses the JSON file format, reporting the line of any invalid value.
    pub fn from_json_str(src: &str) -> Result<Self> {
        crate::mdp_json::parse(src)
    }

    /// Serializes to the JSON file format.
    pub fn to_json_string(&self) -> String {
        crate::mdp_json::render(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `P(· | s, a)`.
    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// `r(s, a, ·)`.
    pub fn reward(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.reward[start..start + self.n_states]
    }

    /// `E_{s'}[r(s, a, s')]`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.transition(s, a).iter().zip(self.reward(s, a)).map(|(p, r)| p * r).sum()
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.initial_dist.clone(),
            gamma,
        )
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states() != self.n_states || pi.n_actions() != self.n_actions {
            return Err(BrrlError::shape(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.n_states(),
                pi.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

/// A stochastic policy `π(a | s)` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(BrrlError::shape("policy needs at least one state and action"));
        }
        if probs.len() != n_states * n_actions {
            return Err(BrrlError::shape(format!(
                "policy needs {} entries, got {}",
                n_states * n_actions,
                probs.len()
            )));
        }
        for s in 0..n_states {
            check_distribution(&probs[s * n_actions..(s + 1) * n_actions], POLICY_TOL, || {
                format!("policy row {s}")
            })?;
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(BrrlError::shape("policy rows have unequal lengths"));
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(BrrlError::shape(format!("action {a} out of range in state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.probs.chunks(self.n_actions).map(<[f64]>::to_vec).collect()
    }
}

/// Exact quantities of a policy on an MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactEvaluation {
    pub v: Vec<f64>,
    /// Row-major `[s][a]`.
    pub q: Vec<f64>,
    /// Row-major `[s][a]`, `q - v`.
    pub adv: Vec<f64>,
    /// Unnormalized discounted visitation, total mass `1/(1-γ)`.
    pub visitation: Vec<f64>,
    pub eta: f64,
    n_actions: usize,
}

impl ExactEvaluation {
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn adv_row(&self, s: usize) -> &[f64] {
        &self.adv[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

fn system_matrix(mdp: &TabularMdp, pi: &TabularPolicy) -> (DMatrix<f64>, DVector<f64>) {
    let n = mdp.n_states;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r[s] += w * mdp.expected_reward(s, a);
            for (s2, p) in mdp.transition(s, a).iter().enumerate() {
                m[(s, s2)] -= mdp.gamma * w * p;
            }
        }
    }
    (m, r)
}

fn lu_solve(m: DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = m.lu();
    lu.solve(rhs).ok_or_else(|| {
        let u = lu.u();
        let min_pivot = u.diagonal().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
        BrrlError::Numeric(format!("{what}: singular system (smallest |pivot| = {min_pivot:e})"))
    })
}

/// Unnormalized discounted visitation `d_π^T = d0^T (I - γ P_π)^{-1}`.
pub fn visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(pi)?;
    let (m, _) = system_matrix(mdp, pi);
    let d0 = DVector::from_column_slice(&mdp.initial_dist);
    Ok(lu_solve(m.transpose(), &d0, "visitation")?.as_slice().to_vec())
}

/// Solves for `V_π`, `Q_π`, `A_π`, `d_π` and `η(π)`.
pub fn evaluate_policy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<ExactEvaluation> {
    mdp.check_policy(pi)?;
    let (m, r) = system_matrix(mdp, pi);
    let v = lu_solve(m.clone(), &r, "value")?;
    let d0 = DVector::from_column_slice(&mdp.initial_dist);
    let d = lu_solve(m.transpose(), &d0, "visitation")?;
    let (n, k) = (mdp.n_states, mdp.n_actions);
    let mut q = vec![0.0; n * k];
    let mut adv = vec![0.0; n * k];
    for s in 0..n {
        for a in 0..k {
            let qa: f64 = mdp
                .transition(s, a)
                .iter()
                .zip(mdp.reward(s, a))
                .zip(v.iter())
                .map(|((p, rw), vn)| p * (rw + mdp.gamma * vn))
                .sum();
            q[s * k + a] = qa;
            adv[s * k + a] = qa - v[s];
        }
    }
    let eta = mdp.initial_dist.iter().zip(v.iter()).map(|(p, x)| p * x).sum();
    Ok(ExactEvaluation {
        v: v.as_slice().to_vec(),
        q,
        adv,
        visitation: d.as_slice().to_vec(),
        eta,
        n_actions: k,
    })
}

/// `Σ_s d_π(s) Σ_a π(a|s) A_{π0}(s,a)`, so that `η(π) = η(π0) + return_gap`.
pub fn return_gap(mdp: &TabularMdp, pi: &TabularPolicy, pi0: &TabularPolicy) -> Result<f64> {
    mdp.check_policy(pi0)?;
    let eval0 = evaluate_policy(mdp, pi0)?;
    let d = visitation(mdp, pi)?;
    Ok(weighted_advantage(&d, pi, &eval0))
}

fn weighted_advantage(d: &[f64], pi: &TabularPolicy, eval0: &ExactEvaluation) -> f64 {
    d.iter()
        .enumerate()
        .map(|(s, ds)| {
            ds * pi.row(s).iter().zip(eval0.adv_row(s)).map(|(p, a)| p * a).sum::<f64>()
        })
        .sum()
}

/// The first-order surrogate `L_{π0}(π) = η(π0) + E_{d_{π0}, π0}[ρ A_{π0}]`.
pub fn surrogate_objective(mdp: &TabularMdp, pi: &TabularPolicy, pi0: &TabularPolicy) -> Result<f64> {
    mdp.check_policy(pi)?;
    let eval0 = evaluate_policy(mdp, pi0)?;
    let mut total = eval0.eta;
    for s in 0..mdp.n_states {
        let mut inner = 0.0;
        for a in 0..mdp.n_actions {
            let p0 = pi0.prob(s, a);
            let adv = eval0.adv[s * mdp.n_actions + a];
            inner += if p0 > 0.0 { p0 * (pi.prob(s, a) / p0) * adv } else { pi.prob(s, a) * adv };
        }
        total += eval0.visitation[s] * inner;
    }
    Ok(total)
}

/// One Bellman optimality backup.
pub fn bellman_backup(mdp: &TabularMdp, v: &[f64]) -> Vec<f64> {
    (0..mdp.n_states)
        .map(|s| (0..mdp.n_actions).map(|a| q_from_v(mdp, v, s, a)).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn q_from_v(mdp: &TabularMdp, v: &[f64], s: usize, a: usize) -> f64 {
    mdp.transition(s, a)
        .iter()
        .zip(mdp.reward(s, a))
        .zip(v)
        .map(|((p, r), vn)| p * (r + mdp.gamma * vn))
        .sum()
}

/// Optimal values by value iteration, stopping once a sweep moves `v` by less than `tol`.
pub fn optimal_values(mdp: &TabularMdp, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(BrrlError::domain(format!("tol = {tol} must be positive")));
    }
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..MAX_SWEEPS {
        let next = bellman_backup(mdp, &v);
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < tol {
            return Ok(v);
        }
    }
    Err(BrrlError::Numeric(format!("value iteration did not converge in {MAX_SWEEPS} sweeps")))
}

/// Greedy deterministic policy from value iteration and its exact return.
///
/// Ties between actions go to the lowest index.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(TabularPolicy, f64)> {
    let v = optimal_values(mdp, tol)?;
    let actions: Vec<usize> = (0..mdp.n_states)
        .map(|s| {
            let mut best = 0;
            let mut best_q = q_from_v(mdp, &v, s, 0);
            for a in 1..mdp.n_actions {
                let q = q_from_v(mdp, &v, s, a);
                if q > best_q + 1e-12 {
                    best = a;
                    best_q = q;
                }
            }
            best
        })
        .collect();
    let pi = TabularPolicy::deterministic(mdp.n_actions, &actions)?;
    let eta = evaluate_policy(mdp, &pi)?.eta;
    Ok((pi, eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![reward], vec![1.0], gamma).unwrap()
    }

    #[test]
    fn geometric_series() {
        let e = evaluate_policy(&single_state(1.0, 0.9), &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((e.v[0] - 10.0).abs() < 1e-12);
        assert!((e.eta - 10.0).abs() < 1e-12);
        assert!((e.visitation[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows() {
        let err = TabularMdp::new(1, 1, vec![0.5], vec![0.0], vec![1.0], 0.9).unwrap_err();
        assert!(err.to_string().contains("transition[0][0]"), "{err}");
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], 1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let mdp = single_state(1.0, 0.5);
        let err = evaluate_policy(&mdp, &TabularPolicy::uniform(2, 1)).unwrap_err();
        assert!(matches!(err, BrrlError::Shape(_)));
    }

    #[test]
    fn absorbing_rewarding_action_is_chosen() {
        // Two states, action 1 self-loops with reward 1, action 0 moves away with reward 0.
        let mut p = vec![0.0; 8];
        let mut r = vec![0.0; 8];
        for s in 0..2 {
            p[(s * 2) * 2 + (1 - s)] = 1.0;
            p[(s * 2 + 1) * 2 + s] = 1.0;
            r[(s * 2 + 1) * 2 + s] = 1.0;
        }
        let mdp = TabularMdp::new(2, 2, p, r, vec![0.5, 0.5], 0.9).unwrap();
        let (pi, eta) = value_iteration(&mdp, 1e-12).unwrap();
        assert_eq!(pi.row(0), &[0.0, 1.0]);
        assert_eq!(pi.row(1), &[0.0, 1.0]);
        assert!((eta - 10.0).abs() < 1e-9);
    }
}
