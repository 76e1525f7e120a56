//! Closed-form optimal bounded-ratio policies.
//!
//! For the symmetric box `[1-ε, 1+ε]` with log-barrier weight `λ`, the optimal
//! ratio is `1 + ε tanh((Q - μ)/(2λ))` where `μ` is the soft-median of `Q`
//! under `π0`. The asymmetric box `[c_l, c_h]` gives a sigmoid in `Q - μ'`
//! with `μ'` a soft quantile. Both centres are found by bisection.

use serde::{Deserialize, Serialize};

use crate::error::{BrrlError, Result};
use crate::mdp::{visitation, ExactEvaluation, TabularMdp, TabularPolicy};

/// Iteration cap for the bisection solvers.
pub const BISECTION_MAX_ITERS: usize = 200;
/// Target residual of the normalization equation.
pub const RESIDUAL_TOL: f64 = 1e-12;
/// tanh/exp arguments are clamped to this magnitude.
pub const ARG_CLAMP: f64 = 40.0;

const PROB_TOL: f64 = 1e-9;
const SIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundKind {
    Symmetric { eps: f64 },
    Asymmetric { c_l: f64, c_h: f64 },
}

/// A ratio box together with the barrier weight `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    pub kind: BoundKind,
    pub lambda: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(BrrlError::domain(format!("lambda = {lambda} must be positive")))
    }
}

impl RatioBounds {
    pub fn symmetric(eps: f64, lambda: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(BrrlError::domain(format!("eps = {eps} must lie in (0, 1)")));
        }
        check_lambda(lambda)?;
        Ok(RatioBounds { kind: BoundKind::Symmetric { eps }, lambda })
    }

    pub fn asymmetric(c_l: f64, c_h: f64, lambda: f64) -> Result<Self> {
        if !(c_l >= 0.0 && c_l < 1.0 && c_h > 1.0 && c_h.is_finite()) {
            return Err(BrrlError::domain(format!("bounds (c_l, c_h) = ({c_l}, {c_h}) need 0 <= c_l < 1 < c_h")));
        }
        check_lambda(lambda)?;
        Ok(RatioBounds { kind: BoundKind::Asymmetric { c_l, c_h }, lambda })
    }

    pub fn lower(&self) -> f64 {
        match self.kind {
            BoundKind::Symmetric { eps } => 1.0 - eps,
            BoundKind::Asymmetric { c_l, .. } => c_l,
        }
    }

    pub fn upper(&self) -> f64 {
        match self.kind {
            BoundKind::Symmetric { eps } => 1.0 + eps,
            BoundKind::Asymmetric { c_h, .. } => c_h,
        }
    }

    /// `k = (c_h - 1)/(1 - c_l)`; equal to 1 in the symmetric case.
    pub fn k(&self) -> f64 {
        match self.kind {
            BoundKind::Symmetric { .. } => 1.0,
            BoundKind::Asymmetric { c_l, c_h } => (c_h - 1.0) / (1.0 - c_l),
        }
    }

    /// Factor turning `B` into the return improvement: `ε` or `c_h - 1`.
    pub fn improvement_scale(&self) -> f64 {
        self.upper() - 1.0
    }
}

fn clamp_arg(x: f64) -> f64 {
    x.clamp(-ARG_CLAMP, ARG_CLAMP)
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

/// `g(x) = ln(e^{-x/2} + e^{x/2})`, the soft absolute value behind the median loss.
pub fn soft_abs(x: f64) -> f64 {
    -0.5 * x + softplus(x)
}

/// `g'(x) = ln(e^{(c_h-1)x/(c_h-c_l)} + k e^{-(1-c_l)x/(c_h-c_l)})`, the asymmetric analogue.
pub fn soft_abs_asymmetric(x: f64, c_l: f64, c_h: f64) -> f64 {
    let a = (c_h - 1.0) / (c_h - c_l);
    let k = (c_h - 1.0) / (1.0 - c_l);
    a * x + softplus(k.ln() - x)
}

fn support(q: &[f64], p: &[f64]) -> Result<Vec<usize>> {
    if q.len() != p.len() {
        return Err(BrrlError::shape(format!("q has {} entries, p has {}", q.len(), p.len())));
    }
    if let Some(x) = q.iter().find(|x| !x.is_finite()) {
        return Err(BrrlError::domain(format!("non-finite value {x} in q")));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(BrrlError::domain(format!("invalid probability {x}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(BrrlError::domain(format!("probabilities sum to {total}")));
    }
    let idx: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    if idx.is_empty() {
        return Err(BrrlError::domain("empty support"));
    }
    Ok(idx)
}

/// Bisection for the root of a nonincreasing function on `[lo, hi]`.
/// Returns the visited point with the smallest residual.
fn bisect_decreasing(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (flo, fhi) = (f(lo), f(hi));
    let mut best = if flo.abs() <= fhi.abs() { (lo, flo) } else { (hi, fhi) };
    for _ in 0..BISECTION_MAX_ITERS {
        if best.1 == 0.0 {
            break;
        }
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm.abs() < best.1.abs() {
            best = (mid, fm);
        }
        if fm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.0
}

fn bracket(q: &[f64], idx: &[usize]) -> (f64, f64) {
    idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(q[i]), hi.max(q[i])))
}

/// `E_p[tanh((q - μ)/(2λ))]`.
pub fn soft_median_residual(q: &[f64], p: &[f64], mu: f64, lambda: f64) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| w * clamp_arg((x - mu) / (2.0 * lambda)).tanh())
        .sum()
}

/// Soft-median: the root of `E_p[tanh((q - μ)/(2λ))] = 0`.
pub fn soft_median(q: &[f64], p: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let idx = support(q, p)?;
    let (lo, hi) = bracket(q, &idx);
    Ok(bisect_decreasing(lo, hi, |mu| soft_median_residual(q, p, mu, lambda)))
}

/// `(1 - e^{-x})/(1 + k e^{-x})` evaluated without overflow for clamped `x`.
fn quantile_kernel(x: f64, k: f64) -> f64 {
    let x = clamp_arg(x);
    if x >= 0.0 {
        -(-x).exp_m1() / (1.0 + k * (-x).exp())
    } else {
        x.exp_m1() / (x.exp() + k)
    }
}

/// `E_p[(1 - e^{-x})/(1 + k e^{-x})]` with `x = (q - μ')/λ`.
pub fn soft_quantile_residual(q: &[f64], p: &[f64], mu: f64, c_l: f64, c_h: f64, lambda: f64) -> f64 {
    let k = (c_h - 1.0) / (1.0 - c_l);
    q.iter()
        .zip(p)
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| w * quantile_kernel((x - mu) / lambda, k))
        .sum()
}

/// Soft `(c_h-1)/(c_h-c_l)`-quantile: the root of the asymmetric normalization equation.
pub fn soft_quantile(q: &[f64], p: &[f64], c_l: f64, c_h: f64, lambda: f64) -> Result<f64> {
    RatioBounds::asymmetric(c_l, c_h, lambda)?;
    let idx = support(q, p)?;
    let (lo, hi) = bracket(q, &idx);
    Ok(bisect_decreasing(lo, hi, |mu| soft_quantile_residual(q, p, mu, c_l, c_h, lambda)))
}

/// Optimal ratio for centred value `adv_tilde = q - μ`.
pub fn optimal_ratio(adv_tilde: f64, bounds: &RatioBounds) -> f64 {
    let lambda = bounds.lambda;
    match bounds.kind {
        BoundKind::Symmetric { eps } => 1.0 + eps * clamp_arg(adv_tilde / (2.0 * lambda)).tanh(),
        BoundKind::Asymmetric { c_l, c_h } => {
            let x = clamp_arg(adv_tilde / lambda);
            c_l + (c_h - c_l) / (1.0 + bounds.k() * (-x).exp())
        }
    }
}

/// Per-action term of the improvement constant `B` (or `B'`).
///
/// Symmetric: `tanh(Ã/2λ) Ã`. Asymmetric: `(1+e^{-x})/(1+k e^{-x}) tanh(x/2) Ã'` with `x = Ã'/λ`.
pub fn improvement_term(adv_tilde: f64, bounds: &RatioBounds) -> f64 {
    let lambda = bounds.lambda;
    match bounds.kind {
        BoundKind::Symmetric { .. } => clamp_arg(adv_tilde / (2.0 * lambda)).tanh() * adv_tilde,
        BoundKind::Asymmetric { .. } => {
            let x = clamp_arg(adv_tilde / lambda);
            let e = (-x).exp();
            (1.0 + e) / (1.0 + bounds.k() * e) * (0.5 * x).tanh() * adv_tilde
        }
    }
}

/// Centre and optimal ratios for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSolution {
    pub mu: f64,
    pub ratio: Vec<f64>,
}

/// Solves the regularized bounded-ratio problem for a single state.
pub fn solve_state(q: &[f64], p: &[f64], bounds: &RatioBounds) -> Result<StateSolution> {
    let mu = match bounds.kind {
        BoundKind::Symmetric { .. } => soft_median(q, p, bounds.lambda)?,
        BoundKind::Asymmetric { c_l, c_h } => soft_quantile(q, p, c_l, c_h, bounds.lambda)?,
    };
    let ratio = q.iter().map(|x| optimal_ratio(x - mu, bounds)).collect();
    Ok(StateSolution { mu, ratio })
}

/// The optimal bounded-ratio policy of an MDP state by state.
#[derive(Debug, Clone, PartialEq)]
pub struct BrrlSolution {
    pub mu: Vec<f64>,
    /// Row-major `[s][a]`.
    pub ratio: Vec<f64>,
    pub pi_star: TabularPolicy,
    /// Row-major `[s][a]`, `q - mu`.
    pub median_adv: Vec<f64>,
    /// `B` (symmetric) or `B'` (asymmetric), before scaling by the box width.
    pub predicted_b: f64,
    pub bounds: RatioBounds,
}

impl BrrlSolution {
    pub fn ratio_row(&self, s: usize) -> &[f64] {
        let k = self.pi_star.n_actions();
        &self.ratio[s * k..(s + 1) * k]
    }

    /// `ε B` or `(c_h - 1) B'`: the exact return improvement of `pi_star` over `π0`.
    pub fn predicted_improvement(&self) -> f64 {
        self.bounds.improvement_scale() * self.predicted_b
    }
}

/// Builds `π*` for any bounds; see [`solve_symmetric`] and [`solve_asymmetric`].
pub fn solve(mdp: &TabularMdp, eval: &ExactEvaluation, pi0: &TabularPolicy, bounds: &RatioBounds) -> Result<BrrlSolution> {
    let (n, k) = (pi0.n_states(), pi0.n_actions());
    if eval.v.len() != n || eval.n_actions() != k {
        return Err(BrrlError::shape("evaluation and policy dimensions differ"));
    }
    let mut mu = Vec::with_capacity(n);
    let mut ratio = Vec::with_capacity(n * k);
    let mut median_adv = Vec::with_capacity(n * k);
    for s in 0..n {
        let q = eval.q_row(s);
        let sol = solve_state(q, pi0.row(s), bounds)?;
        median_adv.extend(q.iter().map(|x| x - sol.mu));
        mu.push(sol.mu);
        ratio.extend(sol.ratio);
    }
    let probs = ratio.iter().zip(pi0.probs()).map(|(r, p)| r * p).collect();
    let pi_star = TabularPolicy::new(n, k, probs)?;
    let d_star = visitation(mdp, &pi_star)?;
    let predicted_b = (0..n)
        .map(|s| {
            let inner: f64 = (0..k).map(|a| pi0.prob(s, a) * improvement_term(median_adv[s * k + a], bounds)).sum();
            d_star[s] * inner
        })
        .sum();
    Ok(BrrlSolution { mu, ratio, pi_star, median_adv, predicted_b, bounds: *bounds })
}

/// Symmetric optimum: ratios `1 + ε tanh(Ã/(2λ))` around the soft-median.
pub fn solve_symmetric(
    mdp: &TabularMdp,
    eval: &ExactEvaluation,
    pi0: &TabularPolicy,
    eps: f64,
    lambda: f64,
) -> Result<BrrlSolution> {
    solve(mdp, eval, pi0, &RatioBounds::symmetric(eps, lambda)?)
}

/// Asymmetric optimum: sigmoid ratios in `[c_l, c_h]` around the soft quantile.
pub fn solve_asymmetric(
    mdp: &TabularMdp,
    eval: &ExactEvaluation,
    pi0: &TabularPolicy,
    c_l: f64,
    c_h: f64,
    lambda: f64,
) -> Result<BrrlSolution> {
    solve(mdp, eval, pi0, &RatioBounds::asymmetric(c_l, c_h, lambda)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignStatus {
    Exact,
    Infeasible,
}

/// The `λ → 0` solution `1 + ε sign(Q - μ)`, when an exact median split exists.
#[derive(Debug, Clone, PartialEq)]
pub struct SignSolution {
    /// Candidate centre per state; for infeasible states the best (smallest imbalance) candidate.
    pub mu: Vec<f64>,
    pub status: Vec<SignStatus>,
    /// Present only when every state is exact.
    pub pi_star: Option<TabularPolicy>,
}

impl SignSolution {
    pub fn all_exact(&self) -> bool {
        self.status.iter().all(|s| *s == SignStatus::Exact)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scans sorted `Q` values and midpoints for `μ` with `E_p[sign(q - μ)] = 0`.
/// Returns the lowest such candidate, or `Err(best)` with the least imbalanced one.
pub fn sign_median(q: &[f64], p: &[f64]) -> std::result::Result<f64, f64> {
    let mut values: Vec<f64> = q.iter().zip(p).filter(|(_, w)| **w > 0.0).map(|(x, _)| *x).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut candidates = Vec::with_capacity(2 * values.len());
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            candidates.push(0.5 * (values[i - 1] + v));
        }
        candidates.push(*v);
    }
    let imbalance = |mu: f64| q.iter().zip(p).map(|(x, w)| w * sign(x - mu)).sum::<f64>().abs();
    let mut best = (f64::INFINITY, f64::NAN);
    for mu in candidates {
        let b = imbalance(mu);
        if b <= SIGN_TOL {
            return Ok(mu);
        }
        if b < best.0 {
            best = (b, mu);
        }
    }
    Err(best.1)
}

/// Sign-based simplification of the optimal policy; per-state feasibility is reported exactly.
pub fn sign_solution(eval: &ExactEvaluation, pi0: &TabularPolicy, eps: f64) -> Result<SignSolution> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(BrrlError::domain(format!("eps = {eps} must lie in (0, 1)")));
    }
    let (n, k) = (pi0.n_states(), pi0.n_actions());
    if eval.v.len() != n || eval.n_actions() != k {
        return Err(BrrlError::shape("evaluation and policy dimensions differ"));
    }
    let mut mu = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    for s in 0..n {
        match sign_median(eval.q_row(s), pi0.row(s)) {
            Ok(m) => {
                mu.push(m);
                status.push(SignStatus::Exact);
            }
            Err(m) => {
                mu.push(m);
                status.push(SignStatus::Infeasible);
            }
        }
    }
    let pi_star = if status.iter().all(|s| *s == SignStatus::Exact) {
        let probs = (0..n)
            .flat_map(|s| {
                let (q, p, m) = (eval.q_row(s), pi0.row(s), mu[s]);
                (0..k).map(move |a| p[a] * (1.0 + eps * sign(q[a] - m)))
            })
            .collect();
        Some(TabularPolicy::new(n, k, probs)?)
    } else {
        None
    };
    Ok(SignSolution { mu, status, pi_star })
}

fn xlogx(x: f64) -> f64 {
    x * x.ln()
}

/// The log-barrier regularizer `H` (symmetric) or `H'` (asymmetric) at ratio `rho`.
pub fn regularizer_h(rho: f64, bounds: &RatioBounds) -> Result<f64> {
    let (lo, hi) = (bounds.lower(), bounds.upper());
    if !(rho > lo && rho < hi) {
        return Err(BrrlError::domain(format!("rho = {rho} outside the open interval ({lo}, {hi})")));
    }
    Ok(xlogx(rho - lo) + xlogx(hi - rho) + rho * bounds.k().ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_two_point_median() {
        for lambda in [1e-4, 0.05, 1.0, 30.0] {
            let mu = soft_median(&[0.0, 1.0], &[0.5, 0.5], lambda).unwrap();
            assert!((mu - 0.5).abs() < 1e-12, "lambda {lambda}: mu {mu}");
        }
    }

    #[test]
    fn constant_q_median_and_quantile() {
        assert_eq!(soft_median(&[2.5; 4], &[0.25; 4], 0.1).unwrap(), 2.5);
        assert_eq!(soft_quantile(&[2.5; 4], &[0.25; 4], 0.0, 3.0, 0.1).unwrap(), 2.5);
    }

    #[test]
    fn single_support_returns_its_q() {
        let mu = soft_median(&[3.0, -1.0, 7.0], &[0.0, 1.0, 0.0], 0.1).unwrap();
        assert_eq!(mu, -1.0);
    }

    #[test]
    fn domain_errors() {
        assert!(soft_median(&[0.0], &[1.0], 0.0).is_err());
        assert!(soft_median(&[0.0, 1.0], &[0.0, 0.0], 0.1).is_err());
        assert!(soft_quantile(&[0.0, 1.0], &[0.5, 0.5], 1.0, 2.0, 0.1).is_err());
        assert!(RatioBounds::symmetric(1.0, 0.1).is_err());
    }

    #[test]
    fn soft_abs_forms_agree() {
        for x in [-50.0, -3.0, 0.0, 0.7, 12.0] {
            let direct = ((-x / 2.0_f64).exp() + (x / 2.0_f64).exp()).ln();
            assert!((soft_abs(x) - direct).abs() < 1e-12);
            assert!((soft_abs_asymmetric(x, 0.8, 1.2) - soft_abs(x)).abs() < 1e-12);
            let (c_l, c_h) = (0.5, 3.0);
            let k: f64 = (c_h - 1.0) / (1.0 - c_l);
            let direct = ((c_h - 1.0) * x / (c_h - c_l)).exp() + k * (-(1.0 - c_l) * x / (c_h - c_l)).exp();
            assert!((soft_abs_asymmetric(x, c_l, c_h) - direct.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn asymmetric_ratio_is_one_at_centre() {
        let b = RatioBounds::asymmetric(0.3, 2.5, 0.01).unwrap();
        assert!((optimal_ratio(0.0, &b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn regularizer_endpoints() {
        let eps = 0.2;
        let b = RatioBounds::symmetric(eps, 0.1).unwrap();
        let at_one = regularizer_h(1.0, &b).unwrap();
        assert!((at_one - 2.0 * eps * eps.ln()).abs() < 1e-14);
        let near_top = regularizer_h(1.0 + eps - 1e-12, &b).unwrap();
        assert!((near_top - 2.0 * eps * (2.0 * eps).ln()).abs() < 1e-9);
        assert!(regularizer_h(1.0 + eps, &b).is_err());
        assert!(regularizer_h(0.5, &b).is_err());
    }

    #[test]
    fn asymmetric_regularizer_minimized_at_one() {
        let b = RatioBounds::asymmetric(0.5, 3.0, 0.1).unwrap();
        let h = 1e-5;
        let d = (regularizer_h(1.0 + h, &b).unwrap() - regularizer_h(1.0 - h, &b).unwrap()) / (2.0 * h);
        assert!(d.abs() < 1e-6, "derivative {d}");
    }

    #[test]
    fn sign_median_cases() {
        assert_eq!(sign_median(&[0.0, 1.0], &[0.5, 0.5]), Ok(0.5));
        assert!(sign_median(&[0.0, 1.0], &[0.25, 0.75]).is_err());
        assert_eq!(sign_median(&[4.0, 1.0, 3.0, 2.0], &[0.25; 4]), Ok(2.5));
    }
}
