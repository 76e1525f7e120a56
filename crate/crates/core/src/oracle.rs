//! Independent solvers used to certify [`crate::analytic`].
//!
//! Nothing here calls into the closed-form solution: the LP optimum comes from a
//! greedy fill of the ratio box, the regularized optimum from a primal Newton
//! ascent on the constrained objective, and the soft-median/quantile from
//! golden-section minimization of their convex characterizations.

use crate::analytic::RatioBounds;
use crate::error::{BrrlError, Result};
use crate::mdp::{evaluate_policy, TabularMdp, TabularPolicy};

/// Outcome of a per-state oracle solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub ratio: Vec<f64>,
    /// Linear objective `Σ_a p_a ρ_a q_a`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Step cap of the regularized solver.
pub const MAX_ASCENT_STEPS: usize = 100_000;
const DECREMENT_TOL: f64 = 1e-10;
const FREEZE_GAP: f64 = 1e-12;
const FRACTION_TO_BOUNDARY: f64 = 0.99;
const BACKTRACK: f64 = 0.5;
const ARMIJO: f64 = 1e-4;

fn validate(q: &[f64], p: &[f64]) -> Result<()> {
    if q.len() != p.len() || q.is_empty() {
        return Err(BrrlError::shape(format!("q has {} entries, p has {}", q.len(), p.len())));
    }
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || q.iter().any(|x| !x.is_finite()) {
        return Err(BrrlError::domain("q and p must be finite with p >= 0"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(BrrlError::domain(format!("probabilities sum to {total}")));
    }
    Ok(())
}

fn linear_objective(q: &[f64], p: &[f64], rho: &[f64]) -> f64 {
    q.iter().zip(p).zip(rho).map(|((q, p), r)| p * r * q).sum()
}

/// Exact optimum of `max Σ p ρ q` over `ρ ∈ [c_l, c_h]`, `Σ p ρ = 1`.
///
/// Actions are filled in descending `q` order; equal-`q` actions form one block
/// sharing a ratio, and the single block where the budget runs out is fractional.
pub fn lp_greedy_state(q: &[f64], p: &[f64], c_l: f64, c_h: f64) -> Result<OracleResult> {
    validate(q, p)?;
    if !(c_l <= 1.0 && c_h >= 1.0 && c_l >= 0.0) {
        return Err(BrrlError::domain(format!("infeasible bounds [{c_l}, {c_h}]")));
    }
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&i, &j| q[j].total_cmp(&q[i]).then(i.cmp(&j)));
    let mut rho = vec![c_l; q.len()];
    let mut budget = 1.0 - c_l;
    let mut blocks = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && q[order[end]] == q[order[start]] {
            end += 1;
        }
        blocks += 1;
        let block = &order[start..end];
        let mass: f64 = block.iter().map(|&i| p[i]).sum();
        let capacity = (c_h - c_l) * mass;
        let value = if budget <= 0.0 {
            c_l
        } else if capacity <= budget {
            budget -= capacity;
            c_h
        } else {
            let v = c_l + budget / mass;
            budget = 0.0;
            v
        };
        block.iter().for_each(|&i| rho[i] = value);
        start = end;
    }
    Ok(OracleResult { objective: linear_objective(q, p, &rho), ratio: rho, iterations: blocks, converged: true })
}

struct Barrier {
    lo: f64,
    hi: f64,
    lambda: f64,
    ln_k: f64,
}

impl Barrier {
    fn h(&self, rho: f64) -> f64 {
        let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
        xlogx(rho - self.lo) + xlogx(self.hi - rho) + rho * self.ln_k
    }

    /// Derivative of `ρ q - λ H(ρ)` per unit mass.
    fn slope(&self, q: f64, rho: f64) -> f64 {
        q - self.lambda * (((rho - self.lo) / (self.hi - rho)).ln() + self.ln_k)
    }

    /// Negative second derivative of `ρ q - λ H(ρ)` per unit mass.
    fn curvature(&self, rho: f64) -> f64 {
        self.lambda * (1.0 / (rho - self.lo) + 1.0 / (self.hi - rho))
    }

    fn interior(&self, rho: f64) -> bool {
        rho > self.lo && rho < self.hi
    }
}

/// Maximizes `Σ p_a [ρ_a q_a - λ H(ρ_a)]` subject to `Σ p_a ρ_a = 1` from `ρ = 1`.
///
/// Each step is the Newton direction restricted to the normalization plane
/// (identical to Newton in reduced coordinates) with a fraction-to-boundary cap
/// and backtracking. Coordinates that reach floating-point distance of a bound
/// while still pushing outward are pinned there, which is how saturated ratios
/// at very small `λ` are represented. Converged once the Newton decrement of the
/// remaining coordinates is below `1e-10`, or once an accepted step leaves every
/// coordinate unchanged.
pub fn numeric_regularized_state(q: &[f64], p: &[f64], bounds: &RatioBounds) -> Result<OracleResult> {
    validate(q, p)?;
    let bar = Barrier { lo: bounds.lower(), hi: bounds.upper(), lambda: bounds.lambda, ln_k: bounds.k().ln() };
    let support: Vec<usize> = (0..q.len()).filter(|&i| p[i] > 0.0).collect();
    let mut rho = vec![1.0; q.len()];
    let mut pinned = vec![false; q.len()];
    let objective = |rho: &[f64]| -> f64 { support.iter().map(|&i| p[i] * (rho[i] * q[i] - bar.lambda * bar.h(rho[i]))).sum() };

    let mut converged = false;
    let mut iterations = 0;
    let mut direction = vec![0.0; q.len()];
    while iterations < MAX_ASCENT_STEPS {
        iterations += 1;
        // Newton direction on the free coordinates; re-solved whenever the pinned set changes.
        let mut changed = true;
        let mut decrement2 = 0.0;
        let mut passes = 0;
        while changed && passes <= q.len() + 1 {
            passes += 1;
            changed = false;
            let free: Vec<usize> = support.iter().copied().filter(|&i| !pinned[i]).collect();
            let (mut num, mut den) = (0.0, 0.0);
            for &i in &free {
                let inv = 1.0 / (p[i] * bar.curvature(rho[i]));
                num += inv * p[i] * p[i] * bar.slope(q[i], rho[i]);
                den += inv * p[i] * p[i];
            }
            let nu = if den > 0.0 { num / den } else { 0.0 };
            decrement2 = 0.0;
            direction.iter_mut().for_each(|d| *d = 0.0);
            for &i in &support {
                let residual = p[i] * (bar.slope(q[i], rho[i]) - nu);
                let d = residual / (p[i] * bar.curvature(rho[i]));
                let near_hi = bar.hi - rho[i] < FREEZE_GAP * bar.hi.max(1.0);
                let near_lo = rho[i] - bar.lo < FREEZE_GAP * bar.hi.max(1.0);
                let outward = (near_hi && d > 0.0) || (near_lo && d < 0.0);
                if pinned[i] != outward && (pinned[i] || free.len() > 1) {
                    pinned[i] = outward;
                    changed = true;
                }
                if !pinned[i] {
                    direction[i] = d;
                    decrement2 += d * residual;
                }
            }
        }
        if decrement2.sqrt() < DECREMENT_TOL {
            converged = true;
            break;
        }
        let mut t_max: f64 = 1.0;
        for &i in &support {
            let d = direction[i];
            if d > 0.0 {
                t_max = t_max.min(FRACTION_TO_BOUNDARY * (bar.hi - rho[i]) / d);
            } else if d < 0.0 {
                t_max = t_max.min(FRACTION_TO_BOUNDARY * (rho[i] - bar.lo) / -d);
            }
        }
        let f0 = objective(&rho);
        let mut t = t_max;
        let mut accepted = false;
        let mut trial = rho.clone();
        while t > 1e-30 {
            for &i in &support {
                trial[i] = rho[i] + t * direction[i];
            }
            if support.iter().all(|&i| bar.interior(trial[i])) {
                // Either a sufficient increase, or the directional derivative is still
                // nonnegative at the trial point (so the objective cannot have dropped).
                let slope_at_trial: f64 = support.iter().map(|&i| p[i] * bar.slope(q[i], trial[i]) * direction[i]).sum();
                if objective(&trial) >= f0 + ARMIJO * t * decrement2 || slope_at_trial >= 0.0 {
                    accepted = true;
                    break;
                }
            }
            t *= BACKTRACK;
        }
        if !accepted {
            break;
        }
        // A step that moves nothing is a floating-point fixed point: the decrement
        // is at its rounding floor near a bound.
        if trial == rho {
            converged = true;
            break;
        }
        std::mem::swap(&mut rho, &mut trial);
    }

    // Zero-mass actions do not enter the objective; give them the ratio that is
    // stationary against the recovered multiplier.
    let free: Vec<usize> = support.iter().copied().filter(|&i| !pinned[i]).collect();
    let mass: f64 = free.iter().map(|&i| p[i]).sum();
    for i in (0..q.len()).filter(|&i| p[i] == 0.0) {
        rho[i] = if mass > 0.0 {
            let nu = free.iter().map(|&j| p[j] * bar.slope(q[j], rho[j])).sum::<f64>() / mass;
            let z = ((q[i] - nu) / bar.lambda - bar.ln_k).clamp(-40.0, 40.0);
            bar.lo + (bar.hi - bar.lo) / (1.0 + (-z).exp())
        } else {
            1.0
        };
    }
    Ok(OracleResult { objective: linear_objective(q, p, &rho), ratio: rho, iterations, converged })
}

/// A closed ratio box `[lower, upper]` with `lower <= 1 <= upper`; may be collapsed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioBox {
    pub lower: f64,
    pub upper: f64,
}

impl From<&RatioBounds> for RatioBox {
    fn from(b: &RatioBounds) -> Self {
        RatioBox { lower: b.lower(), upper: b.upper() }
    }
}

/// Best surrogate value `L_{π0}(π)` over grid-enumerated feasible ratio vectors.
pub fn exhaustive_best_response(mdp: &TabularMdp, pi0: &TabularPolicy, bounds: RatioBox, grid: usize) -> Result<f64> {
    let k = mdp.n_actions();
    if k > 3 {
        return Err(BrrlError::domain(format!("exhaustive search supports at most 3 actions, got {k}")));
    }
    if !(2..=101).contains(&grid) {
        return Err(BrrlError::domain(format!("grid = {grid} must lie in 2..=101")));
    }
    if !(bounds.lower <= 1.0 && 1.0 <= bounds.upper) {
        return Err(BrrlError::domain("ratio box must contain 1"));
    }
    let eval = evaluate_policy(mdp, pi0)?;
    let points: Vec<f64> = (0..grid)
        .map(|i| bounds.lower + (bounds.upper - bounds.lower) * i as f64 / (grid - 1) as f64)
        .collect();
    let mut total = eval.eta;
    for s in 0..mdp.n_states() {
        let (p, adv) = (pi0.row(s), eval.adv_row(s));
        let dep = (0..k).max_by(|&i, &j| p[i].total_cmp(&p[j])).expect("at least one action");
        let free: Vec<usize> = (0..k).filter(|&i| i != dep).collect();
        // ρ = 1 is always feasible.
        let mut best: f64 = p.iter().zip(adv).map(|(p, a)| p * a).sum();
        let mut rho = vec![1.0; k];
        let combos = points.len().pow(free.len() as u32);
        for c in 0..combos {
            let mut idx = c;
            let mut used = 0.0;
            for &f in &free {
                rho[f] = points[idx % points.len()];
                idx /= points.len();
                used += p[f] * rho[f];
            }
            rho[dep] = (1.0 - used) / p[dep];
            if rho[dep] < bounds.lower - 1e-12 || rho[dep] > bounds.upper + 1e-12 {
                continue;
            }
            let value: f64 = (0..k).map(|a| p[a] * rho[a] * adv[a]).sum();
            best = best.max(value);
        }
        total += eval.visitation[s] * best;
    }
    Ok(total)
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimization driven by a difference oracle `diff(x1, x2) = F(x2) - F(x1)`.
fn golden_section(mut lo: f64, mut hi: f64, diff: impl Fn(f64, f64) -> f64) -> f64 {
    let tol = 1e-15 * (lo.abs().max(hi.abs()).max(1.0));
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    for _ in 0..400 {
        if hi - lo <= tol {
            break;
        }
        if diff(x1, x2) > 0.0 {
            // F(x1) < F(x2): minimum lies in [lo, x2].
            hi = x2;
            x2 = x1;
            x1 = hi - GOLDEN * (hi - lo);
        } else {
            lo = x1;
            x1 = x2;
            x2 = lo + GOLDEN * (hi - lo);
        }
    }
    0.5 * (lo + hi)
}

fn span(q: &[f64], p: &[f64]) -> (f64, f64) {
    q.iter()
        .zip(p)
        .filter(|(_, w)| **w > 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(*x), hi.max(*x)))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(e^u + e^v)`.
fn log_add_exp(u: f64, v: f64) -> f64 {
    let m = u.max(v);
    m + (-(u - v).abs()).exp().ln_1p()
}

/// Minimizer of `E_p[g((q - μ)/λ)]`, `g(x) = ln(e^{-x/2} + e^{x/2})`, by golden-section search.
///
/// Differences `g(x + 2h) - g(x)` equal `ln(cosh h + tanh(x/2) sinh h)`. Short steps
/// use `ln_1p(2 sinh²(h/2) + tanh(x/2) sinh h)`, which keeps comparisons exact near
/// the flat minimum; long steps use the log-sum-exp form
/// `ln(σ(x) e^h + σ(-x) e^{-h})`, which does not cancel when `tanh` saturates.
pub fn soft_median_argmin(q: &[f64], p: &[f64], lambda: f64) -> Result<f64> {
    validate(q, p)?;
    let (lo, hi) = span(q, p);
    let diff = |m1: f64, m2: f64| -> f64 {
        let h = (m1 - m2) / (2.0 * lambda);
        q.iter()
            .zip(p)
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, w)| {
                let a = (x - m1) / (2.0 * lambda);
                let d = if h.abs() < 1.0 {
                    let s = (0.5 * h).sinh();
                    (2.0 * s * s + a.tanh() * h.sinh()).ln_1p()
                } else {
                    log_add_exp(h - softplus(-2.0 * a), -h - softplus(2.0 * a))
                };
                w * d
            })
            .sum()
    };
    Ok(golden_section(lo, hi, diff))
}

/// Minimizer of `E_p[g'((q - μ)/λ)]` for the asymmetric box, by golden-section search.
pub fn soft_quantile_argmin(q: &[f64], p: &[f64], c_l: f64, c_h: f64, lambda: f64) -> Result<f64> {
    validate(q, p)?;
    let (lo, hi) = span(q, p);
    let a = (c_h - 1.0) / (c_h - c_l);
    let ln_k = ((c_h - 1.0) / (1.0 - c_l)).ln();
    let diff = |m1: f64, m2: f64| -> f64 {
        let h = (m1 - m2) / lambda;
        q.iter()
            .zip(p)
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, w)| {
                let x1 = (x - m1) / lambda;
                // g'(x) = a x + ln(1 + k e^{-x}); with s = σ(ln k - x) the step is
                // a h + ln(1 - s + s e^{-h}).
                let z = ln_k - x1;
                let d = if h.abs() < 1.0 {
                    let s = 1.0 / (1.0 + (-z).exp());
                    a * h + (s * (-h).exp_m1()).ln_1p()
                } else {
                    a * h + log_add_exp(-softplus(z), -softplus(-z) - h)
                };
                w * d
            })
            .sum()
    };
    Ok(golden_section(lo, hi, diff))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remark_instance_lp() {
        let eps = 0.2;
        let r = lp_greedy_state(&[0.0, 1.0], &[0.25, 0.75], 1.0 - eps, 1.0 + eps).unwrap();
        assert!((r.ratio[0] - (1.0 - eps)).abs() < 1e-15);
        assert!((r.ratio[1] - (1.0 + eps / 3.0)).abs() < 1e-15);
        assert!((r.objective - 0.75 - eps / 4.0).abs() < 1e-15);
    }

    #[test]
    fn constant_q_lp_and_regularized() {
        let q = [0.3; 4];
        let p = [0.1, 0.2, 0.3, 0.4];
        let lp = lp_greedy_state(&q, &p, 0.8, 1.2).unwrap();
        assert!((linear_objective(&q, &p, &lp.ratio) - 0.3).abs() < 1e-15);
        let b = RatioBounds::symmetric(0.2, 0.01).unwrap();
        let r = numeric_regularized_state(&q, &p, &b).unwrap();
        assert!(r.converged);
        assert!(r.ratio.iter().all(|x| (x - 1.0).abs() < 1e-12), "{:?}", r.ratio);
    }

    #[test]
    fn lp_rejects_infeasible_box() {
        assert!(lp_greedy_state(&[0.0, 1.0], &[0.5, 0.5], 1.1, 2.0).is_err());
        assert!(lp_greedy_state(&[0.0, 1.0], &[0.5, 0.5], 0.5, 0.9).is_err());
    }

    #[test]
    fn dominant_regularizer_keeps_ratios_near_one() {
        let b = RatioBounds::symmetric(0.2, 10.0).unwrap();
        let r = numeric_regularized_state(&[0.0, 0.01], &[0.5, 0.5], &b).unwrap();
        assert!(r.converged);
        assert!(r.ratio.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn saturating_lambda_converges_to_vertex() {
        let b = RatioBounds::symmetric(0.2, 1e-3).unwrap();
        let r = numeric_regularized_state(&[0.0, 1.0], &[0.5, 0.5], &b).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.ratio[0] - 0.8).abs() < 1e-9 && (r.ratio[1] - 1.2).abs() < 1e-9, "{:?}", r.ratio);
    }

    #[test]
    fn golden_section_two_point() {
        let m = soft_median_argmin(&[0.0, 1.0], &[0.5, 0.5], 0.3).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }
}
