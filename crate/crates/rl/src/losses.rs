//! Loss graphs for the policy, value and median networks.
//!
//! Quantities that must not carry gradient (return targets, advantages, the
//! weights and targets of the policy loss) enter the graph as fresh leaves, so
//! they are detached by construction.

use brrl_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlError};

pub use brrl_core::theory::{ppo_equivalent_loss, ppo_objective_term};

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(RlError::Shape(format!("{what}: expected {expected} entries, got {got}")));
    }
    Ok(())
}

fn column(g: &Graph, v: Var, what: &str) -> Result<usize> {
    let (rows, cols) = g.value(v).shape();
    if cols != 1 {
        return Err(RlError::Shape(format!("{what} must be a column, got {rows}x{cols}")));
    }
    Ok(rows)
}

/// Mean of `(R - V)²`.
pub fn loss_value(g: &mut Graph, returns: &[f64], values: Var) -> Result<Var> {
    let n = column(g, values, "value predictions")?;
    check_len("returns", n, returns.len())?;
    let r = g.leaf(Tensor::column(returns.to_vec()));
    let d = g.sub(r, values)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean of `λ · g((R - μ)/λ)` with `g(x) = softplus(x) - x/2 = ln(2 cosh(x/2))`.
///
/// Minimizing over `μ` gives the soft median of the returns.
pub fn loss_median(g: &mut Graph, returns: &[f64], medians: Var, lambda: f64) -> Result<Var> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(RlError::Usage(format!("lambda must be positive, got {lambda}")));
    }
    let n = column(g, medians, "median predictions")?;
    check_len("returns", n, returns.len())?;
    let r = g.leaf(Tensor::column(returns.to_vec()));
    let d = g.sub(r, medians)?;
    let x = g.scale(d, 1.0 / lambda);
    let sp = g.softplus(x);
    let half = g.scale(x, 0.5);
    let gx = g.sub(sp, half)?;
    let scaled = g.scale(gx, lambda);
    Ok(g.mean(scaled))
}

/// `ρ = exp(log π_θ - log π₀)` as an `n x 1` column.
pub fn ratio_node(g: &mut Graph, log_probs: Var, behavior_log_probs: &[f64]) -> Result<Var> {
    let n = column(g, log_probs, "log-probabilities")?;
    check_len("behavior log-probabilities", n, behavior_log_probs.len())?;
    let b = g.leaf(Tensor::column(behavior_log_probs.to_vec()));
    let d = g.sub(log_probs, b)?;
    Ok(g.exp(d))
}

/// Which baseline the policy loss centers its advantages on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `R - μ_ψ`, the learned soft median.
    #[default]
    Median,
    /// `R - V_φ`.
    Mean,
}

/// Zero mean, unit population standard deviation (with a 1e-8 guard).
pub fn normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// Detached per-sample inputs of the bounded-ratio policy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BpoTargets {
    /// Centered advantage inside the tanh, in raw return units.
    pub adv_tilde: Vec<f64>,
    /// `|R - V| + α₁`, with `R - V` optionally normalized over the minibatch first.
    pub weights: Vec<f64>,
}

pub fn bpo_targets(returns: &[f64], values: &[f64], medians: &[f64], mode: AdvantageMode, alpha1: f64, normalize_weights: bool) -> Result<BpoTargets> {
    check_len("values", returns.len(), values.len())?;
    check_len("medians", returns.len(), medians.len())?;
    let adv: Vec<f64> = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    let adv_tilde = match mode {
        AdvantageMode::Median => returns.iter().zip(medians).map(|(r, m)| r - m).collect(),
        AdvantageMode::Mean => adv.clone(),
    };
    let spread = if normalize_weights { normalize(&adv) } else { adv };
    let weights = spread.iter().map(|a| a.abs() + alpha1).collect();
    Ok(BpoTargets { adv_tilde, weights })
}

/// Mean of `|1 + ε tanh(Ã / 2λ) - ρ| · w`; only `ρ` carries gradient.
pub fn loss_policy_bpo(g: &mut Graph, log_probs: Var, behavior_log_probs: &[f64], targets: &BpoTargets, eps: f64, lambda: f64) -> Result<Var> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(RlError::Usage(format!("lambda must be positive, got {lambda}")));
    }
    let rho = ratio_node(g, log_probs, behavior_log_probs)?;
    let n = behavior_log_probs.len();
    check_len("advantages", n, targets.adv_tilde.len())?;
    check_len("weights", n, targets.weights.len())?;
    let target = g.leaf(Tensor::column(targets.adv_tilde.iter().map(|a| 1.0 + eps * (a / (2.0 * lambda)).tanh()).collect()));
    let w = g.leaf(Tensor::column(targets.weights.clone()));
    let gap = g.sub(target, rho)?;
    let abs = g.abs(gap);
    let weighted = g.mul(abs, w)?;
    Ok(g.mean(weighted))
}

/// Negative mean of `min(clip(ρ, 1-ε, 1+ε) Â, ρ Â)`.
pub fn loss_policy_ppo(g: &mut Graph, log_probs: Var, behavior_log_probs: &[f64], advantages: &[f64], eps: f64) -> Result<Var> {
    let rho = ratio_node(g, log_probs, behavior_log_probs)?;
    check_len("advantages", behavior_log_probs.len(), advantages.len())?;
    let a = g.leaf(Tensor::column(advantages.to_vec()));
    let clipped = g.clamp(rho, 1.0 - eps, 1.0 + eps);
    let c = g.mul(clipped, a)?;
    let u = g.mul(rho, a)?;
    let m = g.minimum(c, u)?;
    let mean = g.mean(m);
    Ok(g.neg(mean))
}

/// `|A| · |ρ - (1 + ε s)|` for a sign `s` of the median advantage.
pub fn bpo_simple_loss(rho: f64, adv: f64, median_adv_sign: f64, eps: f64) -> f64 {
    let s = if median_adv_sign > 0.0 {
        1.0
    } else if median_adv_sign < 0.0 {
        -1.0
    } else {
        0.0
    };
    adv.abs() * (rho - (1.0 + eps * s)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn value_loss_examples() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::column(vec![0.0, 0.0]));
        let l = loss_value(&mut g, &[1.0, 3.0], v).unwrap();
        assert_eq!(scalar(&g, l), 5.0);
        let grad = g.backward(l).unwrap().wrt(v);
        assert_eq!(grad.data(), &[-1.0, -3.0]);
    }

    #[test]
    fn median_loss_at_zero_residual_is_lambda_ln2() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::column(vec![0.3, -1.0]));
        let l = loss_median(&mut g, &[0.3, -1.0], m, 0.05).unwrap();
        assert!((scalar(&g, l) - 0.05 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn median_gradient_vanishes_for_symmetric_residuals() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::column(vec![0.0; 4]));
        let l = loss_median(&mut g, &[0.7, -0.7, 0.7, -0.7], m, 0.1).unwrap();
        let grad = g.backward(l).unwrap().wrt(m);
        assert!(grad.sum().abs() < 1e-15);
    }

    #[test]
    fn bpo_loss_at_unit_ratio_is_eps_times_weight() {
        let mut g = Graph::new();
        let lp = g.leaf(Tensor::column(vec![-1.0, -2.0]));
        let t = BpoTargets { adv_tilde: vec![5.0, 3.0], weights: vec![2.0, 4.0] };
        let l = loss_policy_bpo(&mut g, lp, &[-1.0, -2.0], &t, 0.2, 1e-3).unwrap();
        assert!((scalar(&g, l) - 0.2 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn ppo_loss_examples() {
        let eval = |rho: f64, adv: f64| {
            let mut g = Graph::new();
            let lp = g.leaf(Tensor::column(vec![rho.ln()]));
            let l = loss_policy_ppo(&mut g, lp, &[0.0], &[adv], 0.2).unwrap();
            scalar(&g, l)
        };
        assert!((eval(1.0, 0.7) + 0.7).abs() < 1e-15);
        assert!((eval(1.5, 1.0) + 1.2).abs() < 1e-12);
        assert!((eval(0.5, -1.0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn simple_loss_is_symmetric_around_target() {
        assert_eq!(bpo_simple_loss(1.2, 3.0, 1.0, 0.2), 0.0);
        assert_eq!(bpo_simple_loss(0.4, 0.0, -1.0, 0.2), 0.0);
        let up = bpo_simple_loss(1.25, 2.0, 1.0, 0.2);
        let down = bpo_simple_loss(1.15, 2.0, 1.0, 0.2);
        assert!((up - down).abs() < 1e-12);
    }
}
