//! Executable checks of the improvement guarantees on exact tabular instances.
//!
//! Each check samples random MDPs from a seed list, evaluates every quantity by
//! dense solves, and reports the worst residual or slack together with a replay
//! string identifying the instance.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analytic::{
    improvement_term, sign_solution, solve, solve_state, RatioBounds, SignStatus,
};
use crate::error::Result;
use crate::mdp::{evaluate_policy, visitation, ExactEvaluation, TabularMdp, TabularPolicy};
use crate::oracle::lp_greedy_state;
use crate::random::{perturb_policy, random_mdp, random_policy};
use crate::seed::rng_for;

/// Tolerance on identity residuals.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Allowed negative slack on inequalities.
pub const SLACK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryCheckResult {
    pub name: String,
    pub instances_run: usize,
    /// Largest `RHS - LHS` over instances; `<= 0` means every bound held.
    pub max_violation: f64,
    /// Largest absolute identity residual.
    pub residual: f64,
    pub passed: bool,
    /// JSON replay string of the worst instance.
    pub worst_instance: String,
}

/// Sizes and discount of the random instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InstanceSizes {
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
}

impl Default for InstanceSizes {
    fn default() -> Self {
        InstanceSizes { max_states: 20, max_actions: 5, gamma: 0.9 }
    }
}

/// Options shared by all checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckOptions {
    /// Negative control: flips the sign of the predicted improvement in the identity checks.
    pub inject_fault: bool,
}

/// A reproducible random instance.
pub struct Instance {
    pub seed: u64,
    pub mdp: TabularMdp,
    pub pi0: TabularPolicy,
}

/// Instance `seed` of the named check.
pub fn instance(check: &str, seed: u64, sizes: InstanceSizes) -> Instance {
    let mut rng = rng_for(seed, &format!("theory/{check}"));
    let n = rng.random_range(2..=sizes.max_states.max(2));
    let k = rng.random_range(2..=sizes.max_actions.max(2));
    let mdp = random_mdp(&mut rng, n, k, sizes.gamma);
    let pi0 = random_policy(&mut rng, n, k);
    Instance { seed, mdp, pi0 }
}

fn replay(check: &str, seed: u64, extra: serde_json::Value) -> String {
    serde_json::json!({ "check": check, "seed": seed, "params": extra }).to_string()
}

/// Reduces per-instance `(violation, residual, replay)` triples.
fn aggregate(name: &str, rows: Vec<(f64, f64, String)>, identity: bool) -> TheoryCheckResult {
    let instances_run = rows.len();
    let max_violation = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let residual = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let worst = rows
        .iter()
        .max_by(|a, b| {
            let ka = if identity { a.1 } else { a.0 };
            let kb = if identity { b.1 } else { b.0 };
            ka.total_cmp(&kb)
        })
        .map(|r| r.2.clone())
        .unwrap_or_default();
    let passed = instances_run > 0
        && max_violation <= SLACK_TOL
        && residual < IDENTITY_TOL
        // A violation of -inf marks a row without an inequality.
        && rows.iter().all(|r| r.0 < f64::INFINITY && r.1.is_finite());
    TheoryCheckResult { name: name.to_string(), instances_run, max_violation, residual, passed, worst_instance: worst }
}

/// `E_{π0}[term(Ã)]` for every state.
fn per_state_b(pi0: &TabularPolicy, median_adv: &[f64], bounds: &RatioBounds) -> Vec<f64> {
    let k = pi0.n_actions();
    (0..pi0.n_states())
        .map(|s| (0..k).map(|a| pi0.prob(s, a) * improvement_term(median_adv[s * k + a], bounds)).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Improvement identity `η(π*) - η(π0) = scale · E_{d_{π*}, π0}[term(Ã)]` on one instance.
///
/// Returns `(residual, improvement, B)`. `B` is recomputed here from `d_{π*}`
/// rather than read from the solution.
pub fn improvement_identity(
    mdp: &TabularMdp,
    pi0: &TabularPolicy,
    bounds: &RatioBounds,
    opts: CheckOptions,
) -> Result<(f64, f64, f64)> {
    let eval0 = evaluate_policy(mdp, pi0)?;
    let sol = solve(mdp, &eval0, pi0, bounds)?;
    let eta_star = evaluate_policy(mdp, &sol.pi_star)?.eta;
    let d_star = visitation(mdp, &sol.pi_star)?;
    let b = dot(&d_star, &per_state_b(pi0, &sol.median_adv, bounds));
    let sign = if opts.inject_fault { -1.0 } else { 1.0 };
    let improvement = eta_star - eval0.eta;
    Ok(((improvement - sign * bounds.improvement_scale() * b).abs(), improvement, b))
}

fn identity_check(name: &str, seeds: u64, sizes: InstanceSizes, bounds: RatioBounds, opts: CheckOptions) -> TheoryCheckResult {
    let rows = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let inst = instance(name, seed, sizes);
            let tag = replay(name, seed, serde_json::json!({ "bounds": bounds, "sizes": sizes }));
            match improvement_identity(&inst.mdp, &inst.pi0, &bounds, opts) {
                // Violation: the improvement and B must be nonnegative.
                Ok((res, imp, b)) => ((-imp).max(-b), res, tag),
                Err(e) => (f64::INFINITY, f64::INFINITY, format!("{tag} error: {e}")),
            }
        })
        .collect();
    aggregate(name, rows, true)
}

/// Symmetric improvement identity and `η(π*) >= η(π0)` over random MDPs.
pub fn check_theorem2(seeds: u64, sizes: InstanceSizes, eps: f64, lambda: f64, opts: CheckOptions) -> Result<TheoryCheckResult> {
    Ok(identity_check("theorem2", seeds, sizes, RatioBounds::symmetric(eps, lambda)?, opts))
}

/// Asymmetric improvement identity with `B' >= 0` over random MDPs.
pub fn check_asymmetric_guarantee(
    seeds: u64,
    sizes: InstanceSizes,
    c_l: f64,
    c_h: f64,
    lambda: f64,
    opts: CheckOptions,
) -> Result<TheoryCheckResult> {
    Ok(identity_check("asymmetric_guarantee", seeds, sizes, RatioBounds::asymmetric(c_l, c_h, lambda)?, opts))
}

/// Terms of the loss-based lower bound for a learned policy `π_θ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundTerms {
    pub eta0: f64,
    pub eta_theta: f64,
    /// `ε B` with `B` under `d_{π*}`.
    pub eps_b: f64,
    /// `Σ_s d_{πθ}(s) [ε E_{π0}[tanh(Ã/2λ)Ã] - D^ATV(s)]`.
    pub atv_gap_theta: f64,
    pub j_atv: f64,
    pub j_tv: f64,
    pub d_atv_max: f64,
    pub d_tv_max: f64,
    pub delta_tilde: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl BoundTerms {
    /// Lower bound on `η(π_θ)` in terms of the state-wise ATV gap under `d_{πθ}`.
    pub fn atv_bound(&self) -> f64 {
        self.eta0 + self.atv_gap_theta
    }

    /// Lower bound on `η(π_θ)` in terms of losses under `d_{π0}`.
    pub fn loss_bound(&self) -> f64 {
        self.eta0 + self.eps_b - self.j_atv - loss_bound_penalty(self.gamma, self.eps, self)
    }
}

/// The discount-dependent part of the loss bound at fixed loss values.
pub fn loss_bound_penalty(gamma: f64, eps: f64, t: &BoundTerms) -> f64 {
    let c = 1.0 - gamma;
    gamma * t.d_atv_max / c * t.j_tv + gamma * eps * t.d_atv_max / (c * c) + gamma * eps * t.delta_tilde * t.d_tv_max / (c * c)
}

/// Evaluates every term of both lower bounds for `π_θ` against `(π0, π*)`.
pub fn bound_terms(
    mdp: &TabularMdp,
    pi0: &TabularPolicy,
    eval0: &ExactEvaluation,
    pi_star: &TabularPolicy,
    median_adv: &[f64],
    pi_theta: &TabularPolicy,
    bounds: &RatioBounds,
) -> Result<BoundTerms> {
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let b1 = per_state_b(pi0, median_adv, bounds);
    let eps = bounds.improvement_scale();
    let mut d_atv = vec![0.0; n];
    let mut d_tv = vec![0.0; n];
    for s in 0..n {
        for a in 0..k {
            let diff = (pi_star.prob(s, a) - pi_theta.prob(s, a)).abs();
            d_atv[s] += diff * eval0.adv[s * k + a].abs();
            d_tv[s] += diff;
        }
    }
    let d_star = visitation(mdp, pi_star)?;
    let d_theta = visitation(mdp, pi_theta)?;
    let eta_theta = evaluate_policy(mdp, pi_theta)?.eta;
    let atv_gap: Vec<f64> = (0..n).map(|s| eps * b1[s] - d_atv[s]).collect();
    Ok(BoundTerms {
        eta0: eval0.eta,
        eta_theta,
        eps_b: eps * dot(&d_star, &b1),
        atv_gap_theta: dot(&d_theta, &atv_gap),
        j_atv: dot(&eval0.visitation, &d_atv),
        j_tv: dot(&eval0.visitation, &d_tv),
        d_atv_max: d_atv.iter().copied().fold(0.0, f64::max),
        d_tv_max: d_tv.iter().copied().fold(0.0, f64::max),
        delta_tilde: b1.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        gamma: mdp.gamma(),
        eps,
    })
}

/// How the learned policy of a bound-check instance is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// `(1 - τ) π* + τ · Dirichlet noise`.
    Mix(f64),
    /// `π_θ = π*` exactly.
    Optimal,
    /// `π_θ = π0`.
    Behavior,
}

fn bound_check(
    name: &str,
    seeds: u64,
    sizes: InstanceSizes,
    bounds: RatioBounds,
    pert: Perturbation,
    use_loss_bound: bool,
) -> TheoryCheckResult {
    let rows = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let tag = replay(name, seed, serde_json::json!({ "bounds": bounds, "sizes": sizes, "perturbation": format!("{pert:?}") }));
            let run = || -> Result<(f64, f64)> {
                let inst = instance(name, seed, sizes);
                let eval0 = evaluate_policy(&inst.mdp, &inst.pi0)?;
                let sol = solve(&inst.mdp, &eval0, &inst.pi0, &bounds)?;
                let theta = match pert {
                    Perturbation::Mix(tau) => {
                        let mut rng = rng_for(seed, &format!("theory/{name}/perturb"));
                        perturb_policy(&mut rng, &sol.pi_star, tau)
                    }
                    Perturbation::Optimal => sol.pi_star.clone(),
                    Perturbation::Behavior => inst.pi0.clone(),
                };
                let t = bound_terms(&inst.mdp, &inst.pi0, &eval0, &sol.pi_star, &sol.median_adv, &theta, &bounds)?;
                let rhs = if use_loss_bound { t.loss_bound() } else { t.atv_bound() };
                let violation = rhs - t.eta_theta;
                // At π_θ = π* the bound must be tight.
                let residual = if pert == Perturbation::Optimal { violation.abs() } else { 0.0 };
                Ok((violation, residual))
            };
            match run() {
                Ok((v, r)) => (v, r, tag),
                Err(e) => (f64::INFINITY, f64::INFINITY, format!("{tag} error: {e}")),
            }
        })
        .collect();
    aggregate(name, rows, pert == Perturbation::Optimal)
}

/// State-wise ATV lower bound on `η(π_θ)` for policies near `π*`.
pub fn check_corollary1(seeds: u64, sizes: InstanceSizes, eps: f64, lambda: f64, pert: Perturbation) -> Result<TheoryCheckResult> {
    Ok(bound_check("corollary1", seeds, sizes, RatioBounds::symmetric(eps, lambda)?, pert, false))
}

/// Loss-based lower bound on `η(π_θ)` with `J^ATV`, `J^TV` under `d_{π0}`.
pub fn check_corollary2(seeds: u64, sizes: InstanceSizes, eps: f64, lambda: f64, pert: Perturbation) -> Result<TheoryCheckResult> {
    Ok(bound_check("corollary2", seeds, sizes, RatioBounds::symmetric(eps, lambda)?, pert, true))
}

/// Clipped surrogate per-sample objective `min(clip(ρ) A, ρ A)`.
pub fn ppo_objective_term(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho.clamp(1.0 - eps, 1.0 + eps) * adv).min(rho * adv)
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-sided ATV form of the clipped loss: `|A| |ρ - (1 + ε sign A)|` before the target, 0 after.
pub fn ppo_equivalent_loss(rho: f64, adv: f64, eps: f64) -> f64 {
    let target = 1.0 + eps * signum0(adv);
    if (rho - target) * adv <= 0.0 {
        adv.abs() * (rho - target).abs()
    } else {
        0.0
    }
}

/// Checks that `l'(ρ) + min(clip(ρ)A, ρA)` is the constant `(1 ± ε) A` over a ρ-grid.
pub fn check_proposition1(advs: &[f64], rho_grid: &[f64], eps: f64) -> TheoryCheckResult {
    let rows = advs
        .iter()
        .map(|&adv| {
            let shifts: Vec<f64> = rho_grid.iter().map(|&r| ppo_equivalent_loss(r, adv, eps) + ppo_objective_term(r, adv, eps)).collect();
            let mean = shifts.iter().sum::<f64>() / shifts.len() as f64;
            let var = shifts.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / shifts.len() as f64;
            let expected = if adv > 0.0 { (1.0 + eps) * adv } else { (1.0 - eps) * adv };
            let err = shifts.iter().map(|x| (x - expected).abs()).fold(0.0, f64::max);
            // Variance is held to 1e-12, the constant to 1e-12 as well.
            let residual = if var < 1e-12 && err < 1e-12 { 0.0 } else { var.max(err) };
            (f64::NEG_INFINITY, residual, replay("proposition1", 0, serde_json::json!({ "adv": adv, "eps": eps })))
        })
        .collect();
    aggregate("proposition1", rows, true)
}

/// Largest distance of the ratios from their elite-limit values `c_h`/`0` (fractional at the boundary).
pub fn cem_saturation_gap(n_actions: usize, c_h: f64, lambda: f64) -> Result<f64> {
    let bounds = RatioBounds::asymmetric(0.0, c_h, lambda)?;
    // Distinct, evenly spaced values in descending action order.
    let q: Vec<f64> = (0..n_actions).map(|i| 1.0 - i as f64 / n_actions as f64).collect();
    let p = vec![1.0 / n_actions as f64; n_actions];
    let sol = solve_state(&q, &p, &bounds)?;
    let limit = lp_greedy_state(&q, &p, 0.0, c_h)?;
    Ok(sol.ratio.iter().zip(&limit.ratio).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Elite structure of the `c_l = 0` box at small `λ`: top mass gets `c_h`, the rest 0.
pub fn check_cem_limit(n_actions: usize, c_h: f64, lambda: f64) -> Result<TheoryCheckResult> {
    let gap = cem_saturation_gap(n_actions, c_h, lambda)?;
    let tag = replay("cem_limit", 0, serde_json::json!({ "n_actions": n_actions, "c_h": c_h, "lambda": lambda }));
    let residual = if gap < 1e-3 { 0.0 } else { gap };
    Ok(aggregate("cem_limit", vec![(f64::NEG_INFINITY, residual, tag)], true))
}

/// The two-action `(1/4, 3/4)` counterexample to the sign-based solution.
pub fn check_remark1(eps: f64) -> Result<TheoryCheckResult> {
    let q = [0.0, 1.0];
    let p = [0.25, 0.75];
    let mut rows = Vec::new();
    // Single-state MDP whose Q values are exactly (0, 1) after evaluation.
    let gamma = 0.5;
    let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0], gamma)?;
    let pi0 = TabularPolicy::new(1, 2, p.to_vec())?;
    let eval0 = evaluate_policy(&mdp, &pi0)?;
    let infeasible = sign_solution(&eval0, &pi0, eps)?.status[0] == SignStatus::Infeasible;
    rows.push((if infeasible { f64::NEG_INFINITY } else { 1.0 }, 0.0, replay("remark1", 0, serde_json::json!({ "step": "sign_solution" }))));
    let lp = lp_greedy_state(&q, &p, 1.0 - eps, 1.0 + eps)?;
    for lambda in [1e-1, 1e-2, 1e-3, 1e-4] {
        let sol = solve_state(&q, &p, &RatioBounds::symmetric(eps, lambda)?)?;
        let norm = (dot(&sol.ratio, &p) - 1.0).abs();
        let gap = sol.ratio.iter().zip(&lp.ratio).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // Only the smallest λ is required to sit on the LP vertex.
        let residual = if lambda <= 1e-4 && gap >= 1e-3 { gap } else { norm };
        rows.push((f64::NEG_INFINITY, residual, replay("remark1", 0, serde_json::json!({ "lambda": lambda, "gap": gap }))));
    }
    Ok(aggregate("remark1", rows, true))
}

/// Configuration of the full suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub sizes: InstanceSizes,
    pub eps: f64,
    pub lambda: f64,
    pub c_l: f64,
    pub c_h: f64,
    pub perturbation: f64,
    pub opts: CheckOptions,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: 100,
            sizes: InstanceSizes::default(),
            eps: 0.2,
            lambda: 0.01,
            c_l: 0.5,
            c_h: 2.0,
            perturbation: 0.05,
            opts: CheckOptions::default(),
        }
    }
}

/// Names accepted by [`run_check`].
pub const CHECK_NAMES: [&str; 7] =
    ["theorem2", "corollary1", "corollary2", "proposition1", "asymmetric_guarantee", "cem_limit", "remark1"];

/// Runs one named check; `None` for an unknown name.
pub fn run_check(name: &str, cfg: &SuiteConfig) -> Option<Result<TheoryCheckResult>> {
    let grid: Vec<f64> = (0..=100).map(|i| 0.5 + 0.01 * i as f64).collect();
    Some(match name {
        "theorem2" => check_theorem2(cfg.seeds, cfg.sizes, cfg.eps, cfg.lambda, cfg.opts),
        "corollary1" => check_corollary1(cfg.seeds, cfg.sizes, cfg.eps, cfg.lambda, Perturbation::Mix(cfg.perturbation)),
        "corollary2" => check_corollary2(cfg.seeds, cfg.sizes, cfg.eps, cfg.lambda, Perturbation::Mix(cfg.perturbation)),
        "proposition1" => Ok(check_proposition1(&[-2.0, -0.5, 0.0, 0.5, 2.0], &grid, cfg.eps)),
        "asymmetric_guarantee" => check_asymmetric_guarantee(cfg.seeds, cfg.sizes, cfg.c_l, cfg.c_h, cfg.lambda, cfg.opts),
        "cem_limit" => check_cem_limit(10, 5.0, 1e-5),
        "remark1" => check_remark1(cfg.eps),
        _ => return None,
    })
}

/// A collection of check results.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheckResult>,
    pub all_passed: bool,
}

impl TheoryReport {
    pub fn new(checks: Vec<TheoryCheckResult>) -> Self {
        let all_passed = checks.iter().all(|c| c.passed);
        TheoryReport { checks, all_passed }
    }
}
