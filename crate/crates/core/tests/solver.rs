use brrl_core::analytic::{
    optimal_ratio, regularizer_h, sign_median, sign_solution, soft_median, soft_median_residual, soft_quantile,
    solve_state, solve_symmetric,
};
use brrl_core::mdp::{evaluate_policy, surrogate_objective};
use brrl_core::oracle::{
    exhaustive_best_response, lp_greedy_state, numeric_regularized_state, soft_median_argmin, soft_quantile_argmin,
    RatioBox,
};
use brrl_core::random::{dirichlet_ones, random_mdp, random_policy};
use brrl_core::seed::rng_for;
use brrl_core::{RatioBounds, SignStatus, TabularMdp, TabularPolicy};
use proptest::prelude::*;
use rand::Rng;

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn instance(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_for(seed, "test/state");
    let q = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    (q, dirichlet_ones(&mut rng, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_matches_numeric_optimizer(seed in any::<u64>(), n in 2usize..12, eps in 0.1f64..0.3, li in 0usize..3) {
        let (q, p) = instance(seed, n);
        let bounds = RatioBounds::symmetric(eps, [1e-1, 1e-2, 1e-3][li]).unwrap();
        let closed = solve_state(&q, &p, &bounds).unwrap();
        let numeric = numeric_regularized_state(&q, &p, &bounds).unwrap();
        prop_assert!(numeric.converged);
        prop_assert!(sup(&closed.ratio, &numeric.ratio) <= 1e-6);
    }

    #[test]
    fn asymmetric_matches_numeric_optimizer(seed in any::<u64>(), n in 2usize..12, bi in 0usize..3, li in 0usize..3) {
        let (q, p) = instance(seed, n);
        let (c_l, c_h) = [(0.0, 2.0), (0.5, 3.0), (0.8, 1.2)][bi];
        let bounds = RatioBounds::asymmetric(c_l, c_h, [1e-1, 1e-2, 1e-3][li]).unwrap();
        let closed = solve_state(&q, &p, &bounds).unwrap();
        let numeric = numeric_regularized_state(&q, &p, &bounds).unwrap();
        prop_assert!(sup(&closed.ratio, &numeric.ratio) <= 1e-6);
    }

    #[test]
    fn ratio_invariants(seed in any::<u64>(), n in 1usize..10, eps in 0.05f64..0.5, lambda in 1e-3f64..1.0) {
        let (q, p) = instance(seed, n);
        let bounds = RatioBounds::symmetric(eps, lambda).unwrap();
        let sol = solve_state(&q, &p, &bounds).unwrap();
        prop_assert!((dot(&sol.ratio, &p) - 1.0).abs() < 1e-9);
        for a in 0..n {
            prop_assert!(sol.ratio[a] >= 1.0 - eps && sol.ratio[a] <= 1.0 + eps);
            // Above the centre means an increased probability.
            let adv = q[a] - sol.mu;
            if adv.abs() > 1e-9 {
                prop_assert_eq!(adv > 0.0, sol.ratio[a] > 1.0);
            }
            for b in 0..n {
                if q[a] > q[b] {
                    prop_assert!(sol.ratio[a] >= sol.ratio[b]);
                }
            }
        }
    }

    #[test]
    fn soft_median_is_the_argmin(seed in any::<u64>(), n in 1usize..10, lambda in 1e-3f64..1.0) {
        let (q, p) = instance(seed, n);
        let mu = soft_median(&q, &p, lambda).unwrap();
        let direct = soft_median_argmin(&q, &p, lambda).unwrap();
        prop_assert!((mu - direct).abs() < 1e-8, "{} vs {}", mu, direct);
        prop_assert!(soft_median_residual(&q, &p, mu, lambda).abs() < 1e-12);
    }

    #[test]
    fn soft_median_shift_equivariance(seed in any::<u64>(), n in 1usize..8, shift in -10.0f64..10.0) {
        let (q, p) = instance(seed, n);
        let moved: Vec<f64> = q.iter().map(|x| x + shift).collect();
        let a = soft_median(&q, &p, 0.05).unwrap();
        let b = soft_median(&moved, &p, 0.05).unwrap();
        prop_assert!((a + shift - b).abs() < 1e-9);
    }
}

#[test]
fn soft_quantile_is_the_argmin() {
    for seed in 0..20 {
        let (q, p) = instance(seed, 5);
        let mu = soft_quantile(&q, &p, 0.5, 3.0, 0.05).unwrap();
        let direct = soft_quantile_argmin(&q, &p, 0.5, 3.0, 0.05).unwrap();
        assert!((mu - direct).abs() < 1e-8, "seed {seed}: {mu} vs {direct}");
    }
}

#[test]
fn symmetric_box_reduces_to_soft_median() {
    for seed in 0..20 {
        let (q, p) = instance(seed, 6);
        let m = soft_median(&q, &p, 0.02).unwrap();
        let quant = soft_quantile(&q, &p, 0.8, 1.2, 0.02).unwrap();
        assert!((m - quant).abs() < 1e-10);
        let sym = solve_state(&q, &p, &RatioBounds::symmetric(0.2, 0.02).unwrap()).unwrap();
        let asym = solve_state(&q, &p, &RatioBounds::asymmetric(0.8, 1.2, 0.02).unwrap()).unwrap();
        assert!(sup(&sym.ratio, &asym.ratio) < 1e-9);
    }
}

#[test]
fn symmetric_ratio_is_tanh_of_the_centred_value() {
    let bounds = RatioBounds::symmetric(0.2, 0.1).unwrap();
    for adv in [-1.0, -0.05, 0.0, 0.3] {
        let expected = 1.0 + 0.2 * (adv / 0.2f64).tanh();
        assert!((optimal_ratio(adv, &bounds) - expected).abs() < 1e-14);
    }
}

#[test]
fn cem_limit_selects_the_top_mass() {
    let q: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 / 10.0).collect();
    let p = vec![0.1; 10];
    let sol = solve_state(&q, &p, &RatioBounds::asymmetric(0.0, 5.0, 1e-5).unwrap()).unwrap();
    for (a, r) in sol.ratio.iter().enumerate() {
        let target = if a < 2 { 5.0 } else { 0.0 };
        assert!((r - target).abs() < 1e-3, "action {a}: {r}");
    }
    assert!((dot(&sol.ratio, &p) - 1.0).abs() < 1e-6);
}

#[test]
fn sign_median_examples() {
    assert_eq!(sign_median(&[0.0, 1.0], &[0.5, 0.5]), Ok(0.5));
    assert!(sign_median(&[0.0, 1.0], &[0.25, 0.75]).is_err());
    let mu = sign_median(&[0.0, 1.0, 2.0, 3.0], &[0.25; 4]).unwrap();
    assert!(mu > 1.0 && mu < 2.0);
}

#[test]
fn sign_solution_flags_unbalanced_states() {
    let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0], 0.5).unwrap();
    let balanced = TabularPolicy::new(1, 2, vec![0.5, 0.5]).unwrap();
    let sol = sign_solution(&evaluate_policy(&mdp, &balanced).unwrap(), &balanced, 0.2).unwrap();
    assert!(sol.all_exact());
    let pi = sol.pi_star.unwrap();
    assert!((pi.prob(0, 0) - 0.4).abs() < 1e-12 && (pi.prob(0, 1) - 0.6).abs() < 1e-12);
    let skewed = TabularPolicy::new(1, 2, vec![0.25, 0.75]).unwrap();
    let sol = sign_solution(&evaluate_policy(&mdp, &skewed).unwrap(), &skewed, 0.2).unwrap();
    assert_eq!(sol.status, vec![SignStatus::Infeasible]);
    assert!(sol.pi_star.is_none());
}

#[test]
fn regularizer_values() {
    let eps = 0.2;
    let b = RatioBounds::symmetric(eps, 0.1).unwrap();
    assert!((regularizer_h(1.0, &b).unwrap() - 2.0 * eps * eps.ln()).abs() < 1e-14);
    let edge = regularizer_h(1.0 + eps - 1e-12, &b).unwrap();
    assert!((edge - 2.0 * eps * (2.0 * eps).ln()).abs() < 1e-9);
    assert!(regularizer_h(1.0 + eps, &b).is_err());
    // The asymmetric regularizer is stationary at ρ = 1.
    let a = RatioBounds::asymmetric(0.5, 3.0, 0.1).unwrap();
    let h = 1e-6;
    let slope = (regularizer_h(1.0 + h, &a).unwrap() - regularizer_h(1.0 - h, &a).unwrap()) / (2.0 * h);
    assert!(slope.abs() < 1e-8, "{slope}");
}

#[test]
fn predicted_improvement_grows_with_eps() {
    for seed in 0..10 {
        let mut rng = rng_for(seed, "test/eps");
        let mdp = random_mdp(&mut rng, 6, 3, 0.9);
        let pi0 = random_policy(&mut rng, 6, 3);
        let eval = evaluate_policy(&mdp, &pi0).unwrap();
        let small = solve_symmetric(&mdp, &eval, &pi0, 0.1, 1e-3).unwrap();
        let large = solve_symmetric(&mdp, &eval, &pi0, 0.3, 1e-3).unwrap();
        assert!(large.predicted_improvement() >= small.predicted_improvement() - 1e-12);
    }
}

fn random_feasible(rng: &mut impl Rng, p: &[f64], c_l: f64, c_h: f64) -> Option<Vec<f64>> {
    let last = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
    let mut rho: Vec<f64> = (0..p.len()).map(|_| rng.random_range(c_l..=c_h)).collect();
    let rest: f64 = (0..p.len()).filter(|&i| i != last).map(|i| p[i] * rho[i]).sum();
    rho[last] = (1.0 - rest) / p[last];
    (rho[last] >= c_l && rho[last] <= c_h).then_some(rho)
}

#[test]
fn lp_oracle_dominates_random_feasible_points() {
    let mut rng = rng_for(0, "test/lp");
    for seed in 0..5 {
        let (q, p) = instance(seed, 8);
        let lp = lp_greedy_state(&q, &p, 0.5, 2.0).unwrap();
        assert!((dot(&lp.ratio, &p) - 1.0).abs() < 1e-12);
        let mut tried = 0;
        while tried < 10_000 {
            if let Some(rho) = random_feasible(&mut rng, &p, 0.5, 2.0) {
                let obj: f64 = (0..8).map(|a| p[a] * rho[a] * q[a]).sum();
                assert!(obj <= lp.objective + 1e-12);
                tried += 1;
            }
        }
        // At most one ratio sits strictly inside the box.
        let interior = lp.ratio.iter().filter(|r| **r > 0.5 + 1e-12 && **r < 2.0 - 1e-12).count();
        assert!(interior <= 1, "{:?}", lp.ratio);
        // Complementary slackness with the multiplier at the fractional value.
        let order: Vec<f64> = q.clone();
        for a in 0..8 {
            for b in 0..8 {
                if order[a] > order[b] && lp.ratio[b] > 0.5 + 1e-12 {
                    assert!(lp.ratio[a] >= 2.0 - 1e-12);
                }
            }
        }
    }
}

#[test]
fn regularized_objective_below_lp_and_gap_closes() {
    let (q, p) = instance(42, 6);
    let lp = lp_greedy_state(&q, &p, 0.8, 1.2).unwrap();
    let mut prev = f64::INFINITY;
    for lambda in [1e-1, 1e-2, 1e-3, 1e-4] {
        let sol = solve_state(&q, &p, &RatioBounds::symmetric(0.2, lambda).unwrap()).unwrap();
        let gap = lp.objective - dot(&sol.ratio.iter().zip(&p).map(|(r, w)| r * w).collect::<Vec<_>>(), &q);
        assert!(gap >= -1e-12 && (gap < prev || gap <= 1e-12), "λ {lambda}: gap {gap}");
        prev = gap;
    }
    assert!(prev < 1e-3);
}

#[test]
fn numeric_optimizer_is_stationary() {
    let (q, p) = instance(7, 5);
    let bounds = RatioBounds::symmetric(0.2, 0.1).unwrap();
    let r = numeric_regularized_state(&q, &p, &bounds).unwrap();
    // q_a - λ H'(ρ_a) is the same multiplier for every action.
    let g: Vec<f64> = (0..5)
        .map(|a| q[a] - 0.1 * (((r.ratio[a] - 0.8).ln() + 1.0) - ((1.2 - r.ratio[a]).ln() + 1.0)))
        .collect();
    assert!(g.iter().all(|x| (x - g[0]).abs() < 1e-8), "{g:?}");
}

#[test]
fn exhaustive_search_brackets_the_closed_form() {
    let mut rng = rng_for(2, "test/exhaustive");
    let mdp = random_mdp(&mut rng, 1, 2, 0.9);
    let pi0 = random_policy(&mut rng, 1, 2);
    let eval = evaluate_policy(&mdp, &pi0).unwrap();
    let bounds = RatioBounds::symmetric(0.2, 1e-4).unwrap();
    let sol = solve_symmetric(&mdp, &eval, &pi0, 0.2, 1e-4).unwrap();
    let closed = surrogate_objective(&mdp, &sol.pi_star, &pi0).unwrap();
    let coarse = exhaustive_best_response(&mdp, &pi0, RatioBox::from(&bounds), 11).unwrap();
    let fine = exhaustive_best_response(&mdp, &pi0, RatioBox::from(&bounds), 101).unwrap();
    assert!(fine >= coarse - 1e-12);
    assert!(fine <= closed + 1e-3, "{fine} vs {closed}");
    let collapsed = exhaustive_best_response(&mdp, &pi0, RatioBox { lower: 1.0, upper: 1.0 }, 11).unwrap();
    assert!((collapsed - eval.eta).abs() < 1e-12);
}

#[test]
fn exhaustive_search_rejects_large_problems() {
    let mut rng = rng_for(3, "test/exhaustive");
    let mdp = random_mdp(&mut rng, 2, 4, 0.9);
    let pi0 = random_policy(&mut rng, 2, 4);
    assert!(exhaustive_best_response(&mdp, &pi0, RatioBox { lower: 0.8, upper: 1.2 }, 11).is_err());
}

#[test]
fn argmin_handles_saturated_terms() {
    let q = [0.007084771599553896, 1.908247349290602, -0.7344789444070985];
    let p = [0.16789105366802948, 0.15718263241545594, 0.6749263139165146];
    let lambda = 0.0014873492050968473;
    let mu = soft_median(&q, &p, lambda).unwrap();
    assert!((mu - soft_median_argmin(&q, &p, lambda).unwrap()).abs() < 1e-8);
}
