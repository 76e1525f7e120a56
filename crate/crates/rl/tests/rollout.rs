use brrl_autodiff::Tensor;
use brrl_core::mdp::visitation;
use brrl_core::{TabularMdp, TabularPolicy};
use brrl_rl::env::{chain, gridworld, TabularEnv};
use brrl_rl::gae::{compute_gae, Segment};
use brrl_rl::rollout::TrajectoryBatch;
use brrl_rl::{Action, Collector, Environment, GaeConfig, Observation, Result};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform_actor(n: usize) -> impl Fn(&Observation, &mut ChaCha8Rng) -> Result<(Action, f64)> + Sync {
    move |_obs, rng| Ok((Action::Discrete(rng.random_range(0..n)), -(n as f64).ln()))
}

fn zero_values(x: &Tensor) -> Result<Vec<f64>> {
    Ok(vec![0.0; x.rows()])
}

fn collect(envs: Vec<Box<dyn Environment>>, seed: u64, n_steps: usize, n_actions: usize) -> TrajectoryBatch {
    let mut c = Collector::new(envs, seed).unwrap();
    c.collect(n_steps, &uniform_actor(n_actions), &zero_values).unwrap()
}

fn grid_envs(k: usize) -> Vec<Box<dyn Environment>> {
    (0..k).map(|_| Box::new(gridworld(5, 0.1, 100, 0.99).unwrap()) as Box<dyn Environment>).collect()
}

#[test]
fn collection_is_bit_identical_across_runs_and_thread_counts() {
    let a = collect(grid_envs(3), 5, 400, 4);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| collect(grid_envs(3), 5, 400, 4));
    assert_eq!(a, b);
    assert_eq!(a.len(), 1200);
}

#[test]
fn deterministic_single_state_environment_gives_identical_rewards() {
    let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.7], vec![1.0], 0.9).unwrap();
    let env = TabularEnv::new("single", mdp, vec![false], 10).unwrap();
    let batch = collect(vec![Box::new(env)], 0, 50, 1);
    assert!(batch.rewards.iter().all(|r| *r == 0.7));
}

#[test]
fn episode_lengths_sum_to_batch_size() {
    let batch = collect(grid_envs(2), 1, 777, 4);
    assert_eq!(batch.episode_lengths().iter().sum::<usize>(), batch.len());
    assert_eq!(batch.segments.len(), 2);
}

/// Wraps `mdp` with an absorbing stop state reached with probability `1 - γ` per
/// step, so expected visits per episode equal the discounted visitation.
fn geometric_stopping(mdp: &TabularMdp) -> TabularEnv {
    let (n, m, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let n2 = n + 1;
    let mut p = vec![0.0; n2 * m * n2];
    let r = vec![0.0; n2 * m * n2];
    for s in 0..n2 {
        for a in 0..m {
            let base = (s * m + a) * n2;
            if s == n {
                p[base + n] = 1.0;
                continue;
            }
            for (t, x) in mdp.transition(s, a).iter().enumerate() {
                p[base + t] = g * x;
            }
            p[base + n] = 1.0 - g;
        }
    }
    let mut d0 = mdp.initial_dist().to_vec();
    d0.push(0.0);
    let mut terminal = vec![false; n2];
    terminal[n] = true;
    TabularEnv::new("stopped", TabularMdp::new(n2, m, p, r, d0, g).unwrap(), terminal, 1_000_000).unwrap()
}

#[test]
fn empirical_state_frequencies_match_discounted_visitation() {
    let base = chain(3, 0.2, 100, 0.9).unwrap();
    let mdp = base.tabular_mdp().unwrap().clone();
    let d = visitation(&mdp, &TabularPolicy::uniform(3, 2)).unwrap();
    let total: f64 = d.iter().sum();
    let batch = collect(vec![Box::new(geometric_stopping(&mdp))], 11, 100_000, 2);
    // Batch means over blocks of 1000 steps give a standard error that accounts for autocorrelation.
    let blocks = 100;
    let per = batch.len() / blocks;
    for s in 0..3 {
        let freqs: Vec<f64> = (0..blocks)
            .map(|b| batch.states[b * per..(b + 1) * per].iter().filter(|x| **x == Some(s)).count() as f64 / per as f64)
            .collect();
        let mean = freqs.iter().sum::<f64>() / blocks as f64;
        let var = freqs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (blocks - 1) as f64;
        let se = (var / blocks as f64).sqrt();
        let expected = d[s] / total;
        assert!((mean - expected).abs() <= 3.0 * se, "state {s}: {mean} vs {expected} (se {se})");
    }
}

#[test]
fn empirical_transitions_match_the_model() {
    let env = chain(5, 0.3, 50, 0.99).unwrap();
    let mdp = env.tabular_mdp().unwrap().clone();
    let batch = collect(vec![Box::new(env)], 3, 100_000, 2);
    let argmax = |v: &[f64]| v.iter().position(|x| *x == 1.0).unwrap();
    let mut counts = vec![0usize; 5 * 2 * 5];
    for t in 0..batch.len() {
        let s = batch.states[t].unwrap();
        let Action::Discrete(a) = batch.actions[t] else { unreachable!() };
        let next = if let Some(f) = &batch.final_observations[t] {
            argmax(f)
        } else if t + 1 < batch.len() {
            batch.states[t + 1].unwrap()
        } else {
            argmax(&batch.last_observations[0])
        };
        counts[(s * 2 + a) * 5 + next] += 1;
    }
    for s in 0..5 {
        for a in 0..2 {
            let n: usize = counts[(s * 2 + a) * 5..(s * 2 + a + 1) * 5].iter().sum();
            assert!(n > 1000);
            for (t, p) in mdp.transition(s, a).iter().enumerate() {
                let freq = counts[(s * 2 + a) * 5 + t] as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((freq - p).abs() <= 3.0 * se + 1e-12, "({s},{a})->{t}: {freq} vs {p}");
            }
        }
    }
}

fn brute_force_gae(r: &[f64], v: &[f64], term: &[bool], trunc: &[bool], tv: &[f64], boot: f64, cfg: GaeConfig) -> Vec<f64> {
    let n = r.len();
    let next_value = |t: usize| if term[t] { 0.0 } else if trunc[t] { tv[t] } else if t + 1 == n { boot } else { v[t + 1] };
    let delta: Vec<f64> = (0..n).map(|t| r[t] + cfg.gamma * next_value(t) - v[t]).collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..n - t {
                sum += (cfg.gamma * cfg.lambda_gae).powi(l as i32) * delta[t + l];
                if term[t + l] || trunc[t + l] {
                    break;
                }
            }
            sum
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gae_matches_double_sum(
        data in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0u8..10, -1.0f64..1.0), 50),
        boot in -1.0f64..1.0,
    ) {
        let r: Vec<f64> = data.iter().map(|d| d.0).collect();
        let v: Vec<f64> = data.iter().map(|d| d.1).collect();
        let term: Vec<bool> = data.iter().map(|d| d.2 == 0).collect();
        let trunc: Vec<bool> = data.iter().map(|d| d.2 == 1).collect();
        let tv: Vec<f64> = data.iter().zip(&trunc).map(|(d, t)| if *t { d.3 } else { 0.0 }).collect();
        let cfg = GaeConfig { gamma: 0.99, lambda_gae: 0.95 };
        let seg = Segment { rewards: &r, values: &v, terminated: &term, truncated: &trunc, truncation_values: &tv, bootstrap_value: boot };
        let (adv, ret) = compute_gae(seg, cfg).unwrap();
        let oracle = brute_force_gae(&r, &v, &term, &trunc, &tv, boot, cfg);
        for t in 0..50 {
            prop_assert!((adv[t] - oracle[t]).abs() < 1e-10);
            prop_assert!((ret[t] - adv[t] - v[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_is_linear_in_rewards(r in proptest::collection::vec(-1.0f64..1.0, 20)) {
        let z = vec![0.0; 20];
        let f = vec![false; 20];
        let two: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        let cfg = GaeConfig::default();
        let seg = |rw| Segment { rewards: rw, values: &z, terminated: &f, truncated: &f, truncation_values: &z, bootstrap_value: 0.0 };
        let (a1, _) = compute_gae(seg(&r), cfg).unwrap();
        let (a2, _) = compute_gae(seg(&two), cfg).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            prop_assert!((2.0 * x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_csv_has_the_documented_header() {
    let mut batch = collect(grid_envs(1), 0, 10, 4);
    batch.compute_gae(GaeConfig::default()).unwrap();
    let mut out = Vec::new();
    batch.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("step,env,episode,obs_0,"));
    assert!(header.ends_with("obs_24,action,reward,logp0,value,advantage,return"));
    assert_eq!(text.lines().count(), 11);
}
