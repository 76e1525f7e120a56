use brrl_rl::env::EnvParams;
use brrl_rl::{train, Algo, AdvantageMode, BpoConfig};

fn quick(algo: Algo) -> BpoConfig {
    BpoConfig { algo, total_iterations: 30, ..Default::default() }
}

#[test]
fn bpo_improves_exact_return_on_gridworld() {
    let r = train("gridworld_5x5", &quick(Algo::Bpo)).unwrap();
    let first = r.rows[0].exact_return.unwrap();
    let last = r.final_row().unwrap().exact_return.unwrap();
    assert!(last > first);
    assert!(last >= 0.95 * r.optimal_return.unwrap());
}

#[test]
fn mean_advantage_mode_also_trains() {
    let cfg = BpoConfig { advantage_mode: AdvantageMode::Mean, ..quick(Algo::Bpo) };
    let r = train("gridworld_5x5", &cfg).unwrap();
    assert!(r.final_row().unwrap().exact_return.unwrap() > r.rows[0].exact_return.unwrap());
}

#[test]
fn every_logged_entry_is_finite() {
    for algo in [Algo::Bpo, Algo::Ppo] {
        let r = train("chain", &quick(algo)).unwrap();
        assert_eq!(r.rows.len(), 30);
        for row in &r.rows {
            let vals = [row.episode_return, row.policy_loss, row.value_loss, row.median_loss, row.entropy, row.ratio_above_max, row.ratio_below_min];
            assert!(vals.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn continuous_cartpole_runs() {
    let cfg = BpoConfig {
        total_iterations: 3,
        n_steps: 64,
        n_envs: 2,
        batch_size: 64,
        n_epochs: 2,
        env: EnvParams { continuous: true, ..Default::default() },
        ..Default::default()
    };
    let r = train("cartpole_lite", &cfg).unwrap();
    assert!(r.rows.iter().all(|row| row.exact_return.is_none() && row.initial_ratio_deviation <= 1e-12));
}

#[test]
fn csv_has_one_row_per_iteration() {
    let r = train("chain", &BpoConfig { total_iterations: 4, ..Default::default() }).unwrap();
    let mut out = Vec::new();
    r.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("iteration,episode_return,exact_return,policy_loss,value_loss,median_loss,entropy,"));
}
