use brrl_autodiff::Graph;
use brrl_rl::gbpo::{gbpo_objective, group_advantages, median, train_gbpo, GbpoConfig, GroupBatch, SequenceModel, StdMode};
use proptest::prelude::*;

fn single_token_group(model: &SequenceModel, tokens: [usize; 2], rewards: [f64; 2]) -> GroupBatch {
    let mut b = GroupBatch {
        prompt: 0,
        outputs: tokens.iter().map(|t| vec![*t]).collect(),
        behavior_log_probs: vec![],
        rewards: rewards.to_vec(),
    };
    let lp = model.token_log_prob_values(std::slice::from_ref(&b)).unwrap();
    b.behavior_log_probs = lp.iter().map(|l| vec![*l]).collect();
    b
}

fn objective(model: &SequenceModel, b: &GroupBatch, eps: f64, lambda: f64) -> (f64, Vec<f64>) {
    let adv = group_advantages(&b.rewards, StdMode::Population).unwrap();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let lp = model.token_log_probs(&mut g, &bound, std::slice::from_ref(b)).unwrap();
    let l = gbpo_objective(&mut g, lp, &[(b, &adv)], eps, lambda).unwrap();
    let grads = bound.gradients(&g.backward(l).unwrap(), &model.params).flat();
    (g.value(l).data()[0], grads)
}

#[test]
fn winner_logit_gradient_is_negative_and_loser_positive() {
    let model = SequenceModel::new(4, 1, 1, 0).unwrap();
    let b = single_token_group(&model, [2, 1], [1.0, 0.0]);
    let (_, grads) = objective(&model, &b, 0.2, 1e-3);
    // Parameters: w0 is [contexts x vocab]; the only context is (prompt 0, position 0, start).
    let ctx = 4; // start token index in the context layout
    let w = |tok: usize| ctx * 4 + tok;
    let base = model.params.flat();
    for (tok, sign) in [(2usize, -1.0), (1, 1.0)] {
        let i = w(tok);
        let f = |d: f64| {
            let mut m = model.clone();
            let mut v = base.clone();
            v[i] += d;
            m.params.set_flat(&v).unwrap();
            objective(&m, &b, 0.2, 1e-3).0
        };
        let fd = (f(1e-7) - f(-1e-7)) / 2e-7;
        assert_eq!(fd.signum(), sign, "token {tok}: fd {fd}");
        assert!((fd - grads[i]).abs() < 1e-6, "token {tok}: fd {fd} vs tape {}", grads[i]);
    }
}

#[test]
fn unit_ratios_give_eps_times_mean_abs_advantage() {
    let model = SequenceModel::new(4, 1, 1, 3).unwrap();
    let b = single_token_group(&model, [0, 3], [2.0, 5.0]);
    let adv = group_advantages(&b.rewards, StdMode::Population).unwrap();
    let (l, _) = objective(&model, &b, 0.2, 1e-4);
    let expected = 0.2 * adv.a.iter().map(|a| a.abs()).sum::<f64>() / 2.0;
    assert!((l - expected).abs() < 1e-12);
}

#[test]
fn degenerate_group_has_zero_loss_and_gradient() {
    let model = SequenceModel::new(4, 2, 1, 1).unwrap();
    let b = single_token_group(&model, [0, 3], [1.0, 1.0]);
    let (l, grads) = objective(&model, &b, 0.2, 1e-3);
    assert_eq!(l, 0.0);
    assert!(grads.iter().all(|g| *g == 0.0));
}

#[test]
fn greedy_decoding_of_an_all_target_model_scores_seq_len() {
    let mut model = SequenceModel::new(5, 6, 1, 0).unwrap();
    let n = model.params.n_values();
    let w = model.params.get("w0").unwrap().cols();
    let mut v = vec![0.0; n];
    for (i, x) in v.iter_mut().enumerate().take(model.spec.input_dim * w) {
        if i % w == 0 {
            *x = 5.0;
        }
    }
    model.params.set_flat(&v).unwrap();
    let tokens = model.greedy(0).unwrap();
    assert_eq!(brrl_rl::gbpo::RewardRule::TargetCount.score(0, 5, &tokens), 6.0);
}

#[test]
fn group_size_two_trains() {
    let cfg = GbpoConfig { group_size: 2, iterations: 3, ..Default::default() };
    assert_eq!(train_gbpo(&cfg).unwrap().iterations.len(), 3);
}

#[test]
fn group_log_has_one_row_per_group() {
    let cfg = GbpoConfig { iterations: 2, groups_per_iteration: 3, ..Default::default() };
    let r = train_gbpo(&cfg).unwrap();
    let mut out = Vec::new();
    r.write_group_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iteration,group,mean_reward,std,degenerate,loss");
    assert_eq!(text.lines().count(), 7);
}

proptest! {
    #[test]
    fn shift_and_scale_invariance(r in proptest::collection::vec(-5.0f64..5.0, 2..40), shift in -100.0f64..100.0, scale in 0.1f64..10.0) {
        let base = group_advantages(&r, StdMode::Population).unwrap();
        prop_assume!(!base.degenerate && base.std > 1e-3);
        let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
        let scaled: Vec<f64> = r.iter().map(|x| x * scale).collect();
        for other in [group_advantages(&shifted, StdMode::Population).unwrap(), group_advantages(&scaled, StdMode::Population).unwrap()] {
            for i in 0..r.len() {
                prop_assert!((base.a[i] - other.a[i]).abs() < 1e-10);
                prop_assert!((base.a_tilde[i] - other.a_tilde[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn z_scores_center_and_share_denominator(r in proptest::collection::vec(-5.0f64..5.0, 2..40)) {
        let adv = group_advantages(&r, StdMode::Population).unwrap();
        prop_assume!(!adv.degenerate);
        prop_assert!((adv.a.iter().sum::<f64>() / r.len() as f64).abs() < 1e-10);
        let c = adv.a[0] - adv.a_tilde[0];
        let m = median(&r);
        for i in 0..r.len() {
            prop_assert!((adv.a[i] - adv.a_tilde[i] - c).abs() < 1e-10);
            if adv.a_tilde[i] != 0.0 {
                prop_assert_eq!(adv.a_tilde[i].signum(), (r[i] - m).signum());
            }
        }
    }
}
