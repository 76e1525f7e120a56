//! The training loop: bounded-ratio policy optimization and the clipped baseline.

use std::io::Write;

use brrl_autodiff::params::clip_global_norm;
use brrl_autodiff::{Activation, Adam, Graph, ParameterSet, Tensor};
use brrl_core::mdp::{evaluate_policy, value_iteration};
use brrl_core::seed::{derive_seed, rng_for};
use brrl_core::{TabularMdp, TabularPolicy};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, EnvParams};
use crate::error::{Result, RlError};
use crate::gae::GaeConfig;
pub use crate::losses::AdvantageMode;
use crate::losses::{bpo_targets, loss_median, loss_policy_bpo, loss_policy_ppo, loss_value, normalize};
use crate::policy::{PolicyNet, ScalarNet};
use crate::rollout::{Collector, TrajectoryBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    #[default]
    Bpo,
    Ppo,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Bpo => "bpo",
            Algo::Ppo => "ppo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpoConfig {
    pub algo: Algo,
    /// Ratio bound (and clip range for the baseline).
    pub eps: f64,
    /// Regularizer weight inside the tanh target.
    pub lambda: f64,
    /// Constant added to the policy-loss weight.
    pub alpha1: f64,
    /// Value loss weight.
    pub w1: f64,
    /// Median loss weight.
    pub w2: f64,
    pub ent_coef: f64,
    pub lr: f64,
    /// Learning rate of the value and median networks; `None` uses `lr`.
    pub critic_lr: Option<f64>,
    pub n_epochs: usize,
    pub batch_size: usize,
    /// Transitions per environment instance per iteration.
    pub n_steps: usize,
    pub n_envs: usize,
    pub total_iterations: usize,
    pub gae: GaeConfig,
    pub seed: u64,
    pub advantage_mode: AdvantageMode,
    /// Minibatch-normalize the baseline's advantages and the weight `|R - V|`.
    pub normalize_advantages: bool,
    /// Per-network gradient norm cap.
    pub max_grad_norm: Option<f64>,
    /// `None`: no hidden layer on tabular environments, `[64, 64]` otherwise.
    pub hidden_dims: Option<Vec<usize>>,
    pub activation: Activation,
    pub env: EnvParams,
}

impl Default for BpoConfig {
    fn default() -> Self {
        BpoConfig {
            algo: Algo::Bpo,
            eps: 0.2,
            lambda: 1e-3,
            alpha1: 0.0,
            w1: 0.5,
            w2: 0.5,
            ent_coef: 0.0,
            lr: 1e-3,
            critic_lr: Some(0.05),
            n_epochs: 10,
            batch_size: 128,
            n_steps: 128,
            n_envs: 4,
            total_iterations: 300,
            gae: GaeConfig::default(),
            seed: 0,
            advantage_mode: AdvantageMode::Median,
            normalize_advantages: true,
            max_grad_norm: Some(0.5),
            hidden_dims: None,
            activation: Activation::Tanh,
            env: EnvParams::default(),
        }
    }
}

impl BpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RlError::Usage(m));
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        for (name, v) in [("alpha1", self.alpha1), ("w1", self.w1), ("w2", self.w2), ("ent_coef", self.ent_coef), ("lr", self.lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if self.critic_lr.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            return bad("critic_lr must be a finite nonnegative number".into());
        }
        if self.n_epochs == 0 || self.batch_size == 0 || self.n_steps == 0 || self.n_envs == 0 {
            return bad("n_epochs, batch_size, n_steps and n_envs must be at least 1".into());
        }
        if self.max_grad_norm.is_some_and(|v| v <= 0.0) {
            return bad("max_grad_norm must be positive".into());
        }
        self.gae.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    /// Mean undiscounted return of episodes finished this iteration (last value carried if none).
    pub episode_return: f64,
    /// Exact discounted return of the updated policy on tabular environments.
    pub exact_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub median_loss: f64,
    pub entropy: f64,
    pub ratio_above_mean: f64,
    pub ratio_above_max: f64,
    pub ratio_above_min: f64,
    pub ratio_below_mean: f64,
    pub ratio_below_max: f64,
    pub ratio_below_min: f64,
    /// Largest `|ρ - 1|` on the first minibatch, before any update.
    pub initial_ratio_deviation: f64,
}

impl IterationStats {
    /// Largest ratio over the batch after the final epoch.
    pub fn ratio_max(&self) -> f64 {
        self.ratio_above_max.max(self.ratio_below_max)
    }

    pub fn ratio_min(&self) -> f64 {
        self.ratio_above_min.min(self.ratio_below_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub env: String,
    pub algo: Algo,
    pub rows: Vec<IterationStats>,
    /// Value-iteration optimum of the tabular model, if there is one.
    pub optimal_return: Option<f64>,
    pub policy: ParameterSet,
    pub value: ParameterSet,
    pub median: ParameterSet,
}

impl TrainingReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_row(&self) -> Option<&IterationStats> {
        self.rows.last()
    }
}

/// Mean, max and min of a nonempty set; 1 for all three when empty.
fn summary(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    (mean, max, min)
}

/// Ratio statistics split at 1: `(above, below)`. Ratios equal to 1 count as below.
pub fn ratio_statistics(ratios: &[f64]) -> ((f64, f64, f64), (f64, f64, f64)) {
    let (above, below): (Vec<f64>, Vec<f64>) = ratios.iter().partition(|r| **r > 1.0);
    (summary(&above), summary(&below))
}

fn exact_return(mdp: &TabularMdp, features: &Tensor, policy: &PolicyNet) -> Result<f64> {
    let rows = policy.action_probs(features)?;
    // Renormalize away float drift from exp(log_softmax).
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.into_iter().map(|p| p / s).collect()
        })
        .collect();
    Ok(evaluate_policy(mdp, &TabularPolicy::from_rows(&rows)?)?.eta)
}

struct Networks {
    policy: PolicyNet,
    value: ScalarNet,
    median: ScalarNet,
    adam_policy: Adam,
    adam_value: Adam,
    adam_median: Adam,
}

#[derive(Default)]
struct EpochLosses {
    policy: f64,
    value: f64,
    median: f64,
    entropy: f64,
    count: usize,
}

fn gather<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

fn scalar(g: &Graph, v: brrl_autodiff::Var) -> f64 {
    g.value(v).data()[0]
}

/// One optimization step on a minibatch. Returns `None` if the loss is not finite.
fn minibatch_step(nets: &mut Networks, batch: &TrajectoryBatch, idx: &[usize], cfg: &BpoConfig, losses: &mut EpochLosses, first_dev: &mut Option<f64>) -> Result<bool> {
    let obs = batch.observation_tensor(idx);
    let actions = gather(&batch.actions, idx);
    let lp0 = gather(&batch.behavior_log_probs, idx);
    let returns = gather(&batch.returns, idx);

    let mut g = Graph::new();
    let bp = nets.policy.params.bind(&mut g);
    let bv = nets.value.params.bind(&mut g);
    let bm = nets.median.params.bind(&mut g);
    let x = g.leaf(obs);
    let pn = nets.policy.nodes(&mut g, &bp, x, &actions)?;
    if first_dev.is_none() {
        let dev = g.value(pn.log_probs).data().iter().zip(&lp0).map(|(l, l0)| ((l - l0).exp() - 1.0).abs()).fold(0.0, f64::max);
        *first_dev = Some(dev);
    }
    let v = nets.value.node(&mut g, &bv, x)?;
    let v_loss = loss_value(&mut g, &returns, v)?;
    let weighted_v = g.scale(v_loss, cfg.w1);
    let ent = g.scale(pn.entropy, -cfg.ent_coef);
    let (p_loss, m_loss, total) = match cfg.algo {
        Algo::Bpo => {
            let m = nets.median.node(&mut g, &bm, x)?;
            let m_loss = loss_median(&mut g, &returns, m, cfg.lambda)?;
            let targets = bpo_targets(&returns, g.value(v).data(), g.value(m).data(), cfg.advantage_mode, cfg.alpha1, cfg.normalize_advantages)?;
            let p_loss = loss_policy_bpo(&mut g, pn.log_probs, &lp0, &targets, cfg.eps, cfg.lambda)?;
            let weighted_m = g.scale(m_loss, cfg.w2);
            let t = g.add(p_loss, weighted_v)?;
            let t = g.add(t, weighted_m)?;
            (p_loss, Some(m_loss), g.add(t, ent)?)
        }
        Algo::Ppo => {
            let adv = gather(&batch.advantages, idx);
            let adv = if cfg.normalize_advantages { normalize(&adv) } else { adv };
            let p_loss = loss_policy_ppo(&mut g, pn.log_probs, &lp0, &adv, cfg.eps)?;
            let t = g.add(p_loss, weighted_v)?;
            (p_loss, None, g.add(t, ent)?)
        }
    };
    if !scalar(&g, total).is_finite() {
        return Ok(false);
    }
    losses.policy += scalar(&g, p_loss);
    losses.value += scalar(&g, v_loss);
    losses.median += m_loss.map_or(0.0, |m| scalar(&g, m));
    losses.entropy += scalar(&g, pn.entropy);
    losses.count += 1;

    let grads = g.backward(total)?;
    let mut gp = bp.gradients(&grads, &nets.policy.params);
    let mut gv = bv.gradients(&grads, &nets.value.params);
    let mut gm = bm.gradients(&grads, &nets.median.params);
    if let Some(max) = cfg.max_grad_norm {
        for set in [&mut gp, &mut gv, &mut gm] {
            clip_global_norm(&mut [set], max);
        }
    }
    let critic_lr = cfg.critic_lr.unwrap_or(cfg.lr);
    nets.adam_policy.step(&mut nets.policy.params, &gp, cfg.lr);
    nets.adam_value.step(&mut nets.value.params, &gv, critic_lr);
    if cfg.algo == Algo::Bpo {
        nets.adam_median.step(&mut nets.median.params, &gm, critic_lr);
    }
    Ok(nets.policy.params.all_finite() && nets.value.params.all_finite() && nets.median.params.all_finite())
}

/// Trains on `env_name`, calling `on_iteration` after each logged row.
pub fn train_with(env_name: &str, cfg: &BpoConfig, on_iteration: &mut dyn FnMut(&IterationStats)) -> Result<TrainingReport> {
    cfg.validate()?;
    let envs = (0..cfg.n_envs).map(|_| make_env(env_name, &cfg.env)).collect::<Result<Vec<_>>>()?;
    let obs_dim = envs[0].observation_dim();
    let space = envs[0].action_space();
    let mdp = envs[0].tabular_mdp().cloned();
    let features = match &mdp {
        Some(m) => {
            let rows = (0..m.n_states()).map(|s| envs[0].state_features(s).expect("tabular state")).collect::<Vec<_>>();
            Some(Tensor::from_rows(&rows)?)
        }
        None => None,
    };
    let optimal_return = mdp.as_ref().map(|m| value_iteration(m, 1e-12).map(|(_, eta)| eta)).transpose()?;
    let hidden = cfg.hidden_dims.clone().unwrap_or_else(|| if mdp.is_some() { vec![] } else { vec![64, 64] });

    let policy = PolicyNet::new(obs_dim, space, hidden.clone(), cfg.activation, derive_seed(cfg.seed, "init/policy"));
    let value = ScalarNet::new(obs_dim, hidden.clone(), cfg.activation, derive_seed(cfg.seed, "init/value"));
    let median = ScalarNet::new(obs_dim, hidden, cfg.activation, derive_seed(cfg.seed, "init/median"));
    let mut nets = Networks {
        adam_policy: Adam::new(policy.params.n_values()),
        adam_value: Adam::new(value.params.n_values()),
        adam_median: Adam::new(median.params.n_values()),
        policy,
        value,
        median,
    };
    let mut collector = Collector::new(envs, derive_seed(cfg.seed, "rollout"))?;
    let mut report = TrainingReport {
        env: env_name.to_string(),
        algo: cfg.algo,
        rows: Vec::new(),
        optimal_return,
        policy: nets.policy.params.clone(),
        value: nets.value.params.clone(),
        median: nets.median.params.clone(),
    };
    let mut last_return = 0.0;

    for iteration in 0..cfg.total_iterations {
        let behavior = nets.policy.clone();
        let value_net = nets.value.clone();
        let mut batch = collector.collect(cfg.n_steps, &|obs, rng| behavior.sample(&obs.features, rng), &|x| value_net.predict(x))?;
        batch.compute_gae(cfg.gae)?;

        let mut idx: Vec<usize> = (0..batch.len()).collect();
        let mut rng = rng_for(cfg.seed, &format!("shuffle/{iteration}"));
        let mut first_dev = None;
        let mut losses = EpochLosses::default();
        for _ in 0..cfg.n_epochs {
            idx.shuffle(&mut rng);
            losses = EpochLosses::default();
            for chunk in idx.chunks(cfg.batch_size) {
                if !minibatch_step(&mut nets, &batch, chunk, cfg, &mut losses, &mut first_dev)? {
                    return Err(RlError::Diverged { iteration, partial: Box::new(report) });
                }
            }
        }

        let new_lp = nets.policy.log_probs(&batch.all_observations(), &batch.actions)?;
        let ratios: Vec<f64> = new_lp.iter().zip(&batch.behavior_log_probs).map(|(l, l0)| (l - l0).exp()).collect();
        let (above, below) = ratio_statistics(&ratios);
        if !batch.completed_episode_returns.is_empty() {
            last_return = batch.completed_episode_returns.iter().sum::<f64>() / batch.completed_episode_returns.len() as f64;
        }
        let exact = match (&mdp, &features) {
            (Some(m), Some(f)) => Some(exact_return(m, f, &nets.policy)?),
            _ => None,
        };
        let k = losses.count.max(1) as f64;
        let row = IterationStats {
            iteration,
            episode_return: last_return,
            exact_return: exact,
            policy_loss: losses.policy / k,
            value_loss: losses.value / k,
            median_loss: losses.median / k,
            entropy: losses.entropy / k,
            ratio_above_mean: above.0,
            ratio_above_max: above.1,
            ratio_above_min: above.2,
            ratio_below_mean: below.0,
            ratio_below_max: below.1,
            ratio_below_min: below.2,
            initial_ratio_deviation: first_dev.unwrap_or(0.0),
        };
        let finite = [row.policy_loss, row.value_loss, row.median_loss, row.entropy, above.1, below.2].iter().all(|x| x.is_finite());
        if !finite {
            return Err(RlError::Diverged { iteration, partial: Box::new(report) });
        }
        on_iteration(&row);
        report.rows.push(row);
        report.policy = nets.policy.params.clone();
        report.value = nets.value.params.clone();
        report.median = nets.median.params.clone();
    }
    Ok(report)
}

pub fn train(env_name: &str, cfg: &BpoConfig) -> Result<TrainingReport> {
    train_with(env_name, cfg, &mut |_| {})
}
