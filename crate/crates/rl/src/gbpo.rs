//! Group-relative advantages and the group objective on a synthetic sequence task.
//!
//! A group is `G` sampled outputs for one prompt with terminal rewards. Each
//! output gets a z-score against the group mean (the weight) and against the
//! group median (inside the ratio target); every token of the output shares them.

use std::io::Write;

use brrl_autodiff::params::clip_global_norm;
use brrl_autodiff::{Activation, Adam, BoundParams, Graph, MlpSpec, OutputHead, ParameterSet, Tensor, Var};
use brrl_core::seed::{derive_seed, rng_for};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlError};

/// Lower bound on the standard deviation used as a divisor.
pub const STD_GUARD: f64 = 1e-8;
/// Groups whose raw spread is below this are degenerate.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// Divide by `G`.
    #[default]
    Population,
    /// Divide by `G - 1`.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAdvantages {
    /// `(r - mean) / max(std, guard)`.
    pub a: Vec<f64>,
    /// `(r - median) / max(std, guard)`.
    pub a_tilde: Vec<f64>,
    pub degenerate: bool,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

/// Median by sorting; the midpoint of the two central values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn group_advantages(rewards: &[f64], mode: StdMode) -> Result<GroupAdvantages> {
    let g = rewards.len();
    if g < 2 {
        return Err(RlError::Usage(format!("a group needs at least 2 rewards, got {g}")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(RlError::Usage("group rewards must be finite".into()));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let med = median(rewards);
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let std = match mode {
        StdMode::Population => (ss / g as f64).sqrt(),
        StdMode::Sample => (ss / (g - 1) as f64).sqrt(),
    };
    if std < DEGENERATE_STD {
        return Ok(GroupAdvantages { a: vec![0.0; g], a_tilde: vec![0.0; g], degenerate: true, mean, median: med, std });
    }
    let d = std.max(STD_GUARD);
    Ok(GroupAdvantages {
        a: rewards.iter().map(|r| (r - mean) / d).collect(),
        a_tilde: rewards.iter().map(|r| (r - med) / d).collect(),
        degenerate: false,
        mean,
        median: med,
        std,
    })
}

/// `G` outputs for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub prompt: usize,
    pub outputs: Vec<Vec<usize>>,
    pub behavior_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl GroupBatch {
    pub fn n_tokens(&self) -> usize {
        self.outputs.iter().map(Vec::len).sum()
    }
}

/// Detached per-token ratio targets and weights of one or more groups, averaged over groups.
fn token_terms(groups: &[(&GroupBatch, &GroupAdvantages)], eps: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n_groups = groups.len() as f64;
    let (mut target, mut weight, mut lp0) = (Vec::new(), Vec::new(), Vec::new());
    for (batch, adv) in groups {
        let g = batch.outputs.len();
        if adv.a.len() != g || adv.a_tilde.len() != g || batch.behavior_log_probs.len() != g {
            return Err(RlError::Shape(format!("group of {g} outputs has mismatched advantages or log-probabilities")));
        }
        for i in 0..g {
            let len = batch.outputs[i].len();
            if batch.behavior_log_probs[i].len() != len || len == 0 {
                return Err(RlError::Shape(format!("output {i} has {len} tokens and {} log-probabilities", batch.behavior_log_probs[i].len())));
            }
            let t = 1.0 + eps * (adv.a_tilde[i] / (2.0 * lambda)).tanh();
            let w = adv.a[i].abs() / (len as f64 * g as f64 * n_groups);
            target.extend(std::iter::repeat(t).take(len));
            weight.extend(std::iter::repeat(w).take(len));
            lp0.extend(&batch.behavior_log_probs[i]);
        }
    }
    Ok((target, weight, lp0))
}

/// Group objective: per output, the token mean of `|1 + ε tanh(ã/2λ) - ρ_t| · |a|`,
/// averaged over outputs and then over groups.
///
/// `log_probs` is an `n x 1` column of current log-probabilities of every token,
/// groups concatenated in order, outputs in order within a group.
pub fn gbpo_objective(g: &mut Graph, log_probs: Var, groups: &[(&GroupBatch, &GroupAdvantages)], eps: f64, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(RlError::Usage(format!("lambda must be positive, got {lambda}")));
    }
    let (target, weight, lp0) = token_terms(groups, eps, lambda)?;
    let (rows, cols) = g.value(log_probs).shape();
    if cols != 1 || rows != target.len() {
        return Err(RlError::Shape(format!("{rows}x{cols} log-probabilities for {} tokens", target.len())));
    }
    let b = g.leaf(Tensor::column(lp0));
    let d = g.sub(log_probs, b)?;
    let rho = g.exp(d);
    let t = g.leaf(Tensor::column(target));
    let w = g.leaf(Tensor::column(weight));
    let gap = g.sub(t, rho)?;
    let abs = g.abs(gap);
    let wt = g.mul(abs, w)?;
    Ok(g.sum(wt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RewardRule {
    /// Count of the prompt's target token (`prompt % vocab`) in the output.
    TargetCount,
    Constant { value: f64 },
}

impl RewardRule {
    pub fn score(&self, prompt: usize, vocab: usize, tokens: &[usize]) -> f64 {
        match self {
            RewardRule::TargetCount => tokens.iter().filter(|t| **t == prompt % vocab).count() as f64,
            RewardRule::Constant { value } => *value,
        }
    }
}

/// Autoregressive categorical model over `(prompt, position, previous token)` contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub vocab: usize,
    pub seq_len: usize,
    pub n_prompts: usize,
    pub spec: MlpSpec,
    pub params: ParameterSet,
}

impl SequenceModel {
    pub fn new(vocab: usize, seq_len: usize, n_prompts: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || seq_len == 0 || n_prompts == 0 {
            return Err(RlError::Usage(format!("need vocab >= 2, seq_len >= 1, n_prompts >= 1 (got {vocab}, {seq_len}, {n_prompts})")));
        }
        let spec = MlpSpec {
            input_dim: n_prompts * seq_len * (vocab + 1),
            hidden_dims: vec![],
            output_dim: vocab,
            activation: Activation::Tanh,
            output_head: OutputHead::LogSoftmax,
            output_gain: 0.01,
        };
        let params = spec.init_params(seed);
        Ok(SequenceModel { vocab, seq_len, n_prompts, spec, params })
    }

    /// Context index; `prev == vocab` marks the start of the sequence.
    fn context(&self, prompt: usize, pos: usize, prev: usize) -> usize {
        (prompt * self.seq_len + pos) * (self.vocab + 1) + prev
    }

    fn contexts(&self, prompt: usize, tokens: &[usize]) -> Vec<usize> {
        (0..tokens.len()).map(|pos| self.context(prompt, pos, if pos == 0 { self.vocab } else { tokens[pos - 1] })).collect()
    }

    fn one_hot(&self, contexts: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(contexts.len(), self.spec.input_dim);
        let w = self.spec.input_dim;
        for (r, c) in contexts.iter().enumerate() {
            t.data_mut()[r * w + c] = 1.0;
        }
        t
    }

    /// Samples one output; returns tokens and their log-probabilities.
    pub fn sample(&self, prompt: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut tokens = Vec::with_capacity(self.seq_len);
        let mut lps = Vec::with_capacity(self.seq_len);
        for pos in 0..self.seq_len {
            let prev = if pos == 0 { self.vocab } else { tokens[pos - 1] };
            let (logp, _) = self.spec.predict(&self.params, &self.one_hot(&[self.context(prompt, pos, prev)]))?;
            let row = logp.row_slice(0);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = self.vocab - 1;
            for (i, l) in row.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    choice = i;
                    break;
                }
            }
            tokens.push(choice);
            lps.push(row[choice]);
        }
        Ok((tokens, lps))
    }

    fn flatten(&self, groups: &[GroupBatch]) -> (Vec<usize>, Vec<usize>) {
        let mut ctx = Vec::new();
        let mut tok = Vec::new();
        for b in groups {
            for o in &b.outputs {
                ctx.extend(self.contexts(b.prompt, o));
                tok.extend(o);
            }
        }
        (ctx, tok)
    }

    /// Current log-probabilities of every token in `groups`, as an `n x 1` column.
    pub fn token_log_probs(&self, g: &mut Graph, bound: &BoundParams, groups: &[GroupBatch]) -> Result<Var> {
        let (ctx, tok) = self.flatten(groups);
        let x = g.leaf(self.one_hot(&ctx));
        let out = self.spec.forward(g, bound, x)?;
        Ok(g.gather(out.main, &tok)?)
    }

    pub fn token_log_prob_values(&self, groups: &[GroupBatch]) -> Result<Vec<f64>> {
        let (ctx, tok) = self.flatten(groups);
        let (logp, _) = self.spec.predict(&self.params, &self.one_hot(&ctx))?;
        Ok(tok.iter().enumerate().map(|(r, &t)| logp.get(r, t)).collect())
    }

    /// Probability of the most likely full sequence under greedy decoding.
    pub fn greedy(&self, prompt: usize) -> Result<Vec<usize>> {
        let mut tokens = Vec::new();
        for pos in 0..self.seq_len {
            let prev = if pos == 0 { self.vocab } else { tokens[pos - 1] };
            let (logp, _) = self.spec.predict(&self.params, &self.one_hot(&[self.context(prompt, pos, prev)]))?;
            let best = logp.row_slice(0).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).expect("vocab >= 2");
            tokens.push(best);
        }
        Ok(tokens)
    }
}

/// Draws one group of `g` outputs for `prompt` from the model.
pub fn sample_group(model: &SequenceModel, prompt: usize, g: usize, rule: RewardRule, rng: &mut ChaCha8Rng) -> Result<GroupBatch> {
    let mut batch = GroupBatch { prompt, outputs: Vec::with_capacity(g), behavior_log_probs: Vec::with_capacity(g), rewards: Vec::with_capacity(g) };
    for _ in 0..g {
        let (tokens, lps) = model.sample(prompt, rng)?;
        batch.rewards.push(rule.score(prompt, model.vocab, &tokens));
        batch.outputs.push(tokens);
        batch.behavior_log_probs.push(lps);
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbpoConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub n_prompts: usize,
    pub group_size: usize,
    pub groups_per_iteration: usize,
    pub iterations: usize,
    pub n_epochs: usize,
    pub eps: f64,
    pub lambda: f64,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub reward_rule: RewardRule,
    pub std_mode: StdMode,
    pub seed: u64,
}

impl Default for GbpoConfig {
    fn default() -> Self {
        GbpoConfig {
            vocab: 8,
            seq_len: 6,
            n_prompts: 1,
            group_size: 32,
            groups_per_iteration: 4,
            iterations: 200,
            n_epochs: 4,
            eps: 0.2,
            lambda: 1e-3,
            lr: 0.05,
            max_grad_norm: None,
            reward_rule: RewardRule::TargetCount,
            std_mode: StdMode::Population,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLogRow {
    pub iteration: usize,
    pub group: usize,
    pub mean_reward: f64,
    pub std: f64,
    pub degenerate: bool,
    /// Objective of this group after the iteration's updates.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbpoIteration {
    pub iteration: usize,
    pub mean_reward: f64,
    pub degenerate_fraction: f64,
    /// Objective before the first update of the iteration (all ratios 1).
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ratio_max: f64,
    pub ratio_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbpoReport {
    pub iterations: Vec<GbpoIteration>,
    pub groups: Vec<GroupLogRow>,
    pub model: SequenceModel,
}

impl GbpoReport {
    pub fn write_group_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.groups {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_iteration_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.iterations {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean reward over the first and last `window` iterations.
    pub fn window_means(&self, window: usize) -> (f64, f64) {
        let n = self.iterations.len();
        let w = window.min(n).max(1);
        let mean = |rows: &[GbpoIteration]| rows.iter().map(|r| r.mean_reward).sum::<f64>() / rows.len().max(1) as f64;
        (mean(&self.iterations[..w.min(n)]), mean(&self.iterations[n.saturating_sub(w)..]))
    }
}

fn per_group_losses(model: &SequenceModel, groups: &[GroupBatch], advs: &[GroupAdvantages], eps: f64, lambda: f64) -> Result<Vec<f64>> {
    let lp = model.token_log_prob_values(groups)?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(groups.len());
    for (b, a) in groups.iter().zip(advs) {
        let (target, weight, lp0) = token_terms(&[(b, a)], eps, lambda)?;
        let n = target.len();
        let loss = (0..n).map(|i| weight[i] * (target[i] - (lp[offset + i] - lp0[i]).exp()).abs()).sum();
        out.push(loss);
        offset += n;
    }
    Ok(out)
}

pub fn train_gbpo(cfg: &GbpoConfig) -> Result<GbpoReport> {
    if cfg.group_size < 2 {
        return Err(RlError::Usage(format!("group size must be at least 2, got {}", cfg.group_size)));
    }
    if cfg.groups_per_iteration == 0 || cfg.n_epochs == 0 {
        return Err(RlError::Usage("groups_per_iteration and n_epochs must be at least 1".into()));
    }
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) || !(cfg.lambda > 0.0) || !(cfg.lr >= 0.0) {
        return Err(RlError::Usage("need eps in (0, 1), lambda > 0 and lr >= 0".into()));
    }
    let mut model = SequenceModel::new(cfg.vocab, cfg.seq_len, cfg.n_prompts, derive_seed(cfg.seed, "gbpo/init"))?;
    let mut adam = Adam::new(model.params.n_values());
    let mut report = GbpoReport { iterations: Vec::new(), groups: Vec::new(), model: model.clone() };

    for iteration in 0..cfg.iterations {
        let groups: Vec<GroupBatch> = (0..cfg.groups_per_iteration)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng_for(cfg.seed, &format!("gbpo/{iteration}/{k}"));
                sample_group(&model, k % cfg.n_prompts, cfg.group_size, cfg.reward_rule, &mut rng)
            })
            .collect::<Result<_>>()?;
        let advs = groups.iter().map(|b| group_advantages(&b.rewards, cfg.std_mode)).collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&GroupBatch, &GroupAdvantages)> = groups.iter().zip(&advs).collect();

        let mut initial_loss = None;
        let mut final_loss = 0.0;
        for _ in 0..cfg.n_epochs {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let lp = model.token_log_probs(&mut g, &bound, &groups)?;
            let loss = gbpo_objective(&mut g, lp, &pairs, cfg.eps, cfg.lambda)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(RlError::Usage(format!("group objective diverged at iteration {iteration}")));
            }
            initial_loss.get_or_insert(value);
            final_loss = value;
            let mut grads = bound.gradients(&g.backward(loss)?, &model.params);
            if let Some(max) = cfg.max_grad_norm {
                clip_global_norm(&mut [&mut grads], max);
            }
            adam.step(&mut model.params, &grads, cfg.lr);
        }

        let lp_new = model.token_log_prob_values(&groups)?;
        let lp_old: Vec<f64> = groups.iter().flat_map(|b| b.behavior_log_probs.iter().flatten().copied()).collect();
        let ratios: Vec<f64> = lp_new.iter().zip(&lp_old).map(|(a, b)| (a - b).exp()).collect();
        let group_losses = per_group_losses(&model, &groups, &advs, cfg.eps, cfg.lambda)?;
        for (k, ((b, a), loss)) in groups.iter().zip(&advs).zip(&group_losses).enumerate() {
            report.groups.push(GroupLogRow { iteration, group: k, mean_reward: a.mean, std: a.std, degenerate: a.degenerate, loss: *loss });
            debug_assert_eq!(b.rewards.len(), cfg.group_size);
        }
        let n_rewards = (cfg.groups_per_iteration * cfg.group_size) as f64;
        report.iterations.push(GbpoIteration {
            iteration,
            mean_reward: groups.iter().flat_map(|b| &b.rewards).sum::<f64>() / n_rewards,
            degenerate_fraction: advs.iter().filter(|a| a.degenerate).count() as f64 / advs.len() as f64,
            initial_loss: initial_loss.unwrap_or(0.0),
            final_loss,
            ratio_max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ratio_min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    report.model = model;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let adv = group_advantages(&[1.0, 2.0, 6.0], StdMode::Population).unwrap();
        let s = (14.0f64 / 3.0).sqrt();
        for (x, y) in adv.a.iter().zip([-2.0, -1.0, 3.0]) {
            assert!((x - y / s).abs() < 1e-12);
        }
        for (x, y) in adv.a_tilde.iter().zip([-1.0, 0.0, 4.0]) {
            assert!((x - y / s).abs() < 1e-12);
        }
    }

    #[test]
    fn two_points_are_unit_z_scores() {
        let adv = group_advantages(&[0.0, 1.0], StdMode::Population).unwrap();
        assert_eq!(adv.a, vec![-1.0, 1.0]);
        assert_eq!(adv.a, adv.a_tilde);
    }

    #[test]
    fn equal_rewards_are_degenerate() {
        let adv = group_advantages(&[3.0; 5], StdMode::Population).unwrap();
        assert!(adv.degenerate);
        assert!(adv.a.iter().chain(&adv.a_tilde).all(|x| *x == 0.0));
    }

    #[test]
    fn singleton_group_is_rejected() {
        assert!(matches!(group_advantages(&[1.0], StdMode::Population), Err(RlError::Usage(_))));
        let cfg = GbpoConfig { group_size: 1, ..Default::default() };
        assert!(matches!(train_gbpo(&cfg), Err(RlError::Usage(_))));
    }

    #[test]
    fn constant_reward_makes_every_group_degenerate() {
        let cfg = GbpoConfig { iterations: 2, reward_rule: RewardRule::Constant { value: 1.0 }, ..Default::default() };
        let r = train_gbpo(&cfg).unwrap();
        assert!(r.iterations.iter().all(|it| it.degenerate_fraction == 1.0 && it.final_loss == 0.0));
    }

    #[test]
    fn target_count_is_maximized_by_all_target_tokens() {
        assert_eq!(RewardRule::TargetCount.score(3, 8, &[3; 6]), 6.0);
        assert_eq!(RewardRule::TargetCount.score(3, 8, &[3, 1, 3]), 2.0);
    }
}
