//! Trajectory collection under a frozen behavior policy.

use std::io::Write;
use std::ops::Range;

use brrl_autodiff::Tensor;
use brrl_core::seed::rng_for;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{Action, Environment, Observation};
use crate::error::{Result, RlError};
use crate::gae::{self, GaeConfig, Segment};

/// Samples an action and reports its log-probability under the behavior policy.
pub type ActorFn<'a> = dyn Fn(&Observation, &mut ChaCha8Rng) -> Result<(Action, f64)> + Sync + 'a;
/// Evaluates the behavior value estimate for each row of an observation matrix.
pub type ValueFn<'a> = dyn Fn(&Tensor) -> Result<Vec<f64>> + 'a;

/// Transitions from all environment instances, concatenated in instance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub obs_dim: usize,
    pub observations: Vec<Vec<f64>>,
    pub states: Vec<Option<usize>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub behavior_log_probs: Vec<f64>,
    pub value_estimates: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub env_ids: Vec<usize>,
    pub episode_ids: Vec<usize>,
    /// Value of the final observation after a truncated step, 0 elsewhere.
    pub truncation_values: Vec<f64>,
    /// Final observation after each truncated step.
    pub final_observations: Vec<Option<Vec<f64>>>,
    /// One contiguous range per environment instance.
    pub segments: Vec<Range<usize>>,
    /// Value of the observation following each segment's last step.
    pub bootstrap_values: Vec<f64>,
    pub last_observations: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Undiscounted returns of episodes that ended (either way) inside this batch.
    pub completed_episode_returns: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Observation rows selected by `idx`.
    pub fn observation_tensor(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.obs_dim);
        for &i in idx {
            data.extend(&self.observations[i]);
        }
        Tensor::new(idx.len(), self.obs_dim, data).expect("observations share one width")
    }

    pub fn all_observations(&self) -> Tensor {
        self.observation_tensor(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Lengths of the episode pieces in this batch, in order of appearance.
    pub fn episode_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for key in self.env_ids.iter().zip(&self.episode_ids) {
            if prev == Some(key) {
                *out.last_mut().expect("a piece is open") += 1;
            } else {
                out.push(1);
                prev = Some(key);
            }
        }
        out
    }

    /// Fills `advantages` and `returns` from `value_estimates`.
    pub fn compute_gae(&mut self, cfg: GaeConfig) -> Result<()> {
        cfg.validate()?;
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for (seg, boot) in self.segments.iter().zip(&self.bootstrap_values) {
            let r = seg.clone();
            let (adv, ret) = gae::compute_gae(
                Segment {
                    rewards: &self.rewards[r.clone()],
                    values: &self.value_estimates[r.clone()],
                    terminated: &self.terminated[r.clone()],
                    truncated: &self.truncated[r.clone()],
                    truncation_values: &self.truncation_values[r.clone()],
                    bootstrap_value: *boot,
                },
                cfg,
            )?;
            self.advantages[r.clone()].copy_from_slice(&adv);
            self.returns[r].copy_from_slice(&ret);
        }
        Ok(())
    }

    /// Columnar CSV: step, env, episode, obs_*, action, reward, logp0, value, advantage, return.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string(), "env".into(), "episode".into()];
        header.extend((0..self.obs_dim).map(|i| format!("obs_{i}")));
        header.extend(["action", "reward", "logp0", "value", "advantage", "return"].map(String::from));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string(), self.env_ids[i].to_string(), self.episode_ids[i].to_string()];
            rec.extend(self.observations[i].iter().map(f64::to_string));
            rec.push(match &self.actions[i] {
                Action::Discrete(a) => a.to_string(),
                Action::Continuous(v) => v.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
            });
            let opt = |v: &Vec<f64>| v.get(i).map_or(String::new(), f64::to_string);
            rec.extend([
                self.rewards[i].to_string(),
                self.behavior_log_probs[i].to_string(),
                self.value_estimates[i].to_string(),
                opt(&self.advantages),
                opt(&self.returns),
            ]);
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Slot {
    observation: Observation,
    episode: usize,
    episode_return: f64,
    rng: ChaCha8Rng,
}

#[derive(Default)]
struct Piece {
    observations: Vec<Vec<f64>>,
    states: Vec<Option<usize>>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
    log_probs: Vec<f64>,
    terminated: Vec<bool>,
    truncated: Vec<bool>,
    episode_ids: Vec<usize>,
    final_observations: Vec<Option<Vec<f64>>>,
    completed: Vec<f64>,
}

/// Runs a fixed set of environment instances, keeping episodes alive across calls.
///
/// Episode `e` of instance `i` draws all randomness from the stream
/// `(seed, "episode/{i}/{e}")`, so results do not depend on the thread count.
pub struct Collector {
    envs: Vec<Box<dyn Environment>>,
    slots: Vec<Slot>,
    seed: u64,
    steps_taken: usize,
}

fn open_episode(env: &mut dyn Environment, seed: u64, instance: usize, episode: usize) -> Slot {
    let mut rng = rng_for(seed, &format!("episode/{instance}/{episode}"));
    let observation = env.reset(&mut rng);
    Slot { observation, episode, episode_return: 0.0, rng }
}

impl Collector {
    pub fn new(mut envs: Vec<Box<dyn Environment>>, seed: u64) -> Result<Self> {
        if envs.is_empty() {
            return Err(RlError::Usage("need at least one environment".into()));
        }
        let dim = envs[0].observation_dim();
        if envs.iter().any(|e| e.observation_dim() != dim || e.action_space() != envs[0].action_space()) {
            return Err(RlError::Usage("environment instances disagree on their spaces".into()));
        }
        let slots = envs.iter_mut().enumerate().map(|(i, e)| open_episode(e.as_mut(), seed, i, 0)).collect();
        Ok(Collector { envs, slots, seed, steps_taken: 0 })
    }

    pub fn envs(&self) -> &[Box<dyn Environment>] {
        &self.envs
    }

    /// Collects `n_steps` transitions from every instance.
    pub fn collect(&mut self, n_steps: usize, actor: &ActorFn<'_>, value: &ValueFn<'_>) -> Result<TrajectoryBatch> {
        if n_steps == 0 {
            return Err(RlError::Usage("n_steps must be at least 1".into()));
        }
        let seed = self.seed;
        let base_step = self.steps_taken;
        let pieces: Vec<Result<Piece>> = self
            .envs
            .par_iter_mut()
            .zip(self.slots.par_iter_mut())
            .enumerate()
            .map(|(instance, (env, slot))| {
                let mut p = Piece::default();
                for t in 0..n_steps {
                    let (action, lp) = actor(&slot.observation, &mut slot.rng)?;
                    let step = env.step(&action, &mut slot.rng).map_err(|e| match e {
                        RlError::Env { message, .. } => RlError::Env { step: base_step + t, message },
                        other => other,
                    })?;
                    p.observations.push(std::mem::take(&mut slot.observation.features));
                    p.states.push(slot.observation.state);
                    p.actions.push(action);
                    p.rewards.push(step.reward);
                    p.log_probs.push(lp);
                    p.terminated.push(step.terminated);
                    p.truncated.push(step.truncated);
                    p.episode_ids.push(slot.episode);
                    slot.episode_return += step.reward;
                    if step.terminated || step.truncated {
                        p.completed.push(slot.episode_return);
                        p.final_observations.push(step.truncated.then(|| step.observation.features.clone()));
                        *slot = open_episode(env.as_mut(), seed, instance, slot.episode + 1);
                    } else {
                        p.final_observations.push(None);
                        slot.observation = step.observation;
                    }
                }
                Ok(p)
            })
            .collect();
        self.steps_taken += n_steps;

        let mut batch = TrajectoryBatch { obs_dim: self.envs[0].observation_dim(), ..Default::default() };
        for (instance, p) in pieces.into_iter().enumerate() {
            let p = p?;
            let start = batch.len();
            batch.observations.extend(p.observations);
            batch.states.extend(p.states);
            batch.actions.extend(p.actions);
            batch.rewards.extend(p.rewards);
            batch.behavior_log_probs.extend(p.log_probs);
            batch.terminated.extend(p.terminated);
            batch.truncated.extend(p.truncated);
            batch.env_ids.extend(std::iter::repeat(instance).take(n_steps));
            batch.episode_ids.extend(p.episode_ids);
            batch.final_observations.extend(p.final_observations);
            batch.completed_episode_returns.extend(p.completed);
            batch.segments.push(start..batch.len());
            batch.last_observations.push(self.slots[instance].observation.features.clone());
        }
        if let Some(lp) = batch.behavior_log_probs.iter().find(|x| !x.is_finite()) {
            return Err(RlError::Env { step: base_step, message: format!("behavior log-probability {lp} is not finite") });
        }

        // One value pass over every observation that needs an estimate.
        let mut extra: Vec<&Vec<f64>> = batch.final_observations.iter().flatten().collect();
        extra.extend(&batch.last_observations);
        let mut rows: Vec<f64> = batch.observations.iter().flatten().copied().collect();
        rows.extend(extra.iter().flat_map(|v| v.iter().copied()));
        let n_rows = batch.len() + extra.len();
        let values = value(&Tensor::new(n_rows, batch.obs_dim, rows)?)?;
        if values.len() != n_rows {
            return Err(RlError::Shape(format!("value function returned {} estimates for {n_rows} rows", values.len())));
        }
        batch.value_estimates = values[..batch.len()].to_vec();
        let mut rest = values[batch.len()..].iter();
        batch.truncation_values = batch.final_observations.iter().map(|f| if f.is_some() { *rest.next().expect("counted") } else { 0.0 }).collect();
        batch.bootstrap_values = rest.copied().collect();
        Ok(batch)
    }
}
