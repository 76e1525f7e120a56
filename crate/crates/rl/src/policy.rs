//! Policy, value and median networks.

use brrl_autodiff::mlp::{categorical_entropy, gaussian_entropy, gaussian_log_prob, gaussian_log_prob_values};
use brrl_autodiff::{Activation, BoundParams, Graph, MlpSpec, OutputHead, ParameterSet, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{Action, ActionSpace};
use crate::error::{Result, RlError};

const POLICY_OUTPUT_GAIN: f64 = 0.01;

/// A stochastic policy: categorical over discrete actions or diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub spec: MlpSpec,
    pub params: ParameterSet,
    pub space: ActionSpace,
}

/// Graph nodes for a minibatch: per-sample log-probabilities (`n x 1`) and mean entropy.
#[derive(Debug, Clone, Copy)]
pub struct PolicyNodes {
    pub log_probs: Var,
    pub entropy: Var,
}

fn discrete_indices(actions: &[Action], n: usize) -> Result<Vec<usize>> {
    actions
        .iter()
        .map(|a| match a {
            Action::Discrete(i) if *i < n => Ok(*i),
            other => Err(RlError::Shape(format!("action {other:?} does not fit {n} discrete actions"))),
        })
        .collect()
}

fn continuous_tensor(actions: &[Action], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(actions.len() * d);
    for a in actions {
        match a {
            Action::Continuous(v) if v.len() == d => data.extend(v),
            other => return Err(RlError::Shape(format!("action {other:?} is not a {d}-dimensional vector"))),
        }
    }
    Ok(Tensor::new(actions.len(), d, data)?)
}

impl PolicyNet {
    pub fn new(obs_dim: usize, space: ActionSpace, hidden: Vec<usize>, activation: Activation, seed: u64) -> Self {
        let (output_dim, output_head) = match space {
            ActionSpace::Discrete(n) => (n, OutputHead::LogSoftmax),
            ActionSpace::Continuous(d) => (d, OutputHead::Gaussian { initial_log_std: 0.0 }),
        };
        let spec = MlpSpec { input_dim: obs_dim, hidden_dims: hidden, output_dim, activation, output_head, output_gain: POLICY_OUTPUT_GAIN };
        let params = spec.init_params(seed);
        PolicyNet { spec, params, space }
    }

    /// Records log-probabilities of `actions` and the mean entropy.
    pub fn nodes(&self, g: &mut Graph, bound: &BoundParams, obs: Var, actions: &[Action]) -> Result<PolicyNodes> {
        let out = self.spec.forward(g, bound, obs)?;
        match self.space {
            ActionSpace::Discrete(n) => {
                let idx = discrete_indices(actions, n)?;
                let log_probs = g.gather(out.main, &idx)?;
                let entropy = categorical_entropy(g, out.main)?;
                Ok(PolicyNodes { log_probs, entropy })
            }
            ActionSpace::Continuous(d) => {
                let a = continuous_tensor(actions, d)?;
                let log_std = out.log_std.expect("gaussian head has log_std");
                let log_probs = gaussian_log_prob(g, out.main, log_std, &a)?;
                let s = g.sum(log_std);
                let entropy = g.add_scalar(s, gaussian_entropy(&vec![0.0; d]));
                Ok(PolicyNodes { log_probs, entropy })
            }
        }
    }

    /// Tape-free log-probabilities under `params` (which may differ from `self.params`).
    pub fn log_probs_with(&self, params: &ParameterSet, obs: &Tensor, actions: &[Action]) -> Result<Vec<f64>> {
        let (main, log_std) = self.spec.predict(params, obs)?;
        match self.space {
            ActionSpace::Discrete(n) => {
                let idx = discrete_indices(actions, n)?;
                Ok(idx.iter().enumerate().map(|(r, &a)| main.get(r, a)).collect())
            }
            ActionSpace::Continuous(d) => {
                let a = continuous_tensor(actions, d)?;
                Ok(gaussian_log_prob_values(&main, &log_std.expect("gaussian head has log_std"), &a))
            }
        }
    }

    pub fn log_probs(&self, obs: &Tensor, actions: &[Action]) -> Result<Vec<f64>> {
        self.log_probs_with(&self.params, obs, actions)
    }

    /// Action probabilities for each row of `obs`. Discrete policies only.
    pub fn action_probs(&self, obs: &Tensor) -> Result<Vec<Vec<f64>>> {
        if !matches!(self.space, ActionSpace::Discrete(_)) {
            return Err(RlError::Usage("action probabilities need a discrete policy".into()));
        }
        let (main, _) = self.spec.predict(&self.params, obs)?;
        Ok((0..main.rows()).map(|r| main.row_slice(r).iter().map(|l| l.exp()).collect()).collect())
    }

    /// Draws an action for one observation and returns it with its log-probability.
    pub fn sample(&self, features: &[f64], rng: &mut ChaCha8Rng) -> Result<(Action, f64)> {
        let obs = Tensor::row(features.to_vec());
        let (main, log_std) = self.spec.predict(&self.params, &obs)?;
        match self.space {
            ActionSpace::Discrete(_) => {
                let logits = main.row_slice(0);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut choice = logits.len() - 1;
                for (i, l) in logits.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        choice = i;
                        break;
                    }
                }
                Ok((Action::Discrete(choice), logits[choice]))
            }
            ActionSpace::Continuous(d) => {
                let log_std = log_std.expect("gaussian head has log_std");
                let a: Vec<f64> = (0..d)
                    .map(|i| {
                        let z: f64 = rng.sample(StandardNormal);
                        main.get(0, i) + log_std.data()[i].exp() * z
                    })
                    .collect();
                let lp = gaussian_log_prob_values(&main, &log_std, &Tensor::row(a.clone()))[0];
                Ok((Action::Continuous(a), lp))
            }
        }
    }
}

/// A scalar-output network, used for both the value and the median estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarNet {
    pub spec: MlpSpec,
    pub params: ParameterSet,
}

impl ScalarNet {
    pub fn new(obs_dim: usize, hidden: Vec<usize>, activation: Activation, seed: u64) -> Self {
        let spec = MlpSpec { input_dim: obs_dim, hidden_dims: hidden, output_dim: 1, activation, output_head: OutputHead::Linear, output_gain: 1.0 };
        let params = spec.init_params(seed);
        ScalarNet { spec, params }
    }

    /// `n x 1` predictions.
    pub fn node(&self, g: &mut Graph, bound: &BoundParams, obs: Var) -> Result<Var> {
        Ok(self.spec.forward(g, bound, obs)?.main)
    }

    pub fn predict(&self, obs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.spec.predict(&self.params, obs)?.0.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sampled_log_prob_matches_batch_evaluation() {
        for space in [ActionSpace::Discrete(3), ActionSpace::Continuous(2)] {
            let pi = PolicyNet::new(4, space, vec![8], Activation::Tanh, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = vec![0.1, -0.2, 0.3, 0.9];
            let (a, lp) = pi.sample(&x, &mut rng).unwrap();
            let batch = pi.log_probs(&Tensor::row(x), &[a]).unwrap();
            assert_eq!(batch[0], lp);
        }
    }

    #[test]
    fn initial_tabular_policy_is_near_uniform() {
        let pi = PolicyNet::new(25, ActionSpace::Discrete(4), vec![], Activation::Tanh, 0);
        let probs = pi.action_probs(&Tensor::row(vec![1.0; 25])).unwrap();
        assert!(probs[0].iter().all(|p| (p - 0.25).abs() < 0.02));
    }
}
