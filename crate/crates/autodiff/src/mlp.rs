//! Multilayer perceptrons with a linear or Gaussian output head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParameterSet};
use crate::tensor::{self, Tensor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Elu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Elu => tensor::elu(x),
        }
    }

    fn on_graph(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(v),
            Activation::Relu => g.relu(v),
            Activation::Elu => g.elu(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputHead {
    /// Raw outputs (logits or values).
    Linear,
    /// Row-wise log-probabilities.
    LogSoftmax,
    /// Outputs are means; a state-independent `log_std` row is learned alongside.
    Gaussian { initial_log_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Empty means a single affine layer.
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_head: OutputHead,
    /// Multiplier on the last layer's initial weights.
    pub output_gain: f64,
}

/// Forward results: `main` is `n x output_dim`, `log_std` is `1 x output_dim` for Gaussian heads.
#[derive(Debug, Clone, Copy)]
pub struct MlpOutput {
    pub main: Var,
    pub log_std: Option<Var>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec { input_dim, hidden_dims, output_dim, activation: Activation::Tanh, output_head: OutputHead::Linear, output_gain: 1.0 }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    fn n_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// Weights `w{i}` are `in x out`, drawn from `U(-1, 1) · sqrt(3 / fan_in)`; biases `b{i}` start at zero.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = self.dims();
        let mut p = ParameterSet::new();
        for i in 0..self.n_layers() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let gain = if i + 1 == self.n_layers() { self.output_gain } else { 1.0 };
            let scale = (3.0 / fan_in.max(1) as f64).sqrt() * gain;
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            p.push(format!("w{i}"), Tensor::new(fan_in, fan_out, w).expect("sized above"));
            p.push(format!("b{i}"), Tensor::zeros(1, fan_out));
        }
        if let OutputHead::Gaussian { initial_log_std } = self.output_head {
            p.push("log_std", Tensor::filled(1, self.output_dim, initial_log_std));
        }
        p
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(AutodiffError::Shape(format!("input has {} columns, network expects {}", x.cols(), self.input_dim)));
        }
        Ok(())
    }

    /// Records the forward pass. `bound` must come from parameters made by [`MlpSpec::init_params`].
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, input: Var) -> Result<MlpOutput> {
        self.check_input(g.value(input))?;
        let mut h = input;
        for i in 0..self.n_layers() {
            let z = g.matmul(h, bound.var(2 * i))?;
            h = g.add_row(z, bound.var(2 * i + 1))?;
            if i + 1 < self.n_layers() {
                h = self.activation.on_graph(g, h);
            }
        }
        if self.output_head == OutputHead::LogSoftmax {
            h = g.log_softmax_rows(h);
        }
        let log_std = match self.output_head {
            OutputHead::Gaussian { .. } => Some(bound.var(2 * self.n_layers())),
            OutputHead::Linear | OutputHead::LogSoftmax => None,
        };
        Ok(MlpOutput { main: h, log_std })
    }

    /// Same arithmetic as [`MlpSpec::forward`] without recording a tape.
    pub fn predict(&self, params: &ParameterSet, input: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        self.check_input(input)?;
        let tensors: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        let mut h = input.clone();
        for i in 0..self.n_layers() {
            h = tensor::add_row(&tensor::matmul(&h, tensors[2 * i]), tensors[2 * i + 1]);
            if i + 1 < self.n_layers() {
                let act = self.activation;
                h = h.map(|x| act.apply(x));
            }
        }
        if self.output_head == OutputHead::LogSoftmax {
            h = tensor::log_softmax_rows(&h);
        }
        let log_std = match self.output_head {
            OutputHead::Gaussian { .. } => Some(tensors[2 * self.n_layers()].clone()),
            OutputHead::Linear | OutputHead::LogSoftmax => None,
        };
        Ok((h, log_std))
    }
}

/// Per-row diagonal Gaussian log density of `actions` (`n x d`), as an `n x 1` column.
pub fn gaussian_log_prob(g: &mut Graph, mean: Var, log_std: Var, actions: &Tensor) -> Result<Var> {
    let n = g.value(mean).rows();
    let a = g.leaf(actions.clone());
    let diff = g.sub(a, mean)?;
    let ls = g.broadcast_rows(log_std, n)?;
    let neg_ls = g.neg(ls);
    let inv_std = g.exp(neg_ls);
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let per_dim = g.sub(half, ls)?;
    let per_dim = g.add_scalar(per_dim, -HALF_LN_2PI);
    Ok(g.sum_cols(per_dim))
}

/// Tape-free twin of [`gaussian_log_prob`].
pub fn gaussian_log_prob_values(mean: &Tensor, log_std: &Tensor, actions: &Tensor) -> Vec<f64> {
    (0..mean.rows())
        .map(|r| {
            mean.row_slice(r)
                .iter()
                .zip(actions.row_slice(r))
                .zip(log_std.data())
                .map(|((m, a), ls)| {
                    let z = (a - m) * (-ls).exp();
                    -0.5 * (z * z) - ls - HALF_LN_2PI
                })
                .sum()
        })
        .collect()
}

/// Entropy of a diagonal Gaussian with the given log standard deviations.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
}

/// Mean row entropy of categorical distributions given as log-probabilities.
pub fn categorical_entropy(g: &mut Graph, log_probs: Var) -> Result<Var> {
    let p = g.exp(log_probs);
    let plogp = g.mul(p, log_probs)?;
    let rows = g.sum_cols(plogp);
    let m = g.mean(rows);
    Ok(g.neg(m))
}
