//! Named parameter collections and their binding into a graph.

use crate::error::{AutodiffError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered named tensors, e.g. the weights and biases of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All values concatenated in entry order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Overwrites all values from a flat slice in entry order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_values() {
            return Err(AutodiffError::Shape(format!("expected {} values, got {}", self.n_values(), values.len())));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols()))).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().flat_map(|(_, t)| t.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for (_, t) in &mut self.entries {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Adds every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams { vars: self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect() }
    }
}

/// Graph handles of a bound [`ParameterSet`], in entry order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects the gradient of each bound tensor, named like `like`.
    pub fn gradients(&self, grads: &Gradients, like: &ParameterSet) -> ParameterSet {
        let mut out = ParameterSet::new();
        for ((name, _), v) in like.entries.iter().zip(&self.vars) {
            out.push(name.clone(), grads.wrt(*v));
        }
        out
    }
}

/// Rescales gradient sets jointly so their global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(sets: &mut [&mut ParameterSet], max_norm: f64) -> f64 {
    let norm = sets.iter().map(|s| s.norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        sets.iter_mut().for_each(|s| s.scale(c));
    }
    norm
}
