//! The computation tape.

use crate::error::{AutodiffError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    LogSoftmaxRows(Var),
    Gather(Var, Vec<usize>),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of dense operations. Build it forward, then call [`Graph::backward`] once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf holding `t`; used for inputs, constants and parameters alike.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Stop-gradient: a new leaf with the same value, cut from its producers.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(AutodiffError::Shape(format!("matmul {:?} by {:?}", x.shape(), y.shape())));
        }
        let out = tensor::matmul(x, y);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds the `1 x m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows() != 1 || y.cols() != x.cols() {
            return Err(AutodiffError::Shape(format!("add_row {:?} + {:?}", x.shape(), y.shape())));
        }
        let out = tensor::add_row(x, y);
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(AutodiffError::Shape(format!("broadcast_rows needs a row, got {:?}", x.shape())));
        }
        let out = Tensor::new(n, x.cols(), x.data().repeat(n))?;
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, what)?;
        let out = x.zip_map(y, f);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, tensor::elu, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, tensor::softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; gradient 1 inside (boundaries included), 0 outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = tensor::log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Picks column `idx[r]` from each row `r`, giving an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() || idx.iter().any(|&i| i >= x.cols()) {
            return Err(AutodiffError::Shape(format!("gather of {} indices from {:?}", idx.len(), x.shape())));
        }
        let out = Tensor::column(idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect());
        Ok(self.push(out, Op::Gather(a, idx.to_vec())))
    }

    /// Sums each row, giving an `n x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::column((0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect());
        self.push(out, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        self.push(out, Op::Mean(a))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (x, w) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, tensor::matmul(&g, &w.transpose()));
                    accumulate(&mut grads, *b, tensor::matmul(&x.transpose(), &g));
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        gb.data_mut().iter_mut().zip(g.row_slice(r)).for_each(|(o, x)| *o += x);
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::BroadcastRows(a) => {
                    let mut ga = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        ga.data_mut().iter_mut().zip(g.row_slice(r)).for_each(|(o, x)| *o += x);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, w) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.zip_map(w, |gi, wi| gi * wi));
                    accumulate(&mut grads, *b, g.zip_map(x, |gi, xi| gi * xi));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| c * x)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_map(y, |gi, t| gi * (1.0 - t * t))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { gi * xi.exp() }));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(y, |gi, e| gi * e)),
                Op::Log(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(x, |gi, xi| gi / xi));
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let sgn = |xi: f64| if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 };
                    accumulate(&mut grads, *a, g.zip_map(x, |gi, xi| gi * sgn(xi)));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(x, |gi, xi| gi * tensor::sigmoid(xi)));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(x, |gi, xi| 2.0 * gi * xi));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(x, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }));
                }
                Op::Minimum(a, b) => {
                    let (x, w) = (self.value(*a), self.value(*b));
                    let mask = x.zip_map(w, |xi, wi| if xi <= wi { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, g.zip_map(&mask, |gi, m| gi * m));
                    accumulate(&mut grads, *b, g.zip_map(&mask, |gi, m| gi * (1.0 - m)));
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let total: f64 = g.row_slice(r).iter().sum();
                        let cols = g.cols();
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] -= y.get(r, c).exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for (r, &c) in idx.iter().enumerate() {
                        ga.data_mut()[r * cols + c] = g.get(r, 0);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let data = (0..rows).flat_map(|r| std::iter::repeat(g.get(r, 0)).take(cols)).collect();
                    accumulate(&mut grads, *a, Tensor::new(rows, cols, data)?);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let n = (rows * cols).max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.get(0, 0) / n));
                }
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }
}
