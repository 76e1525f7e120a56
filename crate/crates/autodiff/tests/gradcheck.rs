use brrl_autodiff::mlp::{categorical_entropy, gaussian_log_prob};
use brrl_autodiff::{Adam, Graph, MlpSpec, OutputHead, ParameterSet, Tensor, Var};
use proptest::prelude::*;

/// Central differences of `f` at `x`, compared with the tape gradient.
fn check(x: Tensor, f: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let loss = f(&mut g, v);
    let analytic = g.backward(loss).unwrap().wrt(v);
    let h = 1e-6;
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut y = x.clone();
            y.data_mut()[i] += delta;
            let mut g = Graph::new();
            let v = g.leaf(y);
            let l = f(&mut g, v);
            g.value(l).data()[0]
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic.data()[i];
        assert!((fd - a).abs() <= tol * (1.0 + fd.abs()), "coordinate {i}: fd {fd} vs tape {a}");
    }
}

fn sample() -> Tensor {
    Tensor::new(2, 3, vec![0.3, -0.7, 1.1, -1.4, 0.25, 0.9]).unwrap()
}

fn positive() -> Tensor {
    sample().map(|x| x.abs() + 0.2)
}

#[test]
fn elementwise_ops() {
    let w = Tensor::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.2]).unwrap();
    let unary: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Var>)> = vec![
        ("tanh", Box::new(|g, v| g.tanh(v))),
        ("relu", Box::new(|g, v| g.relu(v))),
        ("elu", Box::new(|g, v| g.elu(v))),
        ("exp", Box::new(|g, v| g.exp(v))),
        ("abs", Box::new(|g, v| g.abs(v))),
        ("softplus", Box::new(|g, v| g.softplus(v))),
        ("square", Box::new(|g, v| g.square(v))),
        ("clamp", Box::new(|g, v| g.clamp(v, -0.5, 0.5))),
        ("scale", Box::new(|g, v| g.scale(v, -3.0))),
        ("neg", Box::new(|g, v| g.neg(v))),
        ("add_scalar", Box::new(|g, v| g.add_scalar(v, 2.0))),
        ("log_softmax", Box::new(|g, v| g.log_softmax_rows(v))),
        ("sum_cols", Box::new(|g, v| g.sum_cols(v))),
    ];
    for (name, op) in &unary {
        eprintln!("{name}");
        let w = w.clone();
        check(sample(), |g, v| {
            let y = op(g, v);
            let wv = g.leaf(if g.value(y).cols() == 1 { Tensor::column(vec![0.7, -1.3]) } else { w.clone() });
            let z = g.mul(y, wv).unwrap();
            g.sum(z)
        }, 1e-6);
    }
    check(positive(), |g, v| {
        let y = g.log(v);
        g.sum(y)
    }, 1e-6);
}

#[test]
fn binary_and_structural_ops() {
    let other = Tensor::new(2, 3, vec![1.0, 0.2, -0.5, 0.1, 0.1, 2.0]).unwrap();
    check(sample(), |g, v| {
        let o = g.leaf(other.clone());
        let a = g.add(v, o).unwrap();
        let b = g.sub(a, v).unwrap();
        let c = g.mul(b, v).unwrap();
        let d = g.minimum(c, v).unwrap();
        let e = g.add(d, c).unwrap();
        g.mean(e)
    }, 1e-6);
    check(sample(), |g, v| {
        let w = g.leaf(Tensor::new(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
        let m = g.matmul(v, w).unwrap();
        let s = g.square(m);
        g.sum(s)
    }, 1e-6);
    check(Tensor::row(vec![0.2, -0.4, 0.9]), |g, v| {
        let x = g.leaf(sample());
        let a = g.add_row(x, v).unwrap();
        let b = g.broadcast_rows(v, 2).unwrap();
        let c = g.mul(a, b).unwrap();
        g.sum(c)
    }, 1e-6);
    check(sample(), |g, v| {
        let l = g.log_softmax_rows(v);
        let p = g.gather(l, &[2, 0]).unwrap();
        g.sum(p)
    }, 1e-6);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).data()[0], 3.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(sample());
    assert!(g.backward(x).is_err());
}

#[test]
fn mlp_parameter_gradients() {
    let mut spec = MlpSpec::new(3, vec![4], 2);
    spec.output_head = OutputHead::Gaussian { initial_log_std: 0.1 };
    let params = spec.init_params(5);
    let x = Tensor::new(2, 3, vec![0.5, -0.2, 1.0, -1.0, 0.3, 0.0]).unwrap();
    let actions = Tensor::new(2, 2, vec![0.3, -0.1, 1.2, 0.4]).unwrap();
    let loss_of = |p: &ParameterSet| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.leaf(x.clone());
        let out = spec.forward(&mut g, &b, xv).unwrap();
        let lp = gaussian_log_prob(&mut g, out.main, out.log_std.unwrap(), &actions).unwrap();
        let loss = g.mean(lp);
        (g, b, loss)
    };
    let (g, b, loss) = loss_of(&params);
    let grads = b.gradients(&g.backward(loss).unwrap(), &params).flat();
    let base = params.flat();
    for i in 0..base.len() {
        let f = |delta: f64| {
            let mut p = params.clone();
            let mut v = base.clone();
            v[i] += delta;
            p.set_flat(&v).unwrap();
            let (g, _, l) = loss_of(&p);
            g.value(l).data()[0]
        };
        let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
        assert!((fd - grads[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
    }
}

#[test]
fn categorical_entropy_of_uniform_is_log_n() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(3, 4));
    let l = g.log_softmax_rows(x);
    let h = categorical_entropy(&mut g, l).unwrap();
    assert!((g.value(h).data()[0] - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn adam_minimizes_quadratic() {
    let mut p = ParameterSet::new();
    p.push("x", Tensor::row(vec![3.0, -2.0]));
    let mut adam = Adam::new(2);
    for _ in 0..3000 {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let s = g.square(b.var(0));
        let loss = g.sum(s);
        let grads = b.gradients(&g.backward(loss).unwrap(), &p);
        adam.step(&mut p, &grads, 0.01);
    }
    assert!(p.norm() < 1e-2, "{:?}", p.flat());
}

proptest! {
    #[test]
    fn log_softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f64..50.0, 6)) {
        let x = Tensor::new(2, 3, v).unwrap();
        let l = brrl_autodiff::tensor::log_softmax_rows(&x);
        for r in 0..2 {
            let s: f64 = l.row_slice(r).iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_gradient_matches_derivative(x in -5.0f64..5.0) {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::scalar(x));
        let t = g.tanh(v);
        let grad = g.backward(t).unwrap().wrt(v).data()[0];
        prop_assert!((grad - (1.0 - x.tanh().powi(2))).abs() < 1e-14);
    }

    #[test]
    fn flat_round_trip(v in proptest::collection::vec(-1e3f64..1e3, 7)) {
        let mut p = ParameterSet::new();
        p.push("a", Tensor::zeros(1, 3));
        p.push("b", Tensor::zeros(2, 2));
        p.set_flat(&v).unwrap();
        prop_assert_eq!(p.flat(), v);
    }
}
