//! Helpers shared by unit tests: finite-difference gradient checks and
//! reference implementations kept deliberately independent of the production
//! code paths.

use crate::tensor::{eval, Gradients, Graph, NodeId, OpKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite-difference gradient of `f` with respect to `x`, step `h`.
/// `f` must be a pure function of the probed tensor.
pub fn fd_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for j in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        g.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

/// Relative error convention used throughout the gradient suites:
/// |analytic - numeric| / max(1, |numeric|), reduced by max over elements.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Builds `loss = sum(op(inputs...))`, runs backward, and compares every
/// input gradient against central finite differences.
pub fn gradcheck_op(op: &OpKind, inputs: &[Tensor], h: f64, tol: f64) {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.parameter(t.clone())).collect();
    let out = graph.apply(op.clone(), &ids).expect("forward failed");
    let loss = graph.apply(OpKind::Sum, &[out]).expect("sum failed");
    let grads: Gradients = graph.backward(loss).expect("backward failed");

    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("missing gradient");
        let numeric = fd_grad(&inputs[k], h, |probe| {
            let mut refs: Vec<&Tensor> = inputs.iter().collect();
            refs[k] = probe;
            let y = eval(op, &refs).expect("fd forward failed");
            y.data().iter().sum()
        });
        let err = max_rel_err(analytic, &numeric);
        assert!(
            err <= tol,
            "{}: input {} gradient off by {:.3e} (tol {:.1e})",
            op.name(),
            k,
            err,
            tol
        );
    }
}

/// Tensor of well-separated random values: uniform noise plus a distinct
/// per-element offset, so max-pooling argmax positions sit far from ties.
pub fn separated(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    Tensor::from_fn(shape, |i| {
        r.gen_range(-1.0..1.0) + ((i * 7919) % n) as f64 * 1e-3
    })
}
