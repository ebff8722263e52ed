//! Build a small computation graph, differentiate it in reverse mode,
//! and confirm one gradient against central finite differences.

use romcast::tensor::{Graph, OpKind, Tensor};

fn loss_of(x: &Tensor, w: &Tensor) -> (f64, Tensor) {
    // loss = sum(relu(conv(x, w))^2), gradient taken with respect to w.
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let wn = g.input(w.clone());
    let conv = g
        .apply(OpKind::Conv2d { stride: 1, padding: 1 }, &[xn, wn])
        .unwrap();
    let act = g.apply(OpKind::Relu, &[conv]).unwrap();
    let sq = g.apply(OpKind::Multiply, &[act, act]).unwrap();
    let loss = g.apply(OpKind::Sum, &[sq]).unwrap();
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss).unwrap();
    (value, grads.get(wn).cloned().unwrap())
}

fn main() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
    let x = Tensor::uniform(&[2, 3, 5, 6], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 3, 3, 3], 0.5, &mut rng);

    let (loss, grad) = loss_of(&x, &w);
    println!("loss = {:.6}, gradient tensor {:?}", loss, grad.shape());

    // Check dloss/dw at one coordinate with a two-sided difference.
    let coord = 17;
    let step = 1e-5;
    let mut wp = w.clone();
    wp.data_mut()[coord] += step;
    let mut wm = w.clone();
    wm.data_mut()[coord] -= step;
    let fd = (loss_of(&x, &wp).0 - loss_of(&x, &wm).0) / (2.0 * step);
    let analytic = grad.data()[coord];
    println!("coordinate {}: analytic {:.8}, finite difference {:.8}", coord, analytic, fd);
    let rel = (analytic - fd).abs() / analytic.abs().max(1e-12);
    println!("relative error {:.2e}", rel);
    assert!(rel < 1e-4, "gradient disagrees with finite differences");
    println!("reverse-mode gradient confirmed");
}
