//! Differentiable primitives: forward evaluation and per-operation gradients.
//!
//! Every operation is deterministic: inner accumulation loops run in a fixed
//! order, and the rayon-parallel paths only split writes to disjoint output
//! elements, so results are bit-identical at any thread count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Minimum output size before an operation switches to the parallel path.
const PAR_MIN: usize = 1 << 13;

/// Operation kinds understood by [`eval`] and the graph.
///
/// Shape rules (B batch, C channels, H rows, W columns):
/// - `Conv2d`: x `[B,Ci,H,W]`, kernel `[Co,Ci,kh,kw]`, optional bias `[Co]`;
///   output `[B,Co,(H+2p-kh)/s+1,(W+2p-kw)/s+1]` with zero padding `p`.
/// - `ConvTranspose2d`: x `[B,Ci,H,W]`, kernel `[Ci,Co,kh,kw]`, optional bias
///   `[Co]`; output rows `(H-1)s - 2p + kh + output_padding`, likewise for
///   columns; `output_padding < stride`.
/// - `Linear`: x `[B,F]`, weight `[O,F]`, optional bias `[O]`; output `[B,O]`.
/// - `Relu`, `Sigmoid`, `Sqrt`: elementwise, shape preserved. `Sqrt` rejects
///   negative inputs.
/// - `Add`: two tensors of identical shape.
/// - `Multiply`: two tensors of equal rank; each axis must match or be 1 on
///   one side (broadcast over singleton axes).
/// - `GlobalAvgPool` / `GlobalMaxPool`: `[B,C,H,W]` -> `[B,C,1,1]`.
/// - `ChannelAvgPool` / `ChannelMaxPool`: `[B,C,H,W]` -> `[B,1,H,W]`.
/// - `Concat`: 4-D tensors agreeing on B, H, W, joined along the channel
///   axis.
/// - `Reshape`: any tensor, element count preserved.
/// - `Scale`: elementwise multiplication by a constant.
/// - `Sum`: any tensor reduced to a single element (shape `[1]`).
/// - `PadRows` / `CropRows`: `[B,C,H,W]` gains or loses zero rows at the top
///   and bottom of the H axis.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Conv2d { stride: usize, padding: usize },
    ConvTranspose2d { stride: usize, padding: usize, output_padding: usize },
    Linear,
    Relu,
    Sigmoid,
    Sqrt,
    Add,
    Multiply,
    GlobalAvgPool,
    GlobalMaxPool,
    ChannelAvgPool,
    ChannelMaxPool,
    Concat,
    Reshape { shape: Vec<usize> },
    Scale { factor: f64 },
    Sum,
    PadRows { top: usize, bottom: usize },
    CropRows { top: usize, bottom: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::ConvTranspose2d { .. } => "conv2d_transpose",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sqrt => "sqrt",
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::ChannelAvgPool => "channel_avg_pool",
            OpKind::ChannelMaxPool => "channel_max_pool",
            OpKind::Concat => "concat",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Scale { .. } => "scale",
            OpKind::Sum => "sum",
            OpKind::PadRows { .. } => "pad_rows",
            OpKind::CropRows { .. } => "crop_rows",
        }
    }
}

fn arity_error(op: &OpKind, inputs: &[&Tensor], expect: &str) -> Error {
    Error::shape(
        match op {
            OpKind::Conv2d { .. } => "conv2d",
            _ => op.name(),
        },
        format!("expected {} inputs, got {}", expect, inputs.len()),
    )
}

/// Evaluates one primitive on explicit input tensors.
pub fn eval(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        OpKind::Conv2d { stride, padding } => match inputs {
            [x, w] => conv2d(x, w, None, *stride, *padding),
            [x, w, b] => conv2d(x, w, Some(b), *stride, *padding),
            _ => Err(arity_error(op, inputs, "2 or 3")),
        },
        OpKind::ConvTranspose2d { stride, padding, output_padding } => match inputs {
            [x, w] => conv2d_transpose(x, w, None, *stride, *padding, *output_padding),
            [x, w, b] => conv2d_transpose(x, w, Some(b), *stride, *padding, *output_padding),
            _ => Err(arity_error(op, inputs, "2 or 3")),
        },
        OpKind::Linear => match inputs {
            [x, w] => linear(x, w, None),
            [x, w, b] => linear(x, w, Some(b)),
            _ => Err(arity_error(op, inputs, "2 or 3")),
        },
        OpKind::Relu => unary(op, inputs, |v| v.max(0.0)),
        OpKind::Sigmoid => unary(op, inputs, sigmoid_scalar),
        OpKind::Sqrt => {
            let [x] = inputs else {
                return Err(arity_error(op, inputs, "1"));
            };
            if x.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Numerical(
                    "sqrt of a negative element".to_string(),
                ));
            }
            Ok(x.map(f64::sqrt))
        }
        OpKind::Add => {
            let [a, b] = inputs else {
                return Err(arity_error(op, inputs, "2"));
            };
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "add",
                    format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        OpKind::Multiply => {
            let [a, b] = inputs else {
                return Err(arity_error(op, inputs, "2"));
            };
            multiply_broadcast(a, b)
        }
        OpKind::GlobalAvgPool => global_pool(inputs, op, true),
        OpKind::GlobalMaxPool => global_pool(inputs, op, false),
        OpKind::ChannelAvgPool => channel_pool(inputs, op, true),
        OpKind::ChannelMaxPool => channel_pool(inputs, op, false),
        OpKind::Concat => concat(inputs),
        OpKind::Reshape { shape } => {
            let [x] = inputs else {
                return Err(arity_error(op, inputs, "1"));
            };
            x.reshaped(shape)
        }
        OpKind::Scale { factor } => {
            let [x] = inputs else {
                return Err(arity_error(op, inputs, "1"));
            };
            let f = *factor;
            Ok(x.map(|v| v * f))
        }
        OpKind::Sum => {
            let [x] = inputs else {
                return Err(arity_error(op, inputs, "1"));
            };
            Ok(Tensor::scalar(x.data().iter().sum()))
        }
        OpKind::PadRows { top, bottom } => pad_rows(inputs, *top, *bottom),
        OpKind::CropRows { top, bottom } => crop_rows(inputs, *top, *bottom),
    }
}

/// Gradients of one primitive with respect to each input, given the upstream
/// gradient of the output. `output` is the cached forward value.
pub(crate) fn backward_op(
    op: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
) -> Result<Vec<Tensor>> {
    match op {
        OpKind::Conv2d { stride, padding } => {
            conv2d_backward(inputs, grad, *stride, *padding)
        }
        OpKind::ConvTranspose2d { stride, padding, .. } => {
            conv2d_transpose_backward(inputs, grad, *stride, *padding)
        }
        OpKind::Linear => linear_backward(inputs, grad),
        OpKind::Relu => {
            let x = inputs[0];
            Ok(vec![zip_map(grad, x, |g, v| if v > 0.0 { g } else { 0.0 })])
        }
        OpKind::Sigmoid => {
            Ok(vec![zip_map(grad, output, |g, y| g * y * (1.0 - y))])
        }
        OpKind::Sqrt => Ok(vec![zip_map(grad, output, |g, y| g * 0.5 / y)]),
        OpKind::Add => Ok(vec![grad.clone(), grad.clone()]),
        OpKind::Multiply => multiply_backward(inputs, grad),
        OpKind::GlobalAvgPool => {
            let x = inputs[0];
            let (hb, wb) = (x.shape()[2], x.shape()[3]);
            let inv = 1.0 / (hb * wb) as f64;
            let mut dx = Tensor::zeros(x.shape());
            for b in 0..x.shape()[0] {
                for c in 0..x.shape()[1] {
                    let g = grad.at4(b, c, 0, 0) * inv;
                    for h in 0..hb {
                        for w in 0..wb {
                            let o = dx.offset4(b, c, h, w);
                            dx.data_mut()[o] = g;
                        }
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::GlobalMaxPool => {
            let x = inputs[0];
            let (hb, wb) = (x.shape()[2], x.shape()[3]);
            let mut dx = Tensor::zeros(x.shape());
            for b in 0..x.shape()[0] {
                for c in 0..x.shape()[1] {
                    // Route to the first maximum in scan order; ties are
                    // resolved the same way as the forward pass.
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for h in 0..hb {
                        for w in 0..wb {
                            let v = x.at4(b, c, h, w);
                            if v > best {
                                best = v;
                                arg = x.offset4(b, c, h, w);
                            }
                        }
                    }
                    dx.data_mut()[arg] = grad.at4(b, c, 0, 0);
                }
            }
            Ok(vec![dx])
        }
        OpKind::ChannelAvgPool => {
            let x = inputs[0];
            let cb = x.shape()[1];
            let inv = 1.0 / cb as f64;
            let mut dx = Tensor::zeros(x.shape());
            for b in 0..x.shape()[0] {
                for h in 0..x.shape()[2] {
                    for w in 0..x.shape()[3] {
                        let g = grad.at4(b, 0, h, w) * inv;
                        for c in 0..cb {
                            let o = dx.offset4(b, c, h, w);
                            dx.data_mut()[o] = g;
                        }
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::ChannelMaxPool => {
            let x = inputs[0];
            let cb = x.shape()[1];
            let mut dx = Tensor::zeros(x.shape());
            for b in 0..x.shape()[0] {
                for h in 0..x.shape()[2] {
                    for w in 0..x.shape()[3] {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for c in 0..cb {
                            let v = x.at4(b, c, h, w);
                            if v > best {
                                best = v;
                                arg = x.offset4(b, c, h, w);
                            }
                        }
                        dx.data_mut()[arg] = grad.at4(b, 0, h, w);
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::Concat => {
            let mut grads = Vec::with_capacity(inputs.len());
            let mut c0 = 0;
            for x in inputs {
                let c = x.shape()[1];
                let mut dx = Tensor::zeros(x.shape());
                for b in 0..x.shape()[0] {
                    for ci in 0..c {
                        for h in 0..x.shape()[2] {
                            for w in 0..x.shape()[3] {
                                let o = dx.offset4(b, ci, h, w);
                                dx.data_mut()[o] = grad.at4(b, c0 + ci, h, w);
                            }
                        }
                    }
                }
                grads.push(dx);
                c0 += c;
            }
            Ok(grads)
        }
        OpKind::Reshape { .. } => Ok(vec![grad.reshaped(inputs[0].shape())?]),
        OpKind::Scale { factor } => {
            let f = *factor;
            Ok(vec![grad.map(|g| g * f)])
        }
        OpKind::Sum => {
            let g = grad.data()[0];
            Ok(vec![Tensor::full(inputs[0].shape(), g)])
        }
        OpKind::PadRows { top, .. } => {
            let x = inputs[0];
            let mut dx = Tensor::zeros(x.shape());
            for b in 0..x.shape()[0] {
                for c in 0..x.shape()[1] {
                    for h in 0..x.shape()[2] {
                        for w in 0..x.shape()[3] {
                            let o = dx.offset4(b, c, h, w);
                            dx.data_mut()[o] = grad.at4(b, c, h + top, w);
                        }
                    }
                }
            }
            Ok(vec![dx])
        }
        OpKind::CropRows { top, .. } => {
            let x = inputs[0];
            let mut dx = Tensor::zeros(x.shape());
            for b in 0..output.shape()[0] {
                for c in 0..output.shape()[1] {
                    for h in 0..output.shape()[2] {
                        for w in 0..output.shape()[3] {
                            let o = dx.offset4(b, c, h + top, w);
                            dx.data_mut()[o] = grad.at4(b, c, h, w);
                        }
                    }
                }
            }
            Ok(vec![dx])
        }
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn unary(op: &OpKind, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let [x] = inputs else {
        return Err(arity_error(op, inputs, "1"));
    };
    Ok(x.map(f))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn require_4d(op: &'static str, x: &Tensor) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::shape(
            op,
            format!("expected a 4-D NCHW tensor, got {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Splits `out` into rows of `row` elements and fills each one, in parallel
/// when the tensor is large enough. `fill(row_index, row_slice)` must write
/// every element it owns.
fn fill_rows(out: &mut [f64], row: usize, fill: impl Fn(usize, &mut [f64]) + Sync) {
    if out.len() >= PAR_MIN {
        out.par_chunks_mut(row)
            .enumerate()
            .for_each(|(i, chunk)| fill(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(row).enumerate() {
            fill(i, chunk);
        }
    }
}

// ───────────────────────── convolution ─────────────────────────

fn conv_out_extent(op: &'static str, input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("kernel extent {} exceeds padded input extent {}", k, padded),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    require_4d("conv2d", x)?;
    require_4d("conv2d", w)?;
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive".to_string()));
    }
    let (bsz, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != wci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels but kernel expects {}", ci, wci),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {} output channels", b.shape(), co),
            ));
        }
    }
    let oh = conv_out_extent("conv2d", h, kh, stride, padding)?;
    let ow = conv_out_extent("conv2d", wd, kw, stride, padding)?;

    let mut out = Tensor::zeros(&[bsz, co, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    fill_rows(out.data_mut(), ow, |ridx, row| {
        let ohi = ridx % oh;
        let coi = (ridx / oh) % co;
        let bi = ridx / (oh * co);
        let base_b = bi * ci * h * wd;
        let base_w = coi * ci * kh * kw;
        let b0 = bias.map_or(0.0, |b| b.data()[coi]);
        for (owi, slot) in row.iter_mut().enumerate() {
            let mut acc = b0;
            for cii in 0..ci {
                let xb = base_b + cii * h * wd;
                let wb = base_w + cii * kh * kw;
                for u in 0..kh {
                    let ih = (ohi * stride + u) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xr = xb + ih as usize * wd;
                    let wr = wb + u * kw;
                    for v in 0..kw {
                        let iw = (owi * stride + v) as isize - padding as isize;
                        if iw < 0 || iw >= wd as isize {
                            continue;
                        }
                        acc += xs[xr + iw as usize] * ws[wr + v];
                    }
                }
            }
            *slot = acc;
        }
    });
    Ok(out)
}

fn conv2d_backward(inputs: &[&Tensor], grad: &Tensor, stride: usize, padding: usize) -> Result<Vec<Tensor>> {
    let x = inputs[0];
    let w = inputs[1];
    let (bsz, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let gs = grad.data();
    let xs = x.data();
    let ws = w.data();

    // dX gathers over every kernel tap that could have produced each input
    // element: output row oh satisfies oh*stride + u == ih + padding.
    let mut dx = Tensor::zeros(x.shape());
    fill_rows(dx.data_mut(), wd, |ridx, row| {
        let ihi = ridx % h;
        let cii = (ridx / h) % ci;
        let bi = ridx / (h * ci);
        for (iwi, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for u in 0..kh {
                let num_h = ihi + padding;
                if num_h < u || (num_h - u) % stride != 0 {
                    continue;
                }
                let ohi = (num_h - u) / stride;
                if ohi >= oh {
                    continue;
                }
                for v in 0..kw {
                    let num_w = iwi + padding;
                    if num_w < v || (num_w - v) % stride != 0 {
                        continue;
                    }
                    let owi = (num_w - v) / stride;
                    if owi >= ow {
                        continue;
                    }
                    for coi in 0..co {
                        acc += gs[((bi * co + coi) * oh + ohi) * ow + owi]
                            * ws[((coi * ci + cii) * kh + u) * kw + v];
                    }
                }
            }
            *slot = acc;
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    fill_rows(dw.data_mut(), kw, |ridx, row| {
        let u = ridx % kh;
        let cii = (ridx / kh) % ci;
        let coi = ridx / (kh * ci);
        for (v, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for bi in 0..bsz {
                for ohi in 0..oh {
                    let ih = (ohi * stride + u) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let gr = ((bi * co + coi) * oh + ohi) * ow;
                    let xr = ((bi * ci + cii) * h + ih as usize) * wd;
                    for owi in 0..ow {
                        let iw = (owi * stride + v) as isize - padding as isize;
                        if iw < 0 || iw >= wd as isize {
                            continue;
                        }
                        acc += gs[gr + owi] * xs[xr + iw as usize];
                    }
                }
            }
            *slot = acc;
        }
    });

    let mut grads = vec![dx, dw];
    if inputs.len() == 3 {
        let mut db = Tensor::zeros(&[co]);
        for coi in 0..co {
            let mut acc = 0.0;
            for bi in 0..bsz {
                let base = (bi * co + coi) * oh * ow;
                for i in 0..oh * ow {
                    acc += gs[base + i];
                }
            }
            db.data_mut()[coi] = acc;
        }
        grads.push(db);
    }
    Ok(grads)
}

fn conv2d_transpose(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    require_4d("conv2d_transpose", x)?;
    require_4d("conv2d_transpose", w)?;
    if stride == 0 {
        return Err(Error::shape("conv2d_transpose", "stride must be positive".to_string()));
    }
    if output_padding >= stride {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("output_padding {} must be smaller than stride {}", output_padding, stride),
        ));
    }
    let (bsz, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wci, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != wci {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {} channels but kernel expects {}", ci, wci),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("bias shape {:?} does not match {} output channels", b.shape(), co),
            ));
        }
    }
    let oh_total = (h - 1) * stride + kh + output_padding;
    let ow_total = (wd - 1) * stride + kw + output_padding;
    if oh_total < 2 * padding + 1 || ow_total < 2 * padding + 1 {
        return Err(Error::shape(
            "conv2d_transpose",
            "padding removes the whole output".to_string(),
        ));
    }
    let oh = oh_total - 2 * padding;
    let ow = ow_total - 2 * padding;

    // Gather form of the scatter definition: output element (y, z) collects
    // x[i, j] * w[u, v] whenever i*stride + u == y + padding (same for
    // columns), which keeps writes disjoint and deterministic.
    let mut out = Tensor::zeros(&[bsz, co, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    fill_rows(out.data_mut(), ow, |ridx, row| {
        let yi = ridx % oh;
        let coi = (ridx / oh) % co;
        let bi = ridx / (oh * co);
        let b0 = bias.map_or(0.0, |b| b.data()[coi]);
        for (zi, slot) in row.iter_mut().enumerate() {
            let mut acc = b0;
            for u in 0..kh {
                let num_h = yi + padding;
                if num_h < u || (num_h - u) % stride != 0 {
                    continue;
                }
                let ii = (num_h - u) / stride;
                if ii >= h {
                    continue;
                }
                for v in 0..kw {
                    let num_w = zi + padding;
                    if num_w < v || (num_w - v) % stride != 0 {
                        continue;
                    }
                    let jj = (num_w - v) / stride;
                    if jj >= wd {
                        continue;
                    }
                    for cii in 0..ci {
                        acc += xs[((bi * ci + cii) * h + ii) * wd + jj]
                            * ws[((cii * co + coi) * kh + u) * kw + v];
                    }
                }
            }
            *slot = acc;
        }
    });
    Ok(out)
}

fn conv2d_transpose_backward(
    inputs: &[&Tensor],
    grad: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Vec<Tensor>> {
    let x = inputs[0];
    let w = inputs[1];
    let (bsz, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let gs = grad.data();
    let xs = x.data();
    let ws = w.data();

    // dX[i,j] collects grad at the positions this input element scattered to.
    let mut dx = Tensor::zeros(x.shape());
    fill_rows(dx.data_mut(), wd, |ridx, row| {
        let ii = ridx % h;
        let cii = (ridx / h) % ci;
        let bi = ridx / (h * ci);
        for (jj, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for u in 0..kh {
                let y = (ii * stride + u) as isize - padding as isize;
                if y < 0 || y >= oh as isize {
                    continue;
                }
                for v in 0..kw {
                    let z = (jj * stride + v) as isize - padding as isize;
                    if z < 0 || z >= ow as isize {
                        continue;
                    }
                    for coi in 0..co {
                        acc += gs[((bi * co + coi) * oh + y as usize) * ow + z as usize]
                            * ws[((cii * co + coi) * kh + u) * kw + v];
                    }
                }
            }
            *slot = acc;
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    fill_rows(dw.data_mut(), kw, |ridx, row| {
        let u = ridx % kh;
        let coi = (ridx / kh) % co;
        let cii = ridx / (kh * co);
        for (v, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for bi in 0..bsz {
                for ii in 0..h {
                    let y = (ii * stride + u) as isize - padding as isize;
                    if y < 0 || y >= oh as isize {
                        continue;
                    }
                    let xr = ((bi * ci + cii) * h + ii) * wd;
                    let gr = ((bi * co + coi) * oh + y as usize) * ow;
                    for jj in 0..wd {
                        let z = (jj * stride + v) as isize - padding as isize;
                        if z < 0 || z >= ow as isize {
                            continue;
                        }
                        acc += xs[xr + jj] * gs[gr + z as usize];
                    }
                }
            }
            *slot = acc;
        }
    });

    let mut grads = vec![dx, dw];
    if inputs.len() == 3 {
        let mut db = Tensor::zeros(&[co]);
        for coi in 0..co {
            let mut acc = 0.0;
            for bi in 0..bsz {
                let base = (bi * co + coi) * oh * ow;
                for i in 0..oh * ow {
                    acc += gs[base + i];
                }
            }
            db.data_mut()[coi] = acc;
        }
        grads.push(db);
    }
    Ok(grads)
}

// ───────────────────────── dense / elementwise ─────────────────────────

fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected 2-D input and weight, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let (o, wf) = (w.shape()[0], w.shape()[1]);
    if f != wf {
        return Err(Error::shape(
            "linear",
            format!("input features {} do not match weight features {}", f, wf),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape() != [o] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} does not match {} outputs", bt.shape(), o),
            ));
        }
    }
    let mut out = Tensor::zeros(&[b, o]);
    let xs = x.data();
    let ws = w.data();
    fill_rows(out.data_mut(), o, |bi, row| {
        let xr = bi * f;
        for (oi, slot) in row.iter_mut().enumerate() {
            let wr = oi * f;
            let mut acc = bias.map_or(0.0, |bt| bt.data()[oi]);
            for fi in 0..f {
                acc += xs[xr + fi] * ws[wr + fi];
            }
            *slot = acc;
        }
    });
    Ok(out)
}

fn linear_backward(inputs: &[&Tensor], grad: &Tensor) -> Result<Vec<Tensor>> {
    let x = inputs[0];
    let w = inputs[1];
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let gs = grad.data();
    let xs = x.data();
    let ws = w.data();

    let mut dx = Tensor::zeros(x.shape());
    fill_rows(dx.data_mut(), f, |bi, row| {
        for (fi, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for oi in 0..o {
                acc += gs[bi * o + oi] * ws[oi * f + fi];
            }
            *slot = acc;
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    fill_rows(dw.data_mut(), f, |oi, row| {
        for (fi, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for bi in 0..b {
                acc += gs[bi * o + oi] * xs[bi * f + fi];
            }
            *slot = acc;
        }
    });

    let mut grads = vec![dx, dw];
    if inputs.len() == 3 {
        let mut db = Tensor::zeros(&[o]);
        for oi in 0..o {
            let mut acc = 0.0;
            for bi in 0..b {
                acc += gs[bi * o + oi];
            }
            db.data_mut()[oi] = acc;
        }
        grads.push(db);
    }
    Ok(grads)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "multiply",
            format!("ranks differ: {:?} vs {:?}", a, b),
        ));
    }
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::shape(
                    "multiply",
                    format!("axis extents {} and {} are incompatible", x, y),
                ))
            }
        })
        .collect()
}

/// Strides for reading `shape` as if broadcast to `out`: axes of extent 1
/// contribute stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn broadcast_offset(flat: usize, out: &[usize], strides: &[usize]) -> usize {
    let mut rem = flat;
    let mut off = 0;
    for i in (0..out.len()).rev() {
        let idx = rem % out[i];
        rem /= out[i];
        off += idx * strides[i];
    }
    off
}

fn multiply_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![0.0; numel];
    let last = *out_shape.last().unwrap();
    fill_rows(&mut data, last, |ridx, row| {
        let base = ridx * last;
        for (i, slot) in row.iter_mut().enumerate() {
            let flat = base + i;
            *slot = ad[broadcast_offset(flat, &out_shape, &sa)]
                * bd[broadcast_offset(flat, &out_shape, &sb)];
        }
    });
    Tensor::new(out_shape, data)
}

fn multiply_backward(inputs: &[&Tensor], grad: &Tensor) -> Result<Vec<Tensor>> {
    let a = inputs[0];
    let b = inputs[1];
    let out_shape = grad.shape().to_vec();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    // Broadcast axes fold many output elements into one input slot, so the
    // accumulation stays sequential in flat output order.
    for flat in 0..grad.numel() {
        let g = grad.data()[flat];
        let oa = broadcast_offset(flat, &out_shape, &sa);
        let ob = broadcast_offset(flat, &out_shape, &sb);
        da.data_mut()[oa] += g * b.data()[ob];
        db.data_mut()[ob] += g * a.data()[oa];
    }
    Ok(vec![da, db])
}

// ───────────────────────── pooling / layout ─────────────────────────

fn global_pool(inputs: &[&Tensor], op: &OpKind, avg: bool) -> Result<Tensor> {
    let [x] = inputs else {
        return Err(arity_error(op, inputs, "1"));
    };
    require_4d(if avg { "global_avg_pool" } else { "global_max_pool" }, x)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[b, c, 1, 1]);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let slice = &x.data()[base..base + h * w];
            let v = if avg {
                slice.iter().sum::<f64>() / (h * w) as f64
            } else {
                slice.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            };
            out.data_mut()[bi * c + ci] = v;
        }
    }
    Ok(out)
}

fn channel_pool(inputs: &[&Tensor], op: &OpKind, avg: bool) -> Result<Tensor> {
    let [x] = inputs else {
        return Err(arity_error(op, inputs, "1"));
    };
    require_4d(if avg { "channel_avg_pool" } else { "channel_max_pool" }, x)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[b, 1, h, w]);
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = if avg { 0.0 } else { f64::NEG_INFINITY };
                for ci in 0..c {
                    let v = x.at4(bi, ci, hi, wi);
                    if avg {
                        acc += v;
                    } else {
                        acc = acc.max(v);
                    }
                }
                let o = out.offset4(bi, 0, hi, wi);
                out.data_mut()[o] = if avg { acc / c as f64 } else { acc };
            }
        }
    }
    Ok(out)
}

fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() < 2 {
        return Err(Error::shape(
            "concat",
            format!("needs at least 2 inputs, got {}", inputs.len()),
        ));
    }
    for x in inputs {
        require_4d("concat", x)?;
    }
    let (b, h, w) = (inputs[0].shape()[0], inputs[0].shape()[2], inputs[0].shape()[3]);
    for x in &inputs[1..] {
        if x.shape()[0] != b || x.shape()[2] != h || x.shape()[3] != w {
            return Err(Error::shape(
                "concat",
                format!("non-channel extents differ: {:?} vs {:?}", inputs[0].shape(), x.shape()),
            ));
        }
    }
    let c_total: usize = inputs.iter().map(|x| x.shape()[1]).sum();
    let mut out = Tensor::zeros(&[b, c_total, h, w]);
    let mut c0 = 0;
    for x in inputs {
        let c = x.shape()[1];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                let dst = (bi * c_total + c0 + ci) * h * w;
                out.data_mut()[dst..dst + h * w].copy_from_slice(&x.data()[src..src + h * w]);
            }
        }
        c0 += c;
    }
    Ok(out)
}

fn pad_rows(inputs: &[&Tensor], top: usize, bottom: usize) -> Result<Tensor> {
    let [x] = inputs else {
        return Err(Error::shape("pad_rows", format!("expected 1 input, got {}", inputs.len())));
    };
    require_4d("pad_rows", x)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[b, c, h + top + bottom, w]);
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                let src = x.offset4(bi, ci, hi, 0);
                let dst = out.offset4(bi, ci, hi + top, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}

fn crop_rows(inputs: &[&Tensor], top: usize, bottom: usize) -> Result<Tensor> {
    let [x] = inputs else {
        return Err(Error::shape("crop_rows", format!("expected 1 input, got {}", inputs.len())));
    };
    require_4d("crop_rows", x)?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if top + bottom >= h {
        return Err(Error::shape(
            "crop_rows",
            format!("cannot remove {} rows from {}", top + bottom, h),
        ));
    }
    let nh = h - top - bottom;
    let mut out = Tensor::zeros(&[b, c, nh, w]);
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..nh {
                let src = x.offset4(bi, ci, hi + top, 0);
                let dst = out.offset4(bi, ci, hi, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}
