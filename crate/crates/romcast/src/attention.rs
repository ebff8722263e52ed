//! Channel and spatial attention gates (the CBAM pair).
//!
//! The channel gate squeezes each feature map through parallel global average
//! and max pools, pushes both through one shared bottleneck MLP, adds the two
//! branches, and applies a sigmoid; the field is rescaled per channel. The
//! spatial gate then pools across channels (average and max), stacks the two
//! maps, and runs a 7x7 convolution plus sigmoid to rescale per location.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, OpKind, Tensor};

/// Kernel extent of the spatial gate convolution.
pub const SPATIAL_KERNEL: usize = 7;

pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Shared-MLP channel gate parameters. The bottleneck keeps `channels /
/// reduction` units, so `channels` must be divisible by `reduction`.
#[derive(Debug, Clone)]
pub struct ChannelAttentionParams {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    channels: usize,
    reduction: usize,
}

impl ChannelAttentionParams {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention: {} channels not divisible by reduction {}",
                channels, reduction
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w0: Tensor::uniform(&[hidden, channels], glorot_bound(channels, hidden), rng),
            b0: Tensor::zeros(&[hidden]),
            w1: Tensor::uniform(&[channels, hidden], glorot_bound(hidden, channels), rng),
            b1: Tensor::zeros(&[channels]),
            channels,
            reduction,
        })
    }

    /// Rebuilds the struct from raw tensors (checkpoint loading).
    pub fn from_tensors(
        channels: usize,
        reduction: usize,
        w0: Tensor,
        b0: Tensor,
        w1: Tensor,
        b1: Tensor,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention: {} channels not divisible by reduction {}",
                channels, reduction
            )));
        }
        let hidden = channels / reduction;
        if w0.shape() != [hidden, channels]
            || b0.shape() != [hidden]
            || w1.shape() != [channels, hidden]
            || b1.shape() != [channels]
        {
            return Err(Error::shape(
                "channel_attention",
                format!(
                    "parameter shapes do not match {} channels at reduction {}",
                    channels, reduction
                ),
            ));
        }
        Ok(Self { w0, b0, w1, b1, channels, reduction })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }
}

/// 7x7 convolution over the stacked [avg; max] channel pools.
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl SpatialAttentionParams {
    pub fn new(rng: &mut impl Rng) -> Self {
        let k = SPATIAL_KERNEL;
        Self {
            kernel: Tensor::uniform(&[1, 2, k, k], glorot_bound(2 * k * k, k * k), rng),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn from_tensors(kernel: Tensor, bias: Tensor) -> Result<Self> {
        if kernel.shape() != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] || bias.shape() != [1] {
            return Err(Error::shape(
                "spatial_attention",
                format!(
                    "kernel {:?} / bias {:?} do not form a 7x7 two-channel gate",
                    kernel.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(Self { kernel, bias })
    }
}

/// Graph node handles for one channel gate whose parameters are leaves of a
/// graph, so gradients flow to them.
#[derive(Clone, Copy)]
pub struct BoundChannelAttention {
    pub w0: NodeId,
    pub b0: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    channels: usize,
}

impl BoundChannelAttention {
    pub fn bind(graph: &mut Graph, params: &ChannelAttentionParams) -> Self {
        Self {
            w0: graph.parameter(params.w0.clone()),
            b0: graph.parameter(params.b0.clone()),
            w1: graph.parameter(params.w1.clone()),
            b1: graph.parameter(params.b1.clone()),
            channels: params.channels,
        }
    }

    pub fn param_nodes(&self) -> [NodeId; 4] {
        [self.w0, self.b0, self.w1, self.b1]
    }

    /// Wires `M_c = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`, returning
    /// the gate node of shape `[B, C, 1, 1]`.
    pub fn gate(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        let shape = graph.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("expected [B, {}, H, W], got {:?}", self.channels, shape),
            ));
        }
        let (b, c) = (shape[0], shape[1]);

        let mlp = |graph: &mut Graph, pooled: NodeId| -> Result<NodeId> {
            let flat = graph.apply(OpKind::Reshape { shape: vec![b, c] }, &[pooled])?;
            let h0 = graph.apply(OpKind::Linear, &[flat, self.w0, self.b0])?;
            let h0 = graph.apply(OpKind::Relu, &[h0])?;
            graph.apply(OpKind::Linear, &[h0, self.w1, self.b1])
        };

        let avg = graph.apply(OpKind::GlobalAvgPool, &[input])?;
        let mx = graph.apply(OpKind::GlobalMaxPool, &[input])?;
        let avg_out = mlp(graph, avg)?;
        let max_out = mlp(graph, mx)?;
        let summed = graph.apply(OpKind::Add, &[avg_out, max_out])?;
        let gate = graph.apply(OpKind::Sigmoid, &[summed])?;
        graph.apply(OpKind::Reshape { shape: vec![b, c, 1, 1] }, &[gate])
    }

    /// Gate applied to the field: `M_c (x) F`.
    pub fn apply(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        let gate = self.gate(graph, input)?;
        graph.apply(OpKind::Multiply, &[gate, input])
    }
}

/// Graph node handles for one spatial gate.
#[derive(Clone, Copy)]
pub struct BoundSpatialAttention {
    pub kernel: NodeId,
    pub bias: NodeId,
}

impl BoundSpatialAttention {
    pub fn bind(graph: &mut Graph, params: &SpatialAttentionParams) -> Self {
        Self {
            kernel: graph.parameter(params.kernel.clone()),
            bias: graph.parameter(params.bias.clone()),
        }
    }

    pub fn param_nodes(&self) -> [NodeId; 2] {
        [self.kernel, self.bias]
    }

    /// Wires `M_s = sigmoid(conv7x7([avgpool_c(F); maxpool_c(F)]))`,
    /// returning the gate node of shape `[B, 1, H, W]`.
    pub fn gate(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        let avg = graph.apply(OpKind::ChannelAvgPool, &[input])?;
        let mx = graph.apply(OpKind::ChannelMaxPool, &[input])?;
        let stacked = graph.apply(OpKind::Concat, &[avg, mx])?;
        let conv = graph.apply(
            OpKind::Conv2d { stride: 1, padding: SPATIAL_KERNEL / 2 },
            &[stacked, self.kernel, self.bias],
        )?;
        graph.apply(OpKind::Sigmoid, &[conv])
    }

    /// Gate applied to the field: `M_s (x) F`.
    pub fn apply(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        let gate = self.gate(graph, input)?;
        graph.apply(OpKind::Multiply, &[gate, input])
    }
}

// ───────────────────────── standalone evaluation ─────────────────────────

/// Channel gate applied to a standalone tensor.
pub fn channel_attention(params: &ChannelAttentionParams, input: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let x = graph.input(input.clone());
    let bound = BoundChannelAttention::bind(&mut graph, params);
    let out = bound.apply(&mut graph, x)?;
    Ok(graph.value(out).clone())
}

/// Spatial gate applied to a standalone tensor.
pub fn spatial_attention(params: &SpatialAttentionParams, input: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let x = graph.input(input.clone());
    let bound = BoundSpatialAttention::bind(&mut graph, params);
    let out = bound.apply(&mut graph, x)?;
    Ok(graph.value(out).clone())
}

/// Full block: channel gate, then spatial gate on its output.
pub fn cbam(
    channel: &ChannelAttentionParams,
    spatial: &SpatialAttentionParams,
    input: &Tensor,
) -> Result<Tensor> {
    let refined = channel_attention(channel, input)?;
    spatial_attention(spatial, &refined)
}

/// The channel gate values themselves (shape `[B, C, 1, 1]`), for inspecting
/// attention maps.
pub fn channel_gate(params: &ChannelAttentionParams, input: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let x = graph.input(input.clone());
    let bound = BoundChannelAttention::bind(&mut graph, params);
    let gate = bound.gate(&mut graph, x)?;
    Ok(graph.value(gate).clone())
}

/// The spatial gate values (shape `[B, 1, H, W]`).
pub fn spatial_gate(params: &SpatialAttentionParams, input: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let x = graph.input(input.clone());
    let bound = BoundSpatialAttention::bind(&mut graph, params);
    let gate = bound.gate(&mut graph, x)?;
    Ok(graph.value(gate).clone())
}
