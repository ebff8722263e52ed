//! Convolutional autoencoder with residual blocks and optional
//! channel/spatial attention, trained under latitude-weighted RMSE.
//!
//! The encoder is a stem convolution followed by downsampling stages
//! (stride-2 conv, then one residual block), closed by a 1x1 projection
//! to the latent channels. The decoder mirrors it with transposed
//! convolutions. Latitude rows are zero-padded up to a multiple of the
//! total downsampling factor before encoding and cropped after
//! decoding; the loss never sees the padded rows.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    glorot_bound, BoundChannelAttention, BoundSpatialAttention, ChannelAttentionParams,
    SpatialAttentionParams,
};
use crate::binio::{BinReader, BinWriter};
use crate::data::LatitudeWeights;
use crate::error::{Error, Result};
use crate::rom::LatentCoder;
use crate::tensor::{AdamConfig, AdamState, Graph, NodeId, OpKind, Tensor};

const CAE_MAGIC: &[u8] = b"ROMCAE1";

// ───────────────────────── architecture ─────────────────────────

/// Static architecture description. Channel counts are fixed by the
/// stage list; spatial extents follow from the input and the number of
/// stride-2 stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaeArch {
    input: [usize; 3],
    stem_channels: usize,
    stage_channels: Vec<usize>,
    latent_channels: usize,
    cbam_enabled: bool,
    cbam_reduction: usize,
}

impl CaeArch {
    pub fn new(
        input: [usize; 3],
        stem_channels: usize,
        stage_channels: Vec<usize>,
        latent_channels: usize,
        cbam_enabled: bool,
        cbam_reduction: usize,
    ) -> Result<Self> {
        let [c, h, w] = input;
        if c == 0 || h == 0 || w == 0 || stem_channels == 0 || latent_channels == 0 {
            return Err(Error::Config("autoencoder extents must be positive".into()));
        }
        if stage_channels.is_empty() || stage_channels.len() > 8 {
            return Err(Error::Config("stage list must hold 1 to 8 stages".into()));
        }
        if stage_channels.iter().any(|&ch| ch == 0) {
            return Err(Error::Config("stage channel counts must be positive".into()));
        }
        let factor = 1usize << stage_channels.len();
        if w % factor != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by the total downsampling factor {}",
                w, factor
            )));
        }
        let arch = Self {
            input,
            stem_channels,
            stage_channels,
            latent_channels,
            cbam_enabled,
            cbam_reduction,
        };
        if arch.padded_height() / factor == 0 {
            return Err(Error::Config(format!(
                "height {} collapses to nothing after {} halvings",
                h,
                arch.stage_channels.len()
            )));
        }
        if cbam_enabled {
            if cbam_reduction == 0 {
                return Err(Error::Config("attention reduction must be positive".into()));
            }
            for &ch in &arch.stage_channels {
                if ch % cbam_reduction != 0 {
                    return Err(Error::Config(format!(
                        "stage channels {} not divisible by attention reduction {}",
                        ch, cbam_reduction
                    )));
                }
            }
        }
        Ok(arch)
    }

    /// Desk-scale defaults: 4 variables on a 33 x 48 grid, two stages,
    /// latent 8 x 9 x 12 = 864.
    pub fn desk(cbam_enabled: bool) -> Self {
        Self::new([4, 33, 48], 32, vec![64, 128], 8, cbam_enabled, 8).unwrap()
    }

    /// The full-scale layout: 4 variables on 240 x 121, four stages,
    /// latitude rows padded 121 -> 128, latent 8 x 8 x 15 = 960.
    pub fn full_scale() -> Self {
        Self::new([4, 121, 240], 32, vec![64, 128, 256, 256], 8, true, 8).unwrap()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn cbam_enabled(&self) -> bool {
        self.cbam_enabled
    }

    pub fn stage_channels(&self) -> &[usize] {
        &self.stage_channels
    }

    /// Latitude rows after padding to a multiple of 2^stages.
    pub fn padded_height(&self) -> usize {
        let factor = 1 << self.stage_channels.len();
        self.input[1].div_ceil(factor) * factor
    }

    /// Zero rows added at the (top, bottom) pole ends.
    pub fn row_padding(&self) -> (usize, usize) {
        let extra = self.padded_height() - self.input[1];
        (extra / 2, extra - extra / 2)
    }

    /// Latent descriptor `[c, h, w]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        let factor = 1 << self.stage_channels.len();
        [
            self.latent_channels,
            self.padded_height() / factor,
            self.input[2] / factor,
        ]
    }

    /// Latent dimension n = c*h*w.
    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }

    /// Grid values per latent value: (C*H*W) / n.
    pub fn compression_ratio(&self) -> f64 {
        let full: usize = self.input.iter().product();
        full as f64 / self.latent_dim() as f64
    }
}

// ───────────────────────── parameters ─────────────────────────

/// One residual block: two 3x3 convolutions, optional attention pair on
/// the residual branch, optional 1x1 projection when the skip changes
/// channel count.
#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub cbam: Option<(ChannelAttentionParams, SpatialAttentionParams)>,
    pub projection: Option<(Tensor, Tensor)>,
}

/// Glorot-uniform convolution kernel `[co, ci, k, k]`.
fn conv_init(ci: usize, co: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(&[co, ci, k, k], glorot_bound(ci * k * k, co * k * k), rng)
}

impl ResBlockParams {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        cbam_reduction: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cbam = match cbam_reduction {
            Some(r) => Some((
                ChannelAttentionParams::new(out_channels, r, rng)?,
                SpatialAttentionParams::new(rng),
            )),
            None => None,
        };
        let projection = if in_channels != out_channels {
            Some((conv_init(in_channels, out_channels, 1, rng), Tensor::zeros(&[out_channels])))
        } else {
            None
        };
        Ok(Self {
            conv1_w: conv_init(in_channels, out_channels, 3, rng),
            conv1_b: Tensor::zeros(&[out_channels]),
            conv2_w: conv_init(out_channels, out_channels, 3, rng),
            conv2_b: Tensor::zeros(&[out_channels]),
            cbam,
            projection,
        })
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.conv1_w);
        out.push(&self.conv1_b);
        out.push(&self.conv2_w);
        out.push(&self.conv2_b);
        if let Some((ca, sa)) = &self.cbam {
            out.push(&ca.w0);
            out.push(&ca.b0);
            out.push(&ca.w1);
            out.push(&ca.b1);
            out.push(&sa.kernel);
            out.push(&sa.bias);
        }
        if let Some((w, b)) = &self.projection {
            out.push(w);
            out.push(b);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.conv1_w);
        out.push(&mut self.conv1_b);
        out.push(&mut self.conv2_w);
        out.push(&mut self.conv2_b);
        if let Some((ca, sa)) = &mut self.cbam {
            out.push(&mut ca.w0);
            out.push(&mut ca.b0);
            out.push(&mut ca.w1);
            out.push(&mut ca.b1);
            out.push(&mut sa.kernel);
            out.push(&mut sa.bias);
        }
        if let Some((w, b)) = &mut self.projection {
            out.push(w);
            out.push(b);
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down_w: Tensor,
    down_b: Tensor,
    block: ResBlockParams,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    block: ResBlockParams,
    up_w: Tensor,
    up_b: Tensor,
}

/// The autoencoder: architecture plus every parameter tensor. The
/// parameter declaration order (encoder first, then decoder, each layer
/// in forward order) is the checkpoint layout and the optimizer layout.
#[derive(Debug, Clone)]
pub struct CaeModel {
    arch: CaeArch,
    stem_w: Tensor,
    stem_b: Tensor,
    enc_stages: Vec<EncoderStage>,
    latent_w: Tensor,
    latent_b: Tensor,
    delatent_w: Tensor,
    delatent_b: Tensor,
    dec_stages: Vec<DecoderStage>,
    head_w: Tensor,
    head_b: Tensor,
}

impl CaeModel {
    /// Glorot-initialized model; biases start at zero.
    pub fn init(arch: CaeArch, rng: &mut impl Rng) -> Result<Self> {
        let reduction = arch.cbam_enabled.then_some(arch.cbam_reduction);
        let c = arch.input[0];

        let mut enc_stages = Vec::new();
        let mut prev = arch.stem_channels;
        for &ch in &arch.stage_channels {
            enc_stages.push(EncoderStage {
                down_w: conv_init(prev, ch, 3, rng),
                down_b: Tensor::zeros(&[ch]),
                block: ResBlockParams::init(ch, ch, reduction, rng)?,
            });
            prev = ch;
        }
        let last = *arch.stage_channels.last().unwrap();

        let mut dec_stages = Vec::new();
        for (i, &ch) in arch.stage_channels.iter().enumerate().rev() {
            let below = if i == 0 { arch.stem_channels } else { arch.stage_channels[i - 1] };
            dec_stages.push(DecoderStage {
                block: ResBlockParams::init(ch, ch, reduction, rng)?,
                // Transposed kernels are laid out [Ci, Co, kh, kw].
                up_w: Tensor::uniform(
                    &[ch, below, 3, 3],
                    glorot_bound(ch * 9, below * 9),
                    rng,
                ),
                up_b: Tensor::zeros(&[below]),
            });
        }

        Ok(Self {
            stem_w: conv_init(c, arch.stem_channels, 3, rng),
            stem_b: Tensor::zeros(&[arch.stem_channels]),
            enc_stages,
            latent_w: conv_init(last, arch.latent_channels, 1, rng),
            latent_b: Tensor::zeros(&[arch.latent_channels]),
            delatent_w: conv_init(arch.latent_channels, last, 1, rng),
            delatent_b: Tensor::zeros(&[last]),
            dec_stages,
            head_w: conv_init(arch.stem_channels, c, 3, rng),
            head_b: Tensor::zeros(&[c]),
            arch,
        })
    }

    /// All-zero parameters (useful as a fixed point: zero in, zero out).
    pub fn zeroed(arch: CaeArch) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(arch, &mut rng)?;
        for p in model.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        Ok(model)
    }

    pub fn arch(&self) -> &CaeArch {
        &self.arch
    }

    /// Every parameter tensor in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.push(&self.stem_w);
        out.push(&self.stem_b);
        for stage in &self.enc_stages {
            out.push(&stage.down_w);
            out.push(&stage.down_b);
            stage.block.collect(&mut out);
        }
        out.push(&self.latent_w);
        out.push(&self.latent_b);
        out.push(&self.delatent_w);
        out.push(&self.delatent_b);
        for stage in &self.dec_stages {
            stage.block.collect(&mut out);
            out.push(&stage.up_w);
            out.push(&stage.up_b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.push(&mut self.stem_w);
        out.push(&mut self.stem_b);
        for stage in &mut self.enc_stages {
            out.push(&mut stage.down_w);
            out.push(&mut stage.down_b);
            stage.block.collect_mut(&mut out);
        }
        out.push(&mut self.latent_w);
        out.push(&mut self.latent_b);
        out.push(&mut self.delatent_w);
        out.push(&mut self.delatent_b);
        for stage in &mut self.dec_stages {
            stage.block.collect_mut(&mut out);
            out.push(&mut stage.up_w);
            out.push(&mut stage.up_b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data().len()).sum()
    }

    pub fn compression_ratio(&self) -> f64 {
        self.arch.compression_ratio()
    }

    /// Number of parameter tensors belonging to the encoder half.
    fn encoder_param_count(&self) -> usize {
        let block = |b: &ResBlockParams| {
            4 + if b.cbam.is_some() { 6 } else { 0 } + if b.projection.is_some() { 2 } else { 0 }
        };
        2 + self.enc_stages.iter().map(|s| 2 + block(&s.block)).sum::<usize>() + 2
    }

    /// Maps `[B, C, H, W]` fields to `[B, c, h, w]` latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_fields(x, "encode")?;
        let mut g = Graph::new();
        let x_id = g.input(x.clone());
        let params = self.params();
        let mut it = ParamFeed::new(&params[..self.encoder_param_count()]);
        let latent = bind_encoder(&mut g, &self.arch, &mut it, x_id)?;
        it.finish()?;
        Ok(g.value(latent).clone())
    }

    /// Maps `[B, c, h, w]` latents back to `[B, C, H, W]` fields.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let [lc, lh, lw] = self.arch.latent_shape();
        if z.rank() != 4 || z.shape()[1..] != [lc, lh, lw] {
            return Err(Error::shape(
                "decode",
                format!("expected latents [B, {}, {}, {}], got {:?}", lc, lh, lw, z.shape()),
            ));
        }
        let mut g = Graph::new();
        let z_id = g.input(z.clone());
        let params = self.params();
        let mut it = ParamFeed::new(&params[self.encoder_param_count()..]);
        let out = bind_decoder(&mut g, &self.arch, &mut it, z_id)?;
        it.finish()?;
        Ok(g.value(out).clone())
    }

    fn check_fields(&self, x: &Tensor, op: &'static str) -> Result<()> {
        let [c, h, w] = self.arch.input;
        if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                op,
                format!("expected fields [B, {}, {}, {}], got {:?}", c, h, w, x.shape()),
            ));
        }
        Ok(())
    }
}

// ───────────────────────── graph construction ─────────────────────────

/// Feeds parameter tensors into a graph in declaration order, recording
/// the node ids so gradients can be read back in the same order.
struct ParamFeed<'a> {
    params: &'a [&'a Tensor],
    next: usize,
    ids: Vec<NodeId>,
}

impl<'a> ParamFeed<'a> {
    fn new(params: &'a [&'a Tensor]) -> Self {
        Self { params, next: 0, ids: Vec::with_capacity(params.len()) }
    }

    fn next_tensor(&mut self) -> Result<&'a Tensor> {
        let t = self.params.get(self.next).copied().ok_or_else(|| {
            Error::shape("cae_bind", "parameter list exhausted during graph construction")
        })?;
        self.next += 1;
        Ok(t)
    }

    fn take(&mut self, g: &mut Graph) -> Result<NodeId> {
        let t = self.next_tensor()?;
        let id = g.parameter(t.clone());
        self.ids.push(id);
        Ok(id)
    }

    /// Consumes the six attention tensors and returns their bound layers.
    fn take_cbam(
        &mut self,
        g: &mut Graph,
        channels: usize,
        reduction: usize,
    ) -> Result<(BoundChannelAttention, BoundSpatialAttention)> {
        let w0 = self.next_tensor()?.clone();
        let b0 = self.next_tensor()?.clone();
        let w1 = self.next_tensor()?.clone();
        let b1 = self.next_tensor()?.clone();
        let ca = ChannelAttentionParams::from_tensors(channels, reduction, w0, b0, w1, b1)?;
        let kernel = self.next_tensor()?.clone();
        let bias = self.next_tensor()?.clone();
        let sa = SpatialAttentionParams::from_tensors(kernel, bias)?;
        let bc = BoundChannelAttention::bind(g, &ca);
        let bs = BoundSpatialAttention::bind(g, &sa);
        self.ids.extend(bc.param_nodes());
        self.ids.extend(bs.param_nodes());
        Ok((bc, bs))
    }

    fn finish(self) -> Result<Vec<NodeId>> {
        if self.next != self.params.len() {
            return Err(Error::shape(
                "cae_bind",
                format!("{} parameters bound, {} supplied", self.next, self.params.len()),
            ));
        }
        Ok(self.ids)
    }
}

fn conv(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
    g.apply(OpKind::Conv2d { stride, padding }, &[x, w, b])
}

fn relu(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    g.apply(OpKind::Relu, &[x])
}

fn bind_resblock(
    g: &mut Graph,
    feed: &mut ParamFeed,
    x: NodeId,
    channels: usize,
    channels_in: usize,
    cbam: Option<usize>,
) -> Result<NodeId> {
    let w1 = feed.take(g)?;
    let b1 = feed.take(g)?;
    let w2 = feed.take(g)?;
    let b2 = feed.take(g)?;
    let mut h = conv(g, x, w1, b1, 1, 1)?;
    h = relu(g, h)?;
    h = conv(g, h, w2, b2, 1, 1)?;
    if let Some(reduction) = cbam {
        let (bc, bs) = feed.take_cbam(g, channels, reduction)?;
        h = bc.apply(g, h)?;
        h = bs.apply(g, h)?;
    }
    let skip = if channels_in != channels {
        let pw = feed.take(g)?;
        let pb = feed.take(g)?;
        conv(g, x, pw, pb, 1, 0)?
    } else {
        x
    };
    let sum = g.apply(OpKind::Add, &[skip, h])?;
    relu(g, sum)
}

fn bind_encoder(
    g: &mut Graph,
    arch: &CaeArch,
    feed: &mut ParamFeed,
    x: NodeId,
) -> Result<NodeId> {
    let (top, bottom) = arch.row_padding();
    let mut h = if top + bottom > 0 {
        g.apply(OpKind::PadRows { top, bottom }, &[x])?
    } else {
        x
    };
    let sw = feed.take(g)?;
    let sb = feed.take(g)?;
    h = conv(g, h, sw, sb, 1, 1)?;
    h = relu(g, h)?;
    let cbam = arch.cbam_enabled.then_some(arch.cbam_reduction);
    for &ch in &arch.stage_channels {
        let dw = feed.take(g)?;
        let db = feed.take(g)?;
        h = conv(g, h, dw, db, 2, 1)?;
        h = relu(g, h)?;
        h = bind_resblock(g, feed, h, ch, ch, cbam)?;
    }
    let lw = feed.take(g)?;
    let lb = feed.take(g)?;
    conv(g, h, lw, lb, 1, 0)
}

fn bind_decoder(
    g: &mut Graph,
    arch: &CaeArch,
    feed: &mut ParamFeed,
    z: NodeId,
) -> Result<NodeId> {
    let dw = feed.take(g)?;
    let db = feed.take(g)?;
    let mut h = conv(g, z, dw, db, 1, 0)?;
    h = relu(g, h)?;
    let cbam = arch.cbam_enabled.then_some(arch.cbam_reduction);
    for &ch in arch.stage_channels.iter().rev() {
        h = bind_resblock(g, feed, h, ch, ch, cbam)?;
        let uw = feed.take(g)?;
        let ub = feed.take(g)?;
        h = g.apply(
            OpKind::ConvTranspose2d { stride: 2, padding: 1, output_padding: 1 },
            &[h, uw, ub],
        )?;
        h = relu(g, h)?;
    }
    let hw = feed.take(g)?;
    let hb = feed.take(g)?;
    h = conv(g, h, hw, hb, 1, 1)?;
    let (top, bottom) = arch.row_padding();
    if top + bottom > 0 {
        h = g.apply(OpKind::CropRows { top, bottom }, &[h])?;
    }
    Ok(h)
}

/// Latitude-weighted RMSE as a graph node: per-(sample, variable)
/// weighted spatial mean square, square root, arithmetic mean.
fn bind_lw_rmse(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    weights: NodeId,
    fields: usize,
) -> Result<NodeId> {
    let neg = g.apply(OpKind::Scale { factor: -1.0 }, &[target])?;
    let diff = g.apply(OpKind::Add, &[pred, neg])?;
    let sq = g.apply(OpKind::Multiply, &[diff, diff])?;
    let weighted = g.apply(OpKind::Multiply, &[sq, weights])?;
    let pooled = g.apply(OpKind::GlobalAvgPool, &[weighted])?;
    let rooted = g.apply(OpKind::Sqrt, &[pooled])?;
    let total = g.apply(OpKind::Sum, &[rooted])?;
    g.apply(OpKind::Scale { factor: 1.0 / fields as f64 }, &[total])
}

fn weights_tensor(weights: &LatitudeWeights) -> Tensor {
    Tensor::new(&[1, 1, weights.len(), 1], weights.values().to_vec()).unwrap()
}

// ───────────────────────── training ─────────────────────────

/// Training hyperparameters. Defaults: learning rate 1e-3, batch size
/// 32, 100 epochs, plateau patience 5 with decay 0.5 down to 1e-6.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub decay: f64,
    pub lr_floor: f64,
    pub seed: u64,
    /// Epoch number the run starts from; nonzero when resuming. The
    /// epoch-0 (pre-training) trace row is only emitted for fresh runs.
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            patience: 5,
            decay: 0.5,
            lr_floor: 1e-6,
            seed: 0,
            start_epoch: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        // A learning rate of exactly zero is allowed: it turns training
        // into a pure evaluation loop and must leave parameters untouched.
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.epochs > 0
            && self.patience > 0
            && self.decay > 0.0
            && self.decay < 1.0
            && self.lr_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "training config: rates and counts must be positive, decay in (0,1)".into(),
            ))
        }
    }
}

/// One trace row; `epoch` 0 is the pre-training evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

/// Halves the learning rate (by `decay`) whenever the validation loss
/// has not improved for `patience` consecutive epochs.
struct PlateauScheduler {
    lr: f64,
    best: f64,
    stale: usize,
    patience: usize,
    decay: f64,
    floor: f64,
}

impl PlateauScheduler {
    fn new(lr: f64, patience: usize, decay: f64, floor: f64) -> Self {
        Self { lr, best: f64::INFINITY, stale: 0, patience, decay, floor }
    }

    fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.decay).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

fn gather_batch(set: &Tensor, indices: &[usize]) -> Tensor {
    let per = set.data().len() / set.shape()[0];
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&set.data()[i * per..(i + 1) * per]);
    }
    let mut shape = set.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).unwrap()
}

/// Forward pass loss of `model_params` over a whole set, batched.
fn eval_loss(
    arch: &CaeArch,
    params: &[Tensor],
    set: &Tensor,
    w: &Tensor,
    batch_size: usize,
) -> Result<f64> {
    let t = set.shape()[0];
    let fields = set.shape()[1];
    let mut acc = 0.0;
    let mut start = 0;
    while start < t {
        let end = (start + batch_size).min(t);
        let indices: Vec<usize> = (start..end).collect();
        let batch = gather_batch(set, &indices);
        let (loss, _) = batch_loss(arch, params, &batch, w, fields)?;
        acc += loss * indices.len() as f64;
        start = end;
    }
    Ok(acc / t as f64)
}

/// Builds the reconstruction graph for one batch; returns the loss
/// value and the graph state needed for a backward pass.
fn batch_loss(
    arch: &CaeArch,
    params: &[Tensor],
    batch: &Tensor,
    w: &Tensor,
    fields: usize,
) -> Result<(f64, (Graph, NodeId, Vec<NodeId>))> {
    let refs: Vec<&Tensor> = params.iter().collect();
    let mut g = Graph::new();
    let x = g.input(batch.clone());
    let w_id = g.input(w.clone());
    let mut feed = ParamFeed::new(&refs);
    let latent = bind_encoder(&mut g, arch, &mut feed, x)?;
    let out = bind_decoder(&mut g, arch, &mut feed, latent)?;
    let ids = feed.finish()?;
    let loss_id = bind_lw_rmse(&mut g, out, x, w_id, batch.shape()[0] * fields)?;
    let loss = g.value(loss_id).data()[0];
    Ok((loss, (g, loss_id, ids)))
}

/// Trains the model in place, returning the per-epoch loss trace.
///
/// Deterministic for a fixed seed: batch order comes from a seeded
/// generator and every kernel accumulates in a fixed order, so two runs
/// produce bit-identical traces and parameters.
pub fn train(
    model: &mut CaeModel,
    train_set: &Tensor,
    val_set: &Tensor,
    weights: &LatitudeWeights,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    model.check_fields(train_set, "train")?;
    model.check_fields(val_set, "train")?;
    if weights.len() != model.arch.input[1] {
        return Err(Error::shape(
            "train",
            format!("{} latitude weights for {} rows", weights.len(), model.arch.input[1]),
        ));
    }
    let arch = model.arch.clone();
    let w = weights_tensor(weights);
    let fields = arch.input[0];
    let t = train_set.shape()[0];

    let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let mut adam = AdamState::new(
        AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() },
        &params,
    );
    let mut scheduler =
        PlateauScheduler::new(cfg.learning_rate, cfg.patience, cfg.decay, cfg.lr_floor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = TrainTrace::default();

    if cfg.start_epoch == 0 {
        trace.rows.push(TraceRow {
            epoch: 0,
            train_loss: eval_loss(&arch, &params, train_set, &w, cfg.batch_size)?,
            val_loss: eval_loss(&arch, &params, val_set, &w, cfg.batch_size)?,
            lr: cfg.learning_rate,
        });
    }

    let mut order: Vec<usize> = (0..t).collect();
    for e in 1..=cfg.epochs {
        let epoch = cfg.start_epoch + e;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather_batch(train_set, chunk);
            let (loss, (g, loss_id, ids)) = batch_loss(&arch, &params, &batch, &w, fields)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {}, batch {}",
                    epoch, batch_idx
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            let grads = g.backward(loss_id)?;
            let grad_list: Vec<Tensor> = ids
                .iter()
                .zip(&params)
                .map(|(id, p)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam.step(&mut params, &grad_list)?;
        }
        let train_loss = epoch_loss / t as f64;
        let val_loss = eval_loss(&arch, &params, val_set, &w, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss at epoch {}, batch 0",
                epoch
            )));
        }
        let lr_row = adam.learning_rate();
        let next_lr = scheduler.observe(val_loss);
        adam.set_learning_rate(next_lr);
        trace.rows.push(TraceRow { epoch, train_loss, val_loss, lr: lr_row });
    }

    for (slot, value) in model.params_mut().into_iter().zip(params) {
        *slot = value;
    }
    Ok(trace)
}

// ───────────────────────── loss trace csv ─────────────────────────

const TRACE_HEADER: &str = "epoch,train_loss,val_loss,lr";

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                row.epoch, row.train_loss, row.val_loss, row.lr
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == TRACE_HEADER => {}
            other => {
                return Err(Error::Data(format!(
                    "loss trace header should be '{}', got {:?}",
                    TRACE_HEADER, other
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Data(format!(
                    "loss trace line {} has {} columns, expected 4",
                    i + 2,
                    cols.len()
                )));
            }
            let parse_f = |s: &str, what: &str| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("loss trace line {}: bad {} '{}'", i + 2, what, s))
                })
            };
            rows.push(TraceRow {
                epoch: cols[0].trim().parse().map_err(|_| {
                    Error::Data(format!("loss trace line {}: bad epoch '{}'", i + 2, cols[0]))
                })?,
                train_loss: parse_f(cols[1], "train loss")?,
                val_loss: parse_f(cols[2], "validation loss")?,
                lr: parse_f(cols[3], "learning rate")?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text)
    }

    /// Last recorded epoch number; 0 for an empty trace.
    pub fn last_epoch(&self) -> usize {
        self.rows.last().map(|r| r.epoch).unwrap_or(0)
    }
}

// ───────────────────────── checkpoint io ─────────────────────────

/// Writes a model checkpoint: magic "ROMCAE1", the architecture as
/// fixed-width integers (extents, stem/latent channels, attention flag
/// and reduction, stage list), then every parameter tensor's values in
/// declaration order as 64-bit little-endian floats.
pub fn write_cae(path: &Path, model: &CaeModel) -> Result<()> {
    let arch = &model.arch;
    let mut out = BinWriter::create(path, CAE_MAGIC)?;
    for e in arch.input {
        out.u32(e)?;
    }
    out.u32(arch.stem_channels)?;
    out.u32(arch.latent_channels)?;
    out.u32(arch.cbam_enabled as usize)?;
    out.u32(arch.cbam_reduction)?;
    out.u32(arch.stage_channels.len())?;
    for &ch in &arch.stage_channels {
        out.u32(ch)?;
    }
    for p in model.params() {
        out.f64_slice(p.data())?;
    }
    out.finish()
}

/// Reads a model checkpoint written by [`write_cae`].
pub fn read_cae(path: &Path) -> Result<CaeModel> {
    let mut reader = BinReader::open(path, CAE_MAGIC, "autoencoder")?;
    reader.context = "architecture descriptor";
    let mut ints = [0usize; 7];
    for slot in &mut ints {
        *slot = reader.u32()? as usize;
    }
    let [c, h, w, stem, latent, cbam_flag, reduction] = ints;
    let stage_count = reader.u32()? as usize;
    if cbam_flag > 1 || stage_count == 0 || stage_count > 8 {
        return Err(Error::Data(format!(
            "autoencoder descriptor is corrupt (flag {}, {} stages)",
            cbam_flag, stage_count
        )));
    }
    if [c, h, w, stem, latent].iter().any(|&e| e == 0 || e > (1 << 16)) {
        return Err(Error::Data(format!(
            "autoencoder extents {}x{}x{} (stem {}, latent {}) are corrupt",
            c, h, w, stem, latent
        )));
    }
    let mut stages = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        let ch = reader.u32()? as usize;
        if ch == 0 || ch > (1 << 16) {
            return Err(Error::Data(format!("stage channel count {} is corrupt", ch)));
        }
        stages.push(ch);
    }
    let arch = CaeArch::new([c, h, w], stem, stages, latent, cbam_flag == 1, reduction)?;
    let mut model = CaeModel::zeroed(arch)?;
    reader.context = "parameter values";
    for p in model.params_mut() {
        let shape = p.shape().to_vec();
        let data = reader.f64_vec(p.data().len())?;
        *p = Tensor::new(shape, data)?;
    }
    reader.finish()?;
    if model.params().iter().any(|p| !p.data().iter().all(|v| v.is_finite())) {
        return Err(Error::Data("autoencoder checkpoint holds non-finite parameters".into()));
    }
    Ok(model)
}

// ───────────────────────── the coder interface ─────────────────────────

impl LatentCoder for CaeModel {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    fn field_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    fn encode_batch(&self, fields: &Tensor) -> Result<Tensor> {
        let z = self.encode(fields)?;
        z.reshaped(&[fields.shape()[0], self.arch.latent_dim()])
    }

    fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        if latents.rank() != 2 || latents.shape()[1] != self.arch.latent_dim() {
            return Err(Error::shape(
                "decode",
                format!(
                    "expected latents [B, {}], got {:?}",
                    self.arch.latent_dim(),
                    latents.shape()
                ),
            ));
        }
        let [lc, lh, lw] = self.arch.latent_shape();
        let z = latents.reshaped(&[latents.shape()[0], lc, lh, lw])?;
        self.decode(&z)
    }
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::latitude_weights;
    use crate::metrics;
    use crate::testsupport::rng;

    fn tiny_arch(cbam: bool) -> CaeArch {
        CaeArch::new([2, 9, 12], 6, vec![8], 4, cbam, 2).unwrap()
    }

    fn tiny_lat() -> Vec<f64> {
        (0..9).map(|i| -60.0 + 15.0 * i as f64).collect()
    }

    fn random_fields(b: usize, shape: [usize; 3], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(&[b, shape[0], shape[1], shape[2]], |_| {
            rand::Rng::gen_range(&mut r, -1.0..1.0)
        })
    }

    #[test]
    fn desk_architecture_has_the_documented_latent() {
        let arch = CaeArch::desk(true);
        assert_eq!(arch.latent_shape(), [8, 9, 12]);
        assert_eq!(arch.latent_dim(), 864);
        assert_eq!(arch.padded_height(), 36);
        assert_eq!(arch.row_padding(), (1, 2));
    }

    #[test]
    fn full_scale_architecture_matches_the_published_figures() {
        let arch = CaeArch::full_scale();
        assert_eq!(arch.latent_shape(), [8, 8, 15]);
        assert_eq!(arch.latent_dim(), 960);
        // 4 * 240 * 121 grid values over 960 latent values: exactly 121.
        assert_eq!(arch.compression_ratio(), 121.0);
    }

    #[test]
    fn pod_scale_ratio_for_a_thousand_modes_is_not_the_rounded_figure() {
        // The published table rounds 116160/1000 up to the autoencoder's
        // ratio; the exact value differs and is what we report.
        let full: f64 = 4.0 * 240.0 * 121.0;
        let ratio = full / 1000.0;
        assert!((ratio - 116.16).abs() < 1e-12);
        assert!(ratio != 121.0);
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        assert!(CaeArch::new([4, 33, 50], 32, vec![64, 128], 8, true, 8).is_err());
        assert!(CaeArch::new([4, 33, 48], 32, vec![], 8, true, 8).is_err());
        assert!(CaeArch::new([4, 33, 48], 32, vec![60], 8, true, 8).is_err());
        assert!(CaeArch::new([0, 33, 48], 32, vec![64], 8, true, 8).is_err());
        assert!(CaeArch::new([4, 33, 48], 32, vec![64], 8, false, 0).is_ok());
    }

    #[test]
    fn zero_model_maps_zero_to_zero() {
        let model = CaeModel::zeroed(tiny_arch(false)).unwrap();
        let x = Tensor::zeros(&[2, 2, 9, 12]);
        let z = model.encode(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let y = model.decode(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_preserves_shape_for_random_models() {
        for cbam in [false, true] {
            let mut r = rng(90);
            let model = CaeModel::init(tiny_arch(cbam), &mut r).unwrap();
            let x = random_fields(3, [2, 9, 12], 91);
            let z = model.encode(&x).unwrap();
            assert_eq!(z.shape(), &[3, 4, 5, 6]);
            let y = model.decode(&z).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encode_rejects_mismatched_fields() {
        let mut r = rng(92);
        let model = CaeModel::init(tiny_arch(false), &mut r).unwrap();
        assert!(model.encode(&Tensor::zeros(&[2, 2, 9, 10])).is_err());
        assert!(model.decode(&Tensor::zeros(&[2, 4, 5, 5])).is_err());
        assert!(model.encode(&Tensor::zeros(&[2, 9, 12])).is_err());
    }

    #[test]
    fn projection_skip_handles_channel_changes() {
        // Residual blocks with differing in/out channels route the skip
        // through a 1x1 projection; output shape matches the branch.
        let mut r = rng(93);
        let block = ResBlockParams::init(3, 5, Some(1), &mut r).unwrap();
        assert!(block.projection.is_some());
        let refs: Vec<&Tensor> = {
            let mut v = Vec::new();
            block.collect(&mut v);
            v
        };
        let mut g = Graph::new();
        let x = g.input(random_fields(2, [3, 4, 4], 94));
        let mut feed = ParamFeed::new(&refs);
        let out = bind_resblock(&mut g, &mut feed, x, 5, 3, Some(1)).unwrap();
        feed.finish().unwrap();
        assert_eq!(g.value(out).shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn graph_loss_equals_the_numeric_metric() {
        let weights = latitude_weights(&tiny_lat()).unwrap();
        let x = random_fields(3, [2, 9, 12], 95);
        let y = random_fields(3, [2, 9, 12], 96);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let yi = g.input(y.clone());
        let wi = g.input(weights_tensor(&weights));
        let loss = bind_lw_rmse(&mut g, yi, xi, wi, 6).unwrap();
        let got = g.value(loss).data()[0];
        let want = metrics::lw_rmse(&x, &y, &weights).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn sampled_parameter_gradients_match_finite_differences() {
        let arch = tiny_arch(true);
        let mut r = rng(97);
        let model = CaeModel::init(arch.clone(), &mut r).unwrap();
        let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let x = random_fields(2, [2, 9, 12], 98);
        let weights = latitude_weights(&tiny_lat()).unwrap();
        let w = weights_tensor(&weights);

        let loss_of = |params: &[Tensor]| -> f64 {
            let (loss, _) = batch_loss(&arch, params, &x, &w, 2).unwrap();
            loss
        };
        let (_, (g, loss_id, ids)) = batch_loss(&arch, &params, &x, &w, 2).unwrap();
        let grads = g.backward(loss_id).unwrap();

        // A spread of coordinates across every parameter tensor. The
        // network is piecewise smooth (relu kinks), so the difference
        // quotient is evaluated at shrinking steps and the closest one is
        // compared: kink contamination decays linearly with the step.
        for (pi, p) in params.iter().enumerate() {
            let coord = (pi * 7919) % p.data().len();
            let analytic = grads
                .get(ids[pi])
                .map(|t| t.data()[coord])
                .unwrap_or(0.0);
            let fd_at = |step: f64| {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut pd = p.data().to_vec();
                pd[coord] += step;
                plus[pi] = Tensor::new(p.shape().to_vec(), pd.clone()).unwrap();
                pd[coord] -= 2.0 * step;
                minus[pi] = Tensor::new(p.shape().to_vec(), pd).unwrap();
                (loss_of(&plus) - loss_of(&minus)) / (2.0 * step)
            };
            let fd = [1e-4, 1e-5, 1e-6]
                .into_iter()
                .map(fd_at)
                .min_by(|a, b| {
                    (a - analytic).abs().partial_cmp(&(b - analytic).abs()).unwrap()
                })
                .unwrap();
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom <= 1e-3,
                "parameter {} coord {}: analytic {} vs fd {}",
                pi,
                coord,
                analytic,
                fd
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut r = rng(99);
        let mut model = CaeModel::init(tiny_arch(false), &mut r).unwrap();
        let before: Vec<Vec<u64>> = model
            .params()
            .iter()
            .map(|p| p.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let set = random_fields(4, [2, 9, 12], 100);
        let weights = latitude_weights(&tiny_lat()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        // Every update is scaled by the learning rate; at exactly zero the
        // subtraction of a signed zero preserves each value bit for bit.
        train(&mut model, &set, &set, &weights, &cfg).unwrap();
        let after: Vec<Vec<u64>> = model
            .params()
            .iter()
            .map(|p| p.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn fixed_seed_training_is_bit_reproducible() {
        let run = || {
            let mut r = rng(101);
            let mut model = CaeModel::init(tiny_arch(true), &mut r).unwrap();
            let set = random_fields(6, [2, 9, 12], 102);
            let val = random_fields(3, [2, 9, 12], 103);
            let weights = latitude_weights(&tiny_lat()).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 4,
                seed: 7,
                ..TrainConfig::default()
            };
            let trace = train(&mut model, &set, &val, &weights, &cfg).unwrap();
            let bits: Vec<u64> = model
                .params()
                .iter()
                .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
                .collect();
            (trace, bits)
        };
        let (trace_a, bits_a) = run();
        let (trace_b, bits_b) = run();
        assert_eq!(bits_a, bits_b);
        assert_eq!(trace_a.rows.len(), trace_b.rows.len());
        for (a, b) in trace_a.rows.iter().zip(&trace_b.rows) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
    }

    #[test]
    fn single_sample_memorization_drives_the_loss_down() {
        let mut r = rng(104);
        let mut model = CaeModel::init(tiny_arch(false), &mut r).unwrap();
        let sample = random_fields(1, [2, 9, 12], 105);
        let weights = latitude_weights(&tiny_lat()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &sample, &sample, &weights, &cfg).unwrap();
        let first = trace.rows[0].train_loss;
        let last = trace.rows.last().unwrap().train_loss;
        assert!(
            last < 0.1 * first,
            "loss only moved from {} to {} over {} epochs",
            first,
            last,
            trace.rows.len() - 1
        );
    }

    #[test]
    fn divergent_training_reports_the_failing_epoch() {
        let mut r = rng(106);
        let mut model = CaeModel::init(tiny_arch(false), &mut r).unwrap();
        let set = random_fields(4, [2, 9, 12], 107);
        let weights = latitude_weights(&tiny_lat()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e150,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &set, &set, &weights, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch") && msg.contains("batch"), "{}", msg);
    }

    #[test]
    fn plateau_scheduler_decays_after_patience_and_respects_the_floor() {
        let mut s = PlateauScheduler::new(1.0, 2, 0.5, 0.2);
        assert_eq!(s.observe(1.0), 1.0);
        assert_eq!(s.observe(0.9), 1.0);
        assert_eq!(s.observe(0.95), 1.0);
        assert_eq!(s.observe(0.95), 0.5);
        assert_eq!(s.observe(0.99), 0.5);
        assert_eq!(s.observe(0.99), 0.25);
        assert_eq!(s.observe(0.99), 0.25);
        assert_eq!(s.observe(0.99), 0.2);
        assert_eq!(s.observe(0.89), 0.2);
    }

    #[test]
    fn trained_reconstruction_beats_the_mean_field_baseline() {
        let mut r = rng(108);
        let mut model = CaeModel::init(tiny_arch(true), &mut r).unwrap();
        // Structured data: two drifting waves, so there is something to
        // learn beyond the mean.
        let mk = |t0: usize, n: usize| {
            Tensor::from_fn(&[n, 2, 9, 12], |idx| {
                let t = t0 + idx / 216;
                let rem = idx % 216;
                let (c, i, j) = (rem / 108, (rem % 108) / 12, rem % 12);
                let phase = 2.0 * std::f64::consts::PI * j as f64 / 12.0;
                let lat = i as f64 / 8.0;
                if c == 0 {
                    (phase + 0.3 * t as f64).sin() * (1.0 - lat)
                } else {
                    (2.0 * phase - 0.2 * t as f64).cos() * lat
                }
            })
        };
        let train_set = mk(0, 24);
        let held_out = mk(50, 6);
        let weights = latitude_weights(&tiny_lat()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &train_set, &held_out, &weights, &cfg).unwrap();

        let z = model.encode(&held_out).unwrap();
        let recon = model.decode(&z).unwrap();
        let model_err = metrics::lw_rmse(&held_out, &recon, &weights).unwrap();

        // Mean-field oracle: the per-location training mean as a constant
        // prediction.
        let n_train = train_set.shape()[0];
        let per = 216;
        let mut mean = vec![0.0; per];
        for row in train_set.data().chunks(per) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n_train as f64;
            }
        }
        let mean_pred = Tensor::from_fn(held_out.shape(), |idx| mean[idx % per]);
        let mean_err = metrics::lw_rmse(&held_out, &mean_pred, &weights).unwrap();
        assert!(
            model_err < mean_err,
            "reconstruction {} not better than mean field {}",
            model_err,
            mean_err
        );
    }

    #[test]
    fn loss_trace_csv_round_trips_losslessly() {
        let trace = TrainTrace {
            rows: vec![
                TraceRow { epoch: 0, train_loss: 0.1234567890123, val_loss: 1.5e-7, lr: 1e-3 },
                TraceRow { epoch: 1, train_loss: f64::MIN_POSITIVE, val_loss: 3.7, lr: 5e-4 },
            ],
        };
        let text = trace.to_csv();
        assert!(text.starts_with("epoch,train_loss,val_loss,lr\n"));
        let back = TrainTrace::from_csv(&text).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.last_epoch(), 1);
        assert!(TrainTrace::from_csv("foo,bar\n").is_err());
        assert!(TrainTrace::from_csv("epoch,train_loss,val_loss,lr\n1,2\n").is_err());
    }

    #[test]
    fn resumed_runs_continue_epoch_numbering_without_an_epoch_zero() {
        let mut r = rng(109);
        let mut model = CaeModel::init(tiny_arch(false), &mut r).unwrap();
        let set = random_fields(4, [2, 9, 12], 110);
        let weights = latitude_weights(&tiny_lat()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            start_epoch: 5,
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &set, &set, &weights, &cfg).unwrap();
        let epochs: Vec<usize> = trace.rows.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![6, 7]);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cae");
        let mut r = rng(111);
        let model = CaeModel::init(tiny_arch(true), &mut r).unwrap();
        write_cae(&path, &model).unwrap();
        let back = read_cae(&path).unwrap();
        assert_eq!(back.arch(), model.arch());
        let bits = |m: &CaeModel| -> Vec<u64> {
            m.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&model));

        let path2 = dir.path().join("again.cae");
        write_cae(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cae");
        let mut r = rng(112);
        write_cae(&path, &CaeModel::init(tiny_arch(false), &mut r).unwrap()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_cae(&path).unwrap_err().to_string().contains("bad magic"));

        std::fs::write(&path, &good[..good.len() - 9]).unwrap();
        assert!(read_cae(&path).unwrap_err().to_string().contains("truncated"));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, &trailing).unwrap();
        assert!(read_cae(&path).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn coder_interface_round_trips_flat_latents() {
        let mut r = rng(113);
        let model = CaeModel::init(tiny_arch(false), &mut r).unwrap();
        let x = random_fields(3, [2, 9, 12], 114);
        let flat = model.encode_batch(&x).unwrap();
        assert_eq!(flat.shape(), &[3, 120]);
        let spatial = model.encode(&x).unwrap();
        assert_eq!(flat.data(), spatial.data());
        let y = model.decode_batch(&flat).unwrap();
        let y2 = model.decode(&spatial).unwrap();
        assert_eq!(y.data(), y2.data());
        assert_eq!(model.latent_dim(), 120);
        assert_eq!(model.field_shape(), [2, 9, 12]);
    }

    #[test]
    fn ablation_flag_changes_the_parameter_count_only() {
        let mut r = rng(115);
        let with = CaeModel::init(tiny_arch(true), &mut r).unwrap();
        let without = CaeModel::init(tiny_arch(false), &mut r).unwrap();
        assert!(with.param_count() > without.param_count());
        assert_eq!(with.arch().latent_shape(), without.arch().latent_shape());
    }
}
