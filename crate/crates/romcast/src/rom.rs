//! Latent dynamics: time-delay embedding, least-squares inference of the
//! linear evolution operator, autoregressive rollout, and the
//! encode/evolve/decode forecast loop.
//!
//! The model is `z_{k+1} = L z_k^td` with the delayed state
//! `z_k^td = [z_k; z_{k-1}; ...; z_{k-d+1}]` stacked newest-first. `L` is
//! fit by minimizing the Frobenius residual over all one-step
//! transitions, with minimum-norm tie-breaking at `lambda = 0` and a
//! ridge-regularized normal-equation solve for `lambda > 0`.

use std::path::Path;

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, lstsq, Mat};
use crate::tensor::Tensor;

/// Relative singular-value / pivot cutoff for the lambda = 0 solve.
const RANK_THRESHOLD: f64 = 1e-12;

const OPERATOR_MAGIC: &[u8] = b"ROMOP1";

// ───────────────────────── latent sequences ─────────────────────────

/// A time-ordered sequence of latent vectors on a uniform time grid.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    n: usize,
    dt_hours: f64,
    states: Vec<Vec<f64>>,
}

impl LatentSequence {
    pub fn new(states: Vec<Vec<f64>>, dt_hours: f64) -> Result<Self> {
        let n = match states.first() {
            Some(first) if !first.is_empty() => first.len(),
            _ => return Err(Error::Data("latent sequence needs non-empty states".into())),
        };
        for (k, z) in states.iter().enumerate() {
            if z.len() != n {
                return Err(Error::shape(
                    "latent_sequence",
                    format!("state {} has length {}, expected {}", k, z.len(), n),
                ));
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("latent state {} is not finite", k)));
            }
        }
        if !(dt_hours > 0.0 && dt_hours.is_finite()) {
            return Err(Error::Data("latent sequence time step must be positive".into()));
        }
        Ok(Self { n, dt_hours, states })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_hours
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }
}

// ───────────────────────── delay embedding ─────────────────────────

/// Columns of the delay-embedded regression problem. Column `j` of
/// `z_td` stacks `[z_{d-1+j}; z_{d-2+j}; ...; z_j]` (newest block on
/// top); column `j` of `z_future` is `z_{d+j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMatrices {
    pub n: usize,
    pub d: usize,
    pub z_td: Vec<Vec<f64>>,
    pub z_future: Vec<Vec<f64>>,
}

pub fn build_delay_matrices(seq: &LatentSequence, d: usize) -> Result<DelayMatrices> {
    if d == 0 {
        return Err(Error::Config("delay depth d must be at least 1".into()));
    }
    let n_states = seq.len();
    if n_states < d + 1 {
        return Err(Error::Data(format!(
            "latent sequence of {} states is too short for delay depth {} (needs {})",
            n_states,
            d,
            d + 1
        )));
    }
    let n = seq.n();
    let columns = n_states - d;
    let mut z_td = Vec::with_capacity(columns);
    let mut z_future = Vec::with_capacity(columns);
    for j in 0..columns {
        let mut col = Vec::with_capacity(n * d);
        for back in 0..d {
            col.extend_from_slice(&seq.states()[d - 1 + j - back]);
        }
        z_td.push(col);
        z_future.push(seq.states()[d + j].clone());
    }
    Ok(DelayMatrices { n, d, z_td, z_future })
}

/// Unknowns-per-row versus available equations for a delay fit; the
/// near-square regime is where the fit turns ill-conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EquationAccounting {
    pub unknowns_per_row: usize,
    pub equations: usize,
}

impl EquationAccounting {
    pub fn for_fit(n: usize, d: usize, n_states: usize) -> Self {
        Self { unknowns_per_row: n * d, equations: n_states.saturating_sub(d) }
    }

    pub fn underdetermined(&self) -> bool {
        self.equations < self.unknowns_per_row
    }
}

// ───────────────────────── the operator ─────────────────────────

/// The inferred linear evolution operator `L` of shape `n x (n*d)`.
#[derive(Debug, Clone)]
pub struct DelayRom {
    n: usize,
    d: usize,
    l: Mat,
}

impl DelayRom {
    /// Wraps a row-major operator matrix.
    pub fn from_rows(n: usize, d: usize, rows: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Config("operator needs n >= 1 and d >= 1".into()));
        }
        if rows.len() != n * n * d {
            return Err(Error::shape(
                "delay_rom",
                format!("operator data length {} does not match {}x{}", rows.len(), n, n * d),
            ));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("operator contains non-finite entries".into()));
        }
        Ok(Self { n, d, l: Mat { rows: n, cols: n * d, data: rows } })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Row-major entries of `L` (`n` rows by `n*d` columns).
    pub fn matrix(&self) -> &[f64] {
        &self.l.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.l.at(row, col)
    }

    /// One step: `L` applied to a delayed state stacked newest-first.
    fn step(&self, td: &[f64]) -> Vec<f64> {
        self.l.matvec(td)
    }
}

/// Fits `L` minimizing `||Z_future - L Z_td||_F`. At `lambda = 0` the
/// minimum-norm least-squares solution; for `lambda > 0` the ridge
/// solution of the regularized normal equations.
pub fn fit_operator(
    z_td: &[Vec<f64>],
    z_future: &[Vec<f64>],
    lambda: f64,
) -> Result<DelayRom> {
    if z_td.is_empty() || z_td.len() != z_future.len() {
        return Err(Error::shape(
            "fit_operator",
            format!("{} delayed columns vs {} future columns", z_td.len(), z_future.len()),
        ));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge parameter must be >= 0, got {}", lambda)));
    }
    let nd = z_td[0].len();
    let n = z_future[0].len();
    if nd == 0 || n == 0 || nd % n != 0 {
        return Err(Error::shape(
            "fit_operator",
            format!("delayed length {} is not a multiple of state length {}", nd, n),
        ));
    }
    let cols = z_td.len();
    for (j, c) in z_td.iter().enumerate() {
        if c.len() != nd {
            return Err(Error::shape(
                "fit_operator",
                format!("delayed column {} has length {}, expected {}", j, c.len(), nd),
            ));
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("delayed column {} is not finite", j)));
        }
    }
    for (j, c) in z_future.iter().enumerate() {
        if c.len() != n {
            return Err(Error::shape(
                "fit_operator",
                format!("future column {} has length {}, expected {}", j, c.len(), n),
            ));
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("future column {} is not finite", j)));
        }
    }

    // Solve A X = B with A = Z_td^T (cols x nd), B = Z_future^T
    // (cols x n); then L = X^T.
    let x = if lambda == 0.0 {
        let a = Mat::from_fn(cols, nd, |i, j| z_td[i][j]);
        let b = Mat::from_fn(cols, n, |i, j| z_future[i][j]);
        lstsq(&a, &b, RANK_THRESHOLD)?
    } else {
        // Gram accumulation: G = Z_td Z_td^T + lambda I, rhs = Z_td Z_future^T.
        let mut g = Mat::zeros(nd, nd);
        let mut rhs = Mat::zeros(nd, n);
        for (c, f) in z_td.iter().zip(z_future) {
            for i in 0..nd {
                let ci = c[i];
                if ci == 0.0 {
                    continue;
                }
                let grow = &mut g.data[i * nd..(i + 1) * nd];
                for (gj, cj) in grow.iter_mut().zip(c) {
                    *gj += ci * cj;
                }
                let rrow = &mut rhs.data[i * n..(i + 1) * n];
                for (rj, fj) in rrow.iter_mut().zip(f) {
                    *rj += ci * fj;
                }
            }
        }
        for i in 0..nd {
            let v = g.at(i, i) + lambda;
            g.set(i, i, v);
        }
        cholesky_solve(&g, &rhs)?
    };
    let l = x.transpose();
    DelayRom::from_rows(n, nd / n, l.data)
}

/// Convenience: embed and fit in one call.
pub fn fit_delay_rom(seq: &LatentSequence, d: usize, lambda: f64) -> Result<DelayRom> {
    let dm = build_delay_matrices(seq, d)?;
    fit_operator(&dm.z_td, &dm.z_future, lambda)
}

// ───────────────────────── rollout and forecast ─────────────────────────

/// Autoregressive rollout: starting from `init_window` (exactly `d`
/// states, newest LAST), applies the operator `t` times, feeding each
/// prediction back into the window. Returns the `t` predicted states.
pub fn rollout(rom: &DelayRom, init_window: &[Vec<f64>], t: usize) -> Result<Vec<Vec<f64>>> {
    let (n, d) = (rom.n(), rom.d());
    if init_window.len() != d {
        return Err(Error::shape(
            "rollout",
            format!("initial window has {} states, operator expects {}", init_window.len(), d),
        ));
    }
    for (k, z) in init_window.iter().enumerate() {
        if z.len() != n {
            return Err(Error::shape(
                "rollout",
                format!("window state {} has length {}, expected {}", k, z.len(), n),
            ));
        }
    }
    let mut window: Vec<Vec<f64>> = init_window.to_vec();
    let mut out = Vec::with_capacity(t);
    let mut td = vec![0.0; n * d];
    for _ in 0..t {
        for (slot, state) in window.iter().rev().enumerate() {
            td[slot * n..(slot + 1) * n].copy_from_slice(state);
        }
        let next = rom.step(&td);
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

// ───────────────────────── the coder abstraction ─────────────────────────

/// Anything that maps physical fields to latent vectors and back: the
/// trained autoencoder, a POD basis, or the identity (for latent-space
/// experiments).
pub trait LatentCoder {
    /// Latent dimension n.
    fn latent_dim(&self) -> usize;

    /// Physical field shape `[C, H, W]`.
    fn field_shape(&self) -> [usize; 3];

    /// `[B, C, H, W]` fields to `[B, n]` latents.
    fn encode_batch(&self, fields: &Tensor) -> Result<Tensor>;

    /// `[B, n]` latents to `[B, C, H, W]` fields.
    fn decode_batch(&self, latents: &Tensor) -> Result<Tensor>;
}

/// Identity coder over a fixed grid: the latent IS the flattened field.
#[derive(Debug, Clone)]
pub struct IdentityCoder {
    shape: [usize; 3],
}

impl IdentityCoder {
    pub fn new(shape: [usize; 3]) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("identity_coder", format!("bad field shape {:?}", shape)));
        }
        Ok(Self { shape })
    }
}

impl LatentCoder for IdentityCoder {
    fn latent_dim(&self) -> usize {
        self.shape.iter().product()
    }

    fn field_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn encode_batch(&self, fields: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.shape;
        if fields.rank() != 4 || fields.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                "identity_coder",
                format!("expected [B, {}, {}, {}], got {:?}", c, h, w, fields.shape()),
            ));
        }
        fields.reshaped(&[fields.shape()[0], self.latent_dim()])
    }

    fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.shape;
        if latents.rank() != 2 || latents.shape()[1] != self.latent_dim() {
            return Err(Error::shape(
                "identity_coder",
                format!("expected [B, {}], got {:?}", self.latent_dim(), latents.shape()),
            ));
        }
        latents.reshaped(&[latents.shape()[0], c, h, w])
    }
}

/// Encodes a `[T, C, H, W]` stack into a latent sequence.
pub fn encode_sequence<C: LatentCoder + ?Sized>(
    coder: &C,
    fields: &Tensor,
    dt_hours: f64,
) -> Result<LatentSequence> {
    let latents = coder.encode_batch(fields)?;
    let (t, n) = (latents.shape()[0], latents.shape()[1]);
    let states = (0..t).map(|k| latents.data()[k * n..(k + 1) * n].to_vec()).collect();
    LatentSequence::new(states, dt_hours)
}

/// Encode the initial window, roll the operator forward `t` steps, and
/// decode every predicted latent. `initial_fields` is `[d, C, H, W]`
/// with the newest snapshot last; the result is `[t, C, H, W]`.
pub fn forecast<C: LatentCoder + ?Sized>(
    coder: &C,
    rom: &DelayRom,
    initial_fields: &Tensor,
    t: usize,
) -> Result<Tensor> {
    if coder.latent_dim() != rom.n() {
        return Err(Error::shape(
            "forecast",
            format!("coder latent dimension {} vs operator n {}", coder.latent_dim(), rom.n()),
        ));
    }
    if initial_fields.rank() != 4 || initial_fields.shape()[0] != rom.d() {
        return Err(Error::shape(
            "forecast",
            format!(
                "initial fields {:?} do not form a window of {} snapshots",
                initial_fields.shape(),
                rom.d()
            ),
        ));
    }
    let latents = coder.encode_batch(initial_fields)?;
    let n = rom.n();
    let window: Vec<Vec<f64>> =
        (0..rom.d()).map(|k| latents.data()[k * n..(k + 1) * n].to_vec()).collect();
    let predicted = rollout(rom, &window, t)?;
    if t == 0 {
        let [c, h, w] = coder.field_shape();
        // An empty forecast has no tensor representation; callers ask for
        // t >= 1 in practice. Return a zero-step shape error instead.
        return Err(Error::Config(format!(
            "forecast horizon must be at least 1 (field shape [{} {} {}])",
            c, h, w
        )));
    }
    let mut flat = Vec::with_capacity(t * n);
    for z in &predicted {
        flat.extend_from_slice(z);
    }
    let latent_stack = Tensor::new(&[t, n], flat)?;
    coder.decode_batch(&latent_stack)
}

// ───────────────────────── checkpoint io ─────────────────────────

/// Writes an operator checkpoint: magic "ROMOP1", u32 n, u32 d, then the
/// row-major operator entries as 64-bit little-endian floats.
pub fn write_operator(path: &Path, rom: &DelayRom) -> Result<()> {
    let mut out = BinWriter::create(path, OPERATOR_MAGIC)?;
    out.u32(rom.n())?;
    out.u32(rom.d())?;
    out.f64_slice(rom.matrix())?;
    out.finish()
}

/// Reads an operator checkpoint written by [`write_operator`].
pub fn read_operator(path: &Path) -> Result<DelayRom> {
    let mut reader = BinReader::open(path, OPERATOR_MAGIC, "operator")?;
    reader.context = "operator extents";
    let n = reader.u32()? as usize;
    let d = reader.u32()? as usize;
    if n == 0 || d == 0 || n.saturating_mul(n).saturating_mul(d) > (1 << 28) {
        return Err(Error::Data(format!("operator extents n = {}, d = {} are corrupt", n, d)));
    }
    reader.context = "operator entries";
    let data = reader.f64_vec(n * n * d)?;
    reader.finish()?;
    DelayRom::from_rows(n, d, data)
}

// ───────────────────────── tests ─────────────────────────
