//! Proper orthogonal decomposition: the linear compression baseline.
//!
//! Snapshots are mean-centered and decomposed by SVD; the top-k left
//! singular vectors of the centered field-by-time matrix become the
//! modes. Projection and reconstruction are plain matrix products, so
//! the POD coder slots into the same forecasting pipeline as the
//! autoencoder through [`LatentCoder`].

use std::path::Path;

use crate::binio::{BinReader, BinWriter};
use crate::data::LatitudeWeights;
use crate::error::{Error, Result};
use crate::linalg::{jacobi_svd, Mat};
use crate::metrics;
use crate::rom::LatentCoder;
use crate::tensor::Tensor;

const POD_MAGIC: &[u8] = b"ROMPOD1";

/// Off-diagonal convergence threshold for the SVD.
const SVD_TOL: f64 = 1e-12;

/// `sigma_k < ratio * sigma_1` flags the basis as rank-deficient.
const RANK_DEFICIENCY_RATIO: f64 = 1e-12;

// ───────────────────────── the basis ─────────────────────────

/// A truncated POD basis: mean field, orthonormal modes (stored as a
/// `D x k` matrix, `D = C*H*W`), and the retained singular values in
/// non-increasing order.
#[derive(Debug, Clone)]
pub struct PodBasis {
    shape: [usize; 3],
    mean: Vec<f64>,
    singular_values: Vec<f64>,
    modes: Mat,
}

impl PodBasis {
    fn validated(
        shape: [usize; 3],
        mean: Vec<f64>,
        singular_values: Vec<f64>,
        modes: Mat,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        let k = singular_values.len();
        if d == 0 || k == 0 {
            return Err(Error::Data("POD basis needs a non-empty field and k >= 1".into()));
        }
        if mean.len() != d || modes.rows != d || modes.cols != k {
            return Err(Error::shape(
                "pod_basis",
                format!(
                    "mean length {} and mode matrix {}x{} do not match field {} x {} modes",
                    mean.len(),
                    modes.rows,
                    modes.cols,
                    d,
                    k
                ),
            ));
        }
        let finite = mean.iter().all(|v| v.is_finite())
            && modes.data.iter().all(|v| v.is_finite())
            && singular_values.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical("POD basis contains non-finite values".into()));
        }
        for w in singular_values.windows(2) {
            if w[1] > w[0] {
                return Err(Error::Numerical("singular values are not sorted".into()));
            }
        }
        if singular_values.last().copied().unwrap_or(0.0) < 0.0 {
            return Err(Error::Numerical("negative singular value".into()));
        }
        // Orthonormality invariant: modes^T modes = I to 1e-10.
        for a in 0..k {
            for b in a..k {
                let mut dot = 0.0;
                for i in 0..d {
                    dot += modes.at(i, a) * modes.at(i, b);
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-10 {
                    return Err(Error::Numerical(format!(
                        "modes {} and {} are not orthonormal (inner product {})",
                        a, b, dot
                    )));
                }
            }
        }
        Ok(Self { shape, mean, singular_values, modes })
    }

    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    /// Flattened field dimension `C*H*W`.
    pub fn field_dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Mode `j` as a flattened field.
    pub fn mode(&self, j: usize) -> Vec<f64> {
        (0..self.field_dim()).map(|i| self.modes.at(i, j)).collect()
    }

    /// Fields per retained mode: `C*H*W / k`.
    pub fn compression_ratio(&self) -> f64 {
        self.field_dim() as f64 / self.k() as f64
    }

    /// True when the last retained singular value has collapsed
    /// relative to the first; further modes carry only noise.
    pub fn is_rank_deficient(&self) -> bool {
        let first = self.singular_values[0];
        let last = *self.singular_values.last().unwrap();
        last < RANK_DEFICIENCY_RATIO * first
    }

    /// The leading-`k` sub-basis. Subspaces are nested, so this equals
    /// a direct rank-k fit of the same snapshots; it lets one
    /// decomposition serve a whole mode-count sweep.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::Config(format!(
                "cannot keep {} of {} retained modes",
                k,
                self.k()
            )));
        }
        let modes = Mat::from_fn(self.modes.rows, k, |i, j| self.modes.at(i, j));
        Self::validated(self.shape, self.mean.clone(), self.singular_values[..k].to_vec(), modes)
    }

    /// Coefficients `modes^T (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.field_dim();
        if x.len() != d {
            return Err(Error::shape(
                "pod_project",
                format!("field length {} does not match basis dimension {}", x.len(), d),
            ));
        }
        let mut coeffs = vec![0.0; self.k()];
        for i in 0..d {
            let centered = x[i] - self.mean[i];
            if centered == 0.0 {
                continue;
            }
            let row = self.modes.row(i);
            for (c, m) in coeffs.iter_mut().zip(row) {
                *c += centered * m;
            }
        }
        Ok(coeffs)
    }

    /// Field `mean + modes * coeffs`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.k() {
            return Err(Error::shape(
                "pod_reconstruct",
                format!("{} coefficients for a rank-{} basis", coeffs.len(), self.k()),
            ));
        }
        let d = self.field_dim();
        let mut out = self.mean.clone();
        for i in 0..d {
            let row = self.modes.row(i);
            let mut acc = 0.0;
            for (m, c) in row.iter().zip(coeffs) {
                acc += m * c;
            }
            out[i] += acc;
        }
        Ok(out)
    }
}

// ───────────────────────── fitting ─────────────────────────

fn snapshot_matrix(snapshots: &Tensor) -> Result<(usize, [usize; 3])> {
    if snapshots.rank() != 4 {
        return Err(Error::shape(
            "fit_pod",
            format!("expected snapshots [M, C, H, W], got {:?}", snapshots.shape()),
        ));
    }
    let s = snapshots.shape();
    if s[0] < 2 {
        return Err(Error::Data("POD needs at least 2 snapshots".into()));
    }
    if !snapshots.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("snapshots contain non-finite values".into()));
    }
    Ok((s[0], [s[1], s[2], s[3]]))
}

/// Mean and full thin SVD of the centered snapshot matrix. The returned
/// `v` holds the candidate modes as columns (`D x min(M, D)`); `s` is
/// the full singular spectrum.
fn centered_svd(snapshots: &Tensor) -> Result<(Vec<f64>, Mat, Vec<f64>, usize, [usize; 3])> {
    let (m, shape) = snapshot_matrix(snapshots)?;
    let d: usize = shape.iter().product();
    let mut mean = vec![0.0; d];
    for row in snapshots.data().chunks(d) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let centered = Mat::from_fn(m, d, |i, j| snapshots.data()[i * d + j] - mean[j]);
    // Rows are snapshots, so the POD modes are the right singular
    // vectors of `centered`, returned by the SVD as columns of v.
    let (_, s, v) = jacobi_svd(&centered, SVD_TOL);
    Ok((mean, v, s, m, shape))
}

fn truncate(
    mean: Vec<f64>,
    v: &Mat,
    s: &[f64],
    shape: [usize; 3],
    k: usize,
) -> Result<PodBasis> {
    if k == 0 || k > s.len() {
        return Err(Error::Config(format!(
            "mode count k = {} must lie in 1..={}",
            k,
            s.len()
        )));
    }
    if s[k - 1] == 0.0 {
        return Err(Error::Numerical(format!(
            "requested {} modes but the centered snapshots have lower rank",
            k
        )));
    }
    let modes = Mat::from_fn(v.rows, k, |i, j| v.at(i, j));
    PodBasis::validated(shape, mean, s[..k].to_vec(), modes)
}

/// Fits a rank-`k` POD basis to `[M, C, H, W]` snapshots: mean-center,
/// SVD, keep the k most energetic modes.
pub fn fit_pod(snapshots: &Tensor, k: usize) -> Result<PodBasis> {
    let (mean, v, s, _, shape) = centered_svd(snapshots)?;
    truncate(mean, &v, &s, shape, k)
}

// ───────────────────────── evaluation ─────────────────────────

/// Latitude-weighted RMSE between the snapshots and their rank-k
/// reconstructions.
pub fn reconstruction_lw_rmse(
    basis: &PodBasis,
    snapshots: &Tensor,
    weights: &LatitudeWeights,
) -> Result<f64> {
    let recon = reconstruct_stack(basis, snapshots)?;
    metrics::lw_rmse(snapshots, &recon, weights)
}

fn reconstruct_stack(basis: &PodBasis, snapshots: &Tensor) -> Result<Tensor> {
    let (_, shape) = snapshot_matrix(snapshots)?;
    if shape != basis.shape() {
        return Err(Error::shape(
            "pod_reconstruct",
            format!("snapshot fields {:?} do not match basis fields {:?}", shape, basis.shape()),
        ));
    }
    let d = basis.field_dim();
    let mut data = Vec::with_capacity(snapshots.data().len());
    for row in snapshots.data().chunks(d) {
        let coeffs = basis.project(row)?;
        data.extend_from_slice(&basis.reconstruct(&coeffs)?);
    }
    Tensor::new(snapshots.shape().to_vec(), data)
}

/// One row of a mode-count sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PodSweepPoint {
    pub k: usize,
    pub lw_rmse: f64,
}

/// Reconstruction error as a function of mode count, on the snapshots
/// the basis is fitted to. The SVD runs once; each k is a truncation of
/// the same decomposition, so the rows match individually fitted bases
/// exactly. On the fitting data the error is non-increasing in k.
pub fn pod_sweep(
    snapshots: &Tensor,
    k_list: &[usize],
    weights: &LatitudeWeights,
) -> Result<Vec<PodSweepPoint>> {
    if k_list.is_empty() {
        return Err(Error::Config("mode sweep needs at least one k".into()));
    }
    for pair in k_list.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config(format!(
                "mode sweep list must be strictly ascending, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    let (mean, v, s, _, shape) = centered_svd(snapshots)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let basis = truncate(mean.clone(), &v, &s, shape, k)?;
        rows.push(PodSweepPoint { k, lw_rmse: reconstruction_lw_rmse(&basis, snapshots, weights)? });
    }
    Ok(rows)
}

// ───────────────────────── the coder interface ─────────────────────────

impl LatentCoder for PodBasis {
    fn latent_dim(&self) -> usize {
        self.k()
    }

    fn field_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn encode_batch(&self, fields: &Tensor) -> Result<Tensor> {
        let [c, h, w] = self.shape;
        if fields.rank() != 4 || fields.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                "pod_encode",
                format!("expected [B, {}, {}, {}], got {:?}", c, h, w, fields.shape()),
            ));
        }
        let d = self.field_dim();
        let b = fields.shape()[0];
        let mut data = Vec::with_capacity(b * self.k());
        for row in fields.data().chunks(d) {
            data.extend_from_slice(&self.project(row)?);
        }
        Tensor::new(&[b, self.k()], data)
    }

    fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        if latents.rank() != 2 || latents.shape()[1] != self.k() {
            return Err(Error::shape(
                "pod_decode",
                format!("expected [B, {}], got {:?}", self.k(), latents.shape()),
            ));
        }
        let [c, h, w] = self.shape;
        let b = latents.shape()[0];
        let mut data = Vec::with_capacity(b * self.field_dim());
        for row in latents.data().chunks(self.k()) {
            data.extend_from_slice(&self.reconstruct(row)?);
        }
        Tensor::new(&[b, c, h, w], data)
    }
}

// ───────────────────────── checkpoint io ─────────────────────────

/// Writes a basis checkpoint: magic "ROMPOD1", u32 extents C, H, W, k,
/// then mean, singular values, and modes (row-major `D x k`) as 64-bit
/// little-endian floats.
pub fn write_pod_basis(path: &Path, basis: &PodBasis) -> Result<()> {
    let mut out = BinWriter::create(path, POD_MAGIC)?;
    for e in basis.shape() {
        out.u32(e)?;
    }
    out.u32(basis.k())?;
    out.f64_slice(basis.mean())?;
    out.f64_slice(basis.singular_values())?;
    out.f64_slice(&basis.modes.data)?;
    out.finish()
}

/// Reads a basis checkpoint written by [`write_pod_basis`].
pub fn read_pod_basis(path: &Path) -> Result<PodBasis> {
    let mut reader = BinReader::open(path, POD_MAGIC, "POD basis")?;
    reader.context = "basis extents";
    let c = reader.u32()? as usize;
    let h = reader.u32()? as usize;
    let w = reader.u32()? as usize;
    let k = reader.u32()? as usize;
    let d = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v > 0 && k > 0 && v.saturating_mul(k) <= (1 << 28))
        .ok_or_else(|| {
            Error::Data(format!("basis extents {}x{}x{} with k = {} are corrupt", c, h, w, k))
        })?;
    reader.context = "mean field";
    let mean = reader.f64_vec(d)?;
    reader.context = "singular values";
    let sv = reader.f64_vec(k)?;
    reader.context = "modes";
    let modes = Mat { rows: d, cols: k, data: reader.f64_vec(d * k)? };
    reader.finish()?;
    PodBasis::validated([c, h, w], mean, sv, modes)
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::latitude_weights;
    use crate::testsupport::rng;
    use rand::Rng;

    fn lat_grid(h: usize) -> Vec<f64> {
        (0..h).map(|i| -70.0 + 140.0 * i as f64 / (h - 1) as f64).collect()
    }

    fn random_snapshots(m: usize, shape: [usize; 3], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(&[m, shape[0], shape[1], shape[2]], |_| r.gen_range(-1.0..1.0))
    }

    /// Eigenvalues of a symmetric matrix by classical two-sided Jacobi
    /// rotations: an independent algorithm from the one-sided SVD under
    /// test. Returns eigenvalues sorted descending.
    fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    off = off.max(a[p][q].abs());
                }
            }
            if off < 1e-13 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let aip = a[i][p];
                        let aiq = a[i][q];
                        a[i][p] = c * aip - s * aiq;
                        a[i][q] = s * aip + c * aiq;
                    }
                    for i in 0..n {
                        let api = a[p][i];
                        let aqi = a[q][i];
                        a[p][i] = c * api - s * aqi;
                        a[q][i] = s * api + c * aqi;
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eig
    }

    fn centered_rows(snapshots: &Tensor) -> (usize, usize, Vec<f64>) {
        let m = snapshots.shape()[0];
        let d = snapshots.data().len() / m;
        let mut mean = vec![0.0; d];
        for row in snapshots.data().chunks(d) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v / m as f64;
            }
        }
        let mut rows = Vec::with_capacity(m * d);
        for row in snapshots.data().chunks(d) {
            for (v, mu) in row.iter().zip(&mean) {
                rows.push(v - mu);
            }
        }
        (m, d, rows)
    }

    #[test]
    fn exact_rank_snapshots_reconstruct_to_machine_precision() {
        // Rank-3 data: M x r coefficients times r x D factor fields.
        let (m, r, shape) = (12usize, 3usize, [1usize, 10, 20]);
        let d: usize = shape.iter().product();
        let mut gen = rng(60);
        let coeff: Vec<f64> = (0..m * r).map(|_| gen.gen_range(-1.0..1.0)).collect();
        let factor: Vec<f64> = (0..r * d).map(|_| gen.gen_range(-1.0..1.0)).collect();
        let snaps = Tensor::from_fn(&[m, shape[0], shape[1], shape[2]], |idx| {
            let (i, j) = (idx / d, idx % d);
            (0..r).map(|l| coeff[i * r + l] * factor[l * d + j]).sum()
        });
        let basis = fit_pod(&snaps, r).unwrap();
        let mut worst = 0.0f64;
        for row in snaps.data().chunks(d) {
            let back = basis.reconstruct(&basis.project(row).unwrap()).unwrap();
            for (a, b) in row.iter().zip(&back) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-10, "reconstruction error {}", worst);
    }

    #[test]
    fn antipodal_pair_yields_zero_mean_and_the_shared_direction() {
        let v = [1.0, -2.0, 0.5, 3.0, -0.25, 1.5];
        let data: Vec<f64> = v.iter().copied().chain(v.iter().map(|x| -x)).collect();
        let snaps = Tensor::new(&[2, 1, 2, 3], data).unwrap();
        let basis = fit_pod(&snaps, 1).unwrap();
        assert!(basis.mean().iter().all(|&m| m.abs() <= 1e-14));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = basis.mode(0).iter().zip(&v).map(|(a, b)| a * b / norm).sum();
        assert!((dot.abs() - 1.0).abs() <= 1e-10, "mode alignment {}", dot);
    }

    #[test]
    fn k_zero_and_oversized_k_are_rejected() {
        let snaps = random_snapshots(6, [1, 3, 4], 61);
        assert!(fit_pod(&snaps, 0).is_err());
        assert!(fit_pod(&snaps, 7).is_err());
        assert!(fit_pod(&snaps, 6).is_ok());
    }

    #[test]
    fn modes_are_orthonormal_and_energies_sorted() {
        let snaps = random_snapshots(15, [2, 4, 5], 62);
        let basis = fit_pod(&snaps, 8).unwrap();
        let d = basis.field_dim();
        for a in 0..8 {
            for b in a..8 {
                let dot: f64 = (0..d).map(|i| basis.modes.at(i, a) * basis.modes.at(i, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-10, "modes {} {}: {}", a, b, dot);
            }
        }
        for w in basis.singular_values().windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(!basis.is_rank_deficient());
    }

    /// Discarded-energy identity against an independent oracle: the
    /// direct reconstruction residual must equal sqrt of the eigenvalue
    /// tail of the Gram matrix, computed by a two-sided Jacobi
    /// eigensolver that shares no code with the SVD.
    #[test]
    fn discarded_energy_matches_the_full_svd_oracle() {
        let (m, shape) = (50usize, [1usize, 10, 20]);
        let snaps = random_snapshots(m, shape, 63);
        let (m, d, rows) = centered_rows(&snaps);

        let mut gram = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                gram[i][j] = (0..d).map(|l| rows[i * d + l] * rows[j * d + l]).sum();
            }
        }
        let eig = symmetric_eigenvalues(gram);

        // k stops at 40: beyond the centered rank (M-1 = 49) the tail is
        // exactly zero and both sides degenerate to rounding noise.
        for k in [1usize, 5, 20, 40] {
            let basis = fit_pod(&snaps, k).unwrap();
            let mut residual_sq = 0.0;
            for row in snaps.data().chunks(d) {
                let back = basis.reconstruct(&basis.project(row).unwrap()).unwrap();
                for (a, b) in row.iter().zip(&back) {
                    residual_sq += (a - b) * (a - b);
                }
            }
            let expected: f64 = eig[k..].iter().map(|&l| l.max(0.0)).sum::<f64>().sqrt();
            let got = residual_sq.sqrt();
            assert!(
                (got - expected).abs() <= 1e-8 * expected.max(1e-12),
                "k = {}: residual {} vs eigenvalue tail {}",
                k,
                got,
                expected
            );
        }
    }

    #[test]
    fn total_energy_equals_the_centered_frobenius_norm() {
        let snaps = random_snapshots(14, [1, 5, 6], 64);
        let (_, _, rows) = centered_rows(&snaps);
        let frob_sq: f64 = rows.iter().map(|v| v * v).sum();
        let basis = fit_pod(&snaps, 14.min(30)).unwrap();
        // k = M keeps every singular value (M < D here), so the retained
        // spectrum is the whole spectrum.
        let energy: f64 = basis.singular_values().iter().map(|s| s * s).sum();
        assert!(
            (energy - frob_sq).abs() <= 1e-8 * frob_sq,
            "{} vs {}",
            energy,
            frob_sq
        );
    }

    #[test]
    fn projecting_the_mean_gives_zero_coefficients() {
        let snaps = random_snapshots(10, [1, 4, 4], 65);
        let basis = fit_pod(&snaps, 4).unwrap();
        let coeffs = basis.project(&basis.mean().to_vec()).unwrap();
        assert!(coeffs.iter().all(|&c| c.abs() <= 1e-12));
    }

    #[test]
    fn projecting_a_scaled_mode_isolates_its_coefficient() {
        let snaps = random_snapshots(10, [1, 4, 4], 66);
        let basis = fit_pod(&snaps, 4).unwrap();
        let s1 = basis.singular_values()[0];
        let x: Vec<f64> = basis
            .mean()
            .iter()
            .zip(basis.mode(0))
            .map(|(m, u)| m + s1 * u)
            .collect();
        let coeffs = basis.project(&x).unwrap();
        assert!((coeffs[0] - s1).abs() <= 1e-10 * s1);
        assert!(coeffs[1..].iter().all(|&c| c.abs() <= 1e-10 * s1));
    }

    #[test]
    fn residual_is_orthogonal_to_every_mode() {
        let snaps = random_snapshots(12, [2, 3, 4], 67);
        let basis = fit_pod(&snaps, 5).unwrap();
        let mut r = rng(68);
        let d = basis.field_dim();
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let back = basis.reconstruct(&basis.project(&x).unwrap()).unwrap();
        let residual: Vec<f64> = x.iter().zip(&back).map(|(a, b)| a - b).collect();
        for j in 0..basis.k() {
            let dot: f64 = residual.iter().zip(basis.mode(j)).map(|(a, b)| a * b).sum();
            assert!(dot.abs() <= 1e-10, "mode {}: inner product {}", j, dot);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let snaps = random_snapshots(12, [2, 3, 4], 69);
        let basis = fit_pod(&snaps, 5).unwrap();
        let mut r = rng(70);
        let x: Vec<f64> = (0..basis.field_dim()).map(|_| r.gen_range(-2.0..2.0)).collect();
        let once = basis.project(&x).unwrap();
        let again = basis.project(&basis.reconstruct(&once).unwrap()).unwrap();
        for (a, b) in once.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_coefficients_reconstruct_the_mean() {
        let snaps = random_snapshots(8, [1, 3, 3], 71);
        let basis = fit_pod(&snaps, 3).unwrap();
        let out = basis.reconstruct(&vec![0.0; 3]).unwrap();
        assert_eq!(out, basis.mean());
    }

    #[test]
    fn full_rank_sweep_hits_machine_zero_and_decreases_monotonically() {
        let (m, shape) = (10usize, [1usize, 4, 5]);
        let snaps = random_snapshots(m, shape, 72);
        let weights = latitude_weights(&lat_grid(4)).unwrap();
        let ks: Vec<usize> = (1..=m - 1).collect();
        let rows = pod_sweep(&snaps, &ks, &weights).unwrap();
        assert_eq!(rows.len(), ks.len());
        for pair in rows.windows(2) {
            assert!(
                pair[1].lw_rmse <= pair[0].lw_rmse,
                "sweep not monotone: {:?} then {:?}",
                pair[0],
                pair[1]
            );
        }
        // Centering drops one degree of freedom, so k = M-1 is full rank.
        assert!(rows.last().unwrap().lw_rmse <= 1e-10);
    }

    #[test]
    fn sweep_rows_equal_individually_fitted_bases() {
        let snaps = random_snapshots(12, [2, 4, 3], 73);
        let weights = latitude_weights(&lat_grid(4)).unwrap();
        let ks = [1usize, 3, 6, 9];
        let rows = pod_sweep(&snaps, &ks, &weights).unwrap();
        for row in &rows {
            let basis = fit_pod(&snaps, row.k).unwrap();
            let direct = reconstruction_lw_rmse(&basis, &snaps, &weights).unwrap();
            assert_eq!(direct.to_bits(), row.lw_rmse.to_bits(), "k = {}", row.k);
        }
    }

    #[test]
    fn sweep_rejects_unsorted_lists() {
        let snaps = random_snapshots(6, [1, 3, 3], 74);
        let weights = latitude_weights(&lat_grid(3)).unwrap();
        assert!(pod_sweep(&snaps, &[3, 2], &weights).is_err());
        assert!(pod_sweep(&snaps, &[2, 2], &weights).is_err());
        assert!(pod_sweep(&snaps, &[], &weights).is_err());
    }

    #[test]
    fn truncated_basis_equals_a_direct_smaller_fit() {
        let snaps = random_snapshots(10, [2, 3, 4], 77);
        let full = fit_pod(&snaps, 8).unwrap();
        for k in [1usize, 3, 8] {
            let cut = full.truncated(k).unwrap();
            let direct = fit_pod(&snaps, k).unwrap();
            assert_eq!(cut.k(), k);
            assert_eq!(cut.mean(), direct.mean());
            assert_eq!(cut.singular_values(), direct.singular_values());
            for j in 0..k {
                assert_eq!(cut.mode(j), direct.mode(j), "mode {} at k = {}", j, k);
            }
        }
        assert!(full.truncated(0).is_err());
        assert!(full.truncated(9).is_err());
    }

    #[test]
    fn near_rank_deficient_fits_are_flagged() {
        // Rank-1 snapshots plus centering: every direction beyond the
        // first carries only rounding noise.
        let d_shape = [1usize, 3, 4];
        let d: usize = d_shape.iter().product();
        let mut r = rng(75);
        let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let snaps = Tensor::from_fn(&[6, 1, 3, 4], |idx| {
            let (i, j) = (idx / d, idx % d);
            (i as f64 - 2.5) * v[j]
        });
        let basis = fit_pod(&snaps, 2).unwrap();
        assert!(basis.is_rank_deficient());
        let healthy = fit_pod(&random_snapshots(8, d_shape, 76), 3).unwrap();
        assert!(!healthy.is_rank_deficient());
    }

    #[test]
    fn coder_batch_round_trip_matches_per_field_calls() {
        let snaps = random_snapshots(9, [2, 3, 4], 77);
        let basis = fit_pod(&snaps, 4).unwrap();
        let latents = basis.encode_batch(&snaps).unwrap();
        assert_eq!(latents.shape(), &[9, 4]);
        let decoded = basis.decode_batch(&latents).unwrap();
        assert_eq!(decoded.shape(), snaps.shape());
        let d = basis.field_dim();
        for (i, row) in snaps.data().chunks(d).enumerate() {
            let coeffs = basis.project(row).unwrap();
            assert_eq!(&latents.data()[i * 4..(i + 1) * 4], &coeffs[..]);
            let back = basis.reconstruct(&coeffs).unwrap();
            assert_eq!(&decoded.data()[i * d..(i + 1) * d], &back[..]);
        }
        assert_eq!(basis.latent_dim(), 4);
        assert_eq!(basis.field_shape(), [2, 3, 4]);
    }

    #[test]
    fn basis_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.pod");
        let snaps = random_snapshots(10, [2, 3, 4], 78);
        let basis = fit_pod(&snaps, 5).unwrap();
        write_pod_basis(&path, &basis).unwrap();
        let back = read_pod_basis(&path).unwrap();
        assert_eq!(back.shape(), basis.shape());
        assert_eq!(back.k(), basis.k());
        let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.mean()), bits(basis.mean()));
        assert_eq!(bits(back.singular_values()), bits(basis.singular_values()));
        assert_eq!(bits(&back.modes.data), bits(&basis.modes.data));

        let path2 = dir.path().join("again.pod");
        write_pod_basis(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_basis_files_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.pod");
        let snaps = random_snapshots(6, [1, 3, 3], 79);
        write_pod_basis(&path, &fit_pod(&snaps, 2).unwrap()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[2] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(read_pod_basis(&path).unwrap_err().to_string().contains("bad magic"));

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(read_pod_basis(&path).unwrap_err().to_string().contains("truncated"));

        // Corrupting the k extent makes the payload size wrong.
        let mut bad_k = good.clone();
        bad_k[7 + 12] = 200;
        std::fs::write(&path, &bad_k).unwrap();
        assert!(read_pod_basis(&path).is_err());
    }

    #[test]
    fn compression_ratio_is_fields_per_mode() {
        let snaps = random_snapshots(8, [2, 4, 5], 80);
        let basis = fit_pod(&snaps, 5).unwrap();
        assert!((basis.compression_ratio() - 8.0).abs() <= 1e-15);
    }
}
