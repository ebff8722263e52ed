//! Small dense linear algebra kit: row-major matrices, one-sided Jacobi SVD,
//! Householder QR with column pivoting, and Cholesky. Everything runs in a
//! fixed accumulation order, so results are deterministic.

use crate::error::{Error, Result};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[cfg(test)]
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    /// Matrix product with rows computed independently (parallel when large).
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul extent mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        let a = &self.data;
        let b = &other.data;
        let work = m * n * k;
        let fill = |i: usize, row: &mut [f64]| {
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (slot, &bv) in row.iter_mut().zip(brow) {
                    *slot += aik * bv;
                }
            }
        };
        if work >= 1 << 16 {
            out.data
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| fill(i, row));
        } else {
            for (i, row) in out.data.chunks_mut(n).enumerate() {
                fill(i, row);
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec extent mismatch");
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

}

/// Thin SVD `A = U diag(s) V^T` by one-sided Jacobi rotations on the columns
/// of `A`. Returns min(rows, cols) singular triplets sorted by descending
/// singular value, with a deterministic sign convention (the entry of largest
/// magnitude in each left vector is positive).
///
/// `tol` is the relative off-diagonal threshold for convergence; sweeps stop
/// once every column pair satisfies |<a_p, a_q>| <= tol * |a_p| |a_q|.
pub(crate) fn jacobi_svd(a: &Mat, tol: f64) -> (Mat, Vec<f64>, Mat) {
    if a.rows < a.cols {
        // Orthogonalize the shorter side: decompose the transpose and swap
        // the roles of U and V.
        let (u, s, v) = jacobi_svd(&a.transpose(), tol);
        return (v, s, u);
    }
    let (m, n) = (a.rows, a.cols);
    // Column-major working copy: rotations touch contiguous memory.
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += b[p][i] * b[p][i];
                    beta += b[q][i] * b[q][i];
                    gamma += b[p][i] * b[q][i];
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = b
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u = Mat::zeros(m, n);
    let mut vm = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (out_j, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        // Sign convention: largest-magnitude entry of the left vector is
        // positive. Zero columns keep an all-zero left vector.
        let mut flip = 1.0;
        if sigma > 0.0 {
            let mut best = 0.0f64;
            for i in 0..m {
                if b[j][i].abs() > best.abs() {
                    best = b[j][i];
                }
            }
            if best < 0.0 {
                flip = -1.0;
            }
            for i in 0..m {
                u.set(i, out_j, flip * b[j][i] / sigma);
            }
        }
        for i in 0..n {
            vm.set(i, out_j, flip * v[j][i]);
        }
    }
    (u, s, vm)
}

/// Householder QR with column pivoting. Returns the factors packed as
/// (reflectors, taus, pivot permutation, detected rank). `threshold` is the
/// relative diagonal cutoff for rank detection.
struct PivotedQr {
    qr: Mat,
    taus: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
}

fn pivoted_qr(a: &Mat, threshold: f64) -> PivotedQr {
    let (m, n) = (a.rows, a.cols);
    let mut qr = a.clone();
    let steps = m.min(n);
    let mut taus = vec![0.0; steps];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut col_norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| qr.at(i, j) * qr.at(i, j)).sum::<f64>())
        .collect();

    let mut rank = 0;
    for k in 0..steps {
        // Pivot: bring the column with the largest remaining norm to front.
        // Norms are recomputed exactly to keep the choice deterministic and
        // robust against downdating drift.
        for j in k..n {
            col_norms[j] = (k..m).map(|i| qr.at(i, j) * qr.at(i, j)).sum::<f64>();
        }
        let (piv, _) = (k..n)
            .map(|j| (j, col_norms[j]))
            .fold((k, -1.0), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        if piv != k {
            for i in 0..m {
                let t = qr.at(i, k);
                qr.set(i, k, qr.at(i, piv));
                qr.set(i, piv, t);
            }
            perm.swap(k, piv);
            col_norms.swap(k, piv);
        }

        let norm_x: f64 = (k..m).map(|i| qr.at(i, k) * qr.at(i, k)).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            taus[k] = 0.0;
            continue;
        }
        let alpha = if qr.at(k, k) >= 0.0 { -norm_x } else { norm_x };
        let v0 = qr.at(k, k) - alpha;
        // Householder vector stored below the diagonal, scaled so v[k] = 1.
        let mut vnorm2 = v0 * v0;
        for i in (k + 1)..m {
            vnorm2 += qr.at(i, k) * qr.at(i, k);
        }
        if vnorm2 == 0.0 {
            taus[k] = 0.0;
            qr.set(k, k, alpha);
            continue;
        }
        let tau = 2.0 * v0 * v0 / vnorm2;
        for i in (k + 1)..m {
            let scaled = qr.at(i, k) / v0;
            qr.set(i, k, scaled);
        }
        taus[k] = tau;
        qr.set(k, k, alpha);

        // Apply the reflector to the trailing columns.
        for j in (k + 1)..n {
            let mut dot = qr.at(k, j);
            for i in (k + 1)..m {
                dot += qr.at(i, k) * qr.at(i, j);
            }
            let scale = tau * dot;
            let d = qr.at(k, j) - scale;
            qr.set(k, j, d);
            for i in (k + 1)..m {
                let d = qr.at(i, j) - scale * qr.at(i, k);
                qr.set(i, j, d);
            }
        }
    }

    let r00 = qr.at(0, 0).abs();
    for k in 0..steps {
        if qr.at(k, k).abs() > threshold * r00 && r00 > 0.0 {
            rank = k + 1;
        }
    }
    PivotedQr { qr, taus, perm, rank }
}

/// Applies Q^T (from packed reflectors) to a dense right-hand side.
/// Right-hand-side columns are independent, so they run in parallel without
/// changing any accumulation order.
fn apply_qt(f: &PivotedQr, b: &Mat) -> Mat {
    let m = f.qr.rows;
    let steps = f.taus.len();
    let mut cols: Vec<Vec<f64>> = (0..b.cols)
        .map(|j| (0..m).map(|i| b.at(i, j)).collect())
        .collect();
    let qr = &f.qr;
    let taus = &f.taus;
    let run = |col: &mut Vec<f64>| {
        for k in 0..steps {
            let tau = taus[k];
            if tau == 0.0 {
                continue;
            }
            let mut dot = col[k];
            for i in (k + 1)..m {
                dot += qr.at(i, k) * col[i];
            }
            let scale = tau * dot;
            col[k] -= scale;
            for i in (k + 1)..m {
                col[i] -= scale * qr.at(i, k);
            }
        }
    };
    if m * b.cols >= 1 << 16 {
        cols.par_iter_mut().for_each(run);
    } else {
        cols.iter_mut().for_each(run);
    }
    Mat::from_fn(m, b.cols, |i, j| cols[j][i])
}

/// Minimum-norm least-squares solve of `A X = B` (Frobenius objective).
///
/// Full-rank systems go through Householder QR with column pivoting; when
/// the detected rank falls short (including underdetermined shapes), the
/// solve falls back to the SVD pseudoinverse, which breaks ties by minimum
/// norm.
pub(crate) fn lstsq(a: &Mat, b: &Mat, rank_threshold: f64) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "lstsq",
            format!("A has {} rows but B has {}", a.rows, b.rows),
        ));
    }
    if a.rows >= a.cols {
        let f = pivoted_qr(a, rank_threshold);
        if f.rank == a.cols {
            let qtb = apply_qt(&f, b);
            // Back substitution on the R block, then undo the pivoting.
            let n = a.cols;
            let mut x = Mat::zeros(n, b.cols);
            for j in 0..b.cols {
                for i in (0..n).rev() {
                    let mut acc = qtb.at(i, j);
                    for l in (i + 1)..n {
                        acc -= f.qr.at(i, l) * x.at(l, j);
                    }
                    x.set(i, j, acc / f.qr.at(i, i));
                }
            }
            let mut out = Mat::zeros(n, b.cols);
            for i in 0..n {
                for j in 0..b.cols {
                    out.set(f.perm[i], j, x.at(i, j));
                }
            }
            return Ok(out);
        }
    }
    pinv_solve(a, b, rank_threshold)
}

/// SVD-based pseudoinverse solve (minimum-norm in rank-deficient problems).
fn pinv_solve(a: &Mat, b: &Mat, rank_threshold: f64) -> Result<Mat> {
    let (u, s, v) = jacobi_svd(a, 1e-13);
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(Mat::zeros(a.cols, b.cols));
    }
    // X = V diag(1/s) U^T B over the retained spectrum.
    let utb = u.transpose().matmul(b);
    let mut scaled = Mat::zeros(s.len(), b.cols);
    for (i, &sv) in s.iter().enumerate() {
        if sv > rank_threshold * smax {
            for j in 0..b.cols {
                scaled.set(i, j, utb.at(i, j) / sv);
            }
        }
    }
    Ok(v.matmul(&scaled))
}

/// Cholesky solve of the symmetric positive-definite system `G X = B`.
pub(crate) fn cholesky_solve(g: &Mat, b: &Mat) -> Result<Mat> {
    if g.rows != g.cols || g.rows != b.rows {
        return Err(Error::shape(
            "cholesky",
            format!("G is {}x{}, B has {} rows", g.rows, g.cols, b.rows),
        ));
    }
    let n = g.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = g.at(i, j);
            for k in 0..j {
                acc -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::Numerical(
                        "matrix is not positive definite in the Cholesky solve".to_string(),
                    ));
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.at(j, j));
            }
        }
    }
    // Forward then backward substitution per right-hand-side column.
    let mut x = Mat::zeros(n, b.cols);
    for j in 0..b.cols {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b.at(i, j);
            for k in 0..i {
                acc -= l.at(i, k) * y[k];
            }
            y[i] = acc / l.at(i, i);
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= l.at(k, i) * x.at(k, j);
            }
            x.set(i, j, acc / l.at(i, i));
        }
    }
    Ok(x)
}
