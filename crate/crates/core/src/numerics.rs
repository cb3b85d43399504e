//! Dense linear algebra and signal/statistics kernels shared by the rest of
//! the crate.
//!
//! Everything computes in 64-bit floats. All functions are pure and iterate
//! in a fixed order, so identical inputs give bit-identical outputs on the
//! same platform regardless of thread count in the caller.

// Triangular and offset access patterns read better as range loops than as
// iterator chains; keep the index notation throughout this file.
#![allow(clippy::needless_range_loop)]

use thiserror::Error;

/// Errors produced by the numeric kernels.
#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("damping must be positive, got {0}")]
    NonPositiveDamping(f64),
    #[error("matrix is not positive definite: pivot {pivot} has value {value}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("polyorder {polyorder} must be smaller than window {window}")]
    PolyorderTooLarge { window: usize, polyorder: usize },
    #[error("input of length {len} is shorter than window {window}")]
    InputTooShort { len: usize, window: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rank variance is zero, correlation is undefined")]
    ZeroRankVariance,
    #[error("k={k} is out of range for {dim} logits")]
    KOutOfRange { k: usize, dim: usize },
}

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Creates a zero-filled matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Creates the n-by-n identity.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer. Panics if the buffer length is not rows*cols.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must equal rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Borrows row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Matrix-vector product.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "vector length must equal cols");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Applies the exact inverse of (λI + g gᵀ) to `v` via the Sherman-Morrison
/// identity: (1/λ)[v − ((gᵀv)/(λ + ‖g‖²)) g].
pub fn sherman_morrison_apply(
    v: &[f64],
    g: &[f64],
    lambda: f64,
) -> Result<Vec<f64>, NumericsError> {
    if v.len() != g.len() {
        return Err(NumericsError::DimensionMismatch { expected: v.len(), got: g.len() });
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(NumericsError::NonPositiveDamping(lambda));
    }
    let gv = dot(g, v);
    let gg = dot(g, g);
    let scale = gv / (lambda + gg);
    Ok(v.iter().zip(g).map(|(vi, gi)| (vi - scale * gi) / lambda).collect())
}

/// Solves A x = b for symmetric positive definite A by Cholesky
/// factorization, followed by one step of iterative refinement so the
/// relative residual stays at working precision.
///
/// Only the lower triangle of A is read by the factorization; the refinement
/// matvec uses the full buffer, so callers should pass a fully populated
/// symmetric matrix.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NumericsError::DimensionMismatch { expected: n, got: a.cols() });
    }
    if b.len() != n {
        return Err(NumericsError::DimensionMismatch { expected: n, got: b.len() });
    }
    let l = cholesky_lower(a)?;
    let mut x = cholesky_solve(&l, b);
    // One refinement step: r = b - Ax, x += A⁻¹r.
    let ax = a.matvec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let dx = cholesky_solve(&l, &r);
    for i in 0..n {
        x[i] += dx[i];
    }
    Ok(x)
}

/// In-place lower Cholesky factor of the lower triangle of `a`.
fn cholesky_lower(a: &Matrix) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solves L Lᵀ x = b given the lower factor.
fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Savitzky-Golay smoothing: each interior point is replaced by the value at
/// the window center of a least-squares polynomial fit; the first and last
/// half-windows are replaced by evaluations of the polynomial fitted to the
/// first (respectively last) full window. For window=7, polyorder=3 the
/// interior weights are the classic (−2,3,6,7,6,3,−2)/21 kernel.
pub fn savitzky_golay(
    x: &[f64],
    window: usize,
    polyorder: usize,
) -> Result<Vec<f64>, NumericsError> {
    if window.is_multiple_of(2) {
        return Err(NumericsError::EvenWindow(window));
    }
    if polyorder >= window {
        return Err(NumericsError::PolyorderTooLarge { window, polyorder });
    }
    if x.len() < window {
        return Err(NumericsError::InputTooShort { len: x.len(), window });
    }
    let n = x.len();
    let half = window / 2;
    let proj = sg_projection(window, polyorder)?;

    let mut out = vec![0.0; n];
    // Interior: convolution with the t=0 evaluation row.
    let kernel = &proj[0];
    for i in half..n - half {
        out[i] = dot(kernel, &x[i - half..i + half + 1]);
    }
    // Left edge: polynomial fitted to the first window, evaluated at t=i-half.
    let c_left = fit_coeffs(&proj, &x[0..window]);
    for (i, o) in out.iter_mut().enumerate().take(half) {
        *o = poly_eval(&c_left, i as f64 - half as f64);
    }
    // Right edge: same with the last window, centered at n-1-half.
    let c_right = fit_coeffs(&proj, &x[n - window..n]);
    for i in n - half..n {
        out[i] = poly_eval(&c_right, (i + half + 1 - n) as f64);
    }
    Ok(out)
}

/// Rows m of the projection P = (VᵀV)⁻¹Vᵀ for the centered Vandermonde V,
/// so that P·y gives the fitted polynomial coefficients for a window y.
fn sg_projection(window: usize, polyorder: usize) -> Result<Vec<Vec<f64>>, NumericsError> {
    let half = (window / 2) as i64;
    let terms = polyorder + 1;
    // V[j][m] = t_j^m with t_j = j - half.
    let v: Vec<Vec<f64>> = (0..window as i64)
        .map(|j| (0..terms).map(|m| ((j - half) as f64).powi(m as i32)).collect())
        .collect();
    let mut normal = Matrix::zeros(terms, terms);
    for p in 0..terms {
        for q in 0..terms {
            let mut s = 0.0;
            for row in &v {
                s += row[p] * row[q];
            }
            normal.set(p, q, s);
        }
    }
    let mut proj = vec![vec![0.0; window]; terms];
    for j in 0..window {
        let col = solve_spd(&normal, &v[j])?;
        for m in 0..terms {
            proj[m][j] = col[m];
        }
    }
    Ok(proj)
}

fn fit_coeffs(proj: &[Vec<f64>], window: &[f64]) -> Vec<f64> {
    proj.iter().map(|row| dot(row, window)).collect()
}

fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * t + c;
    }
    acc
}

/// Spearman rank correlation: Pearson correlation of ranks, where tied
/// values receive the average of the ranks they span.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(NumericsError::TooFewSamples(a.len()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..ra.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(NumericsError::ZeroRankVariance);
    }
    // Single square root of the product: when both sides share a tie
    // structure (var_a == var_b) the ratio is exactly +-1 for perfectly
    // aligned or mirrored ranks.
    Ok(cov / (var_a * var_b).sqrt())
}

/// 1-based fractional ranks with ties averaged.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("rank input must not contain NaN"));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && x[order[end + 1]] == x[order[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = avg;
        }
        start = end + 1;
    }
    ranks
}

/// Softmax over all logits, then keeps only the k largest (ties broken by
/// lower index) and renormalizes them to sum to 1. Entries outside the top k
/// are exactly zero.
pub fn softmax_topk(logits: &[f64], k: usize) -> Result<Vec<f64>, NumericsError> {
    if k == 0 || k > logits.len() {
        return Err(NumericsError::KOutOfRange { k, dim: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable descending sort keeps lower indices first among equal logits.
    order.sort_by(|&i, &j| logits[j].partial_cmp(&logits[i]).expect("logits must not contain NaN"));
    let selected = &order[..k];
    let sel_sum: f64 = selected.iter().map(|&i| exps[i] / total).sum();
    let mut out = vec![0.0; logits.len()];
    for &i in selected {
        out[i] = exps[i] / total / sel_sum;
    }
    Ok(out)
}

/// Compensated (Kahan-Babuska) summation in the given order. The running
/// compensation keeps low-order bits that plain summation would drop, so
/// e.g. (1e16, 1, -1e16) sums to exactly 1.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
