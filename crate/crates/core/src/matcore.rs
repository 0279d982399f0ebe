//! Dense symmetric-matrix numerics.
//!
//! Everything here is small-scale dense linear algebra (d up to about a
//! thousand): Cholesky factorization, log-determinants, spectral norms by
//! power iteration, and traces of products of symmetric matrices. Values are
//! immutable once built and every routine is a pure function of its inputs.

use std::fmt;

use thiserror::Error;

/// Largest asymmetry `|m_ij - m_ji|` the symmetric constructor will absorb.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatError {
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("expected {expected} entries for a square matrix, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {gap:e}")]
    Asymmetric { row: usize, col: usize, gap: f64 },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("power iteration did not converge within {iterations} iterations (last relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("exponent must be at least 1")]
    ZeroExponent,
}

pub type Result<T> = std::result::Result<T, MatError>;

/// Dot product with four independent accumulators.
///
/// The summation order is fixed, so results are reproducible bit for bit.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major product of two `dim x dim` matrices.
fn matmul_into(dim: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..dim {
        let out_row = &mut out[i * dim..(i + 1) * dim];
        for k in 0..dim {
            let aik = a[i * dim + k];
            if aik != 0.0 {
                axpy(aik, &b[k * dim..(k + 1) * dim], out_row);
            }
        }
    }
}

/// Dense real symmetric matrix in row-major storage.
///
/// Construction guarantees `m[i][j] == m[j][i]` bit for bit.
#[derive(Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl fmt::Debug for SymmetricMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymmetricMatrix")
            .field("dim", &self.dim)
            .field("data", &self.data)
            .finish()
    }
}

impl SymmetricMatrix {
    /// Builds a matrix from `dim * dim` row-major entries.
    ///
    /// Entries whose mirror differs by at most [`SYMMETRY_TOLERANCE`] (scaled by
    /// the entry magnitude when that exceeds one) are replaced by the average
    /// of the pair; anything larger is rejected.
    pub fn from_row_major(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(MatError::EmptyDimension);
        }
        if entries.len() != dim * dim {
            return Err(MatError::BadLength {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        let mut data = entries;
        for i in 0..dim {
            for j in 0..dim {
                if !data[i * dim + j].is_finite() {
                    return Err(MatError::NonFinite { row: i, col: j });
                }
            }
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                if a != b {
                    let gap = (a - b).abs();
                    let scale = a.abs().max(b.abs()).max(1.0);
                    if gap > SYMMETRY_TOLERANCE * scale {
                        return Err(MatError::Asymmetric { row: i, col: j, gap });
                    }
                    let avg = 0.5 * (a + b);
                    data[i * dim + j] = avg;
                    data[j * dim + i] = avg;
                }
            }
        }
        Ok(Self { dim, data })
    }

    /// Builds a matrix from its upper triangle; `f(i, j)` is called for `i <= j`.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if dim == 0 {
            return Err(MatError::EmptyDimension);
        }
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                if !v.is_finite() {
                    return Err(MatError::NonFinite { row: i, col: j });
                }
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be at least 1");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut m = Self::zeros(dim);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * dim + i] = v;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// `alpha * I + beta * self`.
    pub fn shifted_scaled(&self, alpha: f64, beta: f64) -> Self {
        let dim = self.dim;
        let mut data: Vec<f64> = self.data.iter().map(|v| beta * v).collect();
        for i in 0..dim {
            data[i * dim + i] += alpha;
        }
        Self { dim, data }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.shifted_scaled(0.0, factor)
    }

    /// Weighted sum `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        check_dims(self.dim, other.dim)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self {
            dim: self.dim,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim, other.dim)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    /// Product `self * other` as a general square matrix.
    pub fn mul(&self, other: &Self) -> Result<SquareMatrix> {
        check_dims(self.dim, other.dim)?;
        let mut out = vec![0.0; self.dim * self.dim];
        matmul_into(self.dim, &self.data, &other.data, &mut out);
        Ok(SquareMatrix {
            dim: self.dim,
            data: out,
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    /// Full eigenvalue list by cyclic Jacobi rotations.
    ///
    /// Cost is a few sweeps of O(d^3); meant for reference checks and
    /// diagnostics at modest dimension, not for hot loops.
    pub fn spectrum(&self) -> Spectrum {
        let mut eig = jacobi_eigenvalues(self.dim, self.data.clone());
        eig.sort_by(|a, b| b.total_cmp(a));
        Spectrum { eigenvalues: eig }
    }
}

/// Eigenvalues of a symmetric matrix in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
}

impl Spectrum {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> f64 {
        *self.eigenvalues.last().expect("spectrum is never empty")
    }

    pub fn max_abs(&self) -> f64 {
        self.max().abs().max(self.min().abs())
    }
}

fn jacobi_eigenvalues(n: usize, mut a: Vec<f64>) -> Vec<f64> {
    let total: f64 = a.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// General (not necessarily symmetric) square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        check_dims(self.dim, other.dim)?;
        let mut out = vec![0.0; self.dim * self.dim];
        matmul_into(self.dim, &self.data, &other.data, &mut out);
        Ok(Self {
            dim: self.dim,
            data: out,
        })
    }

    /// `tr(self * other)` without forming the product.
    pub fn trace_of_product(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim, other.dim)?;
        let n = self.dim;
        let mut total = 0.0;
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (j, v) in row.iter().enumerate() {
                s += v * other.data[j * n + i];
            }
            total += s;
        }
        Ok(total)
    }

    /// `I - self`.
    pub fn identity_minus(&self) -> Self {
        let n = self.dim;
        let mut data: Vec<f64> = self.data.iter().map(|v| -v).collect();
        for i in 0..n {
            data[i * n + i] += 1.0;
        }
        Self { dim: n, data }
    }

    /// Determinant by LU factorization with partial pivoting.
    pub fn determinant(&self) -> f64 {
        let n = self.dim;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let mut pivot = k;
            let mut best = a[k * n + k].abs();
            for r in (k + 1)..n {
                let v = a[r * n + k].abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best == 0.0 {
                return 0.0;
            }
            if pivot != k {
                for c in 0..n {
                    a.swap(k * n + c, pivot * n + c);
                }
                det = -det;
            }
            let akk = a[k * n + k];
            det *= akk;
            let (upper, lower) = a.split_at_mut((k + 1) * n);
            let pivot_row = &upper[k * n + k + 1..(k + 1) * n];
            for r in 0..(n - k - 1) {
                let row = &mut lower[r * n..(r + 1) * n];
                let factor = row[k] / akk;
                if factor != 0.0 {
                    for (x, p) in row[k + 1..].iter_mut().zip(pivot_row) {
                        *x -= factor * p;
                    }
                }
            }
        }
        det
    }
}

fn check_dims(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(MatError::DimensionMismatch { left, right });
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `M = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors a symmetric positive definite matrix.
    ///
    /// Fails at the first pivot that is not strictly positive.
    pub fn factor(m: &SymmetricMatrix) -> Result<Self> {
        let n = m.dim;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                let v = m.data[i * n + j] - s;
                if i == j {
                    if v.is_nan() || v <= 0.0 || !v.is_finite() {
                        return Err(MatError::NotPositiveDefinite { pivot: i, value: v });
                    }
                    l[i * n + i] = v.sqrt();
                } else {
                    l[i * n + j] = v / l[j * n + j];
                }
            }
        }
        Ok(Self { dim: n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row `i` of the lower factor, truncated at the diagonal.
    #[inline]
    pub fn lower_row(&self, i: usize) -> &[f64] {
        &self.lower[i * self.dim..i * self.dim + i + 1]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
    }

    /// `L x`.
    pub fn lower_mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = dot(self.lower_row(i), &x[..=i]);
        }
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let s = dot(&self.lower[i * n..i * n + i], &b[..i]);
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let xi = b[i] / self.lower[i * n + i];
            b[i] = xi;
            for (bk, lik) in b[..i].iter_mut().zip(&self.lower[i * n..i * n + i]) {
                *bk -= lik * xi;
            }
        }
    }

    /// Solves `M x = b` with two triangular solves.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// `M^{-1}` assembled from the triangular factor as `L^{-T} L^{-1}`.
    pub fn inverse(&self) -> SymmetricMatrix {
        let n = self.dim;
        // Rows of `w` hold the columns of L^{-1}: w[j] solves L x = e_j,
        // which is zero above index j.
        let mut w = vec![0.0; n * n];
        for j in 0..n {
            let col = &mut w[j * n..(j + 1) * n];
            col[j] = 1.0 / self.lower[j * n + j];
            for i in (j + 1)..n {
                let s = dot(&self.lower[i * n + j..i * n + i], &col[j..i]);
                col[i] = -s / self.lower[i * n + i];
            }
        }
        // (L^{-T} L^{-1})_{ab} = sum_k (L^{-1})_{ka} (L^{-1})_{kb}
        //                      = <w[a], w[b]> over k >= max(a, b).
        let mut inv = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let v = dot(&w[a * n + b..(a + 1) * n], &w[b * n + b..(b + 1) * n]);
                inv[a * n + b] = v;
                inv[b * n + a] = v;
            }
        }
        SymmetricMatrix { dim: n, data: inv }
    }

    /// `L L^T`, used to check the factorization.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        let n = self.dim;
        SymmetricMatrix::from_upper_fn(n, |i, j| {
            dot(&self.lower[i * n..i * n + i + 1], &self.lower[j * n..j * n + i + 1])
        })
        .expect("factor entries are finite")
    }
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(m: &SymmetricMatrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Default iteration cap for [`spectral_norm`] at dimension `dim`.
pub fn default_iteration_cap(dim: usize) -> usize {
    10 * dim + 100
}

/// Largest dimension for which [`spectral_norm`] falls back to a full
/// Jacobi eigendecomposition when power iteration stalls.
pub const DENSE_FALLBACK_MAX_DIM: usize = 512;

/// Largest absolute eigenvalue, by power iteration on `M^2`.
///
/// Iterating on the square makes `+lambda` and `-lambda` indistinguishable,
/// so a dominant negative eigenvalue is found as readily as a positive one.
/// The start vector is a fixed function of the matrix entries. Stops once
/// the residual `||M^2 v - r v||` is within `tol * r` of the Rayleigh
/// quotient `r`.
///
/// Wigner-type matrices have nearly degenerate top eigenvalues, where the
/// iteration can run out of budget; up to [`DENSE_FALLBACK_MAX_DIM`] the
/// answer then comes from the Jacobi spectrum instead. Larger matrices
/// report [`MatError::NoConvergence`].
pub fn spectral_norm(m: &SymmetricMatrix, tol: f64) -> Result<f64> {
    match spectral_norm_with_cap(m, tol, default_iteration_cap(m.dim)) {
        Err(MatError::NoConvergence { .. }) if m.dim <= DENSE_FALLBACK_MAX_DIM => {
            Ok(m.spectrum().max_abs())
        }
        other => other,
    }
}

pub fn spectral_norm_with_cap(m: &SymmetricMatrix, tol: f64, cap: usize) -> Result<f64> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(MatError::InvalidTolerance(tol));
    }
    let n = m.dim;
    if m.data.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let row_mass: f64 = m.row(i).iter().map(|x| x.abs()).sum();
            row_mass + 1.0 / (i as f64 + 2.0)
        })
        .collect();
    normalize(&mut v);
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        let mv = m.mul_vec(&v);
        let w = m.mul_vec(&mv);
        // Rayleigh quotient of M^2 at unit v.
        let r = dot(&mv, &mv);
        if r == 0.0 {
            // v lies in the null space; restart from a shifted basis vector.
            v = (0..n).map(|i| if i == 0 { 1.0 } else { 0.5 }).collect();
            normalize(&mut v);
            continue;
        }
        let res_sq: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - r * vi) * (wi - r * vi))
            .sum();
        residual = res_sq.sqrt() / r;
        if residual <= tol {
            return Ok(r.sqrt());
        }
        v = w;
        normalize(&mut v);
    }
    Err(MatError::NoConvergence {
        iterations: cap,
        residual,
    })
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// `tr((A B)^m)`.
///
/// For `m = 1` this is the entrywise sum `sum_ij A_ij B_ij`; higher powers
/// multiply out `AB` and split the power across two factors.
pub fn trace_product_pow(a: &SymmetricMatrix, b: &SymmetricMatrix, m: u32) -> Result<f64> {
    check_dims(a.dim, b.dim)?;
    match m {
        0 => Err(MatError::ZeroExponent),
        1 => Ok(dot(&a.data, &b.data)),
        _ => {
            let ab = a.mul(b)?;
            let half = m / 2;
            let left = matrix_power(&ab, half)?;
            let right = if m - half == half {
                left.clone()
            } else {
                left.mul(&ab)?
            };
            left.trace_of_product(&right)
        }
    }
}

/// `tr((AB)^m)` for every `m` in `1..=max_power`, by repeated multiplication.
pub fn trace_product_powers(
    a: &SymmetricMatrix,
    b: &SymmetricMatrix,
    max_power: u32,
) -> Result<Vec<f64>> {
    check_dims(a.dim, b.dim)?;
    if max_power == 0 {
        return Ok(Vec::new());
    }
    let ab = a.mul(b)?;
    let mut traces = Vec::with_capacity(max_power as usize);
    traces.push(dot(&a.data, &b.data));
    let mut power = ab.clone();
    for _ in 2..=max_power {
        power = power.mul(&ab)?;
        traces.push(power.trace());
    }
    Ok(traces)
}

fn matrix_power(m: &SquareMatrix, p: u32) -> Result<SquareMatrix> {
    let mut out = m.clone();
    for _ in 1..p {
        out = out.mul(m)?;
    }
    Ok(out)
}

/// `log det M` for symmetric positive definite `M`, via Cholesky.
pub fn logdet_pd(m: &SymmetricMatrix) -> Result<f64> {
    Ok(Cholesky::factor(m)?.log_det())
}

/// True iff the Cholesky factorization succeeds, i.e. every eigenvalue is
/// strictly positive.
pub fn is_pd(m: &SymmetricMatrix) -> bool {
    Cholesky::factor(m).is_ok()
}

/// Estimate of the smallest eigenvalue, for diagnostics.
///
/// Uses the Jacobi spectrum for small matrices and a shifted power
/// iteration otherwise.
pub fn min_eigenvalue_estimate(m: &SymmetricMatrix) -> f64 {
    if m.dim <= 64 {
        return m.spectrum().min();
    }
    let norm = match spectral_norm(m, 1e-8) {
        Ok(v) => v,
        Err(_) => return f64::NAN,
    };
    // Eigenvalues of norm*I - M lie in [0, 2 norm]; the largest one is
    // norm - lambda_min.
    let shifted = m.shifted_scaled(norm, -1.0);
    match spectral_norm(&shifted, 1e-8) {
        Ok(top) => norm - top,
        Err(_) => f64::NAN,
    }
}
