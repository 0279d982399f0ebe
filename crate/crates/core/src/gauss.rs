//! Zero-mean Gaussian laws and their chi-squared inner products.
//!
//! The chi-squared inner product of two laws `P1`, `P2` against a reference
//! `Q` is `int dP1 dP2 / dQ`. For `Q = N(0, I)` and zero-mean Gaussians it
//! has the closed form `det(S1 + S2 - S1 S2)^{-1/2}`, finite only when both
//! covariances lie strictly between `0` and `2I`. All such quantities are
//! carried as logarithms; [`Chi2Value::value`] exponentiates on request.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::matcore::{
    self, dot, frobenius_norm, spectral_norm, trace_product_pow, Cholesky, MatError,
    SymmetricMatrix,
};

/// Slack below 1 tolerated by [`tv_lower_bound`] before the input is
/// declared invalid.
pub const CHI2_SELF_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussError {
    #[error(transparent)]
    Matrix(#[from] MatError),
    #[error("covariance is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("chi-squared integral diverges: covariance {which} is not strictly below 2I")]
    DivergentIntegral { which: usize },
    #[error("interior matrix S1^-1 + S2^-1 - I lost positive definiteness to rounding (pivot {pivot} = {value:e})")]
    NumericalLoss { pivot: usize, value: f64 },
    #[error("perturbation {which} has spectral norm {norm} > {limit}")]
    PerturbationTooLarge { which: usize, norm: f64, limit: f64 },
    #[error("determinant series diverges: ||A||_2 ||B||_2 = {product} >= 1")]
    DivergentSeries { product: f64 },
    #[error("chi-squared self inner product must be >= 1, got {0}")]
    InvalidSelfInnerProduct(f64),
}

pub type Result<T> = std::result::Result<T, GaussError>;

/// An `n x d` matrix of samples, one draw per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "sample buffer has wrong length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (m, x) in means.iter_mut().zip(row) {
                *m += x;
            }
        }
        means.iter_mut().for_each(|m| *m /= self.rows as f64);
        means
    }

    /// Second-moment matrix `(1/n) sum_i x_i x_i^T` (the mean is known to be
    /// zero, so it is not subtracted).
    pub fn second_moment(&self) -> SymmetricMatrix {
        let d = self.cols;
        let mut acc = vec![0.0; d * d];
        for row in self.iter_rows() {
            for i in 0..d {
                let xi = row[i];
                let target = &mut acc[i * d..i * d + i + 1];
                for (t, xj) in target.iter_mut().zip(&row[..=i]) {
                    *t += xi * xj;
                }
            }
        }
        let n = self.rows as f64;
        SymmetricMatrix::from_upper_fn(d, |i, j| acc[j * d + i] / n)
            .expect("sample moments are finite")
    }
}

/// Zero-mean Gaussian `N(0, S)` with its factorization cached.
#[derive(Debug, Clone)]
pub struct ZeroMeanGaussian {
    covariance: SymmetricMatrix,
    factor: Cholesky,
    logdet_cov: f64,
    precision: SymmetricMatrix,
    below_two: bool,
}

impl ZeroMeanGaussian {
    pub fn new(covariance: SymmetricMatrix) -> Result<Self> {
        let factor = Cholesky::factor(&covariance).map_err(|e| match e {
            MatError::NotPositiveDefinite { pivot, value } => {
                GaussError::NotPositiveDefinite { pivot, value }
            }
            other => GaussError::Matrix(other),
        })?;
        let logdet_cov = factor.log_det();
        let precision = factor.inverse();
        let below_two = matcore::is_pd(&covariance.shifted_scaled(2.0, -1.0));
        Ok(Self {
            covariance,
            factor,
            logdet_cov,
            precision,
            below_two,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(SymmetricMatrix::identity(dim)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.covariance.dim()
    }

    pub fn covariance(&self) -> &SymmetricMatrix {
        &self.covariance
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn logdet_cov(&self) -> f64 {
        self.logdet_cov
    }

    /// `S^{-1}`, formed from the triangular factor at construction.
    pub fn precision(&self) -> &SymmetricMatrix {
        &self.precision
    }

    /// Whether `S < 2I` in the Loewner order.
    pub fn is_below_two(&self) -> bool {
        self.below_two
    }

    /// Writes one draw `L z` into `out`, using `z` as scratch.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        self.factor.lower_mul(z, out);
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> SampleMatrix {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        let mut z = vec![0.0; d];
        for row in data.chunks_exact_mut(d) {
            self.sample_into(rng, &mut z, row);
        }
        SampleMatrix::from_rows(n, d, data)
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(GaussError::DimensionMismatch {
                left: d,
                right: x.len(),
            });
        }
        let mut y = x.to_vec();
        self.factor.solve_lower_in_place(&mut y);
        let quad = dot(&y, &y);
        Ok(-0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * self.logdet_cov - 0.5 * quad)
    }
}

/// A positive quantity held by its natural logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chi2Value {
    pub log: f64,
}

impl Chi2Value {
    pub fn value(self) -> f64 {
        self.log.exp()
    }
}

/// `chi2_{N(0,I)}(N(0,S1), N(0,S2)) = det(S1 + S2 - S1 S2)^{-1/2}`.
///
/// Evaluated as `-1/2 [log det S1 + log det S2 + log det(S1^-1 + S2^-1 - I)]`
/// so that each determinant is of a symmetric positive definite matrix.
pub fn chi2_inner_exact(s1: &SymmetricMatrix, s2: &SymmetricMatrix) -> Result<Chi2Value> {
    let g1 = ZeroMeanGaussian::new(s1.clone())?;
    let g2 = ZeroMeanGaussian::new(s2.clone())?;
    chi2_inner_gaussians(&g1, &g2)
}

/// [`chi2_inner_exact`] on laws whose factorizations are already cached.
pub fn chi2_inner_gaussians(g1: &ZeroMeanGaussian, g2: &ZeroMeanGaussian) -> Result<Chi2Value> {
    if g1.dim() != g2.dim() {
        return Err(GaussError::DimensionMismatch {
            left: g1.dim(),
            right: g2.dim(),
        });
    }
    if !g1.is_below_two() {
        return Err(GaussError::DivergentIntegral { which: 1 });
    }
    if !g2.is_below_two() {
        return Err(GaussError::DivergentIntegral { which: 2 });
    }
    let interior = g1
        .precision()
        .linear_combination(1.0, g2.precision(), 1.0)?
        .shifted_scaled(-1.0, 1.0);
    let interior_logdet = Cholesky::factor(&interior)
        .map_err(|e| match e {
            MatError::NotPositiveDefinite { pivot, value } => {
                GaussError::NumericalLoss { pivot, value }
            }
            other => GaussError::Matrix(other),
        })?
        .log_det();
    Ok(Chi2Value {
        log: -0.5 * (g1.logdet_cov() + g2.logdet_cov() + interior_logdet),
    })
}

/// Leading-order expansion of `chi2(N(0, I+A), N(0, I+B))` for small `A`, `B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorTerms {
    /// `1 + tr(AB)/2`.
    pub first_order: f64,
    /// `tr(AB)^2 + tr((AB)^2) + 1/d^2`, the shape of the remainder (its
    /// constant is not known, so only the expression is returned).
    pub correction_bound: f64,
}

/// Spectral-norm ceiling for the perturbations fed to [`chi2_inner_taylor`].
pub const TAYLOR_NORM_LIMIT: f64 = 0.5;

pub fn chi2_inner_taylor(a: &SymmetricMatrix, b: &SymmetricMatrix) -> Result<TaylorTerms> {
    if a.dim() != b.dim() {
        return Err(GaussError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    for (which, m) in [(1, a), (2, b)] {
        let norm = spectral_norm(m, 1e-10)?;
        if norm > TAYLOR_NORM_LIMIT {
            return Err(GaussError::PerturbationTooLarge {
                which,
                norm,
                limit: TAYLOR_NORM_LIMIT,
            });
        }
    }
    let t1 = trace_product_pow(a, b, 1)?;
    let t2 = trace_product_pow(a, b, 2)?;
    let d = a.dim() as f64;
    Ok(TaylorTerms {
        first_order: 1.0 + 0.5 * t1,
        correction_bound: t1 * t1 + t2 + 1.0 / (d * d),
    })
}

/// Both sides of `det(I - AB) = exp(-sum_m tr((AB)^m)/m)`, truncated at `M` terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetSeries {
    pub lhs: f64,
    pub rhs: f64,
    /// Bound on the omitted tail, `d q^{M+1} / ((M+1)(1-q))` with `q = ||A|| ||B||`.
    pub truncation_bound: f64,
}

pub fn det_series_check(a: &SymmetricMatrix, b: &SymmetricMatrix, terms: u32) -> Result<DetSeries> {
    if a.dim() != b.dim() {
        return Err(GaussError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let q = spectral_norm(a, 1e-12)? * spectral_norm(b, 1e-12)?;
    if q >= 1.0 {
        return Err(GaussError::DivergentSeries { product: q });
    }
    let lhs = a.mul(b)?.identity_minus().determinant();
    let traces = matcore::trace_product_powers(a, b, terms)?;
    let exponent: f64 = traces
        .iter()
        .enumerate()
        .map(|(i, t)| t / (i as f64 + 1.0))
        .sum();
    let next = terms as f64 + 1.0;
    Ok(DetSeries {
        lhs,
        rhs: (-exponent).exp(),
        truncation_bound: a.dim() as f64 * q.powf(next) / (next * (1.0 - q)),
    })
}

/// Total variation bound from a self inner product, `(1/2) sqrt(chi2_Q(P, P) - 1)`.
///
/// Cauchy-Schwarz on `|dP - dQ| = (|dP - dQ| / sqrt(dQ)) sqrt(dQ)` gives
/// `d_TV(Q, P) <= (1/2) sqrt(chi2_Q(P, P) - 1)`, so a small value certifies
/// that `P` and `Q` are close. The name is kept for API stability; the value
/// is an upper bound, not a lower one.
pub fn tv_lower_bound(chi2_self: f64) -> Result<f64> {
    if chi2_self.is_nan() || chi2_self < 1.0 - CHI2_SELF_TOLERANCE {
        return Err(GaussError::InvalidSelfInnerProduct(chi2_self));
    }
    Ok(0.5 * (chi2_self - 1.0).max(0.0).sqrt())
}

/// Relative Frobenius error of `L L^T` against the covariance.
pub fn factor_reconstruction_error(g: &ZeroMeanGaussian) -> f64 {
    let rebuilt = g.factor().reconstruct();
    let diff = rebuilt
        .linear_combination(1.0, g.covariance(), -1.0)
        .expect("same dimension");
    frobenius_norm(&diff) / frobenius_norm(g.covariance())
}
