//! The hard instance: random symmetric perturbations and the
//! covariance-matched contaminated mixture built from them.
//!
//! For a symmetric `A` and contamination weight `eps`, the mixture is
//!
//! ```text
//! D_A = (1 - eps) N(0, I + A) + eps N(0, I - k A),   k = (1 - eps) / eps
//! ```
//!
//! whose second moment is exactly `I`. Perturbations have zero diagonal and
//! i.i.d. off-diagonal entries of standard deviation `c / d`, conditioned by
//! rejection on spectral and Frobenius windows.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gauss::{self, Chi2Value, GaussError, SampleMatrix, ZeroMeanGaussian};
use crate::matcore::{
    frobenius_norm, is_pd, min_eigenvalue_estimate, spectral_norm, MatError, SymmetricMatrix,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("contamination weight must lie in (0, 1/2), got {0}")]
    InvalidEpsilon(f64),
    #[error("{component} covariance is not positive definite (min eigenvalue ~ {min_eigenvalue:e})")]
    ComponentNotPd {
        component: Component,
        min_eigenvalue: f64,
    },
    #[error("soundness gap violated: ||A||_F = {frobenius} does not exceed {gap}")]
    SoundnessGap { frobenius: f64, gap: f64 },
    #[error("rejection budget exhausted after {rejections} rejections (acceptance rate {acceptance_rate:.4}); thresholds are likely misconfigured")]
    TooManyRejections {
        rejections: usize,
        acceptance_rate: f64,
    },
    #[error("matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Matrix(#[from] MatError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Inlier,
    Outlier,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::Inlier => "inlier",
            Component::Outlier => "outlier",
        })
    }
}

/// Parameters of the random-perturbation distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub dim: usize,
    /// Contamination weight, in `(0, 1/2)`.
    pub epsilon: f64,
    /// Soundness gap: accepted models need `||A||_F` strictly above this.
    pub frob_target: f64,
    /// Off-diagonal entries have standard deviation `entry_scale / dim`.
    pub entry_scale: f64,
    /// Reject when `||A||_2 > spec_cap / sqrt(dim)`.
    pub spec_cap: f64,
    /// Reject when `||A||_F` falls outside `[lo, hi]`.
    pub frob_window: (f64, f64),
    pub max_rejects: usize,
    /// Relative tolerance for spectral norms computed during conditioning.
    pub spectral_tol: f64,
}

impl EnsembleConfig {
    pub const DEFAULT_EPSILON: f64 = 0.1;
    pub const DEFAULT_ENTRY_SCALE: f64 = 0.6;
    pub const DEFAULT_SPEC_CAP: f64 = 3.0;
    pub const DEFAULT_FROB_WINDOW: (f64, f64) = (0.5, 1.0);
    pub const DEFAULT_FROB_TARGET: f64 = 0.5;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            epsilon: Self::DEFAULT_EPSILON,
            frob_target: Self::DEFAULT_FROB_TARGET,
            entry_scale: Self::DEFAULT_ENTRY_SCALE,
            spec_cap: Self::DEFAULT_SPEC_CAP,
            frob_window: Self::DEFAULT_FROB_WINDOW,
            max_rejects: 1000,
            spectral_tol: 1e-6,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_entry_scale(mut self, entry_scale: f64) -> Self {
        self.entry_scale = entry_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EnsembleError::InvalidConfig(msg));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(EnsembleError::InvalidEpsilon(self.epsilon));
        }
        if !(self.entry_scale > 0.0 && self.entry_scale.is_finite()) {
            return bad(format!("entry_scale must be positive, got {}", self.entry_scale));
        }
        if !(self.spec_cap > 0.0 && self.spec_cap.is_finite()) {
            return bad(format!("spec_cap must be positive, got {}", self.spec_cap));
        }
        if !(self.frob_target > 0.0 && self.frob_target.is_finite()) {
            return bad(format!("frob_target must be positive, got {}", self.frob_target));
        }
        let (lo, hi) = self.frob_window;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!("frob_window must satisfy 0 < lo < hi, got [{lo}, {hi}]"));
        }
        if lo < self.frob_target {
            return bad(format!(
                "frob_window lower end {lo} is below the soundness gap {}",
                self.frob_target
            ));
        }
        if self.max_rejects == 0 {
            return bad("max_rejects must be positive".into());
        }
        if !(self.spectral_tol > 0.0 && self.spectral_tol < 1.0) {
            return bad(format!("spectral_tol must lie in (0, 1), got {}", self.spectral_tol));
        }
        Ok(())
    }

    /// `k = (1 - eps) / eps`, the outlier's perturbation multiplier.
    pub fn outlier_scale(&self) -> f64 {
        outlier_scale(self.epsilon)
    }

    pub fn entry_sd(&self) -> f64 {
        self.entry_scale / self.dim as f64
    }

    pub fn spectral_limit(&self) -> f64 {
        self.spec_cap / (self.dim as f64).sqrt()
    }

    /// Whether the spectral cap alone guarantees both mixture components are
    /// positive definite (`k * spec_cap / sqrt(d) < 1`).
    pub fn is_asymptotically_safe(&self) -> bool {
        self.outlier_scale() * self.spectral_limit() < 1.0
    }
}

pub fn outlier_scale(epsilon: f64) -> f64 {
    (1.0 - epsilon) / epsilon
}

/// Why candidates were turned away while drawing one perturbation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub frobenius: usize,
    pub spectral: usize,
    pub definiteness: usize,
}

impl RejectionCounts {
    pub fn total(&self) -> usize {
        self.frobenius + self.spectral + self.definiteness
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub matrix: SymmetricMatrix,
    pub rejections: RejectionCounts,
}

impl Perturbation {
    pub fn attempts(&self) -> usize {
        self.rejections.total() + 1
    }
}

/// Draws a zero-diagonal symmetric matrix with i.i.d. `N(0, (c/d)^2)`
/// off-diagonal entries and no conditioning.
pub fn sample_perturbation_unconditioned<R: Rng + ?Sized>(
    cfg: &EnsembleConfig,
    rng: &mut R,
) -> SymmetricMatrix {
    let sd = cfg.entry_sd();
    SymmetricMatrix::from_upper_fn(cfg.dim, |i, j| {
        if i == j {
            0.0
        } else {
            sd * rng.sample::<f64, _>(StandardNormal)
        }
    })
    .expect("gaussian entries are finite")
}

/// Draws a perturbation accepted by the conditioning events.
///
/// A candidate is rejected when `||A||_F` leaves the Frobenius window, when
/// `||A||_2` exceeds the spectral cap, or when `I - kA` or `I + kA` is not
/// positive definite. The last check keeps both mixture components positive
/// definite and strictly below `2I`, which is what every chi-squared inner
/// product downstream needs. When `1/k` is already below the spectral cap,
/// passing the definiteness check proves the cap holds and the power
/// iteration is skipped.
pub fn sample_perturbation<R: Rng + ?Sized>(
    cfg: &EnsembleConfig,
    rng: &mut R,
) -> Result<Perturbation> {
    cfg.validate()?;
    let k = cfg.outlier_scale();
    let cap = cfg.spectral_limit();
    let cap_implied = 1.0 / k <= cap;
    let (lo, hi) = cfg.frob_window;
    let mut rejections = RejectionCounts::default();
    loop {
        if rejections.total() > cfg.max_rejects {
            let attempts = rejections.total();
            return Err(EnsembleError::TooManyRejections {
                rejections: attempts,
                acceptance_rate: 0.0,
            });
        }
        let a = sample_perturbation_unconditioned(cfg, rng);
        let frob = frobenius_norm(&a);
        if frob < lo || frob > hi {
            rejections.frobenius += 1;
            continue;
        }
        if !is_pd(&a.shifted_scaled(1.0, -k)) || !is_pd(&a.shifted_scaled(1.0, k)) {
            rejections.definiteness += 1;
            continue;
        }
        if !cap_implied && spectral_norm(&a, cfg.spectral_tol)? > cap {
            rejections.spectral += 1;
            continue;
        }
        return Ok(Perturbation {
            matrix: a,
            rejections,
        });
    }
}

/// Whether [`build_model_with`] enforces `||A||_F > gap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapCheck {
    Enforce(f64),
    Disabled,
}

/// The two-component mixture `(1-eps) N(0, I+A) + eps N(0, I-kA)`.
#[derive(Debug, Clone)]
pub struct ContaminatedModel {
    perturbation: SymmetricMatrix,
    epsilon: f64,
    inlier: ZeroMeanGaussian,
    outlier: ZeroMeanGaussian,
}

/// Builds the mixture with the default soundness gap of 1/2.
pub fn build_model(a: SymmetricMatrix, epsilon: f64) -> Result<ContaminatedModel> {
    build_model_with(a, epsilon, GapCheck::Enforce(EnsembleConfig::DEFAULT_FROB_TARGET))
}

pub fn build_model_with(
    a: SymmetricMatrix,
    epsilon: f64,
    gap: GapCheck,
) -> Result<ContaminatedModel> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(EnsembleError::InvalidEpsilon(epsilon));
    }
    if let GapCheck::Enforce(gap) = gap {
        let frobenius = frobenius_norm(&a);
        if frobenius <= gap {
            return Err(EnsembleError::SoundnessGap { frobenius, gap });
        }
    }
    let k = outlier_scale(epsilon);
    let component = |cov: SymmetricMatrix, which: Component| {
        ZeroMeanGaussian::new(cov.clone()).map_err(|e| match e {
            GaussError::NotPositiveDefinite { .. } => EnsembleError::ComponentNotPd {
                component: which,
                min_eigenvalue: min_eigenvalue_estimate(&cov),
            },
            other => other.into(),
        })
    };
    let inlier = component(a.shifted_scaled(1.0, 1.0), Component::Inlier)?;
    let outlier = component(a.shifted_scaled(1.0, -k), Component::Outlier)?;
    Ok(ContaminatedModel {
        perturbation: a,
        epsilon,
        inlier,
        outlier,
    })
}

impl ContaminatedModel {
    pub fn dim(&self) -> usize {
        self.perturbation.dim()
    }

    pub fn perturbation(&self) -> &SymmetricMatrix {
        &self.perturbation
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn inlier(&self) -> &ZeroMeanGaussian {
        &self.inlier
    }

    pub fn outlier(&self) -> &ZeroMeanGaussian {
        &self.outlier
    }

    /// `[(1-eps, inlier), (eps, outlier)]`.
    pub fn components(&self) -> [(f64, &ZeroMeanGaussian); 2] {
        [
            (1.0 - self.epsilon, &self.inlier),
            (self.epsilon, &self.outlier),
        ]
    }

    /// `(1-eps)(I+A) + eps(I-kA)`, assembled from the stored component covariances.
    pub fn mixture_covariance(&self) -> SymmetricMatrix {
        self.inlier
            .covariance()
            .linear_combination(1.0 - self.epsilon, self.outlier.covariance(), self.epsilon)
            .expect("components share a dimension")
    }

    /// Largest entrywise deviation of the mixture covariance from `I`.
    pub fn covariance_matching_error(&self) -> f64 {
        self.mixture_covariance()
            .max_abs_diff(&SymmetricMatrix::identity(self.dim()))
            .expect("same dimension")
    }

    /// Draws `n` rows; each row first flips a latent coin (outlier with
    /// probability `eps`) and then samples that component.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> SampleMatrix {
        self.sample_with_labels(rng, n).0
    }

    /// Like [`Self::sample`], also returning the latent outlier flags.
    pub fn sample_with_labels<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
    ) -> (SampleMatrix, Vec<bool>) {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        let mut labels = Vec::with_capacity(n);
        let mut z = vec![0.0; d];
        for row in data.chunks_exact_mut(d) {
            let is_outlier = rng.random::<f64>() < self.epsilon;
            let law = if is_outlier { &self.outlier } else { &self.inlier };
            law.sample_into(rng, &mut z, row);
            labels.push(is_outlier);
        }
        (SampleMatrix::from_rows(n, d, data), labels)
    }
}

/// See [`ContaminatedModel::sample`].
pub fn sample_model<R: Rng + ?Sized>(model: &ContaminatedModel, rng: &mut R, n: usize) -> SampleMatrix {
    model.sample(rng, n)
}

/// `chi2_{N(0,I)}(m1, m2)`, expanded bilinearly over the 2x2 component grid.
pub fn chi2_mixture_exact(m1: &ContaminatedModel, m2: &ContaminatedModel) -> Result<Chi2Value> {
    let mut logs = [0.0; 4];
    let mut weights = [0.0; 4];
    let mut idx = 0;
    for (w1, g1) in m1.components() {
        for (w2, g2) in m2.components() {
            logs[idx] = gauss::chi2_inner_gaussians(g1, g2)?.log;
            weights[idx] = w1 * w2;
            idx += 1;
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs
        .iter()
        .zip(&weights)
        .map(|(l, w)| w * (l - top).exp())
        .sum();
    Ok(Chi2Value {
        log: top + sum.ln(),
    })
}

/// Weighted sum of the `tr(AB)` coefficients over the four cross terms:
/// `(1-eps)^2 - 2 eps (1-eps) k + eps^2 k^2`, identically zero.
pub fn first_order_cancellation(epsilon: f64) -> f64 {
    let k = outlier_scale(epsilon);
    let w_in = 1.0 - epsilon;
    w_in * w_in * 1.0 + 2.0 * epsilon * w_in * (-k) + epsilon * epsilon * (k * k)
}

/// Writes `m` as text: the dimension on the first line, then one
/// space-separated row per line with round-trip precision.
pub fn write_matrix<W: Write>(m: &SymmetricMatrix, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", m.dim())?;
    for i in 0..m.dim() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix<R: BufRead>(input: R) -> Result<SymmetricMatrix> {
    let fmt_err = |msg: String| EnsembleError::Format(msg);
    let mut lines = input
        .lines()
        .map(|l| l.map_err(|e| fmt_err(e.to_string())))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
    let header = lines
        .next()
        .ok_or_else(|| fmt_err("empty input".into()))??;
    let dim: usize = header
        .trim()
        .parse()
        .map_err(|_| fmt_err(format!("bad dimension line {header:?}")))?;
    let mut entries = Vec::with_capacity(dim * dim);
    for r in 0..dim {
        let line = lines
            .next()
            .ok_or_else(|| fmt_err(format!("missing row {r}")))??;
        let before = entries.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| fmt_err(format!("bad number {tok:?} in row {r}")))?;
            entries.push(v);
        }
        if entries.len() - before != dim {
            return Err(fmt_err(format!(
                "row {r} has {} entries, expected {dim}",
                entries.len() - before
            )));
        }
    }
    if lines.next().is_some() {
        return Err(fmt_err("trailing content after matrix".into()));
    }
    Ok(SymmetricMatrix::from_row_major(dim, entries)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn off_diag(d: usize, v: f64) -> SymmetricMatrix {
        SymmetricMatrix::from_upper_fn(d, |i, j| if i == j { 0.0 } else { v }).unwrap()
    }

    #[test]
    fn cancellation_is_zero() {
        for (eps, tol) in [(0.1, 1e-15), (1.0 / 3.0, 1e-15), (0.49, 1e-14), (0.05, 1e-14)] {
            let c = first_order_cancellation(eps);
            assert!(c.abs() <= tol, "eps={eps}: {c}");
        }
    }

    #[test]
    fn zero_perturbation_fails_gap() {
        let err = build_model(SymmetricMatrix::zeros(3), 0.1).unwrap_err();
        assert!(matches!(err, EnsembleError::SoundnessGap { .. }));
        assert!(build_model_with(SymmetricMatrix::zeros(3), 0.1, GapCheck::Disabled).is_ok());
    }

    #[test]
    fn outlier_covariance_for_one_tenth() {
        let a = off_diag(2, 0.6);
        // I - 9A has eigenvalues 1 -+ 5.4: not PD.
        let err = build_model(a.clone(), 0.1).unwrap_err();
        match err {
            EnsembleError::ComponentNotPd {
                component,
                min_eigenvalue,
            } => {
                assert_eq!(component, Component::Outlier);
                assert!((min_eigenvalue + 4.4).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        let small = off_diag(2, 0.04);
        let m = build_model_with(small.clone(), 0.1, GapCheck::Disabled).unwrap();
        let want = small.shifted_scaled(1.0, -9.0);
        assert!(m.outlier().covariance().max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn mixture_covariance_is_identity() {
        let a = off_diag(2, 0.6);
        let inlier = a.shifted_scaled(1.0, 1.0);
        let outlier = a.shifted_scaled(1.0, -9.0);
        let mix = inlier.linear_combination(0.9, &outlier, 0.1).unwrap();
        assert!(mix.max_abs_diff(&SymmetricMatrix::identity(2)).unwrap() < 1e-15);
    }

    #[test]
    fn mixture_chi2_trivial_cases() {
        let zero = build_model_with(SymmetricMatrix::zeros(4), 0.1, GapCheck::Disabled).unwrap();
        let v = chi2_mixture_exact(&zero, &zero).unwrap();
        assert!(v.log.abs() < 1e-15);
        let a = off_diag(4, 0.02);
        let m = build_model_with(a, 0.1, GapCheck::Disabled).unwrap();
        let v = chi2_mixture_exact(&m, &zero).unwrap();
        assert!(v.log.abs() < 1e-13, "{}", v.log);
        let self_v = chi2_mixture_exact(&m, &m).unwrap();
        assert!(self_v.value() >= 1.0);
    }

    #[test]
    fn accepted_perturbations_satisfy_postconditions() {
        let cfg = EnsembleConfig::new(128);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let p = sample_perturbation(&cfg, &mut rng).unwrap();
            let a = &p.matrix;
            assert!((0..128).all(|i| a.get(i, i) == 0.0));
            let f = frobenius_norm(a);
            assert!(f >= cfg.frob_window.0 && f <= cfg.frob_window.1);
            let m = build_model(a.clone(), cfg.epsilon).unwrap();
            assert!(m.covariance_matching_error() <= 1e-12);
        }
    }

    #[test]
    fn rejection_budget_is_reported() {
        let mut cfg = EnsembleConfig::new(16);
        cfg.frob_window = (5.0, 6.0);
        cfg.frob_target = 5.0;
        cfg.max_rejects = 10;
        let err = sample_perturbation(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, EnsembleError::TooManyRejections { rejections: 11, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(EnsembleConfig::new(64).validate().is_ok());
        assert!(matches!(
            EnsembleConfig::new(64).with_epsilon(0.5).validate(),
            Err(EnsembleError::InvalidEpsilon(_))
        ));
        let mut cfg = EnsembleConfig::new(64);
        cfg.frob_window = (0.4, 1.0);
        assert!(cfg.validate().is_err());
        assert!(!EnsembleConfig::new(128).is_asymptotically_safe());
        assert!(EnsembleConfig::new(1024).is_asymptotically_safe());
    }

    #[test]
    fn matrix_text_format_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = sample_perturbation_unconditioned(&EnsembleConfig::new(7), &mut rng);
        let mut buf = Vec::new();
        write_matrix(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next(), Some("7"));
        assert_eq!(text.lines().count(), 8);
        assert_eq!(read_matrix(&buf[..]).unwrap(), a);

        assert!(read_matrix("2\n1 0\n".as_bytes()).is_err());
        assert!(read_matrix("2\n1 0\n0\n".as_bytes()).is_err());
        assert!(read_matrix("2\n1 0.5\n0.7 1\n".as_bytes()).is_err());
        assert!(read_matrix("x\n".as_bytes()).is_err());
        assert!(read_matrix("1\n1\n2\n".as_bytes()).is_err());
    }

    #[test]
    fn labeled_sampling_reports_outliers() {
        let a = off_diag(3, 0.01);
        let m = build_model_with(a, 0.25, GapCheck::Disabled).unwrap();
        let (s, labels) = m.sample_with_labels(&mut ChaCha8Rng::seed_from_u64(2), 4000);
        assert_eq!(s.rows(), 4000);
        let frac = labels.iter().filter(|&&b| b).count() as f64 / 4000.0;
        assert!((frac - 0.25).abs() < 0.05);
    }
}
