//! Small oracle-backed checks run by `robcov selfcheck`.
//!
//! Each check compares a library routine against an independent computation
//! (quadrature, Jacobi eigenvalues, direct algebra) at sizes that finish in
//! well under a second.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{self, EnsembleConfig};
use crate::gauss;
use crate::harness::seed::{SeedSource, Stream};
use crate::matcore::{self, Cholesky, SymmetricMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, worst: f64, tol: f64) -> CheckResult {
    CheckResult {
        name,
        passed: worst.is_finite() && worst <= tol,
        detail: format!("worst {worst:.3e}, tolerance {tol:.0e}"),
    }
}

fn failed(name: &'static str, err: impl fmt::Display) -> CheckResult {
    CheckResult {
        name,
        passed: false,
        detail: err.to_string(),
    }
}

/// `I + P` with `P` symmetric Gaussian, rescaled so `||P||_2 = radius`.
pub fn random_covariance(rng: &mut Stream, dim: usize, radius: f64) -> SymmetricMatrix {
    let p = SymmetricMatrix::from_upper_fn(dim, |_, _| rng.sample(StandardNormal))
        .expect("finite entries");
    let norm = p.spectrum().max_abs();
    if norm == 0.0 {
        return SymmetricMatrix::identity(dim);
    }
    p.scaled(radius / norm).shifted_scaled(1.0, 1.0)
}

/// Composite Simpson rule on `[lo, hi]` with `panels` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let panels = panels + panels % 2;
    let h = (hi - lo) / panels as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    sum * h / 3.0
}

/// `int p1 p2 / p` in one dimension with variances `v1`, `v2`.
fn chi2_by_quadrature(v1: f64, v2: f64) -> f64 {
    let integrand = |x: f64| {
        let x2 = x * x;
        let log = -0.5 * x2 * (1.0 / v1 + 1.0 / v2 - 1.0)
            - 0.5 * (v1 * v2).ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log.exp()
    };
    simpson(integrand, -60.0, 60.0, 60_000)
}

fn identity_argument(rng: &mut Stream) -> CheckResult {
    let mut worst: f64 = 0.0;
    for dim in [2, 8, 32] {
        for _ in 0..10 {
            let radius = rng.random_range(0.05..0.9);
            let s = random_covariance(rng, dim, radius);
            match gauss::chi2_inner_exact(&SymmetricMatrix::identity(dim), &s) {
                Ok(v) => worst = worst.max((v.value() - 1.0).abs()),
                Err(e) => return failed("chi2 identity argument", e),
            }
        }
    }
    check("chi2 identity argument", worst, 1e-10)
}

fn quadrature(rng: &mut Stream) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let v1 = rng.random_range(0.2..1.8);
        let v2 = rng.random_range(0.2..1.8);
        let exact = match gauss::chi2_inner_exact(
            &SymmetricMatrix::from_diagonal(&[v1]),
            &SymmetricMatrix::from_diagonal(&[v2]),
        ) {
            Ok(v) => v.value(),
            Err(e) => return failed("chi2 vs quadrature", e),
        };
        let q = chi2_by_quadrature(v1, v2);
        worst = worst.max(((exact - q) / q).abs());
    }
    check("chi2 vs quadrature", worst, 1e-6)
}

fn spectral_norm_vs_jacobi(rng: &mut Stream) -> CheckResult {
    let mut worst: f64 = 0.0;
    for dim in [3, 10, 40] {
        let m = random_covariance(rng, dim, 0.7).shifted_scaled(-1.0, 1.0);
        match matcore::spectral_norm(&m, 1e-10) {
            Ok(p) => worst = worst.max((p - m.spectrum().max_abs()).abs()),
            Err(e) => return failed("spectral norm vs jacobi", e),
        }
    }
    check("spectral norm vs jacobi", worst, 1e-8)
}

fn cholesky_roundtrip(rng: &mut Stream) -> CheckResult {
    let s = random_covariance(rng, 24, 0.8);
    match Cholesky::factor(&s) {
        Ok(c) => check(
            "cholesky reconstruction",
            c.reconstruct().max_abs_diff(&s).unwrap_or(f64::INFINITY),
            1e-12,
        ),
        Err(e) => failed("cholesky reconstruction", e),
    }
}

/// At d = 32 the default epsilon leaves `I - kA` indefinite, so the small
/// checks use a larger contamination weight.
fn small_config() -> EnsembleConfig {
    EnsembleConfig::new(32).with_epsilon(0.3)
}

fn det_series(rng: &mut Stream) -> CheckResult {
    let cfg = small_config();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let pair = ensemble::sample_perturbation(&cfg, rng)
            .and_then(|a| Ok((a, ensemble::sample_perturbation(&cfg, rng)?)));
        let (a, b) = match pair {
            Ok(p) => p,
            Err(e) => return failed("determinant series", e),
        };
        match gauss::det_series_check(&a.matrix, &b.matrix, 12) {
            Ok(s) => worst = worst.max((s.lhs - s.rhs).abs()),
            Err(e) => return failed("determinant series", e),
        }
    }
    check("determinant series", worst, 1e-9)
}

fn cancellation() -> CheckResult {
    let worst = [0.05, 0.1, 1.0 / 3.0, 0.49]
        .into_iter()
        .map(|e| ensemble::first_order_cancellation(e).abs())
        .fold(0.0, f64::max);
    check("first-order cancellation", worst, 1e-14)
}

fn covariance_matching(rng: &mut Stream) -> CheckResult {
    let cfg = small_config();
    let model = ensemble::sample_perturbation(&cfg, rng)
        .and_then(|a| ensemble::build_model(a.matrix, cfg.epsilon));
    match model {
        Ok(m) => check("mixture covariance", m.covariance_matching_error(), 1e-12),
        Err(e) => failed("mixture covariance", e),
    }
}

pub fn run_all() -> Vec<CheckResult> {
    let seeds = SeedSource::new(0, "selfcheck");
    vec![
        identity_argument(&mut seeds.stream(0)),
        quadrature(&mut seeds.stream(1)),
        spectral_norm_vs_jacobi(&mut seeds.stream(2)),
        cholesky_roundtrip(&mut seeds.stream(3)),
        det_series(&mut seeds.stream(4)),
        cancellation(),
        covariance_matching(&mut seeds.stream(5)),
    ]
}
