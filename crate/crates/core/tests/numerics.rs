//! Floating-point audit of the log-space paths.
//!
//! References are accumulated in double-double arithmetic, so any
//! disagreement beyond a few ulps is the library's error.

mod common;

use nalgebra::DMatrix;
use rand::Rng;
use robcov::ensemble::{self, EnsembleConfig};
use robcov::experiments;
use robcov::gauss;
use robcov::harness::seed::derive_stream;

use common::to_na;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn add_f64(self, b: f64) -> Dd {
        let s = self.hi + b;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (b - bb);
        let lo = err + self.lo;
        let hi = s + lo;
        Dd { hi, lo: lo - (hi - s) }
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `log(mean(exp(x)))` with the shifted terms summed in double-double.
fn log_mean_exp_reference(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = x.iter().fold(Dd::ZERO, |acc, v| acc.add_f64((v - m).exp()));
    m + (s.value() / x.len() as f64).ln()
}

#[test]
fn product_estimate_matches_double_double_reference() {
    let mut rng = derive_stream(1, "numerics/lme", 0);
    // Log chi2 values shaped like the ensemble's: mostly tiny, a few large.
    for (scale, n) in [(1e-4, 16_384u64), (3e-4, 65_536), (2e-3, 65_536), (1e-6, 1)] {
        let logs: Vec<f64> = (0..2000)
            .map(|_| {
                let u: f64 = rng.random();
                scale * (-(1.0 - u).ln() - 0.7)
            })
            .collect();
        let est = experiments::product_estimate_from_logs(128, n, &logs);
        let scaled: Vec<f64> = logs.iter().map(|l| n as f64 * l).collect();
        let want = log_mean_exp_reference(&scaled);
        assert!(
            (est.log_mean - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0),
            "scale {scale}, N {n}: {} vs {want}",
            est.log_mean
        );
        if want < 700.0 {
            let rel = (est.mean_estimate / want.exp() - 1.0).abs();
            assert!(rel <= 1e-13, "relative error {rel}");
        }
    }
}

#[test]
fn heavy_contributions_keep_an_exact_log_mean() {
    let logs = [1e-3, 2e-3, 0.02, 0.05];
    let n = 65_536;
    let est = experiments::product_estimate_from_logs(256, n, &logs);
    assert!(est.heavy_pairs >= 1);
    let want = log_mean_exp_reference(&logs.map(|l| l * n as f64));
    assert!((est.log_mean - want).abs() <= 1e-12 * want);
    assert!(est.log_mean.is_finite());
}

/// `(1/2) sum_m tr((AB)^m) / m`, i.e. `-(1/2) log det(I - AB)`, through
/// nalgebra products with the partial sums kept in double-double.
fn log_chi2_series(a: &DMatrix<f64>, b: &DMatrix<f64>, terms: usize) -> f64 {
    let ab = a * b;
    let mut power = ab.clone();
    let mut acc = Dd::ZERO;
    for m in 1..=terms {
        acc = acc.add_f64(0.5 * power.trace() / m as f64);
        power = &power * &ab;
    }
    acc.value()
}

#[test]
fn log_chi2_agrees_with_series_at_ensemble_scale() {
    for (d, eps) in [(32usize, 0.3), (128, 0.1)] {
        let cfg = EnsembleConfig::new(d).with_epsilon(eps);
        let mut worst: f64 = 0.0;
        for i in 0..10 {
            let mut r = derive_stream(2, "numerics/series", i);
            let a = ensemble::sample_perturbation(&cfg, &mut r).unwrap().matrix;
            let b = ensemble::sample_perturbation(&cfg, &mut r).unwrap().matrix;
            let got = gauss::chi2_inner_exact(&a.shifted_scaled(1.0, 1.0), &b.shifted_scaled(1.0, 1.0))
                .unwrap()
                .log;
            let want = log_chi2_series(&to_na(&a), &to_na(&b), 20);
            worst = worst.max((got - want).abs());
        }
        // Raised to the power N = d^2 this still moves the product by < 1e-7.
        assert!(worst * (d * d) as f64 <= 1e-7, "d={d}: worst abs error {worst:e}");
    }
}
