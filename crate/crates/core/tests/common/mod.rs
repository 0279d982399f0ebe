//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls the library's numerical kernels: densities, inverses
//! and spectra come from nalgebra, integrals from adaptive Simpson.

#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use robcov::SymmetricMatrix;

pub fn to_na(m: &SymmetricMatrix) -> DMatrix<f64> {
    let d = m.dim();
    DMatrix::from_fn(d, d, |i, j| m.get(i, j))
}

pub fn from_na(m: &DMatrix<f64>) -> SymmetricMatrix {
    let d = m.nrows();
    SymmetricMatrix::from_upper_fn(d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)])).unwrap()
}

pub fn eigenvalues(m: &SymmetricMatrix) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(to_na(m)).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn max_abs_eigenvalue(m: &SymmetricMatrix) -> f64 {
    eigenvalues(m).iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `det(S1 + S2 - S1 S2)^{-1/2}`, with the determinant from nalgebra's LU.
pub fn chi2_oracle(s1: &SymmetricMatrix, s2: &SymmetricMatrix) -> f64 {
    let a = to_na(s1);
    let b = to_na(s2);
    let m = &a + &b - &a * &b;
    m.determinant().powf(-0.5)
}

/// Random `I + P` with `P` symmetric and `||P||_2` drawn uniformly from
/// `radius`.
pub fn random_covariance<R: Rng>(rng: &mut R, d: usize, radius: std::ops::Range<f64>) -> SymmetricMatrix {
    let p = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let p = (&p + p.transpose()) * 0.5;
    let norm = SymmetricEigen::new(p.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let r = rng.random_range(radius);
    let m = DMatrix::identity(d, d) + p * (r / norm);
    from_na(&m)
}

/// Log density of `N(0, S)` at `x`, via nalgebra's inverse and determinant.
pub struct DensityOracle {
    dim: usize,
    precision: Vec<f64>,
    log_norm: f64,
}

impl DensityOracle {
    pub fn new(s: &SymmetricMatrix) -> Self {
        let m = to_na(s);
        let d = m.nrows() as f64;
        let det = m.determinant();
        let inv = m.clone().try_inverse().expect("invertible");
        Self {
            dim: m.nrows(),
            precision: inv.transpose().as_slice().to_vec(),
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln()),
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for (i, row) in self.precision.chunks_exact(self.dim).enumerate() {
            q += x[i] * row.iter().zip(x).map(|(p, v)| p * v).sum::<f64>();
        }
        self.log_norm - 0.5 * q
    }
}

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // Split up front so a narrow peak cannot hide between the first three
    // nodes.
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let lo = a + k as f64 * h;
            let hi = lo + h;
            let (flo, fmid, fhi) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = simpson(flo, fmid, fhi, lo, hi);
            recurse(f, lo, hi, flo, fmid, fhi, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// `int p1 p2 / p` over the plane (d = 1 or 2) by (nested) adaptive Simpson.
pub fn chi2_quadrature(s1: &SymmetricMatrix, s2: &SymmetricMatrix) -> f64 {
    let d = s1.dim();
    let g1 = DensityOracle::new(s1);
    let g2 = DensityOracle::new(s2);
    let g0 = DensityOracle::new(&SymmetricMatrix::identity(d));
    // Width of the integrand: its precision is S1^{-1} + S2^{-1} - I.
    let q = to_na(s1).try_inverse().unwrap() + to_na(s2).try_inverse().unwrap()
        - DMatrix::identity(d, d);
    let lam_min = SymmetricEigen::new(q).eigenvalues.min();
    let half_width = 14.0 / lam_min.sqrt();
    let integrand = |x: &[f64]| (g1.log_pdf(x) + g2.log_pdf(x) - g0.log_pdf(x)).exp();
    match d {
        1 => adaptive_simpson(&|x| integrand(&[x]), -half_width, half_width, 1e-13),
        2 => {
            let inner = |x: f64| {
                adaptive_simpson(&|y| integrand(&[x, y]), -half_width, half_width, 1e-13)
            };
            adaptive_simpson(&inner, -half_width, half_width, 1e-12)
        }
        _ => panic!("quadrature oracle supports d <= 2"),
    }
}

/// Sample mean and its standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
