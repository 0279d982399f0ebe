//! Monte Carlo measurements over the perturbation ensemble: tails of the
//! trace statistic `tr(AB)^2 + tr((AB)^2)`, the chi-squared inner product of
//! `N`-sample product distributions, and the total variation bound it implies.
//!
//! The product-distribution quantity never touches samples. For independent
//! draws `A`, `B` from the ensemble,
//!
//! ```text
//! chi2_{G^N}(D^N, D^N) = E_{A,B} [ chi2_G(D_A, D_B)^N ],
//! ```
//!
//! so each pair contributes `exp(N * log chi2_G(D_A, D_B))`, aggregated in
//! log space.
//!
//! Every pair draws from its own stream (`SeedSource::stream(pair_index)`)
//! and results are collected in pair order, so the output does not depend
//! on how many worker threads ran.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{self, EnsembleConfig, EnsembleError, GapCheck};
use crate::gauss::{tv_lower_bound, GaussError};
use crate::harness::seed::SeedSource;
use crate::matcore::{trace_product_pow, MatError};

/// Exceedance points backed by fewer hits than this are not used in the rate fit.
pub const MIN_TAIL_COUNT: usize = 20;

/// `N * log chi2` above this would overflow `exp` in linear space.
pub const HEAVY_LOG_CONTRIBUTION: f64 = 700.0;

/// Default tail thresholds, in units of `1/d^2`. At the default ensemble
/// the exceedance probability is already below 1e-3 at `3/d^2`.
pub const DEFAULT_THRESHOLD_UNITS: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("pair {index}: {source}")]
    Pair {
        index: usize,
        #[source]
        source: EnsembleError,
    },
    #[error("invalid experiment parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error(transparent)]
    Matrix(#[from] MatError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Trace statistics of one ensemble pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTraceStats {
    pub trace_ab: f64,
    pub trace_abab: f64,
}

impl PairTraceStats {
    /// `tr(AB)^2 + tr((AB)^2)`.
    pub fn statistic(&self) -> f64 {
        self.trace_ab * self.trace_ab + self.trace_abab
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub threshold: f64,
    pub exceed_count: usize,
    pub exceed_prob: f64,
    /// False when `exceed_count < MIN_TAIL_COUNT`.
    pub usable: bool,
}

/// Empirical exceedance curve `t -> P[s > t]` and its fitted decay rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCurve {
    pub dim: usize,
    pub pairs: usize,
    pub points: Vec<TailPoint>,
    /// Least-squares slope of `-log P` against `t` over usable points;
    /// `None` with fewer than two usable points.
    pub fitted_rate: Option<f64>,
}

impl TailCurve {
    pub fn thresholds(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.threshold).collect()
    }

    pub fn exceed_prob(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.exceed_prob).collect()
    }
}

fn with_index<T>(index: usize, r: std::result::Result<T, EnsembleError>) -> Result<T> {
    r.map_err(|source| ExperimentError::Pair { index, source })
}

/// Draws `pairs` independent accepted pairs and records their trace statistics.
pub fn trace_stat_samples(
    cfg: &EnsembleConfig,
    pairs: usize,
    seeds: &SeedSource,
) -> Result<Vec<PairTraceStats>> {
    cfg.validate()?;
    (0..pairs)
        .into_par_iter()
        .map(|index| {
            let mut rng = seeds.stream(index as u64);
            let a = with_index(index, ensemble::sample_perturbation(cfg, &mut rng))?.matrix;
            let b = with_index(index, ensemble::sample_perturbation(cfg, &mut rng))?.matrix;
            Ok(PairTraceStats {
                trace_ab: trace_product_pow(&a, &b, 1)?,
                trace_abab: trace_product_pow(&a, &b, 2)?,
            })
        })
        .collect()
}

/// Builds the exceedance curve for a fixed set of statistic values.
///
/// Thresholds must be non-decreasing.
pub fn tail_curve(dim: usize, statistics: &[f64], thresholds: &[f64]) -> Result<TailCurve> {
    if statistics.is_empty() {
        return Err(ExperimentError::InvalidParameters(
            "no statistics to summarize".into(),
        ));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(ExperimentError::InvalidParameters(
            "thresholds must be non-empty and non-decreasing".into(),
        ));
    }
    let n = statistics.len();
    let points: Vec<TailPoint> = thresholds
        .iter()
        .map(|&t| {
            let count = statistics.iter().filter(|&&s| s > t).count();
            TailPoint {
                threshold: t,
                exceed_count: count,
                exceed_prob: count as f64 / n as f64,
                usable: count >= MIN_TAIL_COUNT,
            }
        })
        .collect();
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.usable)
        .map(|p| (p.threshold, -p.exceed_prob.ln()))
        .collect();
    Ok(TailCurve {
        dim,
        pairs: n,
        fitted_rate: least_squares_slope(&usable),
        points,
    })
}

fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Tail curve of `tr(AB)^2 + tr((AB)^2)` over fresh ensemble pairs.
pub fn trace_stat_tail(
    cfg: &EnsembleConfig,
    pairs: usize,
    thresholds: &[f64],
    seeds: &SeedSource,
) -> Result<TailCurve> {
    let stats = trace_stat_samples(cfg, pairs, seeds)?;
    let values: Vec<f64> = stats.iter().map(PairTraceStats::statistic).collect();
    tail_curve(cfg.dim, &values, thresholds)
}

/// Thresholds `units / d^2`.
pub fn scaled_thresholds(dim: usize, units: &[f64]) -> Vec<f64> {
    let d2 = (dim * dim) as f64;
    units.iter().map(|u| u / d2).collect()
}

/// How the second member of each pair is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Independent draws, as in the product-distribution identity.
    Independent,
    /// `B = A`; gives self inner products (testing hook).
    SelfPairs,
}

/// One pair's mixture chi-squared value, in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairChi2 {
    pub log_chi2: f64,
    pub trace_ab: f64,
    pub trace_abab: f64,
}

/// `log chi2_G(D_A, D_B)` for `pairs` ensemble pairs.
pub fn pair_log_chi2(
    cfg: &EnsembleConfig,
    pairs: usize,
    seeds: &SeedSource,
    mode: PairMode,
) -> Result<Vec<PairChi2>> {
    cfg.validate()?;
    if pairs == 0 {
        return Err(ExperimentError::InvalidParameters("pairs must be >= 1".into()));
    }
    let gap = GapCheck::Enforce(cfg.frob_target);
    (0..pairs)
        .into_par_iter()
        .map(|index| {
            let mut rng = seeds.stream(index as u64);
            let a = with_index(index, ensemble::sample_perturbation(cfg, &mut rng))?.matrix;
            let b = match mode {
                PairMode::Independent => {
                    with_index(index, ensemble::sample_perturbation(cfg, &mut rng))?.matrix
                }
                PairMode::SelfPairs => a.clone(),
            };
            let trace_ab = trace_product_pow(&a, &b, 1)?;
            let trace_abab = trace_product_pow(&a, &b, 2)?;
            let m1 = with_index(index, ensemble::build_model_with(a, cfg.epsilon, gap))?;
            let m2 = with_index(index, ensemble::build_model_with(b, cfg.epsilon, gap))?;
            let log_chi2 = with_index(index, ensemble::chi2_mixture_exact(&m1, &m2))?.log;
            Ok(PairChi2 {
                log_chi2,
                trace_ab,
                trace_abab,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

/// Monte Carlo estimate of `E[chi2_G(D_A, D_B)^N]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductChi2Estimate {
    pub dim: usize,
    pub n_samples_per_dataset: u64,
    pub pairs: usize,
    pub mean_estimate: f64,
    pub std_error: f64,
    /// `log(mean_estimate)`, finite even when the mean overflows.
    pub log_mean: f64,
    /// Mean with the largest 1% of contributions removed.
    pub trimmed_mean: f64,
    /// Largest per-pair `N * log chi2`.
    pub max_log_contribution: f64,
    /// Pairs whose `N * log chi2` exceeds [`HEAVY_LOG_CONTRIBUTION`].
    pub heavy_pairs: usize,
    /// Summary of `N * log chi2` across pairs.
    pub log_values: LogSummary,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Aggregates per-pair `log chi2` values into the `N`-fold product estimate.
///
/// Contributions are sorted before summation so the result depends only on
/// the multiset of inputs.
pub fn product_estimate_from_logs(dim: usize, n: u64, log_chi2: &[f64]) -> ProductChi2Estimate {
    assert!(!log_chi2.is_empty(), "at least one pair is required");
    let nf = n as f64;
    let mut contrib: Vec<f64> = log_chi2
        .iter()
        .map(|&l| if n == 0 { 0.0 } else { nf * l })
        .collect();
    contrib.sort_by(|a, b| a.total_cmp(b));
    let pairs = contrib.len();
    let top = contrib[pairs - 1];
    let scaled: Vec<f64> = contrib.iter().map(|c| (c - top).exp()).collect();
    let scaled_mean = compensated_sum(scaled.iter().copied()) / pairs as f64;
    let log_mean = top + scaled_mean.ln();
    let std_error = if pairs > 1 {
        let var = compensated_sum(scaled.iter().map(|s| (s - scaled_mean) * (s - scaled_mean)))
            / (pairs - 1) as f64;
        (top + 0.5 * var.ln() - 0.5 * (pairs as f64).ln()).exp()
    } else {
        0.0
    };
    let keep = pairs - pairs / 100;
    let trimmed_mean = {
        let kept = &contrib[..keep];
        let kt = kept[keep - 1];
        let s = compensated_sum(kept.iter().map(|c| (c - kt).exp())) / keep as f64;
        (kt + s.ln()).exp()
    };
    let median = if pairs % 2 == 1 {
        contrib[pairs / 2]
    } else {
        0.5 * (contrib[pairs / 2 - 1] + contrib[pairs / 2])
    };
    ProductChi2Estimate {
        dim,
        n_samples_per_dataset: n,
        pairs,
        mean_estimate: log_mean.exp(),
        std_error,
        log_mean,
        trimmed_mean,
        max_log_contribution: top,
        heavy_pairs: contrib.iter().filter(|&&c| c > HEAVY_LOG_CONTRIBUTION).count(),
        log_values: LogSummary {
            min: contrib[0],
            median,
            mean: compensated_sum(contrib.iter().copied()) / pairs as f64,
            max: top,
        },
    }
}

/// `E[chi2_G(D_A, D_B)^N]` over `pairs` fresh ensemble pairs.
pub fn chi2_product_estimate(
    cfg: &EnsembleConfig,
    n: u64,
    pairs: usize,
    seeds: &SeedSource,
    mode: PairMode,
) -> Result<ProductChi2Estimate> {
    let logs: Vec<f64> = pair_log_chi2(cfg, pairs, seeds, mode)?
        .iter()
        .map(|p| p.log_chi2)
        .collect();
    Ok(product_estimate_from_logs(cfg.dim, n, &logs))
}

/// One point of the total-variation bound curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvPoint {
    pub n: u64,
    /// Upper bound on `d_TV(G^N, D^N)` after isotonic cleanup.
    pub bound: f64,
    /// The bound computed from this point's estimate alone.
    pub raw_bound: f64,
    /// The estimate fell more than three standard errors below 1 and was
    /// treated as Monte Carlo noise (bound clamped to 0).
    pub noise_flag: bool,
    pub estimate: ProductChi2Estimate,
}

/// Total variation upper bounds `(1/2) sqrt(E[chi2^N] - 1)` over a sweep of `N`.
///
/// All `N` share one set of pairs. Points are returned in ascending `N`, and
/// `bound` is the isotonic (non-decreasing) regression of `raw_bound`.
pub fn tv_curve(
    cfg: &EnsembleConfig,
    ns: &[u64],
    pairs: usize,
    seeds: &SeedSource,
) -> Result<Vec<TvPoint>> {
    if ns.is_empty() {
        return Err(ExperimentError::InvalidParameters("empty sample-size sweep".into()));
    }
    let logs: Vec<f64> = pair_log_chi2(cfg, pairs, seeds, PairMode::Independent)?
        .iter()
        .map(|p| p.log_chi2)
        .collect();
    tv_curve_from_logs(cfg.dim, ns, &logs)
}

pub fn tv_curve_from_logs(dim: usize, ns: &[u64], log_chi2: &[f64]) -> Result<Vec<TvPoint>> {
    let mut sorted = ns.to_vec();
    sorted.sort_unstable();
    let mut points = Vec::with_capacity(sorted.len());
    for &n in &sorted {
        let estimate = product_estimate_from_logs(dim, n, log_chi2);
        let mean = estimate.mean_estimate;
        let (raw_bound, noise_flag) = if mean < 1.0 - 3.0 * estimate.std_error {
            (0.0, true)
        } else if mean < 1.0 {
            (0.0, false)
        } else {
            (tv_lower_bound(mean)?, false)
        };
        points.push(TvPoint {
            n,
            bound: raw_bound,
            raw_bound,
            noise_flag,
            estimate,
        });
    }
    let raw: Vec<f64> = points.iter().map(|p| p.raw_bound).collect();
    for (p, v) in points.iter_mut().zip(isotonic_non_decreasing(&raw)) {
        p.bound = v;
    }
    Ok(points)
}

/// Pool-adjacent-violators fit of a non-decreasing sequence (equal weights).
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (v2, n2) = blocks[blocks.len() - 1];
            let (v1, n1) = blocks[blocks.len() - 2];
            if v1 <= v2 {
                break;
            }
            blocks.pop();
            let merged = if v1.is_infinite() || v2.is_infinite() {
                v1.max(v2)
            } else {
                (v1 * n1 as f64 + v2 * n2 as f64) / (n1 + n2) as f64
            };
            *blocks.last_mut().expect("non-empty") = (merged, n1 + n2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, n)| std::iter::repeat_n(v, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_samples_give_exactly_one() {
        let est = product_estimate_from_logs(8, 0, &[0.3, -0.2, 1e-3, 5.0]);
        assert_eq!(est.mean_estimate, 1.0);
        assert_eq!(est.log_mean, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn estimate_matches_direct_mean_for_small_values() {
        let logs = [0.01, -0.02, 0.005, 0.0, 0.03];
        let n = 10;
        let est = product_estimate_from_logs(4, n, &logs);
        let direct: Vec<f64> = logs.iter().map(|l| (n as f64 * l).exp()).collect();
        let mean = direct.iter().sum::<f64>() / 5.0;
        let var = direct.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((est.mean_estimate - mean).abs() < 1e-14);
        assert!((est.std_error - (var / 5.0).sqrt()).abs() < 1e-14);
        assert_eq!(est.max_log_contribution, 0.3);
        assert_eq!(est.heavy_pairs, 0);
    }

    #[test]
    fn heavy_contributions_stay_finite_in_log_space() {
        let est = product_estimate_from_logs(4, 1000, &[1.0, 0.0, 0.0]);
        assert_eq!(est.heavy_pairs, 1);
        assert!(est.mean_estimate.is_infinite());
        assert!((est.log_mean - (1000.0 - 3f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn aggregation_ignores_input_order() {
        let logs: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 * 1e-3 - 4e-3).collect();
        let mut rev = logs.clone();
        rev.reverse();
        let a = product_estimate_from_logs(4, 77, &logs);
        let b = product_estimate_from_logs(4, 77, &rev);
        assert_eq!(a, b);
    }

    #[test]
    fn trimmed_mean_drops_top_percent() {
        let mut logs = vec![0.0; 99];
        logs.push(1.0);
        let est = product_estimate_from_logs(4, 1, &logs);
        assert_eq!(est.trimmed_mean, 1.0);
        assert!(est.mean_estimate > 1.0);
    }

    #[test]
    fn isotonic_fit_examples() {
        assert_eq!(isotonic_non_decreasing(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_non_decreasing(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = isotonic_non_decreasing(&[5.0, 1.0, 0.0]);
        assert!(v.iter().all(|&x| (x - 2.0).abs() < 1e-15));
    }

    #[test]
    fn tv_curve_zero_samples_and_noise_flag() {
        let logs = vec![-0.01; 10];
        let pts = tv_curve_from_logs(4, &[100, 0], &logs).unwrap();
        assert_eq!(pts[0].n, 0);
        assert_eq!(pts[0].bound, 0.0);
        // All pairs identical and below 1: standard error 0, flagged as noise.
        assert!(pts[1].noise_flag);
        assert_eq!(pts[1].bound, 0.0);
    }

    #[test]
    fn tail_curve_fit_and_flags() {
        // Exact exponential quantiles: P[s > t] = exp(-2 t).
        let n = 10_000;
        let stats: Vec<f64> = (0..n)
            .map(|i| -((i as f64 + 0.5) / n as f64).ln() / 2.0)
            .collect();
        let curve = tail_curve(4, &stats, &[0.5, 1.0, 1.5, 2.0, 10.0]).unwrap();
        assert!(!curve.points[4].usable);
        let rate = curve.fitted_rate.unwrap();
        assert!((rate - 2.0).abs() < 0.01, "{rate}");
        // Doubling the thresholds doubles -log P.
        let c2 = tail_curve(4, &stats, &[1.0, 2.0]).unwrap();
        let c1 = tail_curve(4, &stats, &[0.5, 1.0]).unwrap();
        for (p1, p2) in c1.points.iter().zip(&c2.points) {
            let ratio = p2.exceed_prob.ln() / p1.exceed_prob.ln();
            assert!((ratio - 2.0).abs() < 0.02, "{ratio}");
        }
        assert!(tail_curve(4, &stats, &[2.0, 1.0]).is_err());
        assert!(tail_curve(4, &[], &[1.0]).is_err());
    }
}
