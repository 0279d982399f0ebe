//! `robcov` command line.
//!
//! Exit status: 0 on success, 1 on numerical or I/O failure, 2 on usage
//! errors (bad flags, invalid parameter combinations).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::ensemble::{self, EnsembleConfig};
use crate::experiments::{self, PairMode};
use crate::gauss;
use crate::harness::record::{self, OutputFormat, RunManifest, TrialRecord};
use crate::harness::seed::SeedSource;
use crate::harness::selfcheck;
use crate::testers::{self, DataGenerator, PowerSettings, TesterKind};

/// Environment variable consulted for the master seed when `--seed` is absent.
pub const SEED_ENV: &str = "ROBCOV_SEED";

#[derive(Debug, Parser)]
#[command(name = "robcov", version, about = "Robust covariance testing hard-instance laboratory")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct GlobalArgs {
    /// Dimension d.
    #[arg(long, global = true, default_value_t = 128)]
    dim: usize,
    /// Contamination weight in (0, 1/2).
    #[arg(long, global = true, default_value_t = EnsembleConfig::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Soundness gap for ||A||_F.
    #[arg(long, global = true, default_value_t = EnsembleConfig::DEFAULT_FROB_TARGET)]
    frob_target: f64,
    /// Off-diagonal entries of A have standard deviation entry_scale / d.
    #[arg(long, global = true, default_value_t = EnsembleConfig::DEFAULT_ENTRY_SCALE)]
    entry_scale: f64,
    /// Spectral cap: reject A when ||A||_2 > spec_cap / sqrt(d).
    #[arg(long, global = true, default_value_t = EnsembleConfig::DEFAULT_SPEC_CAP)]
    spec_cap: f64,
    /// Frobenius window lower end.
    #[arg(long, global = true, default_value_t = EnsembleConfig::DEFAULT_FROB_WINDOW.0)]
    frob_lo: f64,
    /// Frobenius window upper end.
    #[arg(long, global = true, default_value_t = EnsembleConfig::DEFAULT_FROB_WINDOW.1)]
    frob_hi: f64,
    /// Trials, or pairs for the pair-based experiments.
    #[arg(long, global = true, default_value_t = 100)]
    trials: usize,
    /// Sample sizes (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    samples: Vec<u64>,
    /// Master seed.
    #[arg(long, global = true, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Output file; a manifest is written next to it. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Worker threads (0: one per core). Output does not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Json => OutputFormat::Json,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact chi-squared inner product of N(0,S1), N(0,S2) against N(0,I).
    Chi2 {
        /// Covariance S1 in matrix text format.
        first: PathBuf,
        /// Covariance S2 in matrix text format.
        second: PathBuf,
        /// Also print the expansion terms for A = S1 - I, B = S2 - I.
        #[arg(long)]
        taylor: bool,
    },
    /// Draw accepted perturbations and report acceptance statistics.
    GenEnsemble {
        /// Directory receiving one matrix file per draw.
        #[arg(long)]
        matrix_dir: Option<PathBuf>,
    },
    /// Tail curve of tr(AB)^2 + tr((AB)^2) over ensemble pairs.
    Concentration {
        /// Thresholds in units of 1/d^2 (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = experiments::DEFAULT_THRESHOLD_UNITS.to_vec())]
        thresholds: Vec<f64>,
    },
    /// E[chi2^N] estimates and total variation bounds over a sweep of N.
    Indist,
    /// Rejection rates of a tester on fresh datasets.
    Power {
        #[arg(long, default_value = "frob")]
        tester: String,
        #[arg(long, default_value = "null")]
        data: String,
        /// Soundness gap gamma for the Frobenius tester.
        #[arg(long, default_value_t = PowerSettings::DEFAULT_GAMMA)]
        gamma: f64,
        /// Threshold for the standardized kurtosis statistic.
        #[arg(long, default_value_t = PowerSettings::DEFAULT_THRESHOLD_SCALE)]
        threshold_scale: f64,
    },
    /// Oracle-backed invariant checks at small scale.
    Selfcheck,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = std::result::Result<T, Failure>;

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.workers)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("robcov: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("robcov: usage error: {msg}");
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("robcov: error: {msg}");
            1
        }
    }
}

fn ensemble_config(g: &GlobalArgs) -> CliResult<EnsembleConfig> {
    let mut cfg = EnsembleConfig::new(g.dim)
        .with_epsilon(g.epsilon)
        .with_entry_scale(g.entry_scale);
    cfg.frob_target = g.frob_target;
    cfg.spec_cap = g.spec_cap;
    cfg.frob_window = (g.frob_lo, g.frob_hi);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Chi2 {
            first,
            second,
            taylor,
        } => chi2(first, second, *taylor),
        Command::Selfcheck => {
            let report = selfcheck::run_all();
            for line in &report {
                println!("{line}");
            }
            if report.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(Failure::Runtime("self check failed".into()))
            }
        }
        Command::GenEnsemble { matrix_dir } => {
            let cfg = ensemble_config(g)?;
            let records = gen_ensemble(&cfg, g, matrix_dir.as_deref())?;
            let mut params = BTreeMap::new();
            if let Some(dir) = matrix_dir {
                params.insert("matrix_dir".into(), Value::from(dir.display().to_string()));
            }
            finish(g, "gen-ensemble", &cfg, params, &records)
        }
        Command::Concentration { thresholds } => {
            let cfg = ensemble_config(g)?;
            if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] > w[1]) {
                return Err(Failure::Usage(
                    "--thresholds must be non-empty and non-decreasing".into(),
                ));
            }
            let records = concentration(&cfg, g, thresholds)?;
            let params = [
                ("pairs".to_string(), Value::from(g.trials)),
                ("threshold_units".to_string(), Value::from(thresholds.clone())),
            ]
            .into_iter()
            .collect();
            finish(g, "concentration", &cfg, params, &records)
        }
        Command::Indist => {
            let cfg = ensemble_config(g)?;
            let ns = if g.samples.is_empty() {
                let d = g.dim as u64;
                vec![d, d * d / 100, d * d / 10, d * d]
            } else {
                g.samples.clone()
            };
            let records = indist(&cfg, g, &ns)?;
            let params = [
                ("pairs".to_string(), Value::from(g.trials)),
                ("samples".to_string(), Value::from(ns)),
            ]
            .into_iter()
            .collect();
            finish(g, "indist", &cfg, params, &records)
        }
        Command::Power {
            tester,
            data,
            gamma,
            threshold_scale,
        } => {
            let cfg = ensemble_config(g)?;
            let tester: TesterKind = tester.parse().map_err(|e: testers::TesterError| Failure::Usage(e.to_string()))?;
            let data: DataGenerator = data.parse().map_err(|e: testers::TesterError| Failure::Usage(e.to_string()))?;
            if g.samples.is_empty() {
                return Err(Failure::Usage("power needs --samples".into()));
            }
            let mut settings = PowerSettings::new(cfg.clone());
            settings.gamma = *gamma;
            settings.threshold_scale = *threshold_scale;
            let records = power(&settings, g, tester, data)?;
            let params = [
                ("tester".to_string(), Value::from(tester.tag())),
                ("data".to_string(), Value::from(data.tag())),
                ("gamma".to_string(), Value::from(*gamma)),
                ("threshold_scale".to_string(), Value::from(*threshold_scale)),
                ("trials".to_string(), Value::from(g.trials)),
                ("samples".to_string(), Value::from(g.samples.clone())),
            ]
            .into_iter()
            .collect();
            finish(g, "power", &cfg, params, &records)
        }
    }
}

fn read_matrix_file(path: &Path) -> CliResult<crate::matcore::SymmetricMatrix> {
    let f = File::open(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    ensemble::read_matrix(BufReader::new(f))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn chi2(first: &Path, second: &Path, taylor: bool) -> CliResult<()> {
    let s1 = read_matrix_file(first)?;
    let s2 = read_matrix_file(second)?;
    let v = gauss::chi2_inner_exact(&s1, &s2).map_err(runtime)?;
    println!("{:?}", v.value());
    if taylor {
        let a = s1.shifted_scaled(-1.0, 1.0);
        let b = s2.shifted_scaled(-1.0, 1.0);
        let t = gauss::chi2_inner_taylor(&a, &b).map_err(runtime)?;
        println!("log {:?}", v.log);
        println!("first_order {:?}", t.first_order);
        println!("correction_bound {:?}", t.correction_bound);
    }
    Ok(())
}

fn gen_ensemble(cfg: &EnsembleConfig, g: &GlobalArgs, dir: Option<&Path>) -> CliResult<Vec<TrialRecord>> {
    use rayon::prelude::*;
    let seeds = SeedSource::new(g.seed, "gen-ensemble");
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let draws: Vec<_> = (0..g.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(i as u64);
            ensemble::sample_perturbation(cfg, &mut rng)
                .map_err(|e| Failure::Runtime(format!("draw {i}: {e}")))
        })
        .collect::<CliResult<_>>()?;
    let mut records = Vec::with_capacity(draws.len());
    for (i, p) in draws.iter().enumerate() {
        let spectral = crate::matcore::spectral_norm(&p.matrix, 1e-9).map_err(runtime)?;
        if let Some(dir) = dir {
            let path = dir.join(format!("A_{i:05}.txt"));
            let f = File::create(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            ensemble::write_matrix(&p.matrix, std::io::BufWriter::new(f)).map_err(runtime)?;
        }
        records.push(
            TrialRecord::new("gen-ensemble", cfg.dim, cfg.epsilon)
                .trial(i as u64, seeds.seed(i as u64))
                .metric("frobenius", crate::matcore::frobenius_norm(&p.matrix))
                .metric("spectral_norm", spectral)
                .metric("spectral_norm_scaled", spectral * (cfg.dim as f64).sqrt())
                .metric("rejected_frobenius", p.rejections.frobenius as f64)
                .metric("rejected_spectral", p.rejections.spectral as f64)
                .metric("rejected_definiteness", p.rejections.definiteness as f64)
                .metric("acceptance_rate", 1.0 / p.attempts() as f64),
        );
    }
    Ok(records)
}

fn concentration(cfg: &EnsembleConfig, g: &GlobalArgs, units: &[f64]) -> CliResult<Vec<TrialRecord>> {
    let seeds = SeedSource::new(g.seed, "concentration");
    let stats = experiments::trace_stat_samples(cfg, g.trials, &seeds).map_err(runtime)?;
    let values: Vec<f64> = stats.iter().map(|s| s.statistic()).collect();
    let thresholds = experiments::scaled_thresholds(cfg.dim, units);
    let curve = experiments::tail_curve(cfg.dim, &values, &thresholds).map_err(runtime)?;
    let mut records: Vec<TrialRecord> = stats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            TrialRecord::new("concentration.pair", cfg.dim, cfg.epsilon)
                .trial(i as u64, seeds.seed(i as u64))
                .metric("trace_ab", s.trace_ab)
                .metric("trace_abab", s.trace_abab)
                .metric("statistic", s.statistic())
        })
        .collect();
    for (i, (p, u)) in curve.points.iter().zip(units).enumerate() {
        let mut r = TrialRecord::new("concentration.tail", cfg.dim, cfg.epsilon)
            .trial(i as u64, 0)
            .metric("threshold", p.threshold)
            .metric("threshold_units", *u)
            .metric("exceed_count", p.exceed_count as f64)
            .metric("exceed_prob", p.exceed_prob)
            .metric("usable", if p.usable { 1.0 } else { 0.0 });
        if let Some(rate) = curve.fitted_rate {
            r = r.metric("fitted_rate", rate);
        }
        records.push(r);
    }
    Ok(records)
}

fn indist(cfg: &EnsembleConfig, g: &GlobalArgs, ns: &[u64]) -> CliResult<Vec<TrialRecord>> {
    let seeds = SeedSource::new(g.seed, "indist");
    let pairs = experiments::pair_log_chi2(cfg, g.trials, &seeds, PairMode::Independent).map_err(runtime)?;
    let logs: Vec<f64> = pairs.iter().map(|p| p.log_chi2).collect();
    let curve = experiments::tv_curve_from_logs(cfg.dim, ns, &logs).map_err(runtime)?;
    let mut records = Vec::with_capacity(curve.len() + pairs.len());
    for (i, p) in curve.iter().enumerate() {
        let e = &p.estimate;
        records.push(
            TrialRecord::new("indist.summary", cfg.dim, cfg.epsilon)
                .samples(p.n)
                .trial(i as u64, 0)
                .metric("pairs", e.pairs as f64)
                .metric("mean_estimate", e.mean_estimate)
                .metric("std_error", e.std_error)
                .metric("log_mean", e.log_mean)
                .metric("trimmed_mean", e.trimmed_mean)
                .metric("max_log_contribution", e.max_log_contribution)
                .metric("heavy_pairs", e.heavy_pairs as f64)
                .metric("log_min", e.log_values.min)
                .metric("log_median", e.log_values.median)
                .metric("log_mean_value", e.log_values.mean)
                .metric("tv_bound", p.bound)
                .metric("tv_bound_raw", p.raw_bound)
                .metric("noise_flag", if p.noise_flag { 1.0 } else { 0.0 }),
        );
    }
    for (i, p) in pairs.iter().enumerate() {
        records.push(
            TrialRecord::new("indist.pair", cfg.dim, cfg.epsilon)
                .trial(i as u64, seeds.seed(i as u64))
                .metric("log_chi2", p.log_chi2)
                .metric("trace_ab", p.trace_ab)
                .metric("trace_abab", p.trace_abab),
        );
    }
    Ok(records)
}

fn power(
    settings: &PowerSettings,
    g: &GlobalArgs,
    tester: TesterKind,
    data: DataGenerator,
) -> CliResult<Vec<TrialRecord>> {
    let cfg = &settings.ensemble;
    let mut records = Vec::new();
    for (k, &n) in g.samples.iter().enumerate() {
        let tag = format!("power/{}/{}/{}", tester.tag(), data.tag(), n);
        let seeds = SeedSource::new(g.seed, tag);
        let res = testers::tester_power(data, tester, settings, n as usize, g.trials, &seeds)
            .map_err(runtime)?;
        records.push(
            TrialRecord::new("power.summary", cfg.dim, cfg.epsilon)
                .samples(n)
                .trial(k as u64, 0)
                .metric("trials", res.trials as f64)
                .metric("reject_rate", res.reject_rate)
                .metric("wilson_lo", res.wilson_interval.0)
                .metric("wilson_hi", res.wilson_interval.1),
        );
        for (i, o) in res.outcomes.iter().enumerate() {
            records.push(
                TrialRecord::new("power.trial", cfg.dim, cfg.epsilon)
                    .samples(n)
                    .trial(i as u64, o.seed)
                    .metric("statistic", o.verdict.statistic)
                    .metric("threshold", o.verdict.threshold)
                    .metric("reject", if o.verdict.reject { 1.0 } else { 0.0 }),
            );
        }
    }
    Ok(records)
}

fn finish(
    g: &GlobalArgs,
    command: &str,
    cfg: &EnsembleConfig,
    parameters: BTreeMap<String, Value>,
    records: &[TrialRecord],
) -> CliResult<()> {
    let format: OutputFormat = g.format.into();
    match &g.out {
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            record::write_records(records, format, &mut lock).map_err(runtime)?;
            lock.flush().map_err(runtime)
        }
        Some(path) => {
            record::emit(records, format, path).map_err(runtime)?;
            let manifest = RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                master_seed: g.seed,
                ensemble: cfg.clone(),
                parameters,
                format,
                outputs: vec![path.display().to_string()],
            };
            manifest.write_next_to(path).map_err(runtime)?;
            Ok(())
        }
    }
}
