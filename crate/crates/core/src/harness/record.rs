//! Trial records, their CSV/JSON encodings, and run manifests.
//!
//! CSV layout: `experiment,dim,epsilon,n_samples,trial_index,seed`, then one
//! column per metric name (sorted) across the whole record set. A record
//! without a given metric leaves that cell empty. Reals are written with 17
//! significant digits. JSON is an array of flat objects carrying the same
//! keys; non-finite metrics appear as the strings `"inf"` / `"-inf"`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::ensemble::EnsembleConfig;

pub const FIXED_COLUMNS: [&str; 6] = [
    "experiment",
    "dim",
    "epsilon",
    "n_samples",
    "trial_index",
    "seed",
];

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("nothing to emit")]
    Empty,
    #[error("record {index} ({experiment}): metric {metric:?} is NaN")]
    NaNMetric {
        index: usize,
        experiment: String,
        metric: String,
    },
    #[error("record {index}: epsilon is NaN")]
    NaNEpsilon { index: usize },
    #[error("metric name {0:?} collides with a fixed column")]
    ReservedMetric(String),
    #[error("malformed input: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RecordError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// One Monte Carlo outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub experiment: String,
    pub dim: usize,
    pub epsilon: f64,
    pub n_samples: u64,
    pub trial_index: u64,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl TrialRecord {
    pub fn new(experiment: impl Into<String>, dim: usize, epsilon: f64) -> Self {
        Self {
            experiment: experiment.into(),
            dim,
            epsilon,
            n_samples: 0,
            trial_index: 0,
            seed: 0,
            metrics: BTreeMap::new(),
        }
    }

    pub fn samples(mut self, n: u64) -> Self {
        self.n_samples = n;
        self
    }

    pub fn trial(mut self, index: u64, seed: u64) -> Self {
        self.trial_index = index;
        self.seed = seed;
        self
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }
}

/// Formats a real with 17 significant digits.
pub fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_real(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| RecordError::Parse(format!("bad real {s:?}")))
}

fn check(records: &[TrialRecord]) -> Result<Vec<String>> {
    if records.is_empty() {
        return Err(RecordError::Empty);
    }
    let mut names = BTreeSet::new();
    for (index, r) in records.iter().enumerate() {
        if r.epsilon.is_nan() {
            return Err(RecordError::NaNEpsilon { index });
        }
        for (k, v) in &r.metrics {
            if v.is_nan() {
                return Err(RecordError::NaNMetric {
                    index,
                    experiment: r.experiment.clone(),
                    metric: k.clone(),
                });
            }
            if FIXED_COLUMNS.contains(&k.as_str()) {
                return Err(RecordError::ReservedMetric(k.clone()));
            }
            names.insert(k.clone());
        }
    }
    Ok(names.into_iter().collect())
}

pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let metrics = check(records)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let header: Vec<&str> = FIXED_COLUMNS
        .iter()
        .copied()
        .chain(metrics.iter().map(String::as_str))
        .collect();
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.experiment.clone(),
            r.dim.to_string(),
            format_real(r.epsilon),
            r.n_samples.to_string(),
            r.trial_index.to_string(),
            r.seed.to_string(),
        ];
        for m in &metrics {
            row.push(r.metrics.get(m).map(|&v| format_real(v)).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < FIXED_COLUMNS.len()
        || header[..FIXED_COLUMNS.len()]
            .iter()
            .zip(FIXED_COLUMNS)
            .any(|(a, b)| a != b)
    {
        return Err(RecordError::Parse(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let int = |i: usize| -> Result<u64> {
            row[i]
                .parse()
                .map_err(|_| RecordError::Parse(format!("bad integer {:?}", &row[i])))
        };
        let mut metrics = BTreeMap::new();
        for (name, cell) in header.iter().zip(row.iter()).skip(FIXED_COLUMNS.len()) {
            if !cell.is_empty() {
                metrics.insert(name.clone(), parse_real(cell)?);
            }
        }
        out.push(TrialRecord {
            experiment: row[0].to_string(),
            dim: int(1)? as usize,
            epsilon: parse_real(&row[2])?,
            n_samples: int(3)?,
            trial_index: int(4)?,
            seed: int(5)?,
            metrics,
        });
    }
    Ok(out)
}

fn real_to_json(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else {
        Value::from(format_real(v))
    }
}

fn json_to_real(v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| RecordError::Parse(format!("bad number {n}"))),
        Value::String(s) => parse_real(s),
        other => Err(RecordError::Parse(format!("expected a real, got {other}"))),
    }
}

pub fn write_json<W: Write>(records: &[TrialRecord], mut out: W) -> Result<()> {
    let metrics = check(records)?;
    let rows: Vec<Value> = records
        .iter()
        .map(|r| {
            let mut obj = Map::new();
            obj.insert("experiment".into(), Value::from(r.experiment.clone()));
            obj.insert("dim".into(), Value::from(r.dim));
            obj.insert("epsilon".into(), real_to_json(r.epsilon));
            obj.insert("n_samples".into(), Value::from(r.n_samples));
            obj.insert("trial_index".into(), Value::from(r.trial_index));
            obj.insert("seed".into(), Value::from(r.seed));
            for m in &metrics {
                let v = r.metrics.get(m).map(|&v| real_to_json(v)).unwrap_or(Value::Null);
                obj.insert(m.clone(), v);
            }
            Value::Object(obj)
        })
        .collect();
    serde_json::to_writer_pretty(&mut out, &rows)?;
    writeln!(out)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let rows: Vec<Map<String, Value>> = serde_json::from_reader(input)?;
    rows.into_iter()
        .map(|obj| {
            let int = |k: &str| -> Result<u64> {
                obj.get(k)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| RecordError::Parse(format!("missing or bad {k}")))
            };
            let experiment = obj
                .get("experiment")
                .and_then(Value::as_str)
                .ok_or_else(|| RecordError::Parse("missing experiment".into()))?
                .to_string();
            let epsilon = json_to_real(
                obj.get("epsilon")
                    .ok_or_else(|| RecordError::Parse("missing epsilon".into()))?,
            )?;
            let mut metrics = BTreeMap::new();
            for (k, v) in &obj {
                if FIXED_COLUMNS.contains(&k.as_str()) || v.is_null() {
                    continue;
                }
                metrics.insert(k.clone(), json_to_real(v)?);
            }
            Ok(TrialRecord {
                experiment,
                dim: int("dim")? as usize,
                epsilon,
                n_samples: int("n_samples")?,
                trial_index: int("trial_index")?,
                seed: int("seed")?,
                metrics,
            })
        })
        .collect()
}

pub fn write_records<W: Write>(records: &[TrialRecord], format: OutputFormat, out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => write_csv(records, out),
        OutputFormat::Json => write_json(records, out),
    }
}

/// Writes `records` to `path`. Validation happens before the file is created,
/// so a refused record set leaves nothing behind.
pub fn emit(records: &[TrialRecord], format: OutputFormat, path: &Path) -> Result<()> {
    check(records)?;
    let mut buf = Vec::new();
    write_records(records, format, &mut buf)?;
    std::fs::write(path, buf).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_records<R: Read>(input: R, format: OutputFormat) -> Result<Vec<TrialRecord>> {
    match format {
        OutputFormat::Csv => read_csv(input),
        OutputFormat::Json => read_json(input),
    }
}

/// Everything needed to replay one output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub master_seed: u64,
    pub ensemble: EnsembleConfig,
    pub parameters: BTreeMap<String, Value>,
    pub format: OutputFormat,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `<output>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write_next_to(&self, output: &Path) -> Result<PathBuf> {
        let path = Self::path_for(output);
        std::fs::write(&path, self.to_json()?).map_err(|source| RecordError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TrialRecord {
        TrialRecord::new("indist.pair", 128, 0.1)
            .samples(1638)
            .trial(3, 0xDEAD_BEEF)
            .metric("log_chi2", 1.234e-5)
            .metric("trace_ab", -0.003)
    }

    #[test]
    fn one_record_csv_has_two_lines() {
        let mut buf = Vec::new();
        write_csv(&[record()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "experiment,dim,epsilon,n_samples,trial_index,seed,log_chi2,trace_ab"
        );
        assert!(lines[1].starts_with("indist.pair,128,1.0000000000000001e-1,1638,3,3735928559,"));
    }

    #[test]
    fn nan_metrics_are_refused() {
        let r = record().metric("bad", f64::NAN);
        let err = write_csv(std::slice::from_ref(&r), Vec::new()).unwrap_err();
        assert!(matches!(err, RecordError::NaNMetric { .. }));
        assert!(write_json(&[r], Vec::new()).is_err());
        assert!(matches!(write_csv(&[], Vec::new()), Err(RecordError::Empty)));
    }

    #[test]
    fn reserved_metric_names_are_refused() {
        let r = record().metric("seed", 1.0);
        assert!(matches!(
            write_csv(&[r], Vec::new()),
            Err(RecordError::ReservedMetric(_))
        ));
    }

    #[test]
    fn sparse_metrics_and_infinities_roundtrip() {
        let a = record().metric("mean", f64::INFINITY);
        let b = TrialRecord::new("indist.summary", 128, 0.1).metric("tv", 0.25);
        for fmt in [OutputFormat::Csv, OutputFormat::Json] {
            let mut buf = Vec::new();
            write_records(&[a.clone(), b.clone()], fmt, &mut buf).unwrap();
            let back = parse_records(&buf[..], fmt).unwrap();
            assert_eq!(back, vec![a.clone(), b.clone()], "{fmt:?}");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let m = RunManifest {
            tool_version: "0.1.0".into(),
            command: "indist".into(),
            master_seed: 7,
            ensemble: EnsembleConfig::new(128),
            parameters: [("pairs".to_string(), Value::from(2000))].into_iter().collect(),
            format: OutputFormat::Csv,
            outputs: vec!["r.csv".into()],
        };
        assert_eq!(RunManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
        assert_eq!(
            RunManifest::path_for(Path::new("out/r.csv")),
            PathBuf::from("out/r.csv.manifest.json")
        );
    }
}
