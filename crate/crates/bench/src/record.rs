//! Run records and their on-disk form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use prefnash::gne::SolveStatus;
use prefnash::preference::ThetaVector;
use serde::{Deserialize, Serialize};

use crate::error::BenchError;

/// Bumped whenever a file layout or column name changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const PLOT_FILE: &str = "plot.csv";
pub const THETA_FILE: &str = "theta.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const AGGREGATE_FILE: &str = "aggregate.txt";

/// What the per-agent metric columns hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// Hidden objective `J_i` at the learned equilibrium.
    Objective,
    /// Best-response deviation of the learned gains.
    BrDeviation,
}

impl MetricKind {
    fn prefix(self) -> &'static str {
        match self {
            MetricKind::Objective => "J",
            MetricKind::BrDeviation => "brdev",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub k: usize,
    pub delta: f64,
    pub sigma: f64,
    pub query_status: SolveStatus,
    pub query_residual: f64,
    pub learned_status: SolveStatus,
    pub learned_residual: f64,
    pub train_warnings: usize,
    pub retries: usize,
    pub oracle_queries: u64,
    /// Query point `x^k`.
    pub query: Vec<f64>,
    /// Equilibrium of the surrogate game after retraining.
    pub learned: Vec<f64>,
    pub metrics: Vec<f64>,
    /// `‖x̂^k − x*‖_∞` when a reference equilibrium is known.
    pub ref_error: Option<f64>,
    /// Normalized closed-loop cost RMSE, on the iterations where it was computed.
    pub rmse: Option<f64>,
}

impl IterationRow {
    pub fn max_metric(&self) -> f64 {
        if self.metrics.iter().any(|v| v.is_nan()) {
            return f64::NAN;
        }
        self.metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub problem: String,
    pub seed: u64,
    pub metric: MetricKind,
    pub rows: Vec<IterationRow>,
    pub x_final: Vec<f64>,
    pub final_status: Option<SolveStatus>,
    pub thetas: Vec<ThetaVector>,
    pub reference: Option<Vec<f64>>,
    pub oracle_queries: u64,
    pub wall_time_s: f64,
    /// Set when the run stopped early; the rows hold what was completed.
    pub error: Option<String>,
}

/// 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64, BenchError> {
    s.parse().map_err(|_| BenchError::Format(format!("bad number {s:?}")))
}

fn parse_opt(s: &str) -> Result<Option<f64>, BenchError> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

fn parse_int<T: std::str::FromStr>(s: &str) -> Result<T, BenchError> {
    s.parse().map_err(|_| BenchError::Format(format!("bad integer {s:?}")))
}

fn parse_status(s: &str) -> Result<SolveStatus, BenchError> {
    s.parse().map_err(|_| BenchError::Format(format!("bad status {s:?}")))
}

const LEADING: [&str; 10] = [
    "k",
    "delta",
    "sigma",
    "query_status",
    "query_residual",
    "learned_status",
    "learned_residual",
    "train_warnings",
    "retries",
    "oracle_queries",
];

pub fn iteration_header(n: usize, agents: usize, metric: MetricKind) -> Vec<String> {
    let p = metric.prefix();
    let mut h: Vec<String> = LEADING.iter().map(|s| s.to_string()).collect();
    h.extend((0..n).map(|j| format!("x_{j}")));
    h.extend((0..n).map(|j| format!("xhat_{j}")));
    h.extend((0..agents).map(|i| format!("{p}_{i}")));
    h.push(format!("max_{p}"));
    h.push("ref_error".into());
    h.push("rmse".into());
    h
}

pub fn write_iterations(path: &Path, rows: &[IterationRow], n: usize, agents: usize, metric: MetricKind) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(iteration_header(n, agents, metric))?;
    for r in rows {
        let mut rec = vec![
            r.k.to_string(),
            fmt_f64(r.delta),
            fmt_f64(r.sigma),
            r.query_status.as_str().to_string(),
            fmt_f64(r.query_residual),
            r.learned_status.as_str().to_string(),
            fmt_f64(r.learned_residual),
            r.train_warnings.to_string(),
            r.retries.to_string(),
            r.oracle_queries.to_string(),
        ];
        rec.extend(r.query.iter().chain(&r.learned).chain(&r.metrics).map(|v| fmt_f64(*v)));
        rec.push(fmt_f64(r.max_metric()));
        rec.push(r.ref_error.map(fmt_f64).unwrap_or_default());
        rec.push(r.rmse.map(fmt_f64).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))?;
    Ok(())
}

/// Reads an iterations file back, recovering the dimensions from its header.
pub fn read_iterations(path: &Path) -> Result<(Vec<IterationRow>, MetricKind), BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.iter().filter(|h| h.starts_with("x_")).count();
    let metric = if header.iter().any(|h| h == "max_brdev") {
        MetricKind::BrDeviation
    } else {
        MetricKind::Objective
    };
    let agents = header.len().saturating_sub(LEADING.len() + 2 * n + 3);
    let expected = iteration_header(n, agents, metric);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(BenchError::Format(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |j: usize| rec.get(j).unwrap_or("");
        let floats = |from: usize, count: usize| (from..from + count).map(|j| parse_f64(f(j))).collect::<Result<Vec<_>, _>>();
        let base = LEADING.len();
        let tail = base + 2 * n + agents;
        rows.push(IterationRow {
            k: parse_int(f(0))?,
            delta: parse_f64(f(1))?,
            sigma: parse_f64(f(2))?,
            query_status: parse_status(f(3))?,
            query_residual: parse_f64(f(4))?,
            learned_status: parse_status(f(5))?,
            learned_residual: parse_f64(f(6))?,
            train_warnings: parse_int(f(7))?,
            retries: parse_int(f(8))?,
            oracle_queries: parse_int(f(9))?,
            query: floats(base, n)?,
            learned: floats(base + n, n)?,
            metrics: floats(base + 2 * n, agents)?,
            ref_error: parse_opt(f(tail + 1))?,
            rmse: parse_opt(f(tail + 2))?,
        });
    }
    Ok((rows, metric))
}

/// Learned equilibrium per iteration with the reference as constant columns.
pub fn write_plot(path: &Path, rows: &[IterationRow], n: usize, reference: Option<&[f64]>) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["k".to_string()];
    header.extend((0..n).map(|j| format!("xhat_{j}")));
    if reference.is_some() {
        header.extend((0..n).map(|j| format!("ref_{j}")));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.k.to_string()];
        rec.extend(r.learned.iter().map(|v| fmt_f64(*v)));
        if let Some(x) = reference {
            rec.extend(x.iter().map(|v| fmt_f64(*v)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThetaFile {
    pub schema_version: u32,
    pub problem: String,
    pub seed: u64,
    pub thetas: Vec<ThetaVector>,
    pub x_final: Vec<f64>,
}

fn write_text(path: &Path, text: &str) -> Result<(), BenchError> {
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

impl RunRecord {
    pub fn dim(&self) -> usize {
        self.rows.first().map(|r| r.query.len()).unwrap_or(self.x_final.len())
    }

    pub fn agents(&self) -> usize {
        self.rows.first().map(|r| r.metrics.len()).unwrap_or(self.thetas.len())
    }

    pub fn last(&self) -> Option<&IterationRow> {
        self.rows.last()
    }

    /// Last computed RMSE.
    pub fn final_rmse(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.rmse)
    }

    /// Writes every run file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path, config_snapshot: &str) -> Result<(), BenchError> {
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
        let (n, agents) = (self.dim(), self.agents());
        write_iterations(&dir.join(ITERATIONS_FILE), &self.rows, n, agents, self.metric)?;
        write_plot(&dir.join(PLOT_FILE), &self.rows, n, self.reference.as_deref())?;
        let theta = ThetaFile {
            schema_version: SCHEMA_VERSION,
            problem: self.problem.clone(),
            seed: self.seed,
            thetas: self.thetas.clone(),
            x_final: self.x_final.clone(),
        };
        write_text(&dir.join(THETA_FILE), &serde_json::to_string_pretty(&theta)?)?;
        write_text(&dir.join(CONFIG_FILE), config_snapshot)?;
        write_text(&dir.join(SUMMARY_FILE), &self.summary())?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "schema_version = {SCHEMA_VERSION}");
        let _ = writeln!(s, "problem = {}", self.problem);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "iterations = {}", self.rows.len());
        let _ = writeln!(s, "oracle_queries = {}", self.oracle_queries);
        let _ = writeln!(s, "wall_time_s = {:.3}", self.wall_time_s);
        let status = self.final_status.map(|s| s.as_str()).unwrap_or("none");
        let _ = writeln!(s, "final_status = {status}");
        let _ = writeln!(s, "metric = {}", self.metric.prefix());
        let _ = writeln!(s, "final_max_metric = {}", opt(self.last().map(IterationRow::max_metric)));
        let _ = writeln!(s, "final_ref_error = {}", opt(self.last().and_then(|r| r.ref_error)));
        let _ = writeln!(s, "final_rmse = {}", opt(self.final_rmse()));
        let x: Vec<String> = self.x_final.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(s, "x_final = [{}]", x.join(", "));
        if let Some(e) = &self.error {
            let _ = writeln!(s, "error = {e}");
        }
        s
    }
}

/// Median and interquartile range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(Spread {
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
    })
}

/// Summary over repeated runs of the final metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub max_metric: Option<Spread>,
    pub ref_error: Option<Spread>,
    pub rmse: Option<Spread>,
}

impl Aggregate {
    pub fn from_rows<'a>(runs: impl IntoIterator<Item = &'a [IterationRow]>) -> Self {
        let mut count = 0;
        let (mut m, mut e, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for rows in runs {
            count += 1;
            if let Some(last) = rows.last() {
                m.push(last.max_metric());
                e.extend(last.ref_error);
            }
            r.extend(rows.iter().rev().find_map(|row| row.rmse));
        }
        Self {
            runs: count,
            max_metric: spread(&m),
            ref_error: spread(&e),
            rmse: spread(&r),
        }
    }

    pub fn from_records(records: &[RunRecord]) -> Self {
        Self::from_rows(records.iter().map(|r| r.rows.as_slice()))
    }

    /// Recomputes the aggregate from the iteration files of stored runs.
    pub fn from_dirs(dirs: &[PathBuf]) -> Result<Self, BenchError> {
        let rows = dirs
            .iter()
            .map(|d| read_iterations(&d.join(ITERATIONS_FILE)).map(|(r, _)| r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_rows(rows.iter().map(Vec::as_slice)))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "schema_version = {SCHEMA_VERSION}");
        let _ = writeln!(s, "runs = {}", self.runs);
        for (name, v) in [("max_metric", self.max_metric), ("ref_error", self.ref_error), ("rmse", self.rmse)] {
            match v {
                Some(sp) => {
                    let _ = writeln!(s, "{name}_median = {}", fmt_f64(sp.median));
                    let _ = writeln!(s, "{name}_iqr = {}", fmt_f64(sp.iqr()));
                }
                None => {
                    let _ = writeln!(s, "{name}_median = none");
                }
            }
        }
        s
    }
}
