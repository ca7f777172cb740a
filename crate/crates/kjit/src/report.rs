//! Artifact emission: CSV tables, plain-text summaries, wall-clock timing.
//!
//! Two rules keep runs reproducible and auditable:
//!
//! 1. **CSV files are byte-deterministic.** Floats are written with Rust's
//!    shortest round-trip formatting, rows in a fixed order, and nothing
//!    time- or machine-dependent ever lands in a CSV. Running the same
//!    config and seed twice must produce identical bytes.
//! 2. **Summaries carry no information of their own.** Every number in a
//!    `*_summary.txt` is recomputable from the row-level CSVs; wall-clock
//!    measurements go to a separate `*_timing.txt` precisely because they
//!    are not reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, ReportError>;

// ---- cell formatting -----------------------------------------------------

/// Shortest decimal string that parses back to exactly `v`.
pub fn cell(v: f64) -> String {
    format!("{v}")
}

/// Like [`cell`], with `None` as the empty cell.
pub fn cell_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn cell_usize(v: usize) -> String {
    v.to_string()
}

/// Booleans as `1`/`0`, the friendliest form for downstream tooling.
pub fn cell_bool(v: bool) -> String {
    if v { "1" } else { "0" }.to_string()
}

// ---- artifact writer -------------------------------------------------------

/// Writes artifacts into one output directory, creating it on first use.
#[derive(Debug, Clone)]
pub struct ArtifactWriter {
    dir: PathBuf,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
        Ok(ArtifactWriter { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `name` as a CSV with the given header; returns the full path.
    pub fn write_csv(
        &self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut writer = csv::Writer::from_path(&path)
            .map_err(|source| ReportError::Csv { path: path.clone(), source })?;
        writer
            .write_record(header)
            .and_then(|()| rows.iter().try_for_each(|row| writer.write_record(row)))
            .and_then(|()| writer.flush().map_err(csv::Error::from))
            .map_err(|source| ReportError::Csv { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, text)
            .map_err(|source| ReportError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

// ---- summary statistics ---------------------------------------------------

/// Order statistics of one numeric column.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub p10: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p90: f64,
    pub max: f64,
}

/// Linear-interpolation percentile of an ascending slice (`q` in `[0, 1]`).
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarizes the finite values of a column; `None` when there are none.
pub fn summarize(values: &[f64]) -> Option<SummaryStats> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return None;
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(SummaryStats {
        count: n,
        mean,
        sd,
        min: sorted[0],
        p10: percentile(&sorted, 0.10),
        p25: percentile(&sorted, 0.25),
        median: percentile(&sorted, 0.50),
        p75: percentile(&sorted, 0.75),
        p90: percentile(&sorted, 0.90),
        max: sorted[n - 1],
    })
}

impl std::fmt::Display for SummaryStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "count {}, mean {}, sd {}, min {}, p10 {}, p25 {}, median {}, p75 {}, p90 {}, max {}",
            self.count,
            cell(self.mean),
            cell(self.sd),
            cell(self.min),
            cell(self.p10),
            cell(self.p25),
            cell(self.median),
            cell(self.p75),
            cell(self.p90),
            cell(self.max),
        )
    }
}

/// `label: <summary>` or `label: no finite values` — one summary line.
pub fn describe(label: &str, values: &[f64]) -> String {
    match summarize(values) {
        Some(stats) => format!("{label}: {stats}"),
        None => format!("{label}: no finite values"),
    }
}

// ---- wall-clock timing ------------------------------------------------------

/// Collects wall-clock measurements per label and reports medians. Timings
/// are hardware-bound, so they live in their own text file and never inside
/// the deterministic CSVs; only ordering claims should be read from them.
#[derive(Debug, Default)]
pub struct TimingRecorder {
    samples: BTreeMap<String, Vec<f64>>,
}

impl TimingRecorder {
    pub fn new() -> Self {
        TimingRecorder::default()
    }

    /// Runs `f`, recording its wall-clock seconds under `label`.
    pub fn time<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(label, start.elapsed().as_secs_f64());
        out
    }

    pub fn record(&mut self, label: &str, seconds: f64) {
        self.samples.entry(label.to_string()).or_default().push(seconds);
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Median seconds recorded under `label`, if any.
    pub fn median_seconds(&self, label: &str) -> Option<f64> {
        let runs = self.samples.get(label)?;
        let mut sorted = runs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
        Some(percentile(&sorted, 0.50))
    }

    /// One line per label: median, spread, and run count.
    pub fn render(&self) -> String {
        let mut out = String::from(
            "# Wall-clock medians. Hardware-bound: compare orderings, not absolute values.\n",
        );
        for (label, runs) in &self.samples {
            let mut sorted = runs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
            let median = percentile(&sorted, 0.50);
            let _ = writeln!(
                out,
                "{label}: median {:.3} s over {} run{} (min {:.3} s, max {:.3} s)",
                median,
                sorted.len(),
                if sorted.len() == 1 { "" } else { "s" },
                sorted[0],
                sorted[sorted.len() - 1],
            );
        }
        out
    }
}

// ---- report rendering --------------------------------------------------------

/// Renders a human-readable digest of one output directory: every summary
/// and timing file verbatim, plus row counts of every CSV, in sorted order.
pub fn render_report(dir: &Path) -> std::io::Result<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|entry| entry.file_name().into_string().ok())
        .collect();
    names.sort();

    let mut out = format!("artifacts in {}\n", dir.display());
    let mut any = false;
    for name in &names {
        if name.ends_with(".csv") {
            let text = std::fs::read_to_string(dir.join(name))?;
            let rows = text.lines().count().saturating_sub(1);
            let _ = writeln!(out, "\n== {name} ({rows} data rows)");
            if let Some(header) = text.lines().next() {
                let _ = writeln!(out, "   columns: {header}");
            }
            any = true;
        }
    }
    for name in &names {
        if name.ends_with(".txt") {
            let text = std::fs::read_to_string(dir.join(name))?;
            let _ = writeln!(out, "\n== {name}\n{}", text.trim_end());
            any = true;
        }
    }
    if !any {
        let _ = writeln!(out, "(no CSV or text artifacts found)");
    }
    Ok(out)
}
