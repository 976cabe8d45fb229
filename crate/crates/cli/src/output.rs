//! Files written by a run: time series, density snapshots, the repeat
//! summary and the manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use rvbatch_core::{DensityGrid, Method, RunOutput};

use crate::config::ConfigFile;
use crate::error::{CliError, Result};

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, e.into())
}

pub fn series_name(method: Method) -> String {
    format!("series_{method}.csv")
}

/// `t` is printed with the shortest representation that round-trips, so
/// `1`, `0.5`, `10`.
pub fn density_name(method: Method, t: f64) -> String {
    format!("density_{method}_t{t}.csv")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per record: `t, mean, variance, error, lambda_mean, clamp_count`.
/// Multi-dimensional means get one column per component (`mean_0`, ...).
/// Methods without `λ` leave the last two columns empty.
pub fn write_series(path: &Path, out: &RunOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let dim = out.mean_v.first().map_or(1, Vec::len);
    let mut header = vec!["t".to_string()];
    if dim == 1 {
        header.push("mean".into());
    } else {
        header.extend((0..dim).map(|k| format!("mean_{k}")));
    }
    header.extend(["variance", "error", "lambda_mean", "clamp_count"].map(String::from));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for k in 0..out.times.len() {
        let mut row = vec![out.times[k].to_string()];
        row.extend(out.mean_v[k].iter().map(f64::to_string));
        row.push(out.var_v[k].to_string());
        row.push(out.error[k].to_string());
        row.push(opt(out.lambda_mean[k]));
        row.push(opt(out.clamp_count[k]));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_density(path: &Path, grid: &DensityGrid) -> Result<()> {
    let mut w = create(path)?;
    grid.write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Row of `summary.csv`: error statistics of one method at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: usize,
    pub m: usize,
    pub method: Method,
    pub repeats: usize,
    pub mean_error: f64,
    pub rms_error: f64,
    /// Normal-approximation 95% band of the mean error; blank for one repeat.
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub mean_final_lambda: Option<f64>,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CliError::io(path, e.into()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Record of what produced a run directory. `config` is accepted back by
/// `--config manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub files: Vec<String>,
    pub config: ConfigFile,
}

impl Manifest {
    pub fn new(config: ConfigFile, seeds: Vec<u64>, files: &[PathBuf]) -> Self {
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            created,
            seeds,
            threads: rayon::current_num_threads(),
            files: files
                .iter()
                .filter_map(|p| p.file_name())
                .map(|f| f.to_string_lossy().into_owned())
                .collect(),
            config,
        }
    }
}
