//! Runs a resolved experiment and writes its artifacts.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use rvbatch_core::{coupled_run_configs, rmse_over_repeats, RunOutput, SimConfig};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::output::{
    density_name, series_name, write_density, write_json, write_series, write_summary, Manifest,
    SummaryRow,
};

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    /// Paths of every file written, manifest last.
    pub files: Vec<PathBuf>,
    /// Empty unless the experiment has a sweep or more than one repeat.
    pub summary: Vec<SummaryRow>,
    /// Coupled outputs of the base seed at the first sweep point.
    pub outputs: Vec<RunOutput>,
}

/// Runs `f` on a pool of `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| CliError::config(format!("cannot start {k} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn coupled(cfg: &ExperimentConfig, point: &SimConfig, seed: u64) -> Result<Vec<RunOutput>> {
    let mut base = point.clone();
    base.seed = seed;
    Ok(coupled_run_configs(&cfg.method_configs(&base))?)
}

fn summarize(point: &SimConfig, runs: &[Vec<RunOutput>], method_idx: usize) -> Result<SummaryRow> {
    let errors: Vec<f64> = runs.iter().map(|r| r[method_idx].final_error()).collect();
    let lambdas: Vec<f64> = runs
        .iter()
        .filter_map(|r| r[method_idx].final_lambda())
        .collect();
    let (mean, rms, band) = if errors.len() >= 2 {
        let s = rmse_over_repeats(&errors)?;
        (s.mean, s.rms, Some(s.band))
    } else {
        (errors[0], errors[0].abs(), None)
    };
    Ok(SummaryRow {
        n: point.n,
        m: point.m,
        method: runs[0][method_idx].method,
        repeats: errors.len(),
        mean_error: mean,
        rms_error: rms,
        ci_low: band.map(|b| b.0),
        ci_high: band.map(|b| b.1),
        mean_final_lambda: (!lambdas.is_empty())
            .then(|| lambdas.iter().sum::<f64>() / lambdas.len() as f64),
    })
}

fn write_run(dir: &Path, outputs: &[RunOutput], files: &mut Vec<PathBuf>) -> Result<()> {
    for out in outputs {
        let path = dir.join(series_name(out.method));
        write_series(&path, out)?;
        files.push(path);
        for snap in &out.snapshots {
            let path = dir.join(density_name(out.method, snap.time));
            write_density(&path, &snap.density)?;
            files.push(path);
        }
    }
    Ok(())
}

/// Runs every (sweep point, seed) job, each a coupled run over the
/// configured methods, then writes:
/// series and density files of the base seed at the first sweep point,
/// `summary.csv` when there is a sweep or more than one repeat, and
/// `manifest.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let points = cfg.point_configs();
    let seeds = cfg.seeds();
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();

    let results: Vec<Vec<RunOutput>> = with_threads(cfg.threads, || {
        jobs.par_iter()
            .map(|&(p, seed)| coupled(cfg, &points[p], seed))
            .collect::<Result<Vec<_>>>()
    })??;

    let mut files = Vec::new();
    write_run(&cfg.out, &results[0], &mut files)?;

    let mut summary = Vec::new();
    if cfg.sweep.is_some() || cfg.repeats > 1 {
        for (p, point) in points.iter().enumerate() {
            let runs = &results[p * seeds.len()..(p + 1) * seeds.len()];
            for k in 0..cfg.methods.len() {
                summary.push(summarize(point, runs, k)?);
            }
        }
        let path = cfg.out.join("summary.csv");
        write_summary(&path, &summary)?;
        files.push(path);
    }

    let manifest_path = cfg.out.join("manifest.json");
    let manifest = with_threads(cfg.threads, || Manifest::new(cfg.to_file(), seeds, &files))?;
    write_json(&manifest_path, &manifest)?;
    files.push(manifest_path);

    let outputs = results.into_iter().next().unwrap_or_default();
    Ok(ExperimentReport {
        files,
        summary,
        outputs,
    })
}
