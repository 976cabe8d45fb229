//! Command-line surface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use rvbatch_core::Method;

use crate::bench::run_bench;
use crate::config::{ConfigFile, ExperimentConfig, Overrides, Preset, Sweep};
use crate::error::{CliError, Result};
use crate::output::write_json;
use crate::runner::run_experiment;

#[derive(Debug, Parser)]
#[command(name = "rvbatch", version, about = "Random batch particle simulations with control variates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write series, densities, summary and manifest.
    Run(CommonArgs),
    /// Time full, RBM and rvRBM steps over several N and write bench.json.
    Bench(CommonArgs),
    /// Print the fully resolved config as TOML without running anything.
    Config(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file, or a JSON config / manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// test1a, test1b, test2, test3 or custom.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated list of full, rbm, rvrbm.
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// case1, case2 or two-cluster-quadratic.
    #[arg(long)]
    pub surrogate: Option<String>,
    /// `n=100,1000,10000` or `m=5,10,20`.
    #[arg(long)]
    pub sweep: Option<Sweep>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Output directory (default runs/<preset>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            n: self.n,
            m: self.m,
            dt: self.dt,
            t_end: self.t_end,
            seed: self.seed,
            methods: self.methods.clone(),
            surrogate: self.surrogate.clone(),
            sweep: self.sweep.clone(),
            repeats: self.repeats,
            out: self.out.clone(),
            threads: self.threads,
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut file = match &self.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        file.apply(&self.overrides());
        ExperimentConfig::resolve(&file)
    }
}

fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Run(a) => {
            let cfg = a.resolve()?;
            eprintln!(
                "{}: n={} m={} dt={} t_end={} methods={} {} -> {}",
                cfg.preset,
                cfg.base.n,
                cfg.base.m,
                cfg.base.dt,
                cfg.base.t_end,
                cfg.methods
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
                cfg.cv_summary(),
                cfg.out.display()
            );
            let report = run_experiment(&cfg)?;
            for out in &report.outputs {
                eprintln!(
                    "{:>6}  final error {:.3e}  lambda {}  {:.2}s",
                    out.method.to_string(),
                    out.final_error(),
                    out.final_lambda()
                        .map_or_else(|| "-".to_string(), |l| format!("{l:.4}")),
                    out.wall_time.init + out.wall_time.stepping + out.wall_time.diagnostics
                );
            }
            eprintln!("wrote {} files", report.files.len());
            Ok(())
        }
        Command::Bench(a) => {
            let cfg = a.resolve()?;
            std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
            let report = run_bench(&cfg)?;
            for t in &report.timings {
                eprintln!("{:>6} n={:<7} {:.3e} s/step", t.method.to_string(), t.n, t.seconds_per_step);
            }
            let path = cfg.out.join("bench.json");
            write_json(&path, &report)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Config(a) => {
            let cfg = a.resolve()?;
            let text = toml::to_string(&cfg.to_file())
                .map_err(|e| CliError::config(format!("cannot print config: {e}")))?;
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 for bad arguments or config, 2 for simulation failures,
/// 3 for I/O failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
