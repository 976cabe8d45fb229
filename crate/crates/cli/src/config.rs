//! Experiment configuration: the TOML file format, command-line overrides,
//! the preset experiments and their resolution into simulation configs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rvbatch_core::{
    BatchMode, Clusters, CvConfig, Diffusion, Divisor, ErrorReference, Grid, InitialLaw,
    KdeConfig, Kernel, LambdaMode, Method, ModelSpec, ReferenceMean, SimConfig, Surrogate,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Deterministic bounded confidence, δ = 1, uniform opinions.
    Test1a,
    /// Deterministic bounded confidence, δ = 0.5, two separated clusters.
    Test1b,
    /// Bounded confidence with multiplicative noise, σ² = 0.1.
    Test2,
    /// Cucker-Smale flocking, ξ = 1, β = 0.1.
    Test3,
    /// Everything comes from the `[model]` and `[sim]` sections.
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Test1a,
        Preset::Test1b,
        Preset::Test2,
        Preset::Test3,
        Preset::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Test1a => "test1a",
            Preset::Test1b => "test1b",
            Preset::Test2 => "test2",
            Preset::Test3 => "test3",
            Preset::Custom => "custom",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset `{s}` (test1a, test1b, test2, test3, custom)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    N,
    M,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

impl FromStr for Sweep {
    type Err = String;

    /// `n=100,1000,10000` or `m=5,10,20`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (axis, values) = s
            .split_once('=')
            .ok_or_else(|| format!("sweep `{s}` must look like n=100,1000 or m=5,10"))?;
        let axis = match axis.trim() {
            "n" => SweepAxis::N,
            "m" => SweepAxis::M,
            other => return Err(format!("unknown sweep axis `{other}` (n or m)")),
        };
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("sweep value `{v}` is not a positive integer"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Sweep { axis, values })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub seed: Option<u64>,
    pub record_every: Option<u64>,
    pub batch_mode: Option<BatchMode>,
    pub divisor: Option<Divisor>,
    pub error_reference: Option<ErrorReference>,
    pub snapshot_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kernel: Option<Kernel>,
    pub diffusion: Option<Diffusion>,
    pub initial: Option<InitialLaw>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSection {
    pub surrogate: Option<String>,
    pub lambda_mode: Option<LambdaMode>,
    pub reference_mean: Option<ReferenceMean>,
    pub variance_floor: Option<f64>,
    pub lambda_clamp: Option<[f64; 2]>,
    /// Scalar cluster centres; enables the multi-cluster correction.
    pub clusters: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeSection {
    pub sigma2: Option<f64>,
    /// Uniform 1D grid size; with `range`, replaces the automatic grid.
    pub points: Option<usize>,
    pub range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Option<Vec<usize>>,
    pub steps: Option<usize>,
}

/// Contents of a config file. Every field is optional; presets fill the gaps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<Preset>,
    pub methods: Option<Vec<Method>>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub repeats: Option<usize>,
    #[serde(default)]
    pub sim: SimSection,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub cv: CvSection,
    pub kde: Option<KdeSection>,
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub bench: BenchSection,
}

/// Command-line flags; anything set here wins over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<Method>>,
    pub surrogate: Option<String>,
    pub sweep: Option<Sweep>,
    pub repeats: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {}", e.message())))
    }

    /// Reads a TOML config, or a JSON config / run manifest (its `config`
    /// member) when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let mut value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("invalid JSON config: {e}")))?;
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
            serde_json::from_value(value)
                .map_err(|e| CliError::config(format!("invalid config: {e}")))
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
            if value.is_some() {
                slot.clone_from(value);
            }
        }
        set(&mut self.preset, &o.preset);
        set(&mut self.sim.n, &o.n);
        set(&mut self.sim.m, &o.m);
        set(&mut self.sim.dt, &o.dt);
        set(&mut self.sim.t_end, &o.t_end);
        set(&mut self.sim.seed, &o.seed);
        set(&mut self.methods, &o.methods);
        set(&mut self.cv.surrogate, &o.surrogate);
        set(&mut self.sweep, &o.sweep);
        set(&mut self.repeats, &o.repeats);
        set(&mut self.out, &o.out);
        set(&mut self.threads, &o.threads);
    }
}

/// Number of particles used by every preset unless overridden.
pub const DEFAULT_N: usize = 10_000;

/// Defaults encoded by one preset.
#[derive(Debug, Clone)]
pub struct PresetDefaults {
    pub model: Option<ModelSpec>,
    pub m: usize,
    pub t_end: f64,
    pub methods: Vec<Method>,
    pub batch_mode: BatchMode,
    pub cv: CvConfig,
    pub snapshot_times: Vec<f64>,
}

impl Preset {
    pub fn defaults(self) -> PresetDefaults {
        let bc = |delta: f64, diffusion: Diffusion, initial: InitialLaw| ModelSpec {
            kernel: Kernel::BoundedConfidence { delta },
            diffusion,
            initial,
        };
        match self {
            Preset::Test1a => PresetDefaults {
                model: Some(bc(1.0, Diffusion::None, InitialLaw::Uniform)),
                m: 10,
                t_end: 5.0,
                methods: vec![Method::Rbm, Method::Rvrbm],
                batch_mode: BatchMode::PerParticle,
                cv: CvConfig::default(),
                snapshot_times: vec![1.0, 5.0],
            },
            Preset::Test1b => PresetDefaults {
                model: Some(bc(0.5, Diffusion::None, InitialLaw::TwoCluster)),
                m: 10,
                t_end: 5.0,
                methods: vec![Method::Rbm, Method::Rvrbm],
                batch_mode: BatchMode::PerParticle,
                cv: CvConfig {
                    clusters: Some(Clusters::scalar(&[-0.5, 0.5])),
                    ..Default::default()
                },
                snapshot_times: vec![1.0, 5.0],
            },
            Preset::Test2 => PresetDefaults {
                model: Some(bc(
                    1.0,
                    Diffusion::OpinionMultiplicative { sigma2: 0.1 },
                    InitialLaw::Uniform,
                )),
                m: 10,
                t_end: 5.0,
                methods: vec![Method::Full, Method::Rbm, Method::Rvrbm],
                batch_mode: BatchMode::PerParticle,
                cv: CvConfig::default(),
                snapshot_times: vec![1.0, 5.0],
            },
            Preset::Test3 => PresetDefaults {
                model: Some(ModelSpec {
                    kernel: Kernel::CuckerSmale { xi: 1.0, beta: 0.1 },
                    diffusion: Diffusion::None,
                    initial: InitialLaw::UniformPhase,
                }),
                m: 10,
                t_end: 10.0,
                methods: vec![Method::Rbm, Method::Rvrbm],
                batch_mode: BatchMode::Partition,
                cv: CvConfig {
                    lambda_mode: LambdaMode::PerParticle,
                    ..Default::default()
                },
                snapshot_times: vec![1.0, 10.0],
            },
            Preset::Custom => PresetDefaults {
                model: None,
                m: 10,
                t_end: 1.0,
                methods: vec![Method::Rbm, Method::Rvrbm],
                batch_mode: BatchMode::Partition,
                cv: CvConfig::default(),
                snapshot_times: Vec::new(),
            },
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Shared settings; `base.method` is the first entry of `methods`.
    pub base: SimConfig,
    pub methods: Vec<Method>,
    pub sweep: Option<Sweep>,
    pub repeats: usize,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub bench_sizes: Vec<usize>,
    pub bench_steps: usize,
}

fn surrogate_from(name: &str) -> Result<Surrogate> {
    if name == "custom" {
        return Err(CliError::config(
            "surrogate `custom` needs a function and is only available through the library",
        ));
    }
    name.parse::<Surrogate>()
        .map_err(|e| CliError::config(e.to_string()))
}

fn lambda_mode_name(mode: LambdaMode) -> String {
    match mode {
        LambdaMode::Scalar => "scalar".into(),
        LambdaMode::PerParticle => "per-particle".into(),
        LambdaMode::Fixed(l) => format!("fixed({l})"),
    }
}

impl ExperimentConfig {
    /// Applies preset defaults, then the file, then validates everything.
    pub fn resolve(file: &ConfigFile) -> Result<Self> {
        let preset = match (file.preset, &file.model) {
            (Some(p), _) => p,
            (None, Some(_)) => Preset::Custom,
            (None, None) => return Err(CliError::config("no preset and no model specified")),
        };
        let d = preset.defaults();

        let section = file.model.clone().unwrap_or_default();
        let model = match d.model {
            Some(mut model) => {
                if let Some(k) = section.kernel {
                    model.kernel = k;
                }
                if let Some(diff) = section.diffusion {
                    model.diffusion = diff;
                }
                if let Some(init) = section.initial {
                    model.initial = init;
                }
                model
            }
            None => match section {
                ModelSection {
                    kernel: Some(kernel),
                    diffusion: Some(diffusion),
                    initial: Some(initial),
                } => ModelSpec {
                    kernel,
                    diffusion,
                    initial,
                },
                _ => {
                    return Err(CliError::config(
                        "preset `custom` needs a [model] section with kernel, diffusion and initial",
                    ))
                }
            },
        };

        let mut cv = d.cv;
        let c = &file.cv;
        if let Some(name) = &c.surrogate {
            cv.surrogate = surrogate_from(name)?;
        }
        if let Some(mode) = c.lambda_mode {
            cv.lambda_mode = mode;
        }
        if let Some(r) = c.reference_mean {
            cv.reference_mean = r;
        }
        if let Some(f) = c.variance_floor {
            cv.variance_floor = f;
        }
        if let Some([lo, hi]) = c.lambda_clamp {
            cv.lambda_clamp = (lo, hi);
        }
        if let Some(centres) = &c.clusters {
            cv.clusters = (!centres.is_empty()).then(|| Clusters::scalar(centres));
        }

        let methods = file.methods.clone().unwrap_or(d.methods);
        if methods.is_empty() {
            return Err(CliError::config("`methods` must name at least one method"));
        }
        let mut dedup = methods.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != methods.len() {
            return Err(CliError::config("`methods` lists a method twice"));
        }

        let s = &file.sim;
        let mut base = SimConfig::new(model, methods[0], s.n.unwrap_or(DEFAULT_N));
        base.cv = Some(cv);
        base.m = s.m.unwrap_or(d.m);
        base.t_end = s.t_end.unwrap_or(d.t_end);
        if let Some(dt) = s.dt {
            base.dt = dt;
        }
        if let Some(seed) = s.seed {
            base.seed = seed;
        }
        if let Some(r) = s.record_every {
            base.record_every = r;
        }
        base.batch_mode = s.batch_mode.unwrap_or(d.batch_mode);
        if let Some(div) = s.divisor {
            base.divisor = div;
        }
        if let Some(er) = s.error_reference {
            base.error_reference = er;
        }
        base.snapshot_times = s.snapshot_times.clone().unwrap_or(d.snapshot_times);
        if base.snapshot_times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(CliError::config("snapshot_times must be finite and >= 0"));
        }

        if let Some(k) = &file.kde {
            let sigma2 = k.sigma2.unwrap_or(KdeConfig::DEFAULT_SIGMA2);
            let grid = match (k.points, k.range) {
                (None, None) => Grid::Auto,
                (Some(points), Some([lo, hi])) => {
                    if points < 2 || !(hi > lo) {
                        return Err(CliError::config(
                            "kde grid needs points >= 2 and range [lo, hi] with lo < hi",
                        ));
                    }
                    Grid::Line {
                        v: Grid::uniform(lo, hi, points),
                    }
                }
                _ => return Err(CliError::config("kde `points` and `range` go together")),
            };
            base.kde = Some(KdeConfig { sigma2, grid });
        }

        let repeats = file.repeats.unwrap_or(1);
        if repeats == 0 {
            return Err(CliError::config("repeats must be >= 1"));
        }
        if file.threads == Some(0) {
            return Err(CliError::config("threads must be >= 1"));
        }
        if let Some(sw) = &file.sweep {
            if sw.values.is_empty() {
                return Err(CliError::config("sweep needs at least one value"));
            }
        }

        let cfg = Self {
            preset,
            base,
            methods,
            sweep: file.sweep.clone(),
            repeats,
            out: file
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(preset.name())),
            threads: file.threads,
            bench_sizes: file
                .bench
                .sizes
                .clone()
                .unwrap_or_else(|| vec![5_000, 10_000, 20_000]),
            bench_steps: file.bench.steps.unwrap_or(20),
        };
        for sim in cfg.point_configs() {
            for c in cfg.method_configs(&sim) {
                c.validate().map_err(|e| CliError::config(e.to_string()))?;
            }
        }
        if cfg.bench_steps == 0 || cfg.bench_sizes.is_empty() {
            return Err(CliError::config("bench needs steps >= 1 and at least one size"));
        }
        Ok(cfg)
    }

    /// One base config per sweep point (just `base` without a sweep).
    pub fn point_configs(&self) -> Vec<SimConfig> {
        match &self.sweep {
            None => vec![self.base.clone()],
            Some(sw) => sw
                .values
                .iter()
                .map(|&v| {
                    let mut c = self.base.clone();
                    match sw.axis {
                        SweepAxis::N => c.n = v,
                        SweepAxis::M => c.m = v,
                    }
                    c
                })
                .collect(),
        }
    }

    /// `base` specialised to each method.
    pub fn method_configs(&self, base: &SimConfig) -> Vec<SimConfig> {
        self.methods
            .iter()
            .map(|&method| SimConfig {
                method,
                ..base.clone()
            })
            .collect()
    }

    /// Seeds of the repeats, consecutive from the base seed.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|k| self.base.seed + k).collect()
    }

    /// The resolved settings written back in config-file form, so that a
    /// manifest regenerates its run.
    pub fn to_file(&self) -> ConfigFile {
        let b = &self.base;
        let cv = b.cv.clone().unwrap_or_default();
        ConfigFile {
            preset: Some(self.preset),
            methods: Some(self.methods.clone()),
            out: Some(self.out.clone()),
            threads: self.threads,
            repeats: Some(self.repeats),
            sim: SimSection {
                n: Some(b.n),
                m: Some(b.m),
                dt: Some(b.dt),
                t_end: Some(b.t_end),
                seed: Some(b.seed),
                record_every: Some(b.record_every),
                batch_mode: Some(b.batch_mode),
                divisor: Some(b.divisor),
                error_reference: Some(b.error_reference),
                snapshot_times: Some(b.snapshot_times.clone()),
            },
            model: Some(ModelSection {
                kernel: Some(b.model.kernel),
                diffusion: Some(b.model.diffusion),
                initial: Some(b.model.initial),
            }),
            cv: CvSection {
                surrogate: Some(cv.surrogate.name().to_string()),
                lambda_mode: Some(cv.lambda_mode),
                reference_mean: Some(cv.reference_mean),
                variance_floor: Some(cv.variance_floor),
                lambda_clamp: Some([cv.lambda_clamp.0, cv.lambda_clamp.1]),
                clusters: Some(
                    cv.clusters
                        .map(|c| c.centers.iter().map(|v| v[0]).collect())
                        .unwrap_or_default(),
                ),
            },
            kde: b.kde.as_ref().map(|k| match &k.grid {
                Grid::Line { v } if v.len() >= 2 => KdeSection {
                    sigma2: Some(k.sigma2),
                    points: Some(v.len()),
                    range: Some([v[0], v[v.len() - 1]]),
                },
                _ => KdeSection {
                    sigma2: Some(k.sigma2),
                    points: None,
                    range: None,
                },
            }),
            sweep: self.sweep.clone(),
            bench: BenchSection {
                sizes: Some(self.bench_sizes.clone()),
                steps: Some(self.bench_steps),
            },
        }
    }

    /// One-line description of the control-variate settings.
    pub fn cv_summary(&self) -> String {
        let cv = self.base.cv.clone().unwrap_or_default();
        format!(
            "surrogate={} lambda={}",
            cv.surrogate.name(),
            lambda_mode_name(cv.lambda_mode)
        )
    }
}
