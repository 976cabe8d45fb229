//! Euler-Maruyama time stepping for the full, RBM and rvRBM particle systems.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{kde, mean_error, moments, DensityGrid, KdeConfig};
use crate::batch::{batch_drift_into, draw_plan, full_drift_all, BatchMode, BatchPlan, Divisor};
use crate::control_variate::{cv_drift_all, CvConfig, CvState};
use crate::ensemble::{init_ensemble, Ensemble};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::rng::{fill_wiener_from, ParticleSeeder, RngKey, SEED_CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// All N^2 pairs.
    Full,
    /// Random batch method.
    Rbm,
    /// Random batch method with the control-variate correction.
    Rvrbm,
}

impl Method {
    pub fn uses_batches(self) -> bool {
        !matches!(self, Method::Full)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Full => "full",
            Method::Rbm => "rbm",
            Method::Rvrbm => "rvrbm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "rbm" => Ok(Method::Rbm),
            "rvrbm" => Ok(Method::Rvrbm),
            other => Err(Error::invalid(
                "method",
                format!("unknown method `{other}` (full, rbm, rvrbm)"),
            )),
        }
    }
}

/// The mean `m` that the absolute error `|U_N(t) - m|` is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorReference {
    /// Mean of the sampled initial ensemble, conserved by the exact dynamics.
    #[default]
    InitialSample,
    /// Mean of the initial law.
    Law,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub method: Method,
    pub cv: Option<CvConfig>,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    /// Steps between diagnostic records.
    pub record_every: u64,
    pub batch_mode: BatchMode,
    pub divisor: Divisor,
    pub error_reference: ErrorReference,
    pub kde: Option<KdeConfig>,
    /// Times at which density snapshots are taken.
    pub snapshot_times: Vec<f64>,
}

impl SimConfig {
    pub fn new(model: ModelSpec, method: Method, n: usize) -> Self {
        Self {
            model,
            method,
            cv: (method == Method::Rvrbm).then(CvConfig::default),
            n,
            m: 10,
            dt: 1e-2,
            t_end: 1.0,
            seed: 0,
            record_every: 10,
            batch_mode: BatchMode::Partition,
            divisor: Divisor::BatchSize,
            error_reference: ErrorReference::InitialSample,
            kde: None,
            snapshot_times: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n == 0 {
            return Err(Error::invalid("n", "need at least one particle"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::invalid("t_end", format!("must be >= 0, got {}", self.t_end)));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be >= 1"));
        }
        if self.method.uses_batches() && !(1 < self.m && self.m < self.n) {
            return Err(Error::invalid(
                "m",
                format!(
                    "{} needs 1 < m < n, got m = {}, n = {}",
                    self.method, self.m, self.n
                ),
            ));
        }
        if self.method == Method::Rvrbm {
            match &self.cv {
                Some(cv) => cv.validate()?,
                None => return Err(Error::invalid("cv", "rvrbm needs a control-variate config")),
            }
        }
        if let Some(k) = &self.kde {
            k.validate()?;
        }
        Ok(())
    }

    /// Number of steps to reach `t_end`.
    pub fn steps(&self) -> u64 {
        (self.t_end / self.dt).round() as u64
    }

    fn reference_mean(&self, initial: &Ensemble) -> Vec<f64> {
        match self.error_reference {
            ErrorReference::InitialSample => initial.mean_velocity(),
            ErrorReference::Law => vec![self.model.initial.mean(); initial.dim_v()],
        }
    }
}

/// Per-step side information.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Velocity components clipped back into `[-1, 1]`.
    pub projected: usize,
}

/// One Euler-Maruyama step with a fresh batch plan keyed by `step_index`.
pub fn step(
    e: &Ensemble,
    cfg: &SimConfig,
    cv: Option<&mut CvState>,
    step_index: u64,
) -> Result<(Ensemble, StepStats)> {
    let plan = if cfg.method.uses_batches() {
        Some(draw_plan(cfg.batch_mode, e.n(), cfg.m, cfg.seed, step_index)?.with_divisor(cfg.divisor))
    } else {
        None
    };
    step_with_plan(e, cfg, cv, step_index, plan.as_ref())
}

/// One step with a caller-supplied batch plan (ignored by the full method).
pub fn step_with_plan(
    e: &Ensemble,
    cfg: &SimConfig,
    cv: Option<&mut CvState>,
    step_index: u64,
    plan: Option<&BatchPlan>,
) -> Result<(Ensemble, StepStats)> {
    let (n, dim_x, dim_v) = (e.n(), e.dim_x(), e.dim_v());
    if dim_x != 0 && dim_x != dim_v {
        return Err(Error::DimensionMismatch {
            expected: dim_v,
            found: dim_x,
        });
    }
    let kernel = &cfg.model.kernel;
    let need_plan = || Error::invalid("plan", format!("{} needs a batch plan", cfg.method));

    let mut drift = match cfg.method {
        Method::Full => full_drift_all(e, kernel),
        Method::Rbm => {
            let plan = plan.ok_or_else(need_plan)?;
            let mut d = vec![0.0; n * dim_v];
            d.par_chunks_mut(dim_v)
                .enumerate()
                .for_each(|(i, out)| batch_drift_into(e, kernel, plan, i, out));
            d
        }
        Method::Rvrbm => {
            let plan = plan.ok_or_else(need_plan)?;
            let cv_cfg = cfg
                .cv
                .as_ref()
                .ok_or_else(|| Error::invalid("cv", "rvrbm needs a control-variate config"))?;
            let state = cv.ok_or_else(|| Error::invalid("cv", "rvrbm needs a CvState"))?;
            let mut d = vec![0.0; n * dim_v];
            cv_drift_all(e, kernel, cv_cfg, plan, state, &mut d);
            d
        }
    };

    let dt = cfg.dt;
    let diffusion = cfg.model.diffusion;
    let bounded = e.is_bounded();
    let seed = cfg.seed;
    let projected: usize = drift
        .par_chunks_mut(dim_v * SEED_CHUNK)
        .enumerate()
        .map(|(c, rows)| {
            let first = c * SEED_CHUNK;
            let mut seeder = ParticleSeeder::new(RngKey::wiener(seed, first, step_index));
            let mut noise = vec![0.0; dim_v];
            let mut clipped = 0;
            for (i, row) in (first..).zip(rows.chunks_mut(dim_v)) {
                let vi = e.v(i);
                let coef = diffusion.coefficient(vi);
                if !diffusion.is_none() {
                    // Drawn even where the coefficient vanishes, keeping the
                    // seeder aligned with particle indices.
                    fill_wiener_from(&mut seeder.next_rng(), dt, &mut noise);
                }
                for ((r, a), w) in row.iter_mut().zip(vi).zip(&noise) {
                    let mut next = a + *r * dt + coef * w;
                    if bounded && next.abs() > 1.0 {
                        next = next.clamp(-1.0, 1.0);
                        clipped += 1;
                    }
                    *r = next;
                }
            }
            clipped
        })
        .sum();
    let v_next = drift;

    let x_next: Vec<f64> = if dim_x == 0 {
        Vec::new()
    } else {
        e.positions()
            .iter()
            .zip(e.velocities_flat())
            .map(|(x, v)| x + v * dt)
            .collect()
    };
    let mut next = e.clone();
    next.replace(x_next, v_next);
    Ok((next, StepStats { projected }))
}

/// A density reconstruction at one recorded time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub density: DensityGrid,
}

/// Wall-clock seconds spent per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimes {
    pub init: f64,
    pub stepping: f64,
    pub diagnostics: f64,
}

/// Diagnostics of one simulation; every series is indexed like `times`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub times: Vec<f64>,
    pub mean_v: Vec<Vec<f64>>,
    pub var_v: Vec<f64>,
    pub error: Vec<f64>,
    /// `None` before the first step and for methods without `λ`.
    pub lambda_mean: Vec<Option<f64>>,
    pub clamp_count: Vec<Option<usize>>,
    pub snapshots: Vec<Snapshot>,
    /// Total number of boundary projections over the run.
    pub projected: usize,
    pub wall_time: PhaseTimes,
    pub final_state: Ensemble,
}

impl RunOutput {
    pub fn final_error(&self) -> f64 {
        *self.error.last().expect("at least one record")
    }

    pub fn final_lambda(&self) -> Option<f64> {
        self.lambda_mean.last().copied().flatten()
    }
}

/// Stepwise driver around [`step`].
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: SimConfig,
    ensemble: Ensemble,
    cv: Option<CvState>,
    step_index: u64,
    reference: Vec<f64>,
    projected: usize,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let e = init_ensemble(&cfg.model, cfg.n, cfg.seed)?;
        Self::from_ensemble(cfg, e)
    }

    /// Starts from explicit initial data instead of the model's law.
    pub fn from_ensemble(mut cfg: SimConfig, e: Ensemble) -> Result<Self> {
        cfg.n = e.n();
        cfg.validate()?;
        let cv = match (&cfg.cv, cfg.method) {
            (Some(cv_cfg), Method::Rvrbm) => Some(CvState::new(&e, cv_cfg)),
            _ => None,
        };
        let reference = cfg.reference_mean(&e);
        Ok(Self {
            cfg,
            ensemble: e,
            cv,
            step_index: 0,
            reference,
            projected: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn cv_state(&self) -> Option<&CvState> {
        self.cv.as_ref()
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.cfg.dt
    }

    /// The mean `m` of the error metric.
    pub fn reference_mean(&self) -> &[f64] {
        &self.reference
    }

    pub fn advance(&mut self) -> Result<StepStats> {
        let (next, stats) = step(&self.ensemble, &self.cfg, self.cv.as_mut(), self.step_index)?;
        self.ensemble = next;
        self.step_index += 1;
        self.projected += stats.projected;
        Ok(stats)
    }

    /// Integrates to `t_end`, recording every `record_every` steps and at the end.
    pub fn run(mut self) -> Result<RunOutput> {
        let total = self.cfg.steps();
        let snapshot_steps: Vec<(u64, f64)> = self
            .cfg
            .snapshot_times
            .iter()
            .map(|t| ((t / self.cfg.dt).round() as u64, *t))
            .filter(|(s, _)| *s <= total)
            .collect();
        let kde_cfg = self.cfg.kde.clone().unwrap_or_default();

        let mut out = RunOutput {
            method: self.cfg.method,
            times: Vec::new(),
            mean_v: Vec::new(),
            var_v: Vec::new(),
            error: Vec::new(),
            lambda_mean: Vec::new(),
            clamp_count: Vec::new(),
            snapshots: Vec::new(),
            projected: 0,
            wall_time: PhaseTimes::default(),
            final_state: self.ensemble.clone(),
        };

        let mut diag = 0.0;
        let mut stepping = 0.0;
        loop {
            let s = self.step_index;
            if s % self.cfg.record_every == 0 || s == total {
                let t0 = Instant::now();
                self.ensemble.validate(s)?;
                self.record(&mut out);
                diag += t0.elapsed().as_secs_f64();
            }
            for (_, t) in snapshot_steps.iter().filter(|(k, _)| *k == s) {
                let t0 = Instant::now();
                out.snapshots.push(Snapshot {
                    time: *t,
                    density: kde(&self.ensemble, &kde_cfg)?,
                });
                diag += t0.elapsed().as_secs_f64();
            }
            if s >= total {
                break;
            }
            let t0 = Instant::now();
            self.advance()?;
            stepping += t0.elapsed().as_secs_f64();
        }
        out.wall_time = PhaseTimes {
            init: 0.0,
            stepping,
            diagnostics: diag,
        };
        out.projected = self.projected;
        out.final_state = self.ensemble;
        Ok(out)
    }

    fn record(&self, out: &mut RunOutput) {
        let mom = moments(&self.ensemble);
        out.times.push(self.time());
        out.error.push(mean_error(&self.ensemble, &self.reference));
        out.mean_v.push(mom.mean);
        out.var_v.push(mom.temperature);
        let started = self.step_index > 0;
        out.lambda_mean
            .push(self.cv.as_ref().filter(|_| started).map(CvState::lambda_mean));
        out.clamp_count
            .push(self.cv.as_ref().filter(|_| started).map(CvState::clamp_count));
    }
}

/// Samples the initial law and integrates to `t_end`.
pub fn run(cfg: &SimConfig) -> Result<RunOutput> {
    let t0 = Instant::now();
    let sim = Simulation::new(cfg.clone())?;
    let init = t0.elapsed().as_secs_f64();
    let mut out = sim.run()?;
    out.wall_time.init = init;
    Ok(out)
}

/// Runs several methods on common random numbers: the same initial sample,
/// the same Wiener increment per (particle, step), and the same batch plan
/// per step for the batch methods.
pub fn coupled_run(base: &SimConfig, methods: &[Method]) -> Result<Vec<RunOutput>> {
    let cfgs: Vec<SimConfig> = methods
        .iter()
        .map(|&method| {
            let mut c = base.clone();
            c.method = method;
            if method == Method::Rvrbm && c.cv.is_none() {
                c.cv = Some(CvConfig::default());
            }
            c
        })
        .collect();
    coupled_run_configs(&cfgs)
}

/// [`coupled_run`] over explicit configs, which must agree on everything
/// that determines the shared randomness.
pub fn coupled_run_configs(cfgs: &[SimConfig]) -> Result<Vec<RunOutput>> {
    let Some(first) = cfgs.first() else {
        return Err(Error::Empty("method list"));
    };
    for c in &cfgs[1..] {
        let mismatch = |what: &str| Err(Error::Inconsistent(format!("{what} differs between methods")));
        if c.n != first.n {
            return mismatch("n");
        }
        if c.dt != first.dt {
            return mismatch("dt");
        }
        if c.t_end != first.t_end {
            return mismatch("t_end");
        }
        if c.seed != first.seed {
            return mismatch("seed");
        }
        if c.model != first.model {
            return mismatch("model");
        }
    }
    let batched: Vec<&SimConfig> = cfgs.iter().filter(|c| c.method.uses_batches()).collect();
    if let Some(b0) = batched.first() {
        if batched
            .iter()
            .any(|c| c.m != b0.m || c.batch_mode != b0.batch_mode)
        {
            return Err(Error::Inconsistent(
                "batch methods must share m and batch mode".into(),
            ));
        }
    }
    cfgs.iter().map(run).collect()
}
