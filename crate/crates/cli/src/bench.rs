//! Step-time measurements of the three solvers over a range of `N`.

use std::time::Instant;

use serde::Serialize;

use rvbatch_core::{BatchMode, Method, ModelSpec, Simulation};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::runner::with_threads;

pub const BENCH_METHODS: [Method; 3] = [Method::Full, Method::Rbm, Method::Rvrbm];

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub method: Method,
    pub n: usize,
    /// Fastest timed step; the least noisy estimate on a shared machine.
    pub seconds_per_step: f64,
    pub median_seconds_per_step: f64,
}

/// `growth[k]` is the step-time ratio between `sizes[k + 1]` and `sizes[k]`.
#[derive(Debug, Clone, Serialize)]
pub struct Growth {
    pub method: Method,
    pub growth: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub model: ModelSpec,
    pub m: usize,
    pub batch_mode: BatchMode,
    pub sizes: Vec<usize>,
    pub steps: usize,
    pub threads: usize,
    pub timings: Vec<Timing>,
    pub growth: Vec<Growth>,
    /// rvRBM over RBM step time at each size.
    pub rvrbm_over_rbm: Vec<f64>,
}

impl BenchReport {
    pub fn time(&self, method: Method, n: usize) -> Option<f64> {
        self.timings
            .iter()
            .find(|t| t.method == method && t.n == n)
            .map(|t| t.seconds_per_step)
    }

    pub fn growth(&self, method: Method) -> &[f64] {
        self.growth
            .iter()
            .find(|g| g.method == method)
            .map_or(&[], |g| &g.growth)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

fn simulation(cfg: &ExperimentConfig, method: Method, n: usize) -> Result<Simulation> {
    let mut sim_cfg = cfg.base.clone();
    sim_cfg.method = method;
    sim_cfg.n = n;
    sim_cfg.kde = None;
    let mut sim = Simulation::new(sim_cfg)?;
    sim.advance()?;
    Ok(sim)
}

/// Times `bench_steps` steps per (size, method) with the experiment's model,
/// `M` and batching. Steps are taken round-robin over all pairs so that slow
/// phases of a shared machine hit every pair alike.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    with_threads(cfg.threads, || {
        let pairs: Vec<(usize, Method)> = cfg
            .bench_sizes
            .iter()
            .flat_map(|&n| BENCH_METHODS.map(|m| (n, m)))
            .collect();
        let mut sims = pairs
            .iter()
            .map(|&(n, m)| simulation(cfg, m, n))
            .collect::<Result<Vec<_>>>()?;
        let mut samples = vec![Vec::with_capacity(cfg.bench_steps); pairs.len()];
        for _ in 0..cfg.bench_steps {
            for (sim, s) in sims.iter_mut().zip(&mut samples) {
                let t0 = Instant::now();
                sim.advance()?;
                s.push(t0.elapsed().as_secs_f64());
            }
        }
        let timings: Vec<Timing> = pairs
            .iter()
            .zip(samples)
            .map(|(&(n, method), s)| Timing {
                method,
                n,
                seconds_per_step: s.iter().copied().fold(f64::INFINITY, f64::min),
                median_seconds_per_step: median(s),
            })
            .collect();
        let at = |method: Method, n: usize| {
            timings
                .iter()
                .find(|t| t.method == method && t.n == n)
                .map_or(f64::NAN, |t| t.seconds_per_step)
        };
        let growth = BENCH_METHODS
            .into_iter()
            .map(|method| Growth {
                method,
                growth: cfg
                    .bench_sizes
                    .windows(2)
                    .map(|w| at(method, w[1]) / at(method, w[0]))
                    .collect(),
            })
            .collect();
        let rvrbm_over_rbm = cfg
            .bench_sizes
            .iter()
            .map(|&n| at(Method::Rvrbm, n) / at(Method::Rbm, n))
            .collect();
        Ok(BenchReport {
            model: cfg.base.model,
            m: cfg.base.m,
            batch_mode: cfg.base.batch_mode,
            sizes: cfg.bench_sizes.clone(),
            steps: cfg.bench_steps,
            threads: rayon::current_num_threads(),
            timings,
            growth,
            rvrbm_over_rbm,
        })
    })?
}
