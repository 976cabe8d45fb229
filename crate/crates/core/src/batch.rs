//! Random batches and the pairwise drift evaluators.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::models::{cs_weight, Kernel};
use crate::rng::{ParticleSeeder, RngKey, SEED_CHUNK};

/// How batches are drawn each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// One shuffle per step, cut into consecutive blocks of `m`.
    #[default]
    Partition,
    /// Each particle draws its own `m - 1` partners without replacement.
    PerParticle,
}

/// Normalization of the batch sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divisor {
    /// `1/|S|`, the (zero) self term counted.
    #[default]
    BatchSize,
    /// `1/(|S| - 1)`.
    ExcludeSelf,
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Partition { perm: Vec<usize>, block: Vec<usize> },
    PerParticle { members: Vec<usize> },
}

/// The batch `S(i)` of every particle for one time step. Each particle's own
/// index belongs to its batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    step: u64,
    n: usize,
    m: usize,
    divisor: Divisor,
    layout: Layout,
}

impl BatchPlan {
    /// Partition plan from an explicit permutation of `0..n`.
    pub fn from_permutation(perm: Vec<usize>, m: usize, step: u64) -> Result<Self> {
        let n = perm.len();
        if m == 0 {
            return Err(Error::invalid("m", "batch size must be positive"));
        }
        let mut block = vec![usize::MAX; n];
        for (slot, &p) in perm.iter().enumerate() {
            if p >= n || block[p] != usize::MAX {
                return Err(Error::invalid("perm", "not a permutation"));
            }
            block[p] = slot / m;
        }
        Ok(Self {
            step,
            n,
            m,
            divisor: Divisor::default(),
            layout: Layout::Partition { perm, block },
        })
    }

    /// The degenerate plan where every batch is the whole ensemble.
    pub fn full(n: usize) -> Self {
        Self::from_permutation((0..n).collect(), n.max(1), 0).expect("identity permutation")
    }

    pub fn with_divisor(mut self, divisor: Divisor) -> Self {
        self.divisor = divisor;
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn divisor(&self) -> Divisor {
        self.divisor
    }

    pub fn mode(&self) -> BatchMode {
        match self.layout {
            Layout::Partition { .. } => BatchMode::Partition,
            Layout::PerParticle { .. } => BatchMode::PerParticle,
        }
    }

    /// Indices of `S(i)`.
    #[inline]
    pub fn batch(&self, i: usize) -> &[usize] {
        match &self.layout {
            Layout::Partition { perm, block } => {
                let start = block[i] * self.m;
                &perm[start..(start + self.m).min(self.n)]
            }
            Layout::PerParticle { members } => &members[i * self.m..(i + 1) * self.m],
        }
    }

    /// Disjoint blocks of a partition plan; `None` for per-particle plans.
    pub fn blocks(&self) -> Option<impl Iterator<Item = &[usize]>> {
        match &self.layout {
            Layout::Partition { perm, .. } => Some(perm.chunks(self.m)),
            Layout::PerParticle { .. } => None,
        }
    }

    #[inline]
    fn norm(&self, size: usize) -> f64 {
        let d = match self.divisor {
            Divisor::BatchSize => size,
            Divisor::ExcludeSelf => size.saturating_sub(1).max(1),
        };
        1.0 / d as f64
    }

    fn check_covers(&self, e: &Ensemble) {
        assert_eq!(self.n, e.n(), "batch plan built for a different ensemble size");
    }
}

fn check_sizes(n: usize, m: usize) -> Result<()> {
    if m <= 1 || m >= n {
        return Err(Error::invalid(
            "m",
            format!("batch size must satisfy 1 < m < n, got m = {m}, n = {n}"),
        ));
    }
    Ok(())
}

/// Uniform random permutation of `0..n` cut into blocks of `m` (the last
/// block holds `n mod m` particles when `m` does not divide `n`).
pub fn make_batches(n: usize, m: usize, key: RngKey) -> Result<BatchPlan> {
    check_sizes(n, m)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut key.with_particle(0).rng());
    BatchPlan::from_permutation(perm, m, key.step)
}

/// Independent batches: particle `i` is joined by `m - 1` distinct partners
/// drawn uniformly from the others, using its own stream.
pub fn make_particle_batches(n: usize, m: usize, key: RngKey) -> Result<BatchPlan> {
    check_sizes(n, m)?;
    let mut members = vec![0usize; n * m];
    members
        .par_chunks_mut(m * SEED_CHUNK)
        .enumerate()
        .for_each(|(c, rows)| {
            let first = c * SEED_CHUNK;
            let mut seeder = ParticleSeeder::new(key.with_particle(first));
            for (i, row) in (first..).zip(rows.chunks_mut(m)) {
                let mut rng = seeder.next_rng();
                row[0] = i;
                let partners = rand::seq::index::sample(&mut rng, n - 1, m - 1);
                for (slot, j) in row[1..].iter_mut().zip(partners.iter()) {
                    *slot = if j >= i { j + 1 } else { j };
                }
            }
        });
    Ok(BatchPlan {
        step: key.step,
        n,
        m,
        divisor: Divisor::default(),
        layout: Layout::PerParticle { members },
    })
}

/// Draws a plan of the requested mode for `step`.
pub fn draw_plan(mode: BatchMode, n: usize, m: usize, seed: u64, step: u64) -> Result<BatchPlan> {
    let key = RngKey::batch(seed, 0, step);
    match mode {
        BatchMode::Partition => make_batches(n, m, key),
        BatchMode::PerParticle => make_particle_batches(n, m, key),
    }
}

const LANES: usize = 8;

/// Block length for [`lane_sum`]; a multiple of `LANES`.
const BLOCK: usize = 256;

/// `Σ_j f(a_j, b_j)` with eight independent accumulators, combined in a fixed
/// order so the result does not depend on vector width. Terms are evaluated
/// a block at a time into a buffer so that the evaluation loop vectorizes.
#[inline(always)]
fn lane_sum(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut buf = [0.0f64; BLOCK];
    let mut acc = [0.0f64; LANES];
    let mut tail = 0.0;
    for (ca, cb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        let len = ca.len();
        for ((o, &p), &q) in buf[..len].iter_mut().zip(ca).zip(cb) {
            *o = f(p, q);
        }
        let full = len - len % LANES;
        for g in buf[..full].chunks_exact(LANES) {
            for l in 0..LANES {
                acc[l] += g[l];
            }
        }
        for &t in &buf[full..len] {
            tail += t;
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `(1/N) Σ_j P(x_i, x_j, v_i, v_j)(v_j - v_i)` written into `out`.
pub fn full_drift_into(e: &Ensemble, k: &Kernel, i: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        // Wider vectors change neither the operations nor their order, so
        // every path returns bit-identical results.
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { full_drift_avx512(e, k, i, out) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { full_drift_avx2(e, k, i, out) };
        }
    }
    full_drift_portable(e, k, i, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn full_drift_avx512(e: &Ensemble, k: &Kernel, i: usize, out: &mut [f64]) {
    full_drift_portable(e, k, i, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn full_drift_avx2(e: &Ensemble, k: &Kernel, i: usize, out: &mut [f64]) {
    full_drift_portable(e, k, i, out)
}

#[inline(always)]
fn full_drift_portable(e: &Ensemble, k: &Kernel, i: usize, out: &mut [f64]) {
    let n = e.n();
    let inv_n = 1.0 / n as f64;
    if e.dim_v() == 1 {
        let v = e.velocities_flat();
        let vi = v[i];
        let sum = match *k {
            Kernel::Constant => lane_sum(v, v, |w, _| w - vi),
            Kernel::BoundedConfidence { delta } => lane_sum(v, v, |w, _| {
                let d = w - vi;
                if d.abs() <= delta {
                    d
                } else {
                    0.0
                }
            }),
            Kernel::CuckerSmale { xi, beta } if e.dim_x() == 1 => {
                let x = e.positions();
                let xi_pos = x[i];
                let xi2 = xi * xi;
                lane_sum(x, v, |y, w| {
                    let r = y - xi_pos;
                    cs_weight(r * r, xi2, beta) * (w - vi)
                })
            }
            _ => generic_sum(e, k, i, 0..n, 0),
        };
        out[0] = sum * inv_n;
        return;
    }
    for (c, o) in out.iter_mut().enumerate() {
        *o = generic_sum(e, k, i, 0..n, c) * inv_n;
    }
}

fn generic_sum(
    e: &Ensemble,
    k: &Kernel,
    i: usize,
    js: impl IntoIterator<Item = usize>,
    comp: usize,
) -> f64 {
    let (xi, vi) = (e.x(i), e.v(i));
    js.into_iter()
        .map(|j| k.at(xi, e.x(j), vi, e.v(j)) * (e.v(j)[comp] - vi[comp]))
        .sum()
}

/// Full O(N) interaction sum for particle `i`.
pub fn full_drift(e: &Ensemble, k: &Kernel, i: usize) -> Vec<f64> {
    let mut out = vec![0.0; e.dim_v()];
    full_drift_into(e, k, i, &mut out);
    out
}

/// Full drift of every particle, row-major; O(N^2) in total.
pub fn full_drift_all(e: &Ensemble, k: &Kernel) -> Vec<f64> {
    let mut out = vec![0.0; e.n() * e.dim_v()];
    out.par_chunks_mut(e.dim_v())
        .enumerate()
        .for_each(|(i, row)| full_drift_into(e, k, i, row));
    out
}

/// Batch estimate of the drift of particle `i`.
pub fn batch_drift_into(e: &Ensemble, k: &Kernel, plan: &BatchPlan, i: usize, out: &mut [f64]) {
    let members = plan.batch(i);
    if members.len() == e.n() && plan.divisor() == Divisor::BatchSize {
        // Same sum as the full drift; share its summation order.
        return full_drift_into(e, k, i, out);
    }
    let norm = plan.norm(members.len());
    let (xi, vi) = (e.x(i), e.v(i));
    out.iter_mut().for_each(|o| *o = 0.0);
    for &j in members {
        let vj = e.v(j);
        let p = k.at(xi, e.x(j), vi, vj);
        for (o, (a, b)) in out.iter_mut().zip(vj.iter().zip(vi)) {
            *o += p * (a - b);
        }
    }
    out.iter_mut().for_each(|o| *o *= norm);
}

/// `(1/|S(i)|) Σ_{j ∈ S(i)} P(x_i, x_j, v_i, v_j)(v_j - v_i)`.
pub fn batch_drift(e: &Ensemble, k: &Kernel, plan: &BatchPlan, i: usize) -> Vec<f64> {
    plan.check_covers(e);
    let mut out = vec![0.0; e.dim_v()];
    batch_drift_into(e, k, plan, i, &mut out);
    out
}

/// Mean velocity over `S(i)`, self included.
pub fn batch_mean_velocity_into(e: &Ensemble, plan: &BatchPlan, i: usize, out: &mut [f64]) {
    let members = plan.batch(i);
    out.iter_mut().for_each(|o| *o = 0.0);
    for &j in members {
        for (o, a) in out.iter_mut().zip(e.v(j)) {
            *o += a;
        }
    }
    let inv = 1.0 / members.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
}

pub fn batch_mean_velocity(e: &Ensemble, plan: &BatchPlan, i: usize) -> Vec<f64> {
    plan.check_covers(e);
    let mut out = vec![0.0; e.dim_v()];
    batch_mean_velocity_into(e, plan, i, &mut out);
    out
}
