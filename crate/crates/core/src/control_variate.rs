//! Control-variate correction of the batch drift.
//!
//! The batch estimate of the interaction integral is corrected with the
//! surrogate `P̃(x_i, v_i)(w - U)`, whose exact mean is known at O(N) cost:
//!
//! ```text
//! drift_i = batch_drift_i - λ P̃(x_i, v_i) (U_{M,i} - U_N)
//! ```
//!
//! `λ` is the sample estimate of `Cov(Y, Z) / Var(Z)` with
//! `Y = P(x_i, x_j, v_i, v_j)(v_j - v_i)` and `Z = P̃(x_i, v_i)(v_j - U_N)`,
//! built from the batch members only so a step stays O(MN).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{batch_drift_into, batch_mean_velocity_into, BatchPlan};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::models::{Kernel, Surrogate};

/// How `λ` is chosen each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// One `λ` per step, pooled over every particle's batch samples.
    Scalar,
    /// `λ_i` per particle from its own `M - 1` batch samples.
    PerParticle,
    /// `λ` pinned to a constant.
    Fixed(f64),
}

/// Which global mean the surrogate is centred on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMean {
    /// `U_N` of the initial ensemble, for dynamics that conserve it.
    Frozen,
    /// `U_N` recomputed every step.
    Recomputed,
}

/// Cluster centres `U_k` for the multi-cluster correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clusters {
    pub centers: Vec<Vec<f64>>,
}

impl Clusters {
    /// Centres of a scalar velocity.
    pub fn scalar(centers: &[f64]) -> Self {
        Self {
            centers: centers.iter().map(|c| vec![*c]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Empty("cluster list"));
        }
        let dim = self.centers[0].len();
        for (a, c) in self.centers.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.len(),
                });
            }
            if self.centers[..a].iter().any(|b| b == c) {
                return Err(Error::invalid("clusters", "centres must be pairwise distinct"));
            }
        }
        Ok(())
    }

    /// Index of the nearest centre (ties go to the lower index).
    pub fn nearest(&self, v: &[f64]) -> usize {
        let d2 = |c: &[f64]| c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.centers.iter().enumerate() {
            let d = d2(c);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub surrogate: Surrogate,
    pub lambda_mode: LambdaMode,
    /// Sample variances of `Z` below this give `λ = 0`.
    pub variance_floor: f64,
    pub lambda_clamp: (f64, f64),
    pub reference_mean: ReferenceMean,
    pub clusters: Option<Clusters>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            surrogate: Surrogate::One,
            lambda_mode: LambdaMode::Scalar,
            variance_floor: 1e-12,
            lambda_clamp: (-5.0, 5.0),
            reference_mean: ReferenceMean::Frozen,
            clusters: None,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        if !(self.variance_floor > 0.0) {
            return Err(Error::invalid(
                "variance_floor",
                format!("must be positive, got {}", self.variance_floor),
            ));
        }
        let (lo, hi) = self.lambda_clamp;
        if !(lo <= 0.0 && 0.0 <= hi) {
            return Err(Error::invalid(
                "lambda_clamp",
                format!("interval [{lo}, {hi}] must contain 0"),
            ));
        }
        if let LambdaMode::Fixed(l) = self.lambda_mode {
            if !l.is_finite() {
                return Err(Error::invalid("lambda", format!("must be finite, got {l}")));
            }
        }
        if let Some(c) = &self.clusters {
            c.validate()?;
        }
        Ok(())
    }
}

/// Outcome of one `λ` estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LambdaEstimate {
    pub lambda: f64,
    pub cov_hat: f64,
    pub var_hat: f64,
    pub clamped: bool,
}

fn finalize(cov_hat: f64, var_hat: f64, cfg: &CvConfig) -> LambdaEstimate {
    let raw = if var_hat < cfg.variance_floor || !var_hat.is_finite() {
        0.0
    } else {
        cov_hat / var_hat
    };
    let raw = if raw.is_finite() { raw } else { 0.0 };
    let (lo, hi) = cfg.lambda_clamp;
    let lambda = raw.clamp(lo, hi);
    LambdaEstimate {
        lambda,
        cov_hat,
        var_hat,
        clamped: lambda != raw,
    }
}

/// Bessel-corrected `Ĉov(Y, Z) / V̂ar(Z)`, floored and clamped.
pub fn estimate_lambda(y: &[f64], z: &[f64], cfg: &CvConfig) -> Result<LambdaEstimate> {
    if y.len() != z.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: z.len(),
        });
    }
    let l = y.len();
    if l < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: l });
    }
    let my = y.iter().sum::<f64>() / l as f64;
    let mz = z.iter().sum::<f64>() / l as f64;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (a, b) in y.iter().zip(z) {
        cov += (a - my) * (b - mz);
        var += (b - mz) * (b - mz);
    }
    let denom = (l - 1) as f64;
    Ok(finalize(cov / denom, var / denom, cfg))
}

/// Streaming co-moments of `(Y, Z)`; mergeable, so pooled estimates can be
/// reduced over fixed chunks in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairedMoments {
    count: u64,
    mean_y: f64,
    mean_z: f64,
    m2_z: f64,
    c_yz: f64,
}

impl PairedMoments {
    #[inline]
    pub fn push(&mut self, y: f64, z: f64) {
        self.count += 1;
        let n = self.count as f64;
        let dy = y - self.mean_y;
        let dz = z - self.mean_z;
        self.mean_y += dy / n;
        self.mean_z += dz / n;
        let dz_new = z - self.mean_z;
        self.m2_z += dz * dz_new;
        self.c_yz += dy * dz_new;
    }

    pub fn merge(&mut self, other: &PairedMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let dy = other.mean_y - self.mean_y;
        let dz = other.mean_z - self.mean_z;
        self.m2_z += other.m2_z + dz * dz * na * nb / n;
        self.c_yz += other.c_yz + dy * dz * na * nb / n;
        self.mean_y += dy * nb / n;
        self.mean_z += dz * nb / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `λ = 0` with fewer than two samples.
    pub fn estimate(&self, cfg: &CvConfig) -> LambdaEstimate {
        if self.count < 2 {
            return LambdaEstimate::default();
        }
        let denom = (self.count - 1) as f64;
        finalize(self.c_yz / denom, self.m2_z / denom, cfg)
    }
}

/// Visits `(y_j, z_j)` for `j ∈ S(i) \ {i}`, one pair per velocity component.
/// `keep` filters partners (used to restrict to a cluster).
#[inline]
#[allow(clippy::too_many_arguments)]
fn for_each_sample(
    e: &Ensemble,
    k: &Kernel,
    s: &Surrogate,
    plan: &BatchPlan,
    u_ref: &[f64],
    i: usize,
    keep: impl Fn(usize) -> bool,
    mut f: impl FnMut(f64, f64),
) {
    let (xi, vi) = (e.x(i), e.v(i));
    let surrogate = s.at(xi, vi);
    for &j in plan.batch(i) {
        if j == i || !keep(j) {
            continue;
        }
        let vj = e.v(j);
        let p = k.at(xi, e.x(j), vi, vj);
        for c in 0..vi.len() {
            f(p * (vj[c] - vi[c]), surrogate * (vj[c] - u_ref[c]));
        }
    }
}

/// Estimator inputs for particle `i` from its batch partners.
pub fn collect_cv_samples(
    e: &Ensemble,
    k: &Kernel,
    s: &Surrogate,
    plan: &BatchPlan,
    u_ref: &[f64],
    i: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = Vec::new();
    let mut z = Vec::new();
    for_each_sample(e, k, s, plan, u_ref, i, |_| true, |a, b| {
        y.push(a);
        z.push(b);
    });
    (y, z)
}

#[allow(clippy::too_many_arguments)]
fn cv_drift_into(
    e: &Ensemble,
    k: &Kernel,
    s: &Surrogate,
    plan: &BatchPlan,
    u_ref: &[f64],
    lambda: f64,
    i: usize,
    out: &mut [f64],
    scratch: &mut [f64],
) {
    batch_drift_into(e, k, plan, i, out);
    if lambda == 0.0 {
        return;
    }
    batch_mean_velocity_into(e, plan, i, scratch);
    let weight = lambda * s.at(e.x(i), e.v(i));
    for ((o, um), ur) in out.iter_mut().zip(scratch.iter()).zip(u_ref) {
        *o -= weight * (um - ur);
    }
}

/// `batch_drift_i - λ_i P̃(x_i, v_i)(U_{M,i} - u_ref)`.
pub fn cv_drift(
    e: &Ensemble,
    k: &Kernel,
    s: &Surrogate,
    plan: &BatchPlan,
    u_ref: &[f64],
    lambda: f64,
    i: usize,
) -> Vec<f64> {
    let d = e.dim_v();
    let mut out = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    cv_drift_into(e, k, s, plan, u_ref, lambda, i, &mut out, &mut scratch);
    out
}

/// Nearest-centre cluster labels and cluster means over the whole ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub assignment: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ClusterState {
    pub fn assign(e: &Ensemble, clusters: &Clusters) -> Self {
        let kk = clusters.len();
        let d = e.dim_v();
        let assignment: Vec<usize> = (0..e.n()).map(|i| clusters.nearest(e.v(i))).collect();
        let mut means = vec![vec![0.0; d]; kk];
        let mut counts = vec![0usize; kk];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (m, a) in means[c].iter_mut().zip(e.v(i)) {
                *m += a;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            if c > 0 {
                m.iter_mut().for_each(|a| *a /= c as f64);
            }
        }
        Self {
            assignment,
            means,
            counts,
        }
    }

    /// Mean over the members of `S(i)` in `i`'s cluster; `None` if there are none.
    pub fn batch_cluster_mean(&self, e: &Ensemble, plan: &BatchPlan, i: usize) -> Option<Vec<f64>> {
        let c = self.assignment[i];
        let mut mean = vec![0.0; e.dim_v()];
        let mut count = 0usize;
        for &j in plan.batch(i) {
            if self.assignment[j] == c {
                count += 1;
                for (m, a) in mean.iter_mut().zip(e.v(j)) {
                    *m += a;
                }
            }
        }
        (count > 0).then(|| {
            mean.iter_mut().for_each(|m| *m /= count as f64);
            mean
        })
    }
}

/// `batch_drift_i - λ_{c(i)} P̃(x_i, v_i)(U_{M,c(i)} - U_{N,c(i)})`, the means
/// restricted to members of `i`'s cluster.
pub fn multi_cluster_cv_drift(
    e: &Ensemble,
    k: &Kernel,
    s: &Surrogate,
    plan: &BatchPlan,
    clusters: &ClusterState,
    lambda_k: &[f64],
    i: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; e.dim_v()];
    multi_cluster_cv_drift_into(e, k, s, plan, clusters, lambda_k, i, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn multi_cluster_cv_drift_into(
    e: &Ensemble,
    k: &Kernel,
    s: &Surrogate,
    plan: &BatchPlan,
    clusters: &ClusterState,
    lambda_k: &[f64],
    i: usize,
    out: &mut [f64],
) {
    batch_drift_into(e, k, plan, i, out);
    let c = clusters.assignment[i];
    let lambda = lambda_k[c];
    if lambda == 0.0 {
        return;
    }
    let Some(um) = clusters.batch_cluster_mean(e, plan, i) else {
        return;
    };
    let weight = lambda * s.at(e.x(i), e.v(i));
    for ((o, a), b) in out.iter_mut().zip(&um).zip(&clusters.means[c]) {
        *o -= weight * (a - b);
    }
}

/// `λ` values in force for one step.
#[derive(Debug, Clone, PartialEq)]
pub enum Lambdas {
    Scalar(f64),
    PerParticle(Vec<f64>),
    PerCluster(Vec<f64>),
}

/// Control-variate bookkeeping carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CvState {
    /// `U_N` of the initial ensemble.
    pub u_frozen: Vec<f64>,
    /// Cluster means `U_{N,k}` of the initial ensemble, when clusters are set.
    pub cluster_frozen: Option<Vec<Vec<f64>>>,
    pub lambda: Lambdas,
    /// Estimates behind `lambda` (one per scalar / particle / cluster).
    pub estimates: Vec<LambdaEstimate>,
}

impl CvState {
    pub fn new(initial: &Ensemble, cfg: &CvConfig) -> Self {
        Self {
            u_frozen: initial.mean_velocity(),
            cluster_frozen: cfg
                .clusters
                .as_ref()
                .map(|c| ClusterState::assign(initial, c).means),
            lambda: Lambdas::Scalar(0.0),
            estimates: Vec::new(),
        }
    }

    /// Average `λ` (over particles, or clusters, as applicable).
    pub fn lambda_mean(&self) -> f64 {
        match &self.lambda {
            Lambdas::Scalar(l) => *l,
            Lambdas::PerParticle(ls) | Lambdas::PerCluster(ls) => {
                if ls.is_empty() {
                    0.0
                } else {
                    ls.iter().sum::<f64>() / ls.len() as f64
                }
            }
        }
    }

    pub fn clamp_count(&self) -> usize {
        self.estimates.iter().filter(|e| e.clamped).count()
    }
}

/// Chunk size of the pooled reduction. Fixed so that the result does not
/// depend on the number of worker threads.
const POOL_CHUNK: usize = 512;

fn pooled<F>(n: usize, f: F) -> PairedMoments
where
    F: Fn(usize, &mut PairedMoments) + Sync,
{
    let partials: Vec<PairedMoments> = (0..n.div_ceil(POOL_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = PairedMoments::default();
            for i in chunk * POOL_CHUNK..((chunk + 1) * POOL_CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = PairedMoments::default();
    for p in &partials {
        total.merge(p);
    }
    total
}

/// Estimates this step's `λ` and writes the corrected drift of every
/// particle into `drift` (row-major).
pub fn cv_drift_all(
    e: &Ensemble,
    k: &Kernel,
    cfg: &CvConfig,
    plan: &BatchPlan,
    state: &mut CvState,
    drift: &mut [f64],
) {
    let d = e.dim_v();
    let s = &cfg.surrogate;
    let u_ref = match cfg.reference_mean {
        ReferenceMean::Frozen => state.u_frozen.clone(),
        ReferenceMean::Recomputed => e.mean_velocity(),
    };

    if let Some(clusters) = &cfg.clusters {
        let mut cs = ClusterState::assign(e, clusters);
        if cfg.reference_mean == ReferenceMean::Frozen {
            if let Some(frozen) = &state.cluster_frozen {
                cs.means.clone_from(frozen);
            }
        }
        let estimates: Vec<LambdaEstimate> = match cfg.lambda_mode {
            LambdaMode::Fixed(l) => vec![
                LambdaEstimate {
                    lambda: l,
                    ..Default::default()
                };
                clusters.len()
            ],
            _ => (0..clusters.len())
                .map(|c| {
                    pooled(e.n(), |i, acc| {
                        if cs.assignment[i] != c {
                            return;
                        }
                        let keep = |j: usize| cs.assignment[j] == c;
                        for_each_sample(e, k, s, plan, &cs.means[c], i, keep, |y, z| {
                            acc.push(y, z)
                        });
                    })
                    .estimate(cfg)
                })
                .collect(),
        };
        let lambda_k: Vec<f64> = estimates.iter().map(|x| x.lambda).collect();
        drift.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            multi_cluster_cv_drift_into(e, k, s, plan, &cs, &lambda_k, i, out)
        });
        state.lambda = Lambdas::PerCluster(lambda_k);
        state.estimates = estimates;
        return;
    }

    match cfg.lambda_mode {
        LambdaMode::Fixed(l) => {
            apply_scalar(e, k, s, plan, &u_ref, l, drift);
            state.lambda = Lambdas::Scalar(l);
            state.estimates = vec![LambdaEstimate {
                lambda: l,
                ..Default::default()
            }];
        }
        LambdaMode::Scalar => {
            let est = pooled(e.n(), |i, acc| {
                for_each_sample(e, k, s, plan, &u_ref, i, |_| true, |y, z| acc.push(y, z));
            })
            .estimate(cfg);
            apply_scalar(e, k, s, plan, &u_ref, est.lambda, drift);
            state.lambda = Lambdas::Scalar(est.lambda);
            state.estimates = vec![est];
        }
        LambdaMode::PerParticle => {
            let estimates: Vec<LambdaEstimate> = drift
                .par_chunks_mut(d)
                .enumerate()
                .map_init(
                    || vec![0.0; d],
                    |scratch, (i, out)| {
                        let mut acc = PairedMoments::default();
                        for_each_sample(e, k, s, plan, &u_ref, i, |_| true, |y, z| {
                            acc.push(y, z)
                        });
                        let est = acc.estimate(cfg);
                        cv_drift_into(e, k, s, plan, &u_ref, est.lambda, i, out, scratch);
                        est
                    },
                )
                .collect();
            state.lambda = Lambdas::PerParticle(estimates.iter().map(|x| x.lambda).collect());
            state.estimates = estimates;
        }
    }
}

fn apply_scalar(
    e: &Ensemble,
    k: &Kernel,
    s: &Surrogate,
    plan: &BatchPlan,
    u_ref: &[f64],
    lambda: f64,
    drift: &mut [f64],
) {
    let d = e.dim_v();
    drift
        .par_chunks_mut(d)
        .enumerate()
        .for_each_init(
            || vec![0.0; d],
            |scratch, (i, out)| cv_drift_into(e, k, s, plan, u_ref, lambda, i, out, scratch),
        );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{batch_drift, full_drift, make_particle_batches};
    use crate::ensemble::InitialLaw;
    use crate::rng::RngKey;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn wide() -> CvConfig {
        CvConfig {
            lambda_clamp: (-1e6, 1e6),
            ..Default::default()
        }
    }

    #[test]
    fn lambda_examples() {
        let cfg = CvConfig::default();
        let est = estimate_lambda(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &cfg).unwrap();
        assert_abs_diff_eq!(est.cov_hat, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(est.var_hat, 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(est.lambda, 0.5, epsilon = 1e-15);

        let z = [0.3, -1.0, 2.5, 0.1];
        assert_abs_diff_eq!(estimate_lambda(&z, &z, &cfg).unwrap().lambda, 1.0, epsilon = 1e-14);

        let est = estimate_lambda(&[1.0, 5.0, 2.0], &[0.7, 0.7, 0.7], &cfg).unwrap();
        assert_eq!(est.lambda, 0.0);
        assert!(!est.clamped);
    }

    #[test]
    fn lambda_is_clamped() {
        let z = [0.0, 1.0, 2.0];
        let y: Vec<f64> = z.iter().map(|v| -100.0 * v).collect();
        let est = estimate_lambda(&y, &z, &CvConfig::default()).unwrap();
        assert_eq!(est.lambda, -5.0);
        assert!(est.clamped);
    }

    #[test]
    fn lambda_input_errors() {
        let cfg = CvConfig::default();
        assert_eq!(
            estimate_lambda(&[1.0, 2.0], &[1.0], &cfg),
            Err(Error::LengthMismatch { left: 2, right: 1 })
        );
        assert_eq!(
            estimate_lambda(&[1.0], &[1.0], &cfg),
            Err(Error::TooFewSamples { needed: 2, got: 1 })
        );
    }

    #[test]
    fn config_validation() {
        assert!(CvConfig::default().validate().is_ok());
        let bad = [
            CvConfig {
                lambda_clamp: (0.5, 2.0),
                ..Default::default()
            },
            CvConfig {
                variance_floor: 0.0,
                ..Default::default()
            },
            CvConfig {
                lambda_mode: LambdaMode::Fixed(f64::NAN),
                ..Default::default()
            },
            CvConfig {
                clusters: Some(Clusters::scalar(&[0.5, 0.5])),
                ..Default::default()
            },
            CvConfig {
                clusters: Some(Clusters::scalar(&[])),
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn nearest_centre() {
        let c = Clusters::scalar(&[-0.5, 0.5]);
        assert_eq!(c.nearest(&[-0.9]), 0);
        assert_eq!(c.nearest(&[0.2]), 1);
        assert_eq!(c.nearest(&[0.0]), 0);
    }

    fn sample_setup(n: usize, m: usize) -> (Ensemble, BatchPlan) {
        let e = InitialLaw::Uniform.sample(n, 11).unwrap();
        let plan = make_particle_batches(n, m, RngKey::batch(11, 0, 3)).unwrap();
        (e, plan)
    }

    #[test]
    fn samples_come_from_batch_partners() {
        let (e, plan) = sample_setup(50, 8);
        let (y, z) = collect_cv_samples(&e, &Kernel::Constant, &Surrogate::One, &plan, &[0.0], 4);
        assert_eq!((y.len(), z.len()), (7, 7));
        let est = estimate_lambda(&y, &z, &wide()).unwrap();
        assert_abs_diff_eq!(est.lambda, 1.0, epsilon = 1e-12);

        let zero = Surrogate::custom(|_, _| 0.0);
        let (y, z) = collect_cv_samples(&e, &Kernel::Constant, &zero, &plan, &[0.0], 4);
        assert_eq!(estimate_lambda(&y, &z, &wide()).unwrap().lambda, 0.0);
    }

    #[test]
    fn zero_lambda_is_plain_batch_drift() {
        let (e, plan) = sample_setup(40, 5);
        let k = Kernel::BoundedConfidence { delta: 0.5 };
        for i in 0..40 {
            let a = cv_drift(&e, &k, &Surrogate::One, &plan, &[0.1], 0.0, i);
            assert_eq!(a, batch_drift(&e, &k, &plan, i));
        }
    }

    #[test]
    fn constant_kernel_correction_is_exact() {
        let (e, plan) = sample_setup(40, 5);
        let u = e.mean_velocity();
        for i in 0..40 {
            let a = cv_drift(&e, &Kernel::Constant, &Surrogate::One, &plan, &u, 1.0, i);
            let b = full_drift(&e, &Kernel::Constant, i);
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn quadratic_surrogate_vanishes_at_cluster_centre() {
        let e = Ensemble::opinions(vec![0.5, -0.2, 0.9, 0.1]).unwrap();
        let plan = BatchPlan::from_permutation(vec![0, 1, 2, 3], 2, 0).unwrap();
        let k = Kernel::Constant;
        let a = cv_drift(&e, &k, &Surrogate::TwoClusterQuadratic, &plan, &[0.0], 3.0, 0);
        assert_eq!(a, batch_drift(&e, &k, &plan, 0));
    }

    #[test]
    fn single_cluster_matches_recomputed_mean() {
        let (e, plan) = sample_setup(60, 6);
        let k = Kernel::BoundedConfidence { delta: 0.8 };
        let cs = ClusterState::assign(&e, &Clusters::scalar(&[0.0]));
        assert_eq!(cs.counts, vec![60]);
        let u = e.mean_velocity();
        for i in 0..60 {
            let a = multi_cluster_cv_drift(&e, &k, &Surrogate::One, &plan, &cs, &[0.7], i);
            let b = cv_drift(&e, &k, &Surrogate::One, &plan, &u, 0.7, i);
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn cluster_means_follow_assignment() {
        let e = Ensemble::opinions(vec![-0.6, -0.4, 0.3, 0.5, 0.7]).unwrap();
        let cs = ClusterState::assign(&e, &Clusters::scalar(&[-0.5, 0.5]));
        assert_eq!(cs.assignment, vec![0, 0, 1, 1, 1]);
        assert_abs_diff_eq!(cs.means[0][0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(cs.means[1][0], 0.5, epsilon = 1e-15);
        let plan = BatchPlan::from_permutation(vec![0, 2, 1, 3, 4], 5, 0).unwrap();
        let um = cs.batch_cluster_mean(&e, &plan, 3).unwrap();
        assert_abs_diff_eq!(um[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn frozen_cluster_means_come_from_the_initial_ensemble() {
        let initial = Ensemble::opinions(vec![-0.6, -0.4, 0.3, 0.5, 0.7]).unwrap();
        let cfg = CvConfig {
            clusters: Some(Clusters::scalar(&[-0.5, 0.5])),
            lambda_mode: LambdaMode::Fixed(1.0),
            ..Default::default()
        };
        let mut state = CvState::new(&initial, &cfg);
        assert_eq!(state.cluster_frozen, Some(vec![vec![-0.5], vec![0.5]]));

        let moved = Ensemble::opinions(vec![-0.7, -0.5, 0.3, 0.5, 0.8]).unwrap();
        let plan = BatchPlan::from_permutation(vec![0, 1, 2, 3, 4], 5, 0).unwrap();
        let mut drift = vec![0.0; 5];
        cv_drift_all(&moved, &Kernel::Constant, &cfg, &plan, &mut state, &mut drift);
        let mut cs = ClusterState::assign(&moved, cfg.clusters.as_ref().unwrap());
        cs.means = vec![vec![-0.5], vec![0.5]];
        for (i, d) in drift.iter().enumerate() {
            let direct =
                multi_cluster_cv_drift(&moved, &Kernel::Constant, &Surrogate::One, &plan, &cs, &[1.0, 1.0], i);
            assert_abs_diff_eq!(*d, direct[0], epsilon = 1e-15);
        }
    }

    #[test]
    fn pooled_lambda_is_thread_count_invariant() {
        let (e, plan) = sample_setup(3000, 10);
        let k = Kernel::BoundedConfidence { delta: 0.5 };
        let cfg = CvConfig::default();
        let go = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut state = CvState::new(&e, &cfg);
                let mut drift = vec![0.0; e.n()];
                cv_drift_all(&e, &k, &cfg, &plan, &mut state, &mut drift);
                (state, drift)
            })
        };
        let (s1, d1) = go(1);
        let (s4, d4) = go(4);
        assert_eq!(s1, s4);
        assert_eq!(d1, d4);
    }

    #[test]
    fn drift_all_modes_agree_with_single_particle_drift() {
        let (e, plan) = sample_setup(200, 8);
        let k = Kernel::BoundedConfidence { delta: 0.6 };
        let u = e.mean_velocity();
        for mode in [LambdaMode::Fixed(0.4), LambdaMode::Scalar, LambdaMode::PerParticle] {
            let cfg = CvConfig {
                lambda_mode: mode,
                ..Default::default()
            };
            let mut state = CvState::new(&e, &cfg);
            let mut drift = vec![0.0; e.n()];
            cv_drift_all(&e, &k, &cfg, &plan, &mut state, &mut drift);
            for i in 0..e.n() {
                let lambda = match &state.lambda {
                    Lambdas::Scalar(l) => *l,
                    Lambdas::PerParticle(ls) => ls[i],
                    Lambdas::PerCluster(_) => unreachable!(),
                };
                let direct = cv_drift(&e, &k, &Surrogate::One, &plan, &u, lambda, i);
                assert_abs_diff_eq!(drift[i], direct[0], epsilon = 1e-14);
            }
            if let LambdaMode::PerParticle = mode {
                let (y, z) = collect_cv_samples(&e, &k, &Surrogate::One, &plan, &u, 17);
                let est = estimate_lambda(&y, &z, &cfg).unwrap();
                assert_abs_diff_eq!(state.estimates[17].lambda, est.lambda, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn streaming_matches_two_pass(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..60),
                                      split in 0usize..60) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let z: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let cfg = wide();
            let reference = estimate_lambda(&y, &z, &cfg).unwrap();
            let cut = split.min(pairs.len());
            let mut a = PairedMoments::default();
            let mut b = PairedMoments::default();
            for (k, (p, q)) in y.iter().zip(&z).enumerate() {
                if k < cut { a.push(*p, *q) } else { b.push(*p, *q) }
            }
            a.merge(&b);
            prop_assert_eq!(a.count(), pairs.len() as u64);
            let est = a.estimate(&cfg);
            prop_assert!((est.var_hat - reference.var_hat).abs() <= 1e-10);
            prop_assert!((est.cov_hat - reference.cov_hat).abs() <= 1e-10);
            if reference.var_hat > 1e-6 {
                prop_assert!((est.lambda - reference.lambda).abs() <= 1e-8 * (1.0 + reference.lambda.abs()));
            }
        }

        #[test]
        fn optimal_lambda_reduces_variance(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..40)) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let z: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let est = estimate_lambda(&y, &z, &wide()).unwrap();
            prop_assume!(est.var_hat > 1e-6);
            let var = |s: &[f64]| {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                s.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (s.len() - 1) as f64
            };
            let vy = var(&y);
            let resid: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a - est.lambda * b).collect();
            let rho2 = est.cov_hat * est.cov_hat / (est.var_hat * vy.max(1e-300));
            prop_assert!((var(&resid) - (1.0 - rho2) * vy).abs() <= 1e-10 * (1.0 + vy));
            prop_assert!(var(&resid) <= vy + 1e-12);
        }
    }
}
