//! Particle state and the initial laws used by the experiments.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngKey;

/// Positions and velocities of `n` particles, stored row-major.
///
/// Space-homogeneous models carry `dim_x == 0` and an empty position array.
/// `bounded` marks opinion models whose velocities live in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    n: usize,
    dim_x: usize,
    dim_v: usize,
    x: Vec<f64>,
    v: Vec<f64>,
    bounded: bool,
}

impl Ensemble {
    pub fn new(
        dim_x: usize,
        dim_v: usize,
        x: Vec<f64>,
        v: Vec<f64>,
        bounded: bool,
    ) -> Result<Self> {
        if dim_v == 0 {
            return Err(Error::invalid("dim_v", "velocity dimension must be >= 1"));
        }
        if v.len() % dim_v != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim_v,
                found: v.len() % dim_v,
            });
        }
        let n = v.len() / dim_v;
        if x.len() != n * dim_x {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: n * dim_x,
            });
        }
        let e = Self {
            n,
            dim_x,
            dim_v,
            x,
            v,
            bounded,
        };
        e.validate(0)?;
        Ok(e)
    }

    /// Scalar opinions in `[-1, 1]`.
    pub fn opinions(v: Vec<f64>) -> Result<Self> {
        Self::new(0, 1, Vec::new(), v, true)
    }

    /// Unbounded one-dimensional velocities without positions.
    pub fn velocities(v: Vec<f64>) -> Result<Self> {
        Self::new(0, 1, Vec::new(), v, false)
    }

    /// One-dimensional phase space `(x, v)`.
    pub fn phase_space(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        Self::new(1, 1, x, v, false)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_v(&self) -> usize {
        self.dim_v
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim_x..(i + 1) * self.dim_x]
    }

    #[inline]
    pub fn v(&self, i: usize) -> &[f64] {
        &self.v[i * self.dim_v..(i + 1) * self.dim_v]
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    pub fn velocities_flat(&self) -> &[f64] {
        &self.v
    }

    /// Swap in new state arrays of the same shape.
    pub(crate) fn replace(&mut self, x: Vec<f64>, v: Vec<f64>) {
        debug_assert_eq!(x.len(), self.x.len());
        debug_assert_eq!(v.len(), self.v.len());
        self.x = x;
        self.v = v;
    }

    /// Checks finiteness, and the `[-1, 1]` box for opinion models.
    pub fn validate(&self, step: u64) -> Result<()> {
        let finite = self.x.iter().chain(&self.v).all(|a| a.is_finite());
        if !finite {
            return Err(Error::NonFinite { step });
        }
        if self.bounded && self.v.iter().any(|a| a.abs() > 1.0) {
            return Err(Error::invalid("v", "opinion outside [-1, 1]"));
        }
        Ok(())
    }

    /// Component-wise velocity mean.
    pub fn mean_velocity(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim_v];
        for row in self.v.chunks_exact(self.dim_v) {
            for (m, a) in mean.iter_mut().zip(row) {
                *m += a;
            }
        }
        let inv = 1.0 / self.n as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

/// Initial distributions of the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialLaw {
    /// Opinions uniform on `[-1, 1]`.
    Uniform,
    /// Opinions uniform on `[-3/4, -1/4] ∪ [1/4, 3/4]`.
    TwoCluster,
    /// `(x, v)` uniform on `[-1, 1]^2`.
    UniformPhase,
}

impl InitialLaw {
    pub fn dim_x(self) -> usize {
        match self {
            InitialLaw::Uniform | InitialLaw::TwoCluster => 0,
            InitialLaw::UniformPhase => 1,
        }
    }

    pub fn is_bounded(self) -> bool {
        !matches!(self, InitialLaw::UniformPhase)
    }

    /// Mean velocity of the law itself (not of a sample).
    pub fn mean(self) -> f64 {
        0.0
    }

    /// Standard deviation of the velocity under the law.
    pub fn velocity_std(self) -> f64 {
        match self {
            InitialLaw::Uniform | InitialLaw::UniformPhase => (1.0f64 / 3.0).sqrt(),
            // E[v^2] = ∫_{1/4}^{3/4} v^2 dv * 2 = 13/48
            InitialLaw::TwoCluster => (13.0f64 / 48.0).sqrt(),
        }
    }

    fn sample_particle(self, seed: u64, i: usize, x: &mut [f64], v: &mut [f64]) {
        let mut rng = RngKey::init(seed, i).rng();
        match self {
            InitialLaw::Uniform => v[0] = rng.random_range(-1.0..=1.0),
            InitialLaw::TwoCluster => {
                let magnitude: f64 = rng.random_range(0.25..=0.75);
                v[0] = if rng.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                };
            }
            InitialLaw::UniformPhase => {
                x[0] = rng.random_range(-1.0..=1.0);
                v[0] = rng.random_range(-1.0..=1.0);
            }
        }
    }

    /// `n` i.i.d. draws; particle `i` uses its own init stream, so the first
    /// `k` particles do not depend on `n`.
    pub fn sample(self, n: usize, seed: u64) -> Result<Ensemble> {
        if n == 0 {
            return Err(Error::invalid("n", "need at least one particle"));
        }
        let dim_x = self.dim_x();
        let mut x = vec![0.0; n * dim_x];
        let mut v = vec![0.0; n];
        for i in 0..n {
            let xi = &mut x[i * dim_x..(i + 1) * dim_x];
            self.sample_particle(seed, i, xi, &mut v[i..i + 1]);
        }
        Ensemble::new(dim_x, 1, x, v, self.is_bounded())
    }
}

impl FromStr for InitialLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(InitialLaw::Uniform),
            "two-cluster" => Ok(InitialLaw::TwoCluster),
            "uniform-phase" => Ok(InitialLaw::UniformPhase),
            other => Err(Error::UnknownDistribution(other.to_string())),
        }
    }
}

impl fmt::Display for InitialLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitialLaw::Uniform => "uniform",
            InitialLaw::TwoCluster => "two-cluster",
            InitialLaw::UniformPhase => "uniform-phase",
        })
    }
}

/// Samples the model's initial law.
pub fn init_ensemble(model: &crate::models::ModelSpec, n: usize, seed: u64) -> Result<Ensemble> {
    model.initial.sample(n, seed)
}
