//! Moments, kernel density reconstruction and error metrics.

use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

/// Evaluation points of a density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Grid {
    /// Chosen from the ensemble when the density is evaluated, see
    /// [`KdeConfig::default_for`].
    Auto,
    Line { v: Vec<f64> },
    Plane { x: Vec<f64>, v: Vec<f64> },
}

impl Grid {
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![0.5 * (lo + hi)];
        }
        let h = (hi - lo) / (count - 1) as f64;
        (0..count).map(|k| lo + k as f64 * h).collect()
    }

    fn axes(&self) -> Vec<&[f64]> {
        match self {
            Grid::Auto => Vec::new(),
            Grid::Line { v } => vec![v],
            Grid::Plane { x, v } => vec![x, v],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeConfig {
    /// Gaussian bandwidth Σ² (a variance).
    pub sigma2: f64,
    pub grid: Grid,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            sigma2: Self::DEFAULT_SIGMA2,
            grid: Grid::Auto,
        }
    }
}

impl KdeConfig {
    pub const DEFAULT_SIGMA2: f64 = 1e-5;

    /// 400 points on `[-1.1, 1.1]`.
    pub fn opinion() -> Self {
        Self {
            sigma2: Self::DEFAULT_SIGMA2,
            grid: Grid::Line {
                v: Grid::uniform(-1.1, 1.1, 400),
            },
        }
    }

    /// 100×100 grid over the bounding box of `e`, padded by 6Σ.
    pub fn phase_plane_for(e: &Ensemble, sigma2: f64) -> Self {
        let pad = 6.0 * sigma2.sqrt();
        let range = |vals: &[f64]| {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Grid::uniform(lo - pad, hi + pad, 100)
        };
        Self {
            sigma2,
            grid: Grid::Plane {
                x: range(e.positions()),
                v: range(e.velocities_flat()),
            },
        }
    }

    /// A grid suited to the shape of `e`: the phase plane for `(x, v)`
    /// ensembles, the opinion grid for bounded ones, and otherwise 400 points
    /// over the velocity range padded by 6Σ.
    pub fn default_for(e: &Ensemble) -> Self {
        Self::resolve(e, Self::DEFAULT_SIGMA2)
    }

    fn resolve(e: &Ensemble, sigma2: f64) -> Self {
        if e.dim_x() == 1 && e.dim_v() == 1 {
            Self::phase_plane_for(e, sigma2)
        } else if e.is_bounded() {
            Self {
                sigma2,
                ..Self::opinion()
            }
        } else {
            let v = e.velocities_flat();
            let pad = 6.0 * sigma2.sqrt();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min) - pad;
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
            Self {
                sigma2,
                grid: Grid::Line {
                    v: Grid::uniform(lo, hi, 400),
                },
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::invalid(
                "kde.sigma2",
                format!("must be positive, got {}", self.sigma2),
            ));
        }
        for axis in self.grid.axes() {
            if axis.is_empty() {
                return Err(Error::Empty("kde grid"));
            }
            if axis.windows(2).any(|w| !(w[1] > w[0])) || axis.iter().any(|g| !g.is_finite()) {
                return Err(Error::invalid("kde.grid", "points must be finite and increasing"));
            }
        }
        Ok(())
    }
}

/// Density values on a tensor grid, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = 0.5 * (axis[k + 1] - axis[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

impl DensityGrid {
    pub fn from_fn_line(v: Vec<f64>, f: impl Fn(f64) -> f64) -> Self {
        let values = v.iter().map(|&g| f(g)).collect();
        Self { axes: vec![v], values }
    }

    pub fn from_fn_plane(x: Vec<f64>, v: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = x
            .iter()
            .flat_map(|&a| v.iter().map(move |&b| (a, b)))
            .map(|(a, b)| f(a, b))
            .collect();
        Self {
            axes: vec![x, v],
            values,
        }
    }

    /// Trapezoidal quadrature weight of each grid value.
    pub fn weights(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self.axes.iter().map(|a| trapezoid_weights(a)).collect();
        match per_axis.as_slice() {
            [w] => w.clone(),
            [wx, wv] => wx
                .iter()
                .flat_map(|a| wv.iter().map(move |b| a * b))
                .collect(),
            _ => unreachable!("grids are one or two dimensional"),
        }
    }

    /// `∫ f` by the trapezoidal rule.
    pub fn mass(&self) -> f64 {
        self.weights().iter().zip(&self.values).map(|(w, f)| w * f).sum()
    }

    /// Writes a header line and one row per grid point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        match self.axes.as_slice() {
            [v] => {
                writeln!(w, "v,density")?;
                for (g, f) in v.iter().zip(&self.values) {
                    writeln!(w, "{g},{f}")?;
                }
            }
            [x, v] => {
                writeln!(w, "x,v,density")?;
                let mut it = self.values.iter();
                for a in x {
                    for b in v {
                        writeln!(w, "{a},{b},{}", it.next().expect("shape"))?;
                    }
                }
            }
            _ => unreachable!("grids are one or two dimensional"),
        }
        Ok(())
    }

    /// Inverse of [`DensityGrid::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> io::Result<Self> {
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty density file"))??;
        let cols = header.split(',').count();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<io::Result<Vec<f64>>>()?;
            if row.len() != cols {
                return Err(bad("ragged row"));
            }
            rows.push(row);
        }
        match cols {
            2 => Ok(Self {
                axes: vec![rows.iter().map(|r| r[0]).collect()],
                values: rows.iter().map(|r| r[1]).collect(),
            }),
            3 => {
                let nv = rows.iter().take_while(|r| r[0] == rows[0][0]).count();
                if nv == 0 || rows.len() % nv != 0 {
                    return Err(bad("not a tensor grid"));
                }
                Ok(Self {
                    axes: vec![
                        rows.iter().step_by(nv).map(|r| r[0]).collect(),
                        rows[..nv].iter().map(|r| r[1]).collect(),
                    ],
                    values: rows.iter().map(|r| r[2]).collect(),
                })
            }
            _ => Err(bad("expected 2 or 3 columns")),
        }
    }
}

fn gaussian(sigma2: f64) -> impl Fn(f64) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma2).sqrt();
    let inv = 0.5 / sigma2;
    move |d: f64| norm * (-d * d * inv).exp()
}

/// Gaussian kernel density estimate `(1/N) Σ φ_Σ(g - z_i)` on the grid.
pub fn kde(e: &Ensemble, cfg: &KdeConfig) -> Result<DensityGrid> {
    cfg.validate()?;
    if cfg.grid == Grid::Auto {
        return kde(e, &KdeConfig::resolve(e, cfg.sigma2));
    }
    let phi = gaussian(cfg.sigma2);
    let inv_n = 1.0 / e.n() as f64;
    match &cfg.grid {
        Grid::Line { v: grid } => {
            if e.dim_v() != 1 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    found: e.dim_v(),
                });
            }
            let v = e.velocities_flat();
            let values = grid
                .par_iter()
                .map(|g| v.iter().map(|vi| phi(g - vi)).sum::<f64>() * inv_n)
                .collect();
            Ok(DensityGrid {
                axes: vec![grid.clone()],
                values,
            })
        }
        Grid::Auto => unreachable!("resolved above"),
        Grid::Plane { x: gx, v: gv } => {
            if e.dim_x() != 1 || e.dim_v() != 1 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    found: e.dim_x().max(e.dim_v()),
                });
            }
            let (x, v) = (e.positions(), e.velocities_flat());
            let nv = gv.len();
            // The kernel factorises, so the sum is a product of two N-by-grid matrices.
            let bv: Vec<f64> = v
                .par_iter()
                .flat_map_iter(|vi| gv.iter().map(|g| phi(g - vi)).collect::<Vec<_>>())
                .collect();
            let mut values = vec![0.0; gx.len() * nv];
            values
                .par_chunks_mut(nv)
                .zip(gx.par_iter())
                .for_each(|(row, g)| {
                    for (i, xi) in x.iter().enumerate() {
                        let a = phi(g - xi);
                        if a == 0.0 {
                            continue;
                        }
                        for (r, b) in row.iter_mut().zip(&bv[i * nv..(i + 1) * nv]) {
                            *r += a * b;
                        }
                    }
                    row.iter_mut().for_each(|r| *r *= inv_n);
                });
            Ok(DensityGrid {
                axes: vec![gx.clone(), gv.clone()],
                values,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Moments {
    pub mass: f64,
    pub mean: Vec<f64>,
    /// `(1/(N d)) Σ |v_i - U_N|²`.
    pub temperature: f64,
}

pub fn moments(e: &Ensemble) -> Moments {
    let mean = e.mean_velocity();
    let d = e.dim_v();
    let ss: f64 = e
        .velocities_flat()
        .chunks(d)
        .map(|v| v.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Moments {
        mass: 1.0,
        mean,
        temperature: ss / (e.n() * d) as f64,
    }
}

/// `|U_N - m|` in the Euclidean norm.
pub fn mean_error(e: &Ensemble, m: &[f64]) -> f64 {
    e.mean_velocity()
        .iter()
        .zip(m)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `H(f) = ∫ f ln f`, with `0 ln 0 = 0`.
pub fn entropy_h(d: &DensityGrid) -> f64 {
    d.weights()
        .iter()
        .zip(&d.values)
        .filter(|(_, f)| **f > 0.0)
        .map(|(w, f)| w * f * f.ln())
        .sum()
}

/// `∫ |f - g|` on a shared grid.
pub fn l1_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.axes != b.axes || a.values.len() != b.values.len() {
        return Err(Error::GridMismatch);
    }
    Ok(a.weights()
        .iter()
        .zip(a.values.iter().zip(&b.values))
        .map(|(w, (f, g))| w * (f - g).abs())
        .sum())
}

/// Statistics of one quantity over independent repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepeatSummary {
    pub count: usize,
    pub mean: f64,
    /// Root mean square.
    pub rms: f64,
    /// Normal-approximation 95% band for the mean.
    pub band: (f64, f64),
}

pub fn rmse_over_repeats(values: &[f64]) -> Result<RepeatSummary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let half = 1.96 * (var / n as f64).sqrt();
    Ok(RepeatSummary {
        count: n,
        mean,
        rms,
        band: (mean - half, mean + half),
    })
}
