//! Toy distributions, Gaussian prior fitting, and two-sample metrics.
//!
//! Generator conventions (before `scale` is applied):
//! - `two_moons`: upper arc `(cos t, sin t)` and lower arc
//!   `(1 - cos t, 0.5 - sin t)`, `t ~ U[0, pi]`, recentred at the origin.
//! - `swiss_roll_2d`: `t = 1.5 pi (1 + 2u)`, point `(t cos t, t sin t) / 5`.
//! - `s_curve_2d`: `t = 3 pi (u - 0.5)`, point `(sin t, sign(t) (cos t - 1) + 1)`.
//! - `checkerboard`: uniform on the cells `(i, j)` of a 4 x 4 board over
//!   `[-2, 2]^2` with `i + j` even.
//! - `circles`: half the points on radius 1, half on radius 0.5.
//! - `gaussian_mixture_8`: eight components on the circle of radius 2.
//!
//! `noise` is the standard deviation of isotropic Gaussian jitter (the
//! component width for the mixture).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use thiserror::Error;

use crate::numerics::{PointSampler, RngState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("sample set is empty")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("samples have zero variance")]
    Degenerate,
    #[error("inflation must be at least 1, got {0}")]
    BadInflation(f64),
    #[error("variance must be positive, got {0}")]
    BadVariance(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    TwoMoons,
    SwissRoll2d,
    SCurve2d,
    Checkerboard,
    Circles,
    GaussianMixture8,
    /// Isotropic normal with the given mean and standard deviation.
    Gaussian { mean: Vec<f64>, std: f64 },
}

impl Family {
    pub fn from_name(name: &str) -> Result<Self, BenchError> {
        Ok(match name {
            "two_moons" => Family::TwoMoons,
            "swiss_roll_2d" => Family::SwissRoll2d,
            "s_curve_2d" => Family::SCurve2d,
            "checkerboard" => Family::Checkerboard,
            "circles" => Family::Circles,
            "gaussian_mixture_8" => Family::GaussianMixture8,
            _ => return Err(BenchError::UnknownDataset(name.into())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::TwoMoons => "two_moons",
            Family::SwissRoll2d => "swiss_roll_2d",
            Family::SCurve2d => "s_curve_2d",
            Family::Checkerboard => "checkerboard",
            Family::Circles => "circles",
            Family::GaussianMixture8 => "gaussian_mixture_8",
            Family::Gaussian { .. } => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub family: Family,
    pub scale: f64,
    pub noise: f64,
}

impl DatasetSpec {
    pub fn new(family: Family) -> Self {
        let noise = match family {
            Family::GaussianMixture8 => 0.1,
            Family::Gaussian { .. } | Family::Checkerboard => 0.0,
            _ => 0.05,
        };
        Self {
            family,
            scale: 1.0,
            noise,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// True when a noiseless checkerboard point lies in a permitted cell.
    pub fn checkerboard_allows(x: f64, y: f64) -> bool {
        if !(-2.0..2.0).contains(&x) || !(-2.0..2.0).contains(&y) {
            return false;
        }
        let i = libm::floor(x + 2.0) as i64;
        let j = libm::floor(y + 2.0) as i64;
        (i + j) % 2 == 0
    }
}

impl PointSampler for DatasetSpec {
    fn dim(&self) -> usize {
        match &self.family {
            Family::Gaussian { mean, .. } => mean.len(),
            _ => 2,
        }
    }

    fn sample_into(&self, rng: &mut RngState, out: &mut [f64]) {
        let s = self.scale;
        match &self.family {
            Family::Gaussian { mean, std } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = s * (m + std * rng.normal());
                }
                return;
            }
            Family::TwoMoons => {
                let t = PI * rng.uniform();
                let (x, y) = if rng.uniform() < 0.5 {
                    (libm::cos(t), libm::sin(t))
                } else {
                    (1.0 - libm::cos(t), 0.5 - libm::sin(t))
                };
                out[0] = x - 0.5;
                out[1] = y - 0.25;
            }
            Family::SwissRoll2d => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
                out[0] = t * libm::cos(t) / 5.0;
                out[1] = t * libm::sin(t) / 5.0;
            }
            Family::SCurve2d => {
                let t = 3.0 * PI * (rng.uniform() - 0.5);
                let sign = if t < 0.0 { -1.0 } else { 1.0 };
                out[0] = libm::sin(t);
                out[1] = sign * (libm::cos(t) - 1.0) + 1.0;
            }
            Family::Checkerboard => {
                // 8 permitted cells; pick one, then a uniform point in it
                let c = rng.index(8);
                let row = c / 2;
                let col = 2 * (c % 2) + (row % 2);
                out[0] = -2.0 + col as f64 + rng.uniform();
                out[1] = -2.0 + row as f64 + rng.uniform();
            }
            Family::Circles => {
                let r = if rng.uniform() < 0.5 { 1.0 } else { 0.5 };
                let t = 2.0 * PI * rng.uniform();
                out[0] = r * libm::cos(t);
                out[1] = r * libm::sin(t);
            }
            Family::GaussianMixture8 => {
                let k = rng.index(8) as f64;
                let t = 2.0 * PI * k / 8.0;
                out[0] = 2.0 * libm::cos(t);
                out[1] = 2.0 * libm::sin(t);
            }
        }
        for o in out.iter_mut() {
            if self.noise > 0.0 {
                *o += self.noise * rng.normal();
            }
            *o *= s;
        }
    }
}

/// Endpoint distribution for the prior side of a bridge.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    Gaussian { mean: Vec<f64>, var: f64 },
    Dataset(DatasetSpec),
}

impl PriorSpec {
    pub fn gaussian(mean: Vec<f64>, var: f64) -> Result<Self, BenchError> {
        if !(var > 0.0 && var.is_finite()) {
            return Err(BenchError::BadVariance(var));
        }
        Ok(PriorSpec::Gaussian { mean, var })
    }

    /// `log p(x)` for the Gaussian case; `None` for dataset priors.
    pub fn log_density(&self, x: &[f64]) -> Option<f64> {
        match self {
            PriorSpec::Gaussian { mean, var } => Some(crate::likelihood::log_normal_iso(x, mean, *var)),
            PriorSpec::Dataset(_) => None,
        }
    }
}

impl PointSampler for PriorSpec {
    fn dim(&self) -> usize {
        match self {
            PriorSpec::Gaussian { mean, .. } => mean.len(),
            PriorSpec::Dataset(d) => d.dim(),
        }
    }
    fn sample_into(&self, rng: &mut RngState, out: &mut [f64]) {
        match self {
            PriorSpec::Gaussian { mean, var } => {
                let sd = libm::sqrt(*var);
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + sd * rng.normal();
                }
            }
            PriorSpec::Dataset(d) => d.sample_into(rng, out),
        }
    }
}

/// Gaussian prior with the data mean and `inflation` times the pooled
/// per-coordinate variance.
pub fn prior_from_data(samples: &[f64], d: usize, inflation: f64) -> Result<PriorSpec, BenchError> {
    if !(inflation >= 1.0) {
        return Err(BenchError::BadInflation(inflation));
    }
    let (mean, var) = crate::analytic_gauss::mean_var(samples, d).map_err(|_| BenchError::Empty)?;
    let pooled = var.iter().sum::<f64>() / d as f64;
    if !(pooled > 0.0) {
        return Err(BenchError::Degenerate);
    }
    Ok(PriorSpec::Gaussian {
        mean,
        var: inflation * pooled,
    })
}

fn check_sets(a: &[f64], b: &[f64], d: usize) -> Result<(usize, usize), BenchError> {
    if d == 0 || a.len() % d != 0 || b.len() % d != 0 {
        return Err(BenchError::DimMismatch(a.len(), b.len()));
    }
    let (n, m) = (a.len() / d, b.len() / d);
    if n == 0 || m == 0 {
        return Err(BenchError::Empty);
    }
    Ok((n, m))
}

/// Exact 2-Wasserstein distance between two sorted 1-D empirical measures,
/// integrating the squared quantile gap piecewise.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        acc += (next - u) * diff * diff;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    libm::sqrt(acc)
}

fn sort(v: &mut [f64]) {
    v.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
}

/// Random orthonormal frames, flattened; `count` directions in total.
fn random_directions(d: usize, count: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let frame_start = dirs.len();
        for _ in 0..d.min(count - frame_start) {
            loop {
                let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                for u in &dirs[frame_start..] {
                    let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
                }
                let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                if norm > 1e-8 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    dirs.push(v);
                    break;
                }
            }
        }
    }
    dirs
}

/// Mean over random unit directions of the 1-D 2-Wasserstein distance
/// between the projected samples. Directions come in orthonormal frames.
pub fn sliced_wasserstein(a: &[f64], b: &[f64], d: usize, n_projections: usize, rng: &mut RngState) -> Result<f64, BenchError> {
    let (n, m) = check_sets(a, b, d)?;
    if n_projections == 0 {
        return Err(BenchError::Empty);
    }
    let dirs = random_directions(d, n_projections, rng);
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; m];
    let mut total = 0.0;
    for dir in &dirs {
        for (p, row) in pa.iter_mut().zip(a.chunks_exact(d)) {
            *p = row.iter().zip(dir).map(|(x, u)| x * u).sum();
        }
        for (p, row) in pb.iter_mut().zip(b.chunks_exact(d)) {
            *p = row.iter().zip(dir).map(|(x, u)| x * u).sum();
        }
        sort(&mut pa);
        sort(&mut pb);
        total += wasserstein_1d_sorted(&pa, &pb);
    }
    Ok(total / dirs.len() as f64)
}

/// V-statistic `2 E|X - Y| - E|X - X'| - E|Y - Y'|`.
pub fn energy_distance(a: &[f64], b: &[f64], d: usize) -> Result<f64, BenchError> {
    let (n, m) = check_sets(a, b, d)?;
    let dist = |x: &[f64], y: &[f64]| libm::sqrt(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>());
    let mean_pair = |u: &[f64], v: &[f64], nu: usize, nv: usize| {
        let mut s = 0.0;
        for x in u.chunks_exact(d) {
            for y in v.chunks_exact(d) {
                s += dist(x, y);
            }
        }
        s / (nu * nv) as f64
    };
    let e = 2.0 * mean_pair(a, b, n, m) - mean_pair(a, a, n, n) - mean_pair(b, b, m, m);
    Ok(e.max(0.0))
}
