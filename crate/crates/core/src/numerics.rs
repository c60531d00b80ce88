//! Seeded randomness, discretisation schedules and the sinusoidal step
//! encoding shared by the rest of the crate.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("symmetric schedule needs an even number of steps, got {0}")]
    OddSteps(usize),
    #[error("need 0 < gamma_min <= gamma_max, got ({0}, {1})")]
    BadRange(f64, f64),
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded, splittable random stream.
///
/// Child streams from [`RngState::substream`] depend only on the parent seed
/// and the index, never on how much of the parent has been consumed, so
/// trajectory `j` of epoch `e` draws the same noise whether trajectories are
/// simulated serially or concurrently.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, index: u64) -> Self {
        let child = splitmix64(self.seed ^ splitmix64(index.wrapping_mul(GOLDEN_GAMMA) ^ 0xD1B5_4A32_D192_ED03));
        Self::new(child)
    }

    /// Substream keyed by a pair, e.g. `(epoch, trajectory)`.
    pub fn substream2(&self, a: u64, b: u64) -> Self {
        self.substream(a).substream(b)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        // Lemire's multiply-shift with rejection keeps the draw unbiased.
        let n64 = n as u64;
        let threshold = n64.wrapping_neg() % n64;
        loop {
            let m = (self.inner.next_u64() as u128) * (n64 as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.inner.next_u32() & 1 == 0 {
            -1.0
        } else {
            1.0
        }
    }
}

/// `dim` i.i.d. standard normal draws.
pub fn gaussian_vector(rng: &mut RngState, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    rng.fill_normal(&mut v);
    v
}

/// Step sizes `gamma_1..gamma_N` and the cumulative times `t_0 = 0 .. t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    gammas: Vec<f64>,
    times: Vec<f64>,
}

impl StepSchedule {
    pub fn from_gammas(gammas: Vec<f64>) -> Result<Self, ScheduleError> {
        if gammas.is_empty() {
            return Err(ScheduleError::NoSteps);
        }
        if let Some(&g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(ScheduleError::BadStep(g));
        }
        let mut times = Vec::with_capacity(gammas.len() + 1);
        let mut t = 0.0;
        times.push(t);
        for g in &gammas {
            t += g;
            times.push(t);
        }
        Ok(Self { gammas, times })
    }

    pub fn uniform(n_steps: usize, gamma: f64) -> Result<Self, ScheduleError> {
        if n_steps == 0 {
            return Err(ScheduleError::NoSteps);
        }
        Self::from_gammas(vec![gamma; n_steps])
    }

    /// Linear ramp from `gamma_min` to `gamma_max` over the first half, then
    /// mirrored, so that `gamma_k == gamma_{N+1-k}`.
    ///
    /// For `k = 1..=N/2` the ramp is `gamma_min + (k-1)/(N/2-1) * (gamma_max - gamma_min)`;
    /// with `N = 2` both steps are `gamma_min`.
    pub fn symmetric(n_steps: usize, gamma_min: f64, gamma_max: f64) -> Result<Self, ScheduleError> {
        if n_steps == 0 {
            return Err(ScheduleError::NoSteps);
        }
        if n_steps % 2 != 0 {
            return Err(ScheduleError::OddSteps(n_steps));
        }
        if !(gamma_min > 0.0 && gamma_min <= gamma_max && gamma_max.is_finite()) {
            return Err(ScheduleError::BadRange(gamma_min, gamma_max));
        }
        let half = n_steps / 2;
        let mut first: Vec<f64> = (0..half)
            .map(|i| {
                if half == 1 {
                    gamma_min
                } else {
                    gamma_min + (i as f64 / (half - 1) as f64) * (gamma_max - gamma_min)
                }
            })
            .collect();
        let mirror: Vec<f64> = first.iter().rev().copied().collect();
        first.extend(mirror);
        Self::from_gammas(first)
    }

    pub fn n_steps(&self) -> usize {
        self.gammas.len()
    }

    /// `gamma_k` for `k` in `1..=N`.
    pub fn gamma(&self, k: usize) -> f64 {
        self.gammas[k - 1]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// `t_k` for `k` in `0..=N`.
    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.gammas.len()]
    }

    /// Index `k` with `t_k == t` exactly (up to a relative 1e-12), if any.
    pub fn index_of_time(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon().max(1.0);
        self.times.iter().position(|&tk| (tk - t).abs() <= tol)
    }
}

/// Interleaved `sin`/`cos` features of a scalar position at frequencies
/// `10000^(-2i/dim)`: component `2i` is the sine, `2i+1` the cosine.
pub fn sinusoidal_encoding(position: f64, enc_dim: usize, out: &mut [f64]) {
    assert!(enc_dim % 2 == 0, "encoding width must be even");
    assert_eq!(out.len(), enc_dim);
    let half = enc_dim / 2;
    for i in 0..half {
        let freq = libm::pow(10000.0, -((2 * i) as f64) / enc_dim as f64);
        let arg = position * freq;
        out[2 * i] = libm::sin(arg);
        out[2 * i + 1] = libm::cos(arg);
    }
}

/// Encoding of a discrete step index.
pub fn positional_encoding(step_index: usize, enc_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; enc_dim];
    sinusoidal_encoding(step_index as f64, enc_dim, &mut out);
    out
}

/// Encoding of a physical time instead of an index.
pub fn time_encoding(t: f64, enc_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; enc_dim];
    sinusoidal_encoding(t, enc_dim, &mut out);
    out
}

/// Anything that can draw points in `R^d`.
pub trait PointSampler {
    fn dim(&self) -> usize;
    fn sample_into(&self, rng: &mut RngState, out: &mut [f64]);

    /// `n` points, row-major `n x dim`.
    fn sample_n(&self, n: usize, rng: &mut RngState) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        for row in out.chunks_exact_mut(d.max(1)).take(n) {
            self.sample_into(rng, row);
        }
        out
    }
}

impl<S: PointSampler + ?Sized> PointSampler for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn sample_into(&self, rng: &mut RngState, out: &mut [f64]) {
        (**self).sample_into(rng, out)
    }
}
