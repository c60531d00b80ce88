//! Euler–Maruyama chains, closed-form Ornstein–Uhlenbeck transitions and the
//! trajectory cache used during training.
//!
//! Forward chain: `X_{k+1} = F(k, X_k) + sqrt(2 gamma_{k+1}) Z`, `k = 0..N-1`.
//! Backward chain: `X_{k-1} = B(k, X_k) + sqrt(2 gamma_k) Z`, `k = N..1`.
//!
//! Trajectory `j` draws its noise from substream `(epoch, j)` of the caller's
//! generator, so results do not depend on batching or evaluation order.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::numerics::{RngState, StepSchedule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("reference drift needs a finite alpha >= 0, got {0}")]
    BadAlpha(f64),
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("trajectory {traj} diverged at step {step} (norm {norm:e})")]
    Diverged { traj: usize, step: usize, norm: f64 },
    #[error("state length {len} is not a multiple of dimension {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("cache is empty")]
    EmptyCache,
    #[error("thinning must keep between 1 and {max} points per trajectory, got {got}")]
    BadThinning { got: usize, max: usize },
}

/// Linear drift `f(x) = -alpha x`; `alpha = 0` is Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceDrift {
    alpha: f64,
}

impl ReferenceDrift {
    pub fn new(alpha: f64) -> Result<Self, DiffusionError> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(DiffusionError::BadAlpha(alpha));
        }
        Ok(Self { alpha })
    }

    pub fn brownian() -> Self {
        Self { alpha: 0.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn drift(&self, x: f64) -> f64 {
        -self.alpha * x
    }

    pub fn moments(&self, t: f64) -> Result<OuMoments, DiffusionError> {
        OuMoments::at(self.alpha, t)
    }
}

/// Law of `X_t | X_0 = x` for `dX = -alpha X dt + sqrt(2) dB`:
/// `N(c x, sigma2 I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuMoments {
    pub c: f64,
    pub sigma2: f64,
}

impl OuMoments {
    pub fn at(alpha: f64, t: f64) -> Result<Self, DiffusionError> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(DiffusionError::BadAlpha(alpha));
        }
        if t.is_nan() || t < 0.0 {
            return Err(DiffusionError::NegativeTime(t));
        }
        let c = libm::exp(-alpha * t);
        // (1 - e^{-2 a t}) / a, written with expm1 so a -> 0 gives 2t smoothly.
        let sigma2 = if alpha == 0.0 {
            2.0 * t
        } else {
            -libm::expm1(-2.0 * alpha * t) / alpha
        };
        Ok(Self { c, sigma2 })
    }
}

/// Exact moments of the Euler–Maruyama reference chain started at a point:
/// `X_k | X_0 = x ~ N(c_k x, s_k I)` with `c_k = prod (1 - alpha gamma_i)`.
pub fn em_reference_moments(schedule: &StepSchedule, alpha: f64) -> Vec<OuMoments> {
    let mut out = Vec::with_capacity(schedule.n_steps() + 1);
    let (mut c, mut s) = (1.0, 0.0);
    out.push(OuMoments { c, sigma2: s });
    for &g in schedule.gammas() {
        let a = 1.0 - alpha * g;
        c *= a;
        s = a * a * s + 2.0 * g;
        out.push(OuMoments { c, sigma2: s });
    }
    out
}

/// `c_t x0 + sqrt(sigma2_t) Z`.
pub fn ou_closed_form_sample(x0: &[f64], t: f64, alpha: f64, rng: &mut RngState) -> Result<Vec<f64>, DiffusionError> {
    let m = OuMoments::at(alpha, t)?;
    let sd = libm::sqrt(m.sigma2);
    Ok(x0.iter().map(|&x| m.c * x + sd * rng.normal()).collect())
}

/// A batched transition mean `x -> map(k, x)` applied row-wise.
pub trait TransitionMap {
    fn dim(&self) -> usize;
    /// Writes `map(k, x)` for each row of `xs` into `out`; `gamma` is the step
    /// size attached to this transition.
    fn apply(&mut self, k: usize, gamma: f64, xs: &[f64], out: &mut [f64]);
}

/// The reference mean `x + gamma f(x)`.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceMap {
    pub drift: ReferenceDrift,
    pub dim: usize,
}

impl TransitionMap for ReferenceMap {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&mut self, _k: usize, gamma: f64, xs: &[f64], out: &mut [f64]) {
        let a = 1.0 - self.drift.alpha * gamma;
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = a * x;
        }
    }
}

/// Wraps a closure `(k, gamma, x, out)` evaluated one row at a time.
pub struct FnMap<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: FnMut(usize, f64, &[f64], &mut [f64])> TransitionMap for FnMap<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&mut self, k: usize, gamma: f64, xs: &[f64], out: &mut [f64]) {
        for (x, o) in xs.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
            (self.f)(k, gamma, x, o);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Multiplies the injected noise; 1 for the actual chain, 0 for
    /// deterministic checks.
    pub noise_scale: f64,
    /// Abort once any state's Euclidean norm exceeds this.
    pub divergence_bound: f64,
    /// Noise substream family; trajectory `j` uses `(epoch, j)`.
    pub epoch: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            noise_scale: 1.0,
            divergence_bound: 1e6,
            epoch: 0,
        }
    }
}

/// `M` paths of `N + 1` states in `d` dimensions, stored as
/// `states[(j * (N + 1) + k) * d ..]` with `k` the chain index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    m: usize,
    n_steps: usize,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectories {
    pub fn from_states(m: usize, n_steps: usize, dim: usize, states: Vec<f64>) -> Self {
        assert_eq!(states.len(), m * (n_steps + 1) * dim);
        Self {
            m,
            n_steps,
            dim,
            states,
        }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, j: usize, k: usize) -> &[f64] {
        let o = (j * (self.n_steps + 1) + k) * self.dim;
        &self.states[o..o + self.dim]
    }

    /// Row-major `M x d` block of the states at chain index `k`.
    pub fn slice_at(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.m * self.dim);
        for j in 0..self.m {
            out.extend_from_slice(self.state(j, k));
        }
        out
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }
}

fn check_rows(xs: &[f64], dim: usize) -> Result<usize, DiffusionError> {
    if dim == 0 || xs.len() % dim != 0 {
        return Err(DiffusionError::Ragged { len: xs.len(), dim });
    }
    Ok(xs.len() / dim)
}

fn simulate<M: TransitionMap + ?Sized>(
    start: &[f64],
    map: &mut M,
    schedule: &StepSchedule,
    rng: &RngState,
    opts: &SimOptions,
    backward: bool,
) -> Result<Trajectories, DiffusionError> {
    let d = map.dim();
    let m = check_rows(start, d)?;
    let n = schedule.n_steps();
    let mut streams: Vec<RngState> = (0..m as u64).map(|j| rng.substream2(opts.epoch, j)).collect();
    let mut states = vec![0.0; m * (n + 1) * d];
    let at = |j: usize, k: usize| (j * (n + 1) + k) * d;
    let mut cur = start.to_vec();
    let mut next = vec![0.0; m * d];
    let first = if backward { n } else { 0 };
    for j in 0..m {
        states[at(j, first)..at(j, first) + d].copy_from_slice(&cur[j * d..(j + 1) * d]);
    }
    guard(&cur, d, first, opts.divergence_bound)?;
    for step in 0..n {
        // (map index, gamma, destination index)
        let (k, gamma, dest) = if backward {
            let k = n - step;
            (k, schedule.gamma(k), k - 1)
        } else {
            (step, schedule.gamma(step + 1), step + 1)
        };
        map.apply(k, gamma, &cur, &mut next);
        let sd = opts.noise_scale * libm::sqrt(2.0 * gamma);
        for (j, rng_j) in streams.iter_mut().enumerate() {
            let row = &mut next[j * d..(j + 1) * d];
            for v in row.iter_mut() {
                *v += sd * rng_j.normal();
            }
            states[at(j, dest)..at(j, dest) + d].copy_from_slice(row);
        }
        guard(&next, d, dest, opts.divergence_bound)?;
        core::mem::swap(&mut cur, &mut next);
    }
    Ok(Trajectories {
        m,
        n_steps: n,
        dim: d,
        states,
    })
}

fn guard(xs: &[f64], d: usize, step: usize, bound: f64) -> Result<(), DiffusionError> {
    for (traj, row) in xs.chunks_exact(d).enumerate() {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if !norm.is_finite() || norm > bound {
            return Err(DiffusionError::Diverged { traj, step, norm });
        }
    }
    Ok(())
}

/// Simulates the forward chain from the rows of `x0` (row-major, `M x d`).
pub fn em_forward<M: TransitionMap + ?Sized>(
    x0: &[f64],
    map: &mut M,
    schedule: &StepSchedule,
    rng: &RngState,
    opts: &SimOptions,
) -> Result<Trajectories, DiffusionError> {
    simulate(x0, map, schedule, rng, opts, false)
}

/// Simulates the backward chain from the rows of `x_n`; the stored
/// trajectories are still indexed by chain index `k = 0..N`.
pub fn em_backward<M: TransitionMap + ?Sized>(
    x_n: &[f64],
    map: &mut M,
    schedule: &StepSchedule,
    rng: &RngState,
    opts: &SimOptions,
) -> Result<Trajectories, DiffusionError> {
    simulate(x_n, map, schedule, rng, opts, true)
}

/// Stored trajectories plus the bookkeeping for periodic regeneration.
#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    traj: Trajectories,
    refresh_period: usize,
    age: usize,
    epoch: u64,
    /// Allowed `(j, k)` transition indices when thinning; empty means all.
    pairs: Vec<(u32, u32)>,
    thinning: Option<usize>,
}

impl TrajectoryCache {
    /// Wraps freshly simulated paths. With `thinning = Some(t)`, each path
    /// contributes only `t` distinct transitions, drawn from `rng`.
    pub fn new(
        traj: Trajectories,
        refresh_period: usize,
        thinning: Option<usize>,
        epoch: u64,
        rng: &mut RngState,
    ) -> Result<Self, DiffusionError> {
        let mut c = Self {
            traj: Trajectories::from_states(0, 0, 1, Vec::new()),
            refresh_period: refresh_period.max(1),
            age: 0,
            epoch,
            pairs: Vec::new(),
            thinning,
        };
        c.replace(traj, epoch, rng)?;
        Ok(c)
    }

    pub fn replace(&mut self, traj: Trajectories, epoch: u64, rng: &mut RngState) -> Result<(), DiffusionError> {
        if traj.is_empty() || traj.n_steps() == 0 {
            return Err(DiffusionError::EmptyCache);
        }
        self.pairs.clear();
        if let Some(t) = self.thinning {
            let n = traj.n_steps();
            if t == 0 || t > n {
                return Err(DiffusionError::BadThinning { got: t, max: n });
            }
            let mut ks: Vec<u32> = (0..n as u32).collect();
            for j in 0..traj.len() {
                // partial Fisher–Yates: first t entries are a uniform subset
                for i in 0..t {
                    let r = i + rng.index(n - i);
                    ks.swap(i, r);
                }
                self.pairs.extend(ks[..t].iter().map(|&k| (j as u32, k)));
            }
        }
        self.traj = traj;
        self.age = 0;
        self.epoch = epoch;
        Ok(())
    }

    pub fn trajectories(&self) -> &Trajectories {
        &self.traj
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn age(&self) -> usize {
        self.age
    }

    pub fn refresh_period(&self) -> usize {
        self.refresh_period
    }

    /// Counts one gradient step; true once the cache should be rebuilt.
    pub fn tick(&mut self) -> bool {
        self.age += 1;
        self.age >= self.refresh_period
    }

    /// Number of distinct `(j, k)` transitions available.
    pub fn n_pairs(&self) -> usize {
        if self.thinning.is_some() {
            self.pairs.len()
        } else {
            self.traj.len() * self.traj.n_steps()
        }
    }

    /// Uniform draws, with replacement, of transition indices `(j, k)`;
    /// each names the pair `(X_k^j, X_{k+1}^j)`.
    pub fn minibatch(&self, batch_size: usize, rng: &mut RngState) -> Vec<(usize, usize)> {
        let n = self.traj.n_steps();
        (0..batch_size)
            .map(|_| {
                if self.thinning.is_some() {
                    let (j, k) = self.pairs[rng.index(self.pairs.len())];
                    (j as usize, k as usize)
                } else {
                    let i = rng.index(self.traj.len() * n);
                    (i / n, i % n)
                }
            })
            .collect()
    }

    pub fn pair(&self, j: usize, k: usize) -> (&[f64], &[f64]) {
        (self.traj.state(j, k), self.traj.state(j, k + 1))
    }
}
