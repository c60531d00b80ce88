//! Log-likelihoods through the probability-flow ODE
//! `dX/dt = v_t(X) = (f_t(X) - b_t(X)) / 2`, which shares the bridge's
//! marginals. Along a solution,
//!
//! ```text
//! log p_data(X_0) = log p_prior(X_T) + int_0^T div v_t(X_t) dt.
//! ```
//!
//! Both directions use explicit Euler on the step grid: from a data point
//! forward in time (left endpoints), or from a prior point backward in time
//! (right endpoints).

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::numerics::{RngState, StepSchedule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LikelihoodError {
    #[error("time {0} is not a grid time and interpolation is off")]
    OffGrid(f64),
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("ODE state left the divergence bound at step {0}")]
    Diverged(usize),
    #[error("need at least one probe")]
    NoProbes,
    #[error("field evaluation failed: {0}")]
    Field(alloc::string::String),
}

/// Forward and backward drifts, indexed by step interval `k` (covering
/// `[t_k, t_{k+1}]`) and time `t` inside it.
pub trait FlowField {
    fn dim(&self) -> usize;

    fn drifts(&self, k: usize, t: f64, x: &[f64], f: &mut [f64], b: &mut [f64]) -> Result<(), LikelihoodError>;

    /// Exact `J_x v . u` when the field can provide it.
    fn velocity_jvp(&self, _k: usize, _t: f64, _x: &[f64], _u: &[f64], _out: &mut [f64]) -> Option<Result<(), LikelihoodError>> {
        None
    }
}

/// A field given by closures of `(t, x, out)`.
pub struct AnalyticField<F, B> {
    pub dim: usize,
    pub f: F,
    pub b: B,
}

impl<F, B> FlowField for AnalyticField<F, B>
where
    F: Fn(f64, &[f64], &mut [f64]),
    B: Fn(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn drifts(&self, _k: usize, t: f64, x: &[f64], f: &mut [f64], b: &mut [f64]) -> Result<(), LikelihoodError> {
        (self.f)(t, x, f);
        (self.b)(t, x, b);
        Ok(())
    }
}

/// `v = (f - b) / 2` on interval `k`.
pub fn velocity<Fl: FlowField + ?Sized>(field: &Fl, k: usize, t: f64, x: &[f64]) -> Result<Vec<f64>, LikelihoodError> {
    let d = field.dim();
    if x.len() != d {
        return Err(LikelihoodError::DimMismatch { expected: d, got: x.len() });
    }
    let mut f = vec![0.0; d];
    let mut b = vec![0.0; d];
    field.drifts(k, t, x, &mut f, &mut b)?;
    Ok(f.iter().zip(&b).map(|(fi, bi)| 0.5 * (fi - bi)).collect())
}

/// Interval containing `t`; with `interpolate = false`, `t` must be a grid
/// time (the final time maps to the last interval).
pub fn interval_of(schedule: &StepSchedule, t: f64, interpolate: bool) -> Result<usize, LikelihoodError> {
    let horizon = schedule.horizon();
    let tol = 1e-12 * horizon.max(1.0);
    if !(t >= -tol && t <= horizon + tol) {
        return Err(LikelihoodError::OutOfRange { t, horizon });
    }
    let n = schedule.n_steps();
    if !interpolate {
        return match schedule.index_of_time(t) {
            Some(k) => Ok(k.min(n - 1)),
            None => Err(LikelihoodError::OffGrid(t)),
        };
    }
    let times = schedule.times();
    // last k with t_k <= t
    let k = times.partition_point(|&tk| tk <= t + tol).saturating_sub(1);
    Ok(k.min(n - 1))
}

/// Probability-flow velocity at time `t`.
pub fn prob_flow_rhs<Fl: FlowField + ?Sized>(
    field: &Fl,
    schedule: &StepSchedule,
    t: f64,
    x: &[f64],
    interpolate: bool,
) -> Result<Vec<f64>, LikelihoodError> {
    let k = interval_of(schedule, t, interpolate)?;
    velocity(field, k, t, x)
}

/// Central finite-difference divergence of `v`.
pub fn divergence_exact<V>(mut v: V, x: &[f64], h: f64) -> Result<f64, LikelihoodError>
where
    V: FnMut(&[f64]) -> Result<Vec<f64>, LikelihoodError>,
{
    let mut xp = x.to_vec();
    let mut div = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = v(&xp)?[i];
        xp[i] = x[i] - h;
        let dn = v(&xp)?[i];
        xp[i] = x[i];
        div += (up - dn) / (2.0 * h);
    }
    Ok(div)
}

/// Directional central difference `(v(x + h u) - v(x - h u)) / 2h`.
pub fn fd_jvp<V>(mut v: V, x: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>, LikelihoodError>
where
    V: FnMut(&[f64]) -> Result<Vec<f64>, LikelihoodError>,
{
    let xp: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - h * b).collect();
    let (p, m) = (v(&xp)?, v(&xm)?);
    Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Rademacher,
    Gaussian,
}

/// A Monte-Carlo trace estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Hutchinson estimate of `tr J = E[u^T J u]` from Jacobian-vector products.
pub fn divergence_hutchinson<J>(
    mut jvp: J,
    dim: usize,
    n_probes: usize,
    kind: ProbeKind,
    rng: &mut RngState,
) -> Result<Estimate, LikelihoodError>
where
    J: FnMut(&[f64]) -> Result<Vec<f64>, LikelihoodError>,
{
    if n_probes == 0 {
        return Err(LikelihoodError::NoProbes);
    }
    let mut u = vec![0.0; dim];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n_probes {
        for ui in u.iter_mut() {
            *ui = match kind {
                ProbeKind::Rademacher => rng.rademacher(),
                ProbeKind::Gaussian => rng.normal(),
            };
        }
        let ju = jvp(&u)?;
        let q: f64 = u.iter().zip(&ju).map(|(a, b)| a * b).sum();
        s += q;
        s2 += q * q;
    }
    let n = n_probes as f64;
    let mean = s / n;
    let std_err = if n_probes > 1 {
        libm::sqrt(((s2 - n * mean * mean) / (n - 1.0)).max(0.0) / n)
    } else {
        0.0
    };
    Ok(Estimate { mean, std_err })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Start from a data point and integrate to the prior end.
    FromData,
    /// Start from a prior point and integrate back to the data end.
    FromPrior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceMethod {
    /// Central differences per coordinate with step `h`.
    FiniteDifference { h: f64 },
    /// Hutchinson with exact JVPs when the field has them, else
    /// finite-difference JVPs with step `h`.
    Hutchinson { probes: usize, kind: ProbeKind, h: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihood {
    pub log_lik: f64,
    /// Data-end point (`FromPrior`) or prior-end point (`FromData`).
    pub endpoint: Vec<f64>,
    /// Accumulated Monte-Carlo standard error of the divergence integral.
    pub div_std_err: f64,
    pub steps: usize,
}

fn divergence_at<Fl: FlowField + ?Sized>(
    field: &Fl,
    k: usize,
    t: f64,
    x: &[f64],
    method: DivergenceMethod,
    rng: &mut RngState,
) -> Result<Estimate, LikelihoodError> {
    match method {
        DivergenceMethod::FiniteDifference { h } => Ok(Estimate {
            mean: divergence_exact(|y| velocity(field, k, t, y), x, h)?,
            std_err: 0.0,
        }),
        DivergenceMethod::Hutchinson { probes, kind, h } => {
            let d = field.dim();
            divergence_hutchinson(
                |u| {
                    let mut out = vec![0.0; d];
                    match field.velocity_jvp(k, t, x, u, &mut out) {
                        Some(r) => r.map(|_| out),
                        None => fd_jvp(|y| velocity(field, k, t, y), x, u, h),
                    }
                },
                d,
                probes,
                kind,
                rng,
            )
        }
    }
}

/// Integrates the flow across the schedule, returning `log p_data` at the
/// data end of the path.
pub fn log_likelihood<Fl, P>(
    field: &Fl,
    schedule: &StepSchedule,
    x: &[f64],
    direction: Direction,
    log_prior: P,
    method: DivergenceMethod,
    rng: &mut RngState,
) -> Result<LogLikelihood, LikelihoodError>
where
    Fl: FlowField + ?Sized,
    P: Fn(&[f64]) -> f64,
{
    const BOUND: f64 = 1e6;
    let d = field.dim();
    if x.len() != d {
        return Err(LikelihoodError::DimMismatch { expected: d, got: x.len() });
    }
    let n = schedule.n_steps();
    let mut state = x.to_vec();
    let mut integral = 0.0;
    let mut var = 0.0;
    for step in 0..n {
        let (k, t, sign) = match direction {
            Direction::FromData => (step, schedule.time(step), 1.0),
            Direction::FromPrior => {
                let k = n - 1 - step;
                (k, schedule.time(k + 1), -1.0)
            }
        };
        let g = schedule.gamma(k + 1);
        let v = velocity(field, k, t, &state)?;
        let div = divergence_at(field, k, t, &state, method, rng)?;
        integral += g * div.mean;
        var += g * g * div.std_err * div.std_err;
        for (s, vi) in state.iter_mut().zip(&v) {
            *s += sign * g * vi;
        }
        let norm2: f64 = state.iter().map(|s| s * s).sum();
        if !(norm2.is_finite() && norm2 <= BOUND * BOUND) {
            return Err(LikelihoodError::Diverged(step));
        }
    }
    let log_lik = match direction {
        Direction::FromData => log_prior(&state) + integral,
        Direction::FromPrior => log_prior(x) + integral,
    };
    Ok(LogLikelihood {
        log_lik,
        endpoint: state,
        div_std_err: libm::sqrt(var),
        steps: n,
    })
}

/// `log N(x; mean, var I)`.
pub fn log_normal_iso(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let q: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * d * libm::log(2.0 * core::f64::consts::PI * var) - q / (2.0 * var)
}
