//! Iterative proportional fitting (Sinkhorn) on finite grids.
//!
//! The reference coupling is `pi^0_ij = h_ij mu0_i mu1_j`. Every iterate keeps
//! the form `pi^n_ij = a_i h_ij mu0_i mu1_j b_j`; odd half-steps rescale `b`
//! so the column marginal equals `nu1`, even half-steps rescale `a` so the
//! row marginal equals `nu0`.
//!
//! Total variation is the L1 norm `sum |p - q|`.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::numerics::RngState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IpfError {
    #[error("kernel entry ({0}, {1}) is not a positive finite number")]
    NonPositiveKernel(usize, usize),
    #[error("marginal `{0}` must be a positive probability vector")]
    BadMarginal(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("no convergence after {iterations} half-steps (marginal TV {tv_marg0:e}, {tv_marg1:e})")]
    NotConverged { iterations: usize, tv_marg0: f64, tv_marg1: f64 },
    #[error("grid needs at least {need} points, got {got}")]
    GridTooCoarse { need: usize, got: usize },
    #[error("grid [{lo}, {hi}] does not cover [{need_lo}, {need_hi}]")]
    GridTooNarrow { lo: f64, hi: f64, need_lo: f64, need_hi: f64 },
}

/// A uniform 1-D lattice with equal quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GridSpec {
    /// `n` equispaced points from `lo` to `hi` inclusive.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self, IpfError> {
        if n < 2 || !(hi > lo) {
            return Err(IpfError::GridTooCoarse { need: 2, got: n });
        }
        let h = (hi - lo) / (n - 1) as f64;
        Ok(Self {
            points: (0..n).map(|i| lo + i as f64 * h).collect(),
            weights: vec![h; n],
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Normalised weights of a density evaluated at the grid points.
    pub fn discretize(&self, density: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut p: Vec<f64> = self.points.iter().zip(&self.weights).map(|(&x, &w)| density(x) * w).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }
}

/// A nonnegative `rows x cols` matrix of probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pub rows: usize,
    pub cols: usize,
    pub p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.cols + j]
    }

    pub fn mass(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.p.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in self.p.chunks_exact(self.cols) {
            for (c, &v) in m.iter_mut().zip(r) {
                *c += v;
            }
        }
        m
    }

    /// Correlation between row and column coordinates.
    pub fn correlation(&self, xs: &[f64], ys: &[f64]) -> f64 {
        let (r, c) = (self.row_marginal(), self.col_marginal());
        let mx: f64 = r.iter().zip(xs).map(|(p, x)| p * x).sum();
        let my: f64 = c.iter().zip(ys).map(|(p, y)| p * y).sum();
        let vx: f64 = r.iter().zip(xs).map(|(p, x)| p * (x - mx) * (x - mx)).sum();
        let vy: f64 = c.iter().zip(ys).map(|(p, y)| p * (y - my) * (y - my)).sum();
        let mut cov = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                cov += self.at(i, j) * (xs[i] - mx) * (ys[j] - my);
            }
        }
        cov / libm::sqrt(vx * vy)
    }

    /// `sum_ij pi_ij cost(x_i, y_j)`.
    pub fn transport_cost(&self, xs: &[f64], ys: &[f64], cost: impl Fn(f64, f64) -> f64) -> f64 {
        let mut c = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                c += self.at(i, j) * cost(xs[i], ys[j]);
            }
        }
        c
    }

    /// `KL(pi | pi_0 x pi_1)`.
    pub fn mutual_information(&self) -> f64 {
        let (r, c) = (self.row_marginal(), self.col_marginal());
        let mut prod = Vec::with_capacity(self.p.len());
        for &ri in &r {
            prod.extend(c.iter().map(|&cj| ri * cj));
        }
        kl(&self.p, &prod)
    }
}

/// Positive scalings with `pi_ij = a_i h_ij mu0_i mu1_j b_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Diagnostics of one half-step `pi^n -> pi^{n+1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpfStep {
    /// `n + 1`.
    pub iter: usize,
    /// `KL(pi^{n+1} | pi^n)`.
    pub kl_fwd: f64,
    /// `KL(pi^n | pi^{n+1})`.
    pub kl_bwd: f64,
    /// `|pi^{n+1} - pi^n|_TV`.
    pub tv_step: f64,
    pub tv_marg0: f64,
    pub tv_marg1: f64,
    /// `KL(pi^{n+1}_0 | nu0)`.
    pub kl_marg0: f64,
    /// `KL(pi^{n+1}_1 | nu1)`.
    pub kl_marg1: f64,
}

impl IpfStep {
    pub fn jeffreys(&self) -> f64 {
        self.kl_fwd + self.kl_bwd
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpfResult {
    pub coupling: DiscreteJoint,
    pub potentials: PotentialPair,
    pub trace: Vec<IpfStep>,
}

/// `KL(p | q) = sum p (r - log1p r)` with `r = q/p - 1`; each term is
/// nonnegative, which keeps tiny divergences accurate. Assumes equal mass.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else {
                let r = qi / pi - 1.0;
                pi * (r - libm::log1p(r))
            }
        })
        .sum()
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| libm::fabs(a - b)).sum()
}

fn check_prob(v: &[f64], name: &'static str) -> Result<(), IpfError> {
    let s: f64 = v.iter().sum();
    if v.is_empty() || v.iter().any(|&x| !(x > 0.0 && x.is_finite())) || libm::fabs(s - 1.0) > 1e-9 {
        return Err(IpfError::BadMarginal(name));
    }
    Ok(())
}

/// Dense IPF state.
struct Sinkhorn<'a> {
    k: Vec<f64>,
    rows: usize,
    cols: usize,
    nu0: &'a [f64],
    nu1: &'a [f64],
    a: Vec<f64>,
    b: Vec<f64>,
    pi: Vec<f64>,
    n: usize,
}

impl<'a> Sinkhorn<'a> {
    fn new(h: &[f64], mu0: &[f64], mu1: &[f64], nu0: &'a [f64], nu1: &'a [f64]) -> Result<Self, IpfError> {
        let (rows, cols) = (mu0.len(), mu1.len());
        if h.len() != rows * cols {
            return Err(IpfError::Shape("kernel must be |mu0| x |mu1|"));
        }
        if nu0.len() != rows || nu1.len() != cols {
            return Err(IpfError::Shape("targets must match the reference marginals"));
        }
        for (idx, &v) in h.iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(IpfError::NonPositiveKernel(idx / cols, idx % cols));
            }
        }
        check_prob(mu0, "mu0")?;
        check_prob(mu1, "mu1")?;
        check_prob(nu0, "nu0")?;
        check_prob(nu1, "nu1")?;
        let mut k = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            k.extend((0..cols).map(|j| h[i * cols + j] * mu0[i] * mu1[j]));
        }
        // pi^0 must be a probability; the normaliser lives in `a`.
        let mass: f64 = k.iter().sum();
        let pi: Vec<f64> = k.iter().map(|v| v / mass).collect();
        Ok(Self {
            k,
            rows,
            cols,
            nu0,
            nu1,
            a: vec![1.0 / mass; rows],
            b: vec![1.0; cols],
            pi,
            n: 0,
        })
    }

    fn rebuild(&mut self) -> Vec<f64> {
        let mut pi = Vec::with_capacity(self.k.len());
        for i in 0..self.rows {
            let ai = self.a[i];
            pi.extend((0..self.cols).map(|j| ai * self.k[i * self.cols + j] * self.b[j]));
        }
        pi
    }

    fn half_step(&mut self) -> IpfStep {
        let (rows, cols) = (self.rows, self.cols);
        if self.n % 2 == 0 {
            for j in 0..cols {
                let s: f64 = (0..rows).map(|i| self.a[i] * self.k[i * cols + j]).sum();
                self.b[j] = self.nu1[j] / s;
            }
        } else {
            for i in 0..rows {
                let s: f64 = (0..cols).map(|j| self.k[i * cols + j] * self.b[j]).sum();
                self.a[i] = self.nu0[i] / s;
            }
        }
        let next = self.rebuild();
        let joint = DiscreteJoint {
            rows,
            cols,
            p: next.clone(),
        };
        let (m0, m1) = (joint.row_marginal(), joint.col_marginal());
        let step = IpfStep {
            iter: self.n + 1,
            kl_fwd: kl(&next, &self.pi),
            kl_bwd: kl(&self.pi, &next),
            tv_step: tv(&next, &self.pi),
            tv_marg0: tv(&m0, self.nu0),
            tv_marg1: tv(&m1, self.nu1),
            kl_marg0: kl(&m0, self.nu0),
            kl_marg1: kl(&m1, self.nu1),
        };
        self.pi = next;
        self.n += 1;
        step
    }

    fn finish(self, trace: Vec<IpfStep>) -> IpfResult {
        IpfResult {
            coupling: DiscreteJoint {
                rows: self.rows,
                cols: self.cols,
                p: self.pi,
            },
            potentials: PotentialPair { a: self.a, b: self.b },
            trace,
        }
    }
}

/// Runs IPF until both marginal TV errors are at most `tol`. Running out of
/// half-steps is an error.
pub fn run_discrete_ipf(
    h: &[f64],
    mu0: &[f64],
    mu1: &[f64],
    nu0: &[f64],
    nu1: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<IpfResult, IpfError> {
    let mut s = Sinkhorn::new(h, mu0, mu1, nu0, nu1)?;
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        let st = s.half_step();
        trace.push(st);
        if st.tv_marg0 <= tol && st.tv_marg1 <= tol {
            return Ok(s.finish(trace));
        }
    }
    let last = trace.last().copied();
    Err(IpfError::NotConverged {
        iterations: max_iters,
        tv_marg0: last.map_or(f64::NAN, |s| s.tv_marg0),
        tv_marg1: last.map_or(f64::NAN, |s| s.tv_marg1),
    })
}

/// Runs exactly `n_half_steps` half-steps regardless of convergence.
pub fn run_discrete_ipf_steps(
    h: &[f64],
    mu0: &[f64],
    mu1: &[f64],
    nu0: &[f64],
    nu1: &[f64],
    n_half_steps: usize,
) -> Result<IpfResult, IpfError> {
    let mut s = Sinkhorn::new(h, mu0, mu1, nu0, nu1)?;
    let trace = (0..n_half_steps).map(|_| s.half_step()).collect();
    Ok(s.finish(trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    /// `KL(pi^{n+1} | pi^n) <= KL(pi^{n-1} | pi^n)`.
    KlForward,
    /// `KL(pi^n | pi^{n+1}) <= KL(pi^n | pi^{n-1})`.
    KlBackward,
    TvStep,
    Jeffreys,
    /// `n (KL(pi^n_0 | nu0) + KL(pi^n_1 | nu1))` non-increasing over the
    /// second half of the trace.
    MarginalRate,
}

/// Every `(property, trace index)` whose inequality fails by more than `slack`.
pub fn check_monotonicity(trace: &[IpfStep], slack: f64) -> Vec<(Monotonicity, usize)> {
    let mut bad = Vec::new();
    for n in 1..trace.len() {
        let (prev, cur) = (&trace[n - 1], &trace[n]);
        if cur.kl_fwd > prev.kl_bwd + slack {
            bad.push((Monotonicity::KlForward, n));
        }
        if cur.kl_bwd > prev.kl_fwd + slack {
            bad.push((Monotonicity::KlBackward, n));
        }
        if cur.tv_step > prev.tv_step + slack {
            bad.push((Monotonicity::TvStep, n));
        }
        if cur.jeffreys() > prev.jeffreys() + slack {
            bad.push((Monotonicity::Jeffreys, n));
        }
    }
    let rate = |s: &IpfStep| s.iter as f64 * (s.kl_marg0 + s.kl_marg1);
    for n in (trace.len() / 2).max(1)..trace.len() {
        if rate(&trace[n]) > rate(&trace[n - 1]) + slack {
            bad.push((Monotonicity::MarginalRate, n));
        }
    }
    bad
}

/// A discretised static bridge problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GridProblem {
    pub grid: GridSpec,
    /// Density of the reference joint against `mu0 x mu1`, row-major.
    pub h: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub nu0: Vec<f64>,
    pub nu1: Vec<f64>,
}

impl GridProblem {
    pub fn solve(&self, max_iters: usize, tol: f64) -> Result<IpfResult, IpfError> {
        run_discrete_ipf(&self.h, &self.mu0, &self.mu1, &self.nu0, &self.nu1, max_iters, tol)
    }
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    libm::exp(-(x - mean) * (x - mean) / (2.0 * var))
}

/// Reference started at `N(-a, 1)` and moved by the Gaussian kernel
/// `exp(-(x - y)^2 / (2 variance))`; targets `N(-a, 1)` and `N(a, 1)`.
pub fn discretize_gaussian_case(a: f64, grid: &GridSpec, variance: f64) -> Result<GridProblem, IpfError> {
    const MIN_POINTS: usize = 20;
    if grid.len() < MIN_POINTS {
        return Err(IpfError::GridTooCoarse {
            need: MIN_POINTS,
            got: grid.len(),
        });
    }
    let (lo, hi) = (grid.points[0], grid.points[grid.len() - 1]);
    let (need_lo, need_hi) = (-libm::fabs(a) - 5.0, libm::fabs(a) + 5.0);
    if lo > need_lo || hi < need_hi {
        return Err(IpfError::GridTooNarrow { lo, hi, need_lo, need_hi });
    }
    let n = grid.len();
    let mu0 = grid.discretize(|x| normal_pdf(x, -a, 1.0));
    let nu1 = grid.discretize(|x| normal_pdf(x, a, 1.0));
    // row-stochastic transition matrix
    let mut kern = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut kern[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            *v = normal_pdf(grid.points[j], grid.points[i], variance) * grid.weights[j];
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let mut mu1 = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            mu1[j] += mu0[i] * kern[i * n + j];
        }
    }
    let h = (0..n * n).map(|idx| kern[idx] / mu1[idx % n]).collect();
    Ok(GridProblem {
        grid: grid.clone(),
        h,
        nu0: mu0.clone(),
        mu0,
        mu1,
        nu1,
    })
}

/// Random strictly positive instance on `n` states: a row-stochastic kernel
/// `P` with entries drawn from `U(0.01, 1)` before normalisation, started at
/// `nu0`, so the reference's first marginal already matches. Both targets
/// have entries from `U(0.1, 1)`, normalised. The grid is the index set.
pub fn random_kernel_problem(n: usize, rng: &mut RngState) -> Result<GridProblem, IpfError> {
    if n < 2 {
        return Err(IpfError::GridTooCoarse { need: 2, got: n });
    }
    let mut simplex = |lo: f64| {
        let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(lo, 1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let nu0 = simplex(0.1);
    let nu1 = simplex(0.1);
    let mut kern = Vec::with_capacity(n * n);
    for _ in 0..n {
        kern.extend(simplex(0.01));
    }
    let mu0 = nu0.clone();
    let mut mu1 = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            mu1[j] += mu0[i] * kern[i * n + j];
        }
    }
    let h = (0..n * n).map(|idx| kern[idx] / mu1[idx % n]).collect();
    Ok(GridProblem {
        grid: GridSpec::uniform(0.0, (n - 1) as f64, n)?,
        h,
        mu0,
        mu1,
        nu0,
        nu1,
    })
}

/// The joint `exp(-x^2 + 2 alpha x y - y^2)` on `grid x grid`, normalised.
pub fn discretize_reference_joint(alpha: f64, grid: &GridSpec) -> DiscreteJoint {
    let n = grid.len();
    let mut p = Vec::with_capacity(n * n);
    for i in 0..n {
        let x = grid.points[i];
        for j in 0..n {
            let y = grid.points[j];
            p.push(libm::exp(-x * x + 2.0 * alpha * x * y - y * y) * grid.weights[i] * grid.weights[j]);
        }
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    DiscreteJoint { rows: n, cols: n, p }
}
