//! Closed-form Gaussian references: the Brownian static bridge between two
//! shifted standard normals, the scalar IPF recursion for symmetric
//! Gaussian marginals, mutual information, and Gaussian conditioning.
//!
//! Two different "beta"s appear in this setting, so they get separate names:
//! `beta_sb` is the off-diagonal correlation of a bridge coupling and
//! `beta_marg` parametrises the target marginals `exp(-beta_marg^2 |x|^2)`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::RngState;

pub use crate::diffusion::OuMoments;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussError {
    #[error("IPF recursion needs gamma > -1, got {0}")]
    GammaOutOfRange(f64),
    #[error("coupling parameter alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("marginal parameter beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("covariance is not positive definite")]
    Singular,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}

/// `(c_t, sigma2_t)` of the OU transition; see [`OuMoments`].
pub fn ou_moments(t: f64, alpha: f64) -> Result<OuMoments, GaussError> {
    Ok(OuMoments::at(alpha, t)?)
}

/// A multivariate normal with dense covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GaussError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(GaussError::DimMismatch {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        if cov.clone().cholesky().is_none() {
            return Err(GaussError::Singular);
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: &[f64], var: f64) -> Result<Self, GaussError> {
        let d = mean.len();
        Self::new(DVector::from_column_slice(mean), DMatrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut RngState) -> Vec<f64> {
        let l = self.cov.clone().cholesky().expect("checked at construction").l();
        let z = DVector::from_fn(self.dim(), |_, _| rng.normal());
        (&self.mean + l * z).iter().copied().collect()
    }
}

/// `x -> a x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(x) + &self.b).iter().copied().collect()
    }
}

/// `x -> E[U | V = x]` for a joint Gaussian over `(U, V)`, each half of the
/// joint's dimension.
pub fn gauss_conditional_map(joint: &GaussianDist) -> Result<AffineMap, GaussError> {
    let n = joint.dim();
    if n % 2 != 0 {
        return Err(GaussError::DimMismatch {
            expected: n + 1,
            got: n,
        });
    }
    let d = n / 2;
    let s_uv = joint.cov.view((0, d), (d, d)).into_owned();
    let s_vv = joint.cov.view((d, d), (d, d)).into_owned();
    let chol = s_vv.cholesky().ok_or(GaussError::Singular)?;
    // A = S_uv S_vv^{-1}, solved as S_vv A^T = S_uv^T
    let a = chol.solve(&s_uv.transpose()).transpose();
    let mu_u = joint.mean.rows(0, d).into_owned();
    let mu_v = joint.mean.rows(d, d).into_owned();
    let b = mu_u - &a * mu_v;
    Ok(AffineMap { a, b })
}

/// Static bridge for the unit-variance Brownian kernel between `N(-a, I)`
/// and `N(a, I)`: mean `(-a, a)`, covariance `[[I, beta I], [beta I, I]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSbGauss {
    pub a: Vec<f64>,
    pub beta_sb: f64,
}

/// Per-coordinate cross-covariance of the static bridge between
/// `N(m0, var0 I)` and `N(m1, var1 I)` for the Brownian kernel of variance
/// `kernel_var`: the positive root of `c^2 + kernel_var c - var0 var1`.
pub fn gaussian_sb_cross_cov(var0: f64, var1: f64, kernel_var: f64) -> f64 {
    0.5 * (libm::sqrt(4.0 * var0 * var1 + kernel_var * kernel_var) - kernel_var)
}

/// Golden-ratio conjugate: the positive root of `b^2 + b - 1`.
pub const BROWNIAN_SB_BETA: f64 = 0.618_033_988_749_894_9;

pub fn brownian_sb(a: &[f64]) -> StaticSbGauss {
    StaticSbGauss {
        a: a.to_vec(),
        beta_sb: (libm::sqrt(5.0) - 1.0) / 2.0,
    }
}

impl StaticSbGauss {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn joint(&self) -> GaussianDist {
        let d = self.dim();
        let mut mean = DVector::zeros(2 * d);
        let mut cov = DMatrix::identity(2 * d, 2 * d);
        for i in 0..d {
            mean[i] = -self.a[i];
            mean[d + i] = self.a[i];
            cov[(i, d + i)] = self.beta_sb;
            cov[(d + i, i)] = self.beta_sb;
        }
        GaussianDist { mean, cov }
    }

    /// Log density of the coupling at `(x0, x1)`.
    pub fn log_density(&self, x0: &[f64], x1: &[f64]) -> f64 {
        let b = self.beta_sb;
        let one_m = 1.0 - b * b;
        let mut lp = 0.0;
        for i in 0..self.dim() {
            let u = x0[i] + self.a[i];
            let v = x1[i] - self.a[i];
            lp += -libm::log(2.0 * core::f64::consts::PI) - 0.5 * libm::log(one_m) - (u * u - 2.0 * b * u * v + v * v) / (2.0 * one_m);
        }
        lp
    }

    /// One `(x0, x1)` draw.
    pub fn sample(&self, rng: &mut RngState) -> (Vec<f64>, Vec<f64>) {
        let b = self.beta_sb;
        let s = libm::sqrt(1.0 - b * b);
        let mut x0 = Vec::with_capacity(self.dim());
        let mut x1 = Vec::with_capacity(self.dim());
        for &ai in &self.a {
            let z0 = rng.normal();
            let z1 = rng.normal();
            x0.push(-ai + z0);
            x1.push(ai + b * z0 + s * z1);
        }
        (x0, x1)
    }
}

fn check_alpha_beta(alpha: f64, beta: f64) -> Result<(), GaussError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GaussError::BadAlpha(alpha));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(GaussError::BadBeta(beta));
    }
    Ok(())
}

/// `gamma_{n+1} = beta^2 - 1 + alpha^2 / (gamma_n + 1)`, evaluated as
/// `(beta^2 - (1 - alpha^2)) - alpha^2 gamma_n / (gamma_n + 1)` so that a
/// stationary pair (`beta^2 = 1 - alpha^2` in floating point) keeps
/// `gamma_n = 0` exactly.
pub fn gauss_ipf_step(gamma_n: f64, alpha_cpl: f64, beta_marg: f64) -> Result<f64, GaussError> {
    if !(gamma_n > -1.0) {
        return Err(GaussError::GammaOutOfRange(gamma_n));
    }
    let a2 = alpha_cpl * alpha_cpl;
    Ok((beta_marg * beta_marg - (1.0 - a2)) - a2 * gamma_n / (gamma_n + 1.0))
}

/// Positive root of `g^2 + (2 - beta^2) g + 1 - alpha^2 - beta^2`.
pub fn gauss_ipf_fixed_point(alpha_cpl: f64, beta_marg: f64) -> Result<f64, GaussError> {
    check_alpha_beta(alpha_cpl, beta_marg)?;
    let b2 = beta_marg * beta_marg;
    Ok(-1.0 + b2 / 2.0 + 0.5 * libm::sqrt(b2 * b2 + 4.0 * alpha_cpl * alpha_cpl))
}

/// `kappa = rho / (1 + rho)` with `rho = 2 alpha / beta^2`.
pub fn gauss_ipf_rate(alpha_cpl: f64, beta_marg: f64) -> Result<f64, GaussError> {
    check_alpha_beta(alpha_cpl, beta_marg)?;
    let rho = 2.0 * alpha_cpl / (beta_marg * beta_marg);
    Ok(rho / (1.0 + rho))
}

/// The recursion run from `gamma_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussIpfTrace {
    pub alpha_cpl: f64,
    pub beta_marg: f64,
    pub gammas: Vec<f64>,
    pub gamma_star: f64,
}

impl GaussIpfTrace {
    pub fn run(alpha_cpl: f64, beta_marg: f64, n_iters: usize) -> Result<Self, GaussError> {
        let gamma_star = gauss_ipf_fixed_point(alpha_cpl, beta_marg)?;
        let mut gammas = Vec::with_capacity(n_iters + 1);
        let mut g = 0.0;
        gammas.push(g);
        for _ in 0..n_iters {
            g = gauss_ipf_step(g, alpha_cpl, beta_marg)?;
            gammas.push(g);
        }
        Ok(Self {
            alpha_cpl,
            beta_marg,
            gammas,
            gamma_star,
        })
    }

    pub fn errors(&self) -> Vec<f64> {
        self.gammas.iter().map(|g| libm::fabs(g - self.gamma_star)).collect()
    }

    /// `|gamma_{n+1} - gamma*| / |gamma_n - gamma*|`, `None` once the
    /// denominator is exactly zero.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        let e = self.errors();
        e.windows(2).map(|w| if w[0] == 0.0 { None } else { Some(w[1] / w[0]) }).collect()
    }
}

/// `KL(mu | mu_0 x mu_1) = -(d/2) log(1 - alpha^2)` for the reference
/// `exp(-|x|^2 + 2 alpha <x, y> - |y|^2)`.
pub fn mutual_information(alpha_cpl: f64, d: usize) -> Result<f64, GaussError> {
    if !(0.0..1.0).contains(&alpha_cpl) {
        return Err(GaussError::BadAlpha(alpha_cpl));
    }
    Ok(-(d as f64) / 2.0 * libm::log1p(-alpha_cpl * alpha_cpl))
}

/// Sample moments of paired endpoint draws.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointStats {
    pub mean0: Vec<f64>,
    pub mean1: Vec<f64>,
    pub var0: Vec<f64>,
    pub var1: Vec<f64>,
    /// Covariance of the first coordinates of `x0` and `x1`.
    pub cross_cov: f64,
}

/// Unbiased mean and variance per coordinate of row-major `n x d` samples.
pub fn mean_var(samples: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>), GaussError> {
    let n = if d == 0 { 0 } else { samples.len() / d };
    if n < 2 || samples.len() != n * d {
        return Err(GaussError::TooFewSamples { need: 2, got: n });
    }
    let mut mean = alloc::vec![0.0; d];
    for row in samples.chunks_exact(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = alloc::vec![0.0; d];
    for row in samples.chunks_exact(d) {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok((mean, var))
}

/// Endpoint statistics for paired row-major samples `x0[i], x1[i]`.
pub fn empirical_gauss_stats(x0: &[f64], x1: &[f64], d: usize) -> Result<EndpointStats, GaussError> {
    if x0.len() != x1.len() {
        return Err(GaussError::DimMismatch {
            expected: x0.len(),
            got: x1.len(),
        });
    }
    let (mean0, var0) = mean_var(x0, d)?;
    let (mean1, var1) = mean_var(x1, d)?;
    let n = x0.len() / d;
    let mut c = 0.0;
    for (a, b) in x0.chunks_exact(d).zip(x1.chunks_exact(d)) {
        c += (a[0] - mean0[0]) * (b[0] - mean1[0]);
    }
    Ok(EndpointStats {
        mean0,
        mean1,
        var0,
        var1,
        cross_cov: c / (n - 1) as f64,
    })
}
