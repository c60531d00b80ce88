//! Alternating half-bridge training: each stage learns the time reversal of
//! the chain produced by the previous stage.
//!
//! Transitions are indexed by `i = 1..=N`, the move between `X_{i-1}` and
//! `X_i` with step size `gamma_i`. A forward map `F_i(x)` is the mean of
//! `X_i` given `X_{i-1} = x`; a backward map `B_i(x)` is the mean of
//! `X_{i-1}` given `X_i = x`.
//!
//! Stage `s` is the backward net of iteration `s / 2` when `s` is even and
//! the forward net of iteration `(s + 1) / 2` when `s` is odd. Its partner,
//! the chain it learns to reverse, is stage `s - 1`; stage 0's partner is the
//! reference forward chain, which has no parameters.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::ops::ControlFlow;

use thiserror::Error;

use crate::approximator::{AdamConfig, AdamState, EmaParams, Example, InitScheme, NetError, NetSpec, Network, OptimError, Workspace};
use crate::diffusion::{em_backward, em_forward, DiffusionError, ReferenceDrift, SimOptions, Trajectories, TrajectoryCache, TransitionMap};
use crate::likelihood::{FlowField, LikelihoodError};
use crate::numerics::{PointSampler, RngState, StepSchedule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DsbError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid config: {0}")]
    Config(&'static str),
    #[error("stage {stage}: non-finite loss at gradient step {step}")]
    Diverged { stage: usize, step: usize },
    #[error("sampler dimension {got} does not match network dimension {expected}")]
    SamplerDim { expected: usize, got: usize },
    #[error("stage {0} does not exist")]
    NoStage(usize),
    #[error("stage {0} is not a backward stage")]
    NotBackward(usize),
    #[error("time {0} is not a grid time")]
    OffGrid(f64),
    #[error("run already has {have} stages, config allows {max}")]
    TooManyStages { have: usize, max: usize },
}

/// Which regression problem each half-bridge solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// The net is the transition mean itself.
    MeanMatching,
    /// The net is the score of the partner chain's marginal; the map is
    /// recovered as `2x - partner(x) + 2 gamma s(x)`.
    ScoreMatching,
    /// The net is the drift; the map is `x + gamma net(x)`.
    DriftMatching,
}

impl LossVariant {
    /// Mean matching needs the identity skip connection to be well scaled;
    /// plain MLPs learn the drift instead.
    pub fn default_for(spec: &NetSpec) -> Self {
        if spec.residual {
            LossVariant::MeanMatching
        } else {
            LossVariant::DriftMatching
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::MeanMatching => "mean_matching",
            LossVariant::ScoreMatching => "score_matching",
            LossVariant::DriftMatching => "drift_matching",
        }
    }
}

/// What the time block of the network is fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeConditioning {
    /// The integer step index.
    Index,
    /// Physical time rescaled to `t N / T`; equals the index on a uniform grid.
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn of_stage(stage: usize) -> Self {
        if stage % 2 == 0 {
            Direction::Backward
        } else {
            Direction::Forward
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// IPF iteration a stage belongs to.
pub fn iteration_of_stage(stage: usize) -> usize {
    stage.div_ceil(2)
}

/// Stage index of the backward net of iteration `n`.
pub fn backward_stage(n: usize) -> usize {
    2 * n
}

/// Stage index of the forward net of iteration `n >= 1`; iteration 0's
/// forward chain is the reference.
pub fn forward_stage(n: usize) -> Option<usize> {
    n.checked_sub(1).map(|m| 2 * m + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSet {
    Ema,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigWarning {
    MeanMatchingWithoutResidual,
    ResidualWithoutMeanMatching,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsbConfig {
    pub net: NetSpec,
    pub schedule: StepSchedule,
    /// Reference drift `-alpha x`.
    pub alpha: f64,
    pub variant: LossVariant,
    pub conditioning: TimeConditioning,
    /// Number `L` of outer iterations after the first backward fit; the run
    /// trains backward nets `0..=L` and forward nets `1..=L`.
    pub ipf_iters: usize,
    pub steps_per_half_bridge: usize,
    pub batch_size: usize,
    /// Trajectories per cache.
    pub cache_size: usize,
    /// Gradient steps between cache rebuilds.
    pub refresh_period: usize,
    /// Keep only this many transitions per cached trajectory.
    pub cache_thinning: Option<usize>,
    pub adam: AdamConfig,
    pub ema_rate: f64,
    pub warm_start: bool,
}

impl DsbConfig {
    pub fn new(net: NetSpec, schedule: StepSchedule, alpha: f64) -> Self {
        let variant = LossVariant::default_for(&net);
        Self {
            net,
            schedule,
            alpha,
            variant,
            conditioning: TimeConditioning::Index,
            ipf_iters: 10,
            steps_per_half_bridge: 5000,
            batch_size: 128,
            cache_size: 512,
            refresh_period: 500,
            cache_thinning: None,
            adam: AdamConfig::default(),
            ema_rate: 0.999,
            warm_start: true,
        }
    }

    pub fn n_stages(&self) -> usize {
        2 * self.ipf_iters + 1
    }

    pub fn validate(&self) -> Result<(), DsbError> {
        if self.steps_per_half_bridge == 0 {
            return Err(DsbError::Config("steps_per_half_bridge must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(DsbError::Config("batch_size must be at least 1"));
        }
        if self.cache_size == 0 {
            return Err(DsbError::Config("cache_size must be at least 1"));
        }
        if self.refresh_period == 0 {
            return Err(DsbError::Config("refresh_period must be at least 1"));
        }
        if let Some(t) = self.cache_thinning {
            if t == 0 || t > self.schedule.n_steps() {
                return Err(DsbError::Config("cache_thinning must lie in 1..=n_steps"));
            }
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(DsbError::Config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(DsbError::Config("ema_rate must lie in [0, 1)"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DsbError::Config("alpha must be finite and non-negative"));
        }
        Network::new(self.net.clone())?;
        Ok(())
    }

    /// Legal but unusual variant/architecture pairings.
    pub fn warnings(&self) -> Vec<ConfigWarning> {
        let mut w = Vec::new();
        match (self.variant, self.net.residual) {
            (LossVariant::MeanMatching, false) => w.push(ConfigWarning::MeanMatchingWithoutResidual),
            (LossVariant::ScoreMatching | LossVariant::DriftMatching, true) => {
                w.push(ConfigWarning::ResidualWithoutMeanMatching)
            }
            _ => {}
        }
        w
    }
}

/// Regression target for the backward map from a forward-chain pair
/// `(X_{i-1}, X_i)`; `f_prev`, `f_next` are the partner forward map at
/// `X_{i-1}` and at `X_i`. The network input is `X_i`.
pub fn backward_target(
    variant: LossVariant,
    gamma: f64,
    _x_prev: &[f64],
    x_next: &[f64],
    f_prev: &[f64],
    f_next: &[f64],
    out: &mut [f64],
) {
    for c in 0..out.len() {
        out[c] = match variant {
            LossVariant::MeanMatching => x_next[c] + (f_prev[c] - f_next[c]),
            LossVariant::DriftMatching => (f_prev[c] - f_next[c]) / gamma,
            // the injected noise is (X_i - F(X_{i-1})) / sqrt(2 gamma)
            LossVariant::ScoreMatching => -(x_next[c] - f_prev[c]) / (2.0 * gamma),
        };
    }
}

/// Regression target for the forward map from a backward-chain pair;
/// `b_next`, `b_prev` are the partner backward map at `X_i` and at
/// `X_{i-1}`. The network input is `X_{i-1}`.
pub fn forward_target(
    variant: LossVariant,
    gamma: f64,
    x_prev: &[f64],
    _x_next: &[f64],
    b_next: &[f64],
    b_prev: &[f64],
    out: &mut [f64],
) {
    for c in 0..out.len() {
        out[c] = match variant {
            LossVariant::MeanMatching => x_prev[c] + (b_next[c] - b_prev[c]),
            LossVariant::DriftMatching => (b_next[c] - b_prev[c]) / gamma,
            LossVariant::ScoreMatching => -(x_prev[c] - b_next[c]) / (2.0 * gamma),
        };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub iteration: usize,
    pub direction: Direction,
    pub grad_steps: usize,
    /// Mean minibatch loss over the first (last) `min(50, grad_steps)` steps.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub cache_refreshes: u64,
}

/// A finished half-bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
    pub adam: AdamState,
    pub report: StageReport,
}

/// One IPF run: the shared network shape, the reference dynamics and the
/// completed stages in training order.
#[derive(Debug, Clone)]
pub struct IpfRun {
    pub net: Network,
    pub schedule: StepSchedule,
    pub reference: ReferenceDrift,
    pub variant: LossVariant,
    pub conditioning: TimeConditioning,
    pub stages: Vec<StageRecord>,
}

impl IpfRun {
    pub fn new(cfg: &DsbConfig) -> Result<Self, DsbError> {
        Ok(Self {
            net: Network::new(cfg.net.clone())?,
            schedule: cfg.schedule.clone(),
            reference: ReferenceDrift::new(cfg.alpha)?,
            variant: cfg.variant,
            conditioning: cfg.conditioning,
            stages: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    /// Last completed backward stage, if any.
    pub fn last_backward(&self) -> Option<usize> {
        let n = self.stages.len();
        if n == 0 {
            None
        } else {
            Some((n - 1) & !1)
        }
    }

    /// Highest iteration whose backward net is trained.
    pub fn completed_iterations(&self) -> Option<usize> {
        self.last_backward().map(|s| s / 2)
    }

    /// Network position for transition `i`: backward nets see `i`, forward
    /// nets see `i - 1`.
    pub fn position(&self, direction: Direction, i: usize) -> f64 {
        let idx = match direction {
            Direction::Backward => i,
            Direction::Forward => i - 1,
        };
        match self.conditioning {
            TimeConditioning::Index => idx as f64,
            TimeConditioning::Time => {
                self.schedule.time(idx) * self.schedule.n_steps() as f64 / self.schedule.horizon()
            }
        }
    }

    fn params(&self, stage: usize, sel: ParamSet) -> &[f64] {
        let r = &self.stages[stage];
        match sel {
            ParamSet::Ema => &r.ema,
            ParamSet::Raw => &r.params,
        }
    }

    /// Transition mean of `stage` (`None` is the reference forward chain) for
    /// transition `i`, applied to the rows of `xs`.
    pub fn apply(
        &self,
        stage: Option<usize>,
        sel: ParamSet,
        i: usize,
        xs: &[f64],
        out: &mut [f64],
        ws: &mut Workspace,
    ) -> Result<(), DsbError> {
        let gamma = self.schedule.gamma(i);
        let Some(s) = stage else {
            let c = 1.0 - self.reference.alpha() * gamma;
            for (o, &x) in out.iter_mut().zip(xs) {
                *o = c * x;
            }
            return Ok(());
        };
        if s >= self.stages.len() {
            return Err(DsbError::NoStage(s));
        }
        let pos = self.position(Direction::of_stage(s), i);
        match self.variant {
            LossVariant::MeanMatching => self.net.forward_batch(self.params(s, sel), pos, xs, out, ws)?,
            LossVariant::DriftMatching => {
                self.net.forward_batch(self.params(s, sel), pos, xs, out, ws)?;
                for (o, &x) in out.iter_mut().zip(xs) {
                    *o = x + gamma * *o;
                }
            }
            LossVariant::ScoreMatching => {
                let mut partner = vec![0.0; xs.len()];
                self.apply(s.checked_sub(1), sel, i, xs, &mut partner, ws)?;
                self.net.forward_batch(self.params(s, sel), pos, xs, out, ws)?;
                for ((o, &x), &p) in out.iter_mut().zip(xs).zip(&partner) {
                    *o = 2.0 * x - p + 2.0 * gamma * *o;
                }
            }
        }
        Ok(())
    }

    /// Map value and its Jacobian-vector product at a single point.
    pub fn apply_jvp(
        &self,
        stage: Option<usize>,
        sel: ParamSet,
        i: usize,
        x: &[f64],
        u: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), DsbError> {
        let gamma = self.schedule.gamma(i);
        let Some(s) = stage else {
            let c = 1.0 - self.reference.alpha() * gamma;
            return Ok((x.iter().map(|v| c * v).collect(), u.iter().map(|v| c * v).collect()));
        };
        if s >= self.stages.len() {
            return Err(DsbError::NoStage(s));
        }
        let pos = self.position(Direction::of_stage(s), i);
        let (mut o, mut jo) = self.net.forward_jvp(self.params(s, sel), pos, x, u)?;
        match self.variant {
            LossVariant::MeanMatching => {}
            LossVariant::DriftMatching => {
                for c in 0..x.len() {
                    o[c] = x[c] + gamma * o[c];
                    jo[c] = u[c] + gamma * jo[c];
                }
            }
            LossVariant::ScoreMatching => {
                let (p, jp) = self.apply_jvp(s.checked_sub(1), sel, i, x, u)?;
                for c in 0..x.len() {
                    o[c] = 2.0 * x[c] - p[c] + 2.0 * gamma * o[c];
                    jo[c] = 2.0 * u[c] - jp[c] + 2.0 * gamma * jo[c];
                }
            }
        }
        Ok((o, jo))
    }

    /// The chain of `stage` (or the reference forward chain) as a
    /// [`TransitionMap`] for the simulators.
    pub fn stage_map(&self, stage: Option<usize>, sel: ParamSet) -> StageMap<'_> {
        StageMap {
            run: self,
            stage,
            sel,
            ws: Workspace::default(),
        }
    }

    fn backward_map(&self, stage: Option<usize>) -> Result<StageMap<'_>, DsbError> {
        let s = stage.or(self.last_backward()).ok_or(DsbError::NoStage(0))?;
        if s >= self.stages.len() {
            return Err(DsbError::NoStage(s));
        }
        if Direction::of_stage(s) != Direction::Backward {
            return Err(DsbError::NotBackward(s));
        }
        Ok(self.stage_map(Some(s), ParamSet::Ema))
    }

    /// `n` samples at step 0 from the backward chain of `stage` (default:
    /// the latest backward net), started from `prior`.
    pub fn generate<P: PointSampler + ?Sized>(
        &self,
        stage: Option<usize>,
        n: usize,
        prior: &P,
        rng: &RngState,
    ) -> Result<Vec<f64>, DsbError> {
        let mut map = self.backward_map(stage)?;
        generate(&mut map, n, prior, &self.schedule, rng, &SimOptions::default())
    }

    /// Backward-chain states at each requested grid time; same streams as
    /// [`IpfRun::generate`], so the `t = 0` cloud equals its output.
    pub fn marginal_snapshots<P: PointSampler + ?Sized>(
        &self,
        stage: Option<usize>,
        times: &[f64],
        n: usize,
        prior: &P,
        rng: &RngState,
    ) -> Result<Vec<Vec<f64>>, DsbError> {
        let mut map = self.backward_map(stage)?;
        let ks = times
            .iter()
            .map(|&t| self.schedule.index_of_time(t).ok_or(DsbError::OffGrid(t)))
            .collect::<Result<Vec<_>, _>>()?;
        let paths = generate_paths(&mut map, n, prior, &self.schedule, rng, &SimOptions::default())?;
        Ok(ks.into_iter().map(|k| paths.slice_at(k)).collect())
    }

    /// Probability-flow field of iteration `n`: the forward drift of `F^n`
    /// and the backward drift of `B^n`, both piecewise constant in time.
    pub fn flow_field(&self, n: usize) -> Result<RunField<'_>, DsbError> {
        let bwd = backward_stage(n);
        if bwd >= self.stages.len() {
            return Err(DsbError::NoStage(bwd));
        }
        Ok(RunField {
            run: self,
            fwd: forward_stage(n),
            bwd,
            sel: ParamSet::Ema,
            ws: RefCell::new(Workspace::default()),
        })
    }
}

/// Adapter from a run stage to [`TransitionMap`]. Network failures surface as
/// NaN states, which the simulators' divergence guard reports.
pub struct StageMap<'a> {
    run: &'a IpfRun,
    stage: Option<usize>,
    sel: ParamSet,
    ws: Workspace,
}

impl TransitionMap for StageMap<'_> {
    fn dim(&self) -> usize {
        self.run.dim()
    }

    fn apply(&mut self, k: usize, _gamma: f64, xs: &[f64], out: &mut [f64]) {
        // forward simulation passes the source index, backward the state index
        let backward = match self.stage {
            None => false,
            Some(s) => Direction::of_stage(s) == Direction::Backward,
        };
        let i = if backward { k } else { k + 1 };
        if self.run.apply(self.stage, self.sel, i, xs, out, &mut self.ws).is_err() {
            out.iter_mut().for_each(|o| *o = f64::NAN);
        }
    }
}

pub struct RunField<'a> {
    run: &'a IpfRun,
    fwd: Option<usize>,
    bwd: usize,
    sel: ParamSet,
    ws: RefCell<Workspace>,
}

impl RunField<'_> {
    pub fn with_params(mut self, sel: ParamSet) -> Self {
        self.sel = sel;
        self
    }
}

fn field_err(e: DsbError) -> LikelihoodError {
    LikelihoodError::Field(alloc::format!("{e}"))
}

impl FlowField for RunField<'_> {
    fn dim(&self) -> usize {
        self.run.dim()
    }

    fn drifts(&self, k: usize, _t: f64, x: &[f64], f: &mut [f64], b: &mut [f64]) -> Result<(), LikelihoodError> {
        let i = k + 1;
        let gamma = self.run.schedule.gamma(i);
        let mut ws = self.ws.borrow_mut();
        self.run.apply(self.fwd, self.sel, i, x, f, &mut ws).map_err(field_err)?;
        self.run.apply(Some(self.bwd), self.sel, i, x, b, &mut ws).map_err(field_err)?;
        for c in 0..x.len() {
            f[c] = (f[c] - x[c]) / gamma;
            b[c] = (b[c] - x[c]) / gamma;
        }
        Ok(())
    }

    fn velocity_jvp(&self, k: usize, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Option<Result<(), LikelihoodError>> {
        let i = k + 1;
        let gamma = self.run.schedule.gamma(i);
        let res = (|| {
            let (_, jf) = self.run.apply_jvp(self.fwd, self.sel, i, x, u)?;
            let (_, jb) = self.run.apply_jvp(Some(self.bwd), self.sel, i, x, u)?;
            // v = (f - b) / 2 with f = (F(x) - x) / gamma, b = (B(x) - x) / gamma
            for c in 0..x.len() {
                out[c] = 0.5 * (jf[c] - jb[c]) / gamma;
            }
            Ok(())
        })();
        Some(res.map_err(field_err))
    }
}

fn check_sampler<P: PointSampler + ?Sized>(p: &P, d: usize) -> Result<(), DsbError> {
    if p.dim() != d {
        return Err(DsbError::SamplerDim {
            expected: d,
            got: p.dim(),
        });
    }
    Ok(())
}

/// Whole backward paths from `n` prior draws. Prior points use substream 0
/// of `rng`, chain noise substream 1.
pub fn generate_paths<M: TransitionMap + ?Sized, P: PointSampler + ?Sized>(
    map: &mut M,
    n: usize,
    prior: &P,
    schedule: &StepSchedule,
    rng: &RngState,
    opts: &SimOptions,
) -> Result<Trajectories, DsbError> {
    check_sampler(prior, map.dim())?;
    let x_n = prior.sample_n(n, &mut rng.substream(0));
    Ok(em_backward(&x_n, map, schedule, &rng.substream(1), opts)?)
}

/// Step-0 states of [`generate_paths`].
pub fn generate<M: TransitionMap + ?Sized, P: PointSampler + ?Sized>(
    map: &mut M,
    n: usize,
    prior: &P,
    schedule: &StepSchedule,
    rng: &RngState,
    opts: &SimOptions,
) -> Result<Vec<f64>, DsbError> {
    Ok(generate_paths(map, n, prior, schedule, rng, opts)?.slice_at(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    /// Step-0 sample for each lambda, in input order.
    pub samples: Vec<Vec<f64>>,
    /// Indices of lambdas outside `[0, 1]` (extrapolation).
    pub extrapolated: Vec<usize>,
}

/// Backward passes from `(1 - l) x_a + l x_b` that all reuse one noise
/// realization, so the endpoint varies only through the start point.
pub fn latent_interpolate<M: TransitionMap + ?Sized>(
    map: &mut M,
    x_a: &[f64],
    x_b: &[f64],
    lambdas: &[f64],
    schedule: &StepSchedule,
    rng: &RngState,
) -> Result<Interpolation, DsbError> {
    let d = map.dim();
    if x_a.len() != d || x_b.len() != d {
        return Err(DsbError::SamplerDim {
            expected: d,
            got: if x_a.len() != d { x_a.len() } else { x_b.len() },
        });
    }
    let mut samples = Vec::with_capacity(lambdas.len());
    let mut extrapolated = Vec::new();
    for (idx, &l) in lambdas.iter().enumerate() {
        if !(0.0..=1.0).contains(&l) {
            extrapolated.push(idx);
        }
        let start: Vec<f64> = x_a.iter().zip(x_b).map(|(a, b)| (1.0 - l) * a + l * b).collect();
        let paths = em_backward(&start, map, schedule, rng, &SimOptions::default())?;
        samples.push(paths.state(0, 0).to_vec());
    }
    Ok(Interpolation { samples, extrapolated })
}

const STAGE_STREAM: u64 = 0x5354_4147;
const REPORT_WINDOW: usize = 50;

/// Mutable state of one half-bridge fit. Targets depend only on the cached
/// paths and the frozen partner, never on the parameters being trained.
pub struct HalfBridgeTrainer<'a, D: ?Sized, P: ?Sized> {
    run: &'a IpfRun,
    cfg: &'a DsbConfig,
    data: &'a D,
    prior: &'a P,
    stage: usize,
    direction: Direction,
    rng: RngState,
    batch_rng: RngState,
    cache: TrajectoryCache,
    targets: Vec<f64>,
    refreshes: u64,
    params: Vec<f64>,
    ema: EmaParams,
    adam: AdamState,
    grad: Vec<f64>,
    ws: Workspace,
    losses: Vec<f64>,
}

impl<'a, D: PointSampler + ?Sized, P: PointSampler + ?Sized> HalfBridgeTrainer<'a, D, P> {
    /// Prepares stage `run.stages.len()`. `init` overrides the fresh
    /// initialization (warm start).
    pub fn new(
        run: &'a IpfRun,
        cfg: &'a DsbConfig,
        data: &'a D,
        prior: &'a P,
        init: Option<&[f64]>,
        master: &RngState,
    ) -> Result<Self, DsbError> {
        let d = run.dim();
        check_sampler(data, d)?;
        check_sampler(prior, d)?;
        let stage = run.stages.len();
        let rng = master.substream2(STAGE_STREAM, stage as u64);
        let params = match init {
            Some(p) => {
                if p.len() != run.net.n_params() {
                    return Err(NetError::ParamCount {
                        expected: run.net.n_params(),
                        got: p.len(),
                    }
                    .into());
                }
                p.to_vec()
            }
            None => run.net.init_params(InitScheme::FanInZeroHead, &mut rng.substream(0)),
        };
        let (traj, targets) = Self::build(run, cfg, data, prior, stage, &rng, 0)?;
        let cache = TrajectoryCache::new(traj, cfg.refresh_period, cfg.cache_thinning, 0, &mut rng.substream2(4, 0))?;
        let n = params.len();
        Ok(Self {
            run,
            cfg,
            data,
            prior,
            stage,
            direction: Direction::of_stage(stage),
            batch_rng: rng.substream(3),
            rng,
            cache,
            targets,
            refreshes: 0,
            ema: EmaParams::new(&params, cfg.ema_rate),
            params,
            adam: AdamState::new(n),
            grad: vec![0.0; n],
            ws: Workspace::default(),
            losses: Vec::new(),
        })
    }

    /// Simulates the partner chain and computes every pair's target.
    fn build(
        run: &IpfRun,
        cfg: &DsbConfig,
        data: &D,
        prior: &P,
        stage: usize,
        rng: &RngState,
        epoch: u64,
    ) -> Result<(Trajectories, Vec<f64>), DsbError> {
        let d = run.dim();
        let n_steps = run.schedule.n_steps();
        let partner = stage.checked_sub(1);
        let direction = Direction::of_stage(stage);
        let mut map = run.stage_map(partner, ParamSet::Ema);
        let opts = SimOptions {
            epoch,
            ..SimOptions::default()
        };
        let sim_rng = rng.substream(2);
        let traj = match direction {
            Direction::Backward => {
                let x0 = data.sample_n(cfg.cache_size, &mut rng.substream2(1, epoch));
                em_forward(&x0, &mut map, &run.schedule, &sim_rng, &opts)?
            }
            Direction::Forward => {
                let xn = prior.sample_n(cfg.cache_size, &mut rng.substream2(1, epoch));
                em_backward(&xn, &mut map, &run.schedule, &sim_rng, &opts)?
            }
        };
        let m = traj.len();
        let mut targets = vec![0.0; m * n_steps * d];
        let mut ws = Workspace::default();
        let mut at_prev = vec![0.0; m * d];
        let mut at_next = vec![0.0; m * d];
        for k in 0..n_steps {
            let i = k + 1;
            let gamma = run.schedule.gamma(i);
            let prev = traj.slice_at(k);
            let next = traj.slice_at(k + 1);
            run.apply(partner, ParamSet::Ema, i, &prev, &mut at_prev, &mut ws)?;
            run.apply(partner, ParamSet::Ema, i, &next, &mut at_next, &mut ws)?;
            for j in 0..m {
                let r = j * d..(j + 1) * d;
                let o = (j * n_steps + k) * d;
                let out = &mut targets[o..o + d];
                match direction {
                    Direction::Backward => {
                        backward_target(cfg.variant, gamma, &prev[r.clone()], &next[r.clone()], &at_prev[r.clone()], &at_next[r], out)
                    }
                    Direction::Forward => {
                        forward_target(cfg.variant, gamma, &prev[r.clone()], &next[r.clone()], &at_next[r.clone()], &at_prev[r], out)
                    }
                }
            }
        }
        Ok((traj, targets))
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn cache(&self) -> &TrajectoryCache {
        &self.cache
    }

    /// Targets in `(trajectory, transition)` order, `d` values each.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// One Adam step on a fresh minibatch; rebuilds the cache when due.
    pub fn step(&mut self) -> Result<f64, DsbError> {
        let d = self.run.dim();
        let n_steps = self.run.schedule.n_steps();
        let idx = self.cache.minibatch(self.cfg.batch_size, &mut self.batch_rng);
        let traj = self.cache.trajectories();
        let batch: Vec<Example<'_>> = idx
            .iter()
            .map(|&(j, k)| {
                let (position, x) = match self.direction {
                    Direction::Backward => (self.run.position(Direction::Backward, k + 1), traj.state(j, k + 1)),
                    Direction::Forward => (self.run.position(Direction::Forward, k + 1), traj.state(j, k)),
                };
                let o = (j * n_steps + k) * d;
                Example {
                    position,
                    x,
                    target: &self.targets[o..o + d],
                }
            })
            .collect();
        let loss = self.run.net.loss_grad(&self.params, &batch, &mut self.grad, &mut self.ws)?;
        if !loss.is_finite() {
            return Err(DsbError::Diverged {
                stage: self.stage,
                step: self.losses.len(),
            });
        }
        self.adam
            .update(&self.cfg.adam, &mut self.params, &self.grad)
            .map_err(|e| match e {
                OptimError::NonFiniteGradient(_) => DsbError::Diverged {
                    stage: self.stage,
                    step: self.losses.len(),
                },
                other => other.into(),
            })?;
        self.ema.update(&self.params);
        self.losses.push(loss);
        if self.cache.tick() {
            self.refreshes += 1;
            let (traj, targets) = Self::build(self.run, self.cfg, self.data, self.prior, self.stage, &self.rng, self.refreshes)?;
            self.cache.replace(traj, self.refreshes, &mut self.rng.substream2(4, self.refreshes))?;
            self.targets = targets;
        }
        Ok(loss)
    }

    pub fn run_steps(&mut self, steps: usize) -> Result<(), DsbError> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> StageRecord {
        let n = self.losses.len();
        let w = n.min(REPORT_WINDOW);
        let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
        StageRecord {
            report: StageReport {
                stage: self.stage,
                iteration: iteration_of_stage(self.stage),
                direction: self.direction,
                grad_steps: n,
                initial_loss: mean(&self.losses[..w]),
                final_loss: mean(&self.losses[n - w..]),
                cache_refreshes: self.refreshes,
            },
            params: self.params,
            ema: self.ema.shadow,
            adam: self.adam,
        }
    }
}

/// Trains the next stage of `run` for `steps` gradient steps.
pub fn train_half_bridge<D: PointSampler + ?Sized, P: PointSampler + ?Sized>(
    run: &IpfRun,
    cfg: &DsbConfig,
    data: &D,
    prior: &P,
    init: Option<&[f64]>,
    steps: usize,
    rng: &RngState,
) -> Result<StageRecord, DsbError> {
    let mut t = HalfBridgeTrainer::new(run, cfg, data, prior, init, rng)?;
    t.run_steps(steps)?;
    Ok(t.finish())
}

/// Runs (or resumes) the alternating fits until `cfg.n_stages()` stages are
/// complete. `observer` sees each finished stage and may stop the run early.
/// Stage `s` draws only from substream `s` of `rng`, so resuming from a
/// prefix of stages reproduces an uninterrupted run exactly.
pub fn run_dsb<D, P, O>(
    cfg: &DsbConfig,
    data: &D,
    prior: &P,
    rng: &RngState,
    resume: Option<IpfRun>,
    mut observer: O,
) -> Result<IpfRun, DsbError>
where
    D: PointSampler + ?Sized,
    P: PointSampler + ?Sized,
    O: FnMut(&IpfRun, &StageReport) -> ControlFlow<()>,
{
    cfg.validate()?;
    let mut run = match resume {
        Some(r) => r,
        None => IpfRun::new(cfg)?,
    };
    if run.stages.len() > cfg.n_stages() {
        return Err(DsbError::TooManyStages {
            have: run.stages.len(),
            max: cfg.n_stages(),
        });
    }
    while run.stages.len() < cfg.n_stages() {
        let s = run.stages.len();
        let init = if cfg.warm_start && s >= 2 {
            Some(run.stages[s - 2].params.clone())
        } else {
            None
        };
        let rec = train_half_bridge(&run, cfg, data, prior, init.as_deref(), cfg.steps_per_half_bridge, rng)?;
        let report = rec.report.clone();
        run.stages.push(rec);
        if observer(&run, &report).is_break() {
            break;
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{DatasetSpec, Family, PriorSpec};

    fn tiny_cfg(d: usize) -> DsbConfig {
        let mut spec = NetSpec::small(d);
        spec.state_widths = vec![8];
        spec.time_widths = vec![8];
        spec.head_widths = vec![16];
        spec.enc_dim = 8;
        let mut cfg = DsbConfig::new(spec, StepSchedule::uniform(5, 0.05).unwrap(), 1.0);
        cfg.ipf_iters = 1;
        cfg.steps_per_half_bridge = 20;
        cfg.batch_size = 16;
        cfg.cache_size = 16;
        cfg.refresh_period = 7;
        cfg.adam.lr = 1e-3;
        cfg
    }

    fn gauss(d: usize, m: f64) -> DatasetSpec {
        DatasetSpec::new(Family::Gaussian { mean: vec![m; d], std: 1.0 })
    }

    #[test]
    fn stage_bookkeeping() {
        assert_eq!(Direction::of_stage(0), Direction::Backward);
        assert_eq!(Direction::of_stage(3), Direction::Forward);
        assert_eq!((0..5).map(iteration_of_stage).collect::<Vec<_>>(), vec![0, 1, 1, 2, 2]);
        assert_eq!(forward_stage(0), None);
        assert_eq!(forward_stage(2), Some(3));
        assert_eq!(backward_stage(2), 4);
    }

    #[test]
    fn mean_matching_identity_partner_targets() {
        let (xk, xk1) = ([0.3, -1.2], [0.9, 0.4]);
        let mut out = [0.0; 2];
        backward_target(LossVariant::MeanMatching, 0.1, &xk, &xk1, &xk, &xk1, &mut out);
        for c in 0..2 {
            assert!((out[c] - xk[c]).abs() < 1e-15);
        }
        // the forward target with an identity partner is the next state
        forward_target(LossVariant::MeanMatching, 0.1, &xk, &xk1, &xk1, &xk, &mut out);
        for c in 0..2 {
            assert!((out[c] - xk1[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn drift_target_for_affine_reference() {
        // F(x) = (1 - gamma alpha) x, so (F(x_k) - F(x_k1)) / gamma
        // = (1 - gamma alpha)(x_k - x_k1) / gamma
        let (g, a) = (0.05, 0.7);
        let c = 1.0 - g * a;
        let (xk, xk1) = ([1.0], [0.25]);
        let mut out = [0.0];
        backward_target(LossVariant::DriftMatching, g, &xk, &xk1, &[c * xk[0]], &[c * xk1[0]], &mut out);
        assert!((out[0] - c * 0.75 / g).abs() < 1e-12);
    }

    #[test]
    fn forward_targets_mirror_backward_targets_under_time_reflection() {
        let (g, a, b) = (0.02, [0.5, 1.5], [-0.1, 2.0]);
        let (ma, mb) = ([0.4, 1.3], [0.0, 1.8]);
        for v in [LossVariant::MeanMatching, LossVariant::DriftMatching, LossVariant::ScoreMatching] {
            let mut fwd = [0.0; 2];
            let mut bwd = [0.0; 2];
            forward_target(v, g, &a, &b, &mb, &ma, &mut fwd);
            // reflected chain: b precedes a, the partner keeps its values
            backward_target(v, g, &b, &a, &mb, &ma, &mut bwd);
            assert_eq!(fwd, bwd, "{v:?}");
        }
    }

    #[test]
    fn score_target_regresses_to_gaussian_score() {
        // X_k ~ N(0, s2), X_{k+1} = c X_k + sqrt(2g) Z, p_{k+1} = N(0, c^2 s2 + 2g)
        let (s2, c, g) = (1.5f64, 0.9, 0.05f64);
        let mut rng = RngState::new(11);
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for _ in 0..200_000 {
            let xk = s2.sqrt() * rng.normal();
            let xk1 = c * xk + (2.0 * g).sqrt() * rng.normal();
            let mut t = [0.0];
            backward_target(LossVariant::ScoreMatching, g, &[xk], &[xk1], &[c * xk], &[c * xk1], &mut t);
            sxy += xk1 * t[0];
            sxx += xk1 * xk1;
        }
        let slope = sxy / sxx;
        let oracle = -1.0 / (c * c * s2 + 2.0 * g);
        assert!((slope / oracle - 1.0).abs() < 0.03, "{slope} vs {oracle}");
    }

    #[test]
    fn config_validation_and_warnings() {
        let cfg = tiny_cfg(2);
        cfg.validate().unwrap();
        assert_eq!(cfg.variant, LossVariant::DriftMatching);
        assert!(cfg.warnings().is_empty());
        let mut bad = cfg.clone();
        bad.adam.lr = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.cache_size = 0;
        assert!(bad.validate().is_err());
        let mut mm = cfg.clone();
        mm.variant = LossVariant::MeanMatching;
        assert_eq!(mm.warnings(), vec![ConfigWarning::MeanMatchingWithoutResidual]);
        mm.net.residual = true;
        assert!(mm.warnings().is_empty());
        assert_eq!(LossVariant::default_for(&mm.net), LossVariant::MeanMatching);
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let cfg = tiny_cfg(2);
        let run = IpfRun::new(&cfg).unwrap();
        let init = run.net.init_params(InitScheme::FanIn, &mut RngState::new(1));
        let rec = train_half_bridge(&run, &cfg, &gauss(2, 0.5), &gauss(2, 0.0), Some(&init), 0, &RngState::new(2)).unwrap();
        assert_eq!(rec.params, init);
        assert_eq!(rec.ema, init);
        assert_eq!(rec.report.grad_steps, 0);
    }

    #[test]
    fn stage_zero_trains_on_the_reference_chain() {
        let cfg = tiny_cfg(2);
        let run = IpfRun::new(&cfg).unwrap();
        let data = gauss(2, 0.5);
        let prior = gauss(2, 0.0);
        let master = RngState::new(3);
        let t = HalfBridgeTrainer::new(&run, &cfg, &data, &prior, None, &master).unwrap();
        let rng = master.substream2(STAGE_STREAM, 0);
        let x0 = data.sample_n(cfg.cache_size, &mut rng.substream2(1, 0));
        let mut reference = crate::diffusion::ReferenceMap {
            drift: ReferenceDrift::new(1.0).unwrap(),
            dim: 2,
        };
        let expected = em_forward(&x0, &mut reference, &cfg.schedule, &rng.substream(2), &SimOptions::default()).unwrap();
        assert_eq!(t.cache().trajectories(), &expected);
    }

    #[test]
    fn warm_and_cold_starts_share_targets() {
        let cfg = tiny_cfg(2);
        let (data, prior) = (gauss(2, 0.5), gauss(2, 0.0));
        let master = RngState::new(4);
        let mut run = IpfRun::new(&cfg).unwrap();
        for _ in 0..2 {
            let rec = train_half_bridge(&run, &cfg, &data, &prior, None, 5, &master).unwrap();
            run.stages.push(rec);
        }
        let warm_init = run.stages[0].params.clone();
        let mut cold = HalfBridgeTrainer::new(&run, &cfg, &data, &prior, None, &master).unwrap();
        let mut warm = HalfBridgeTrainer::new(&run, &cfg, &data, &prior, Some(&warm_init), &master).unwrap();
        assert_ne!(cold.params(), warm.params());
        for _ in 0..10 {
            assert_eq!(cold.targets(), warm.targets());
            cold.step().unwrap();
            warm.step().unwrap();
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut cfg = tiny_cfg(1);
        cfg.steps_per_half_bridge = 600;
        cfg.batch_size = 64;
        cfg.cache_size = 128;
        cfg.refresh_period = 200;
        let run = IpfRun::new(&cfg).unwrap();
        let rec = train_half_bridge(&run, &cfg, &gauss(1, 1.0), &gauss(1, 0.0), None, 600, &RngState::new(5)).unwrap();
        assert!(rec.report.final_loss < rec.report.initial_loss, "{:?}", rec.report);
        assert_eq!(rec.report.cache_refreshes, 3);
    }

    #[test]
    fn run_layout_early_stop_and_exact_resume() {
        let cfg = tiny_cfg(2);
        let (data, prior) = (gauss(2, 0.5), gauss(2, -0.5));
        let master = RngState::new(6);
        let sgm = {
            let mut c = cfg.clone();
            c.ipf_iters = 0;
            run_dsb(&c, &data, &prior, &master, None, |_, _| ControlFlow::Continue(())).unwrap()
        };
        assert_eq!(sgm.stages.len(), 1);
        let mut seen = Vec::new();
        let full = run_dsb(&cfg, &data, &prior, &master, None, |_, r| {
            seen.push((r.stage, r.iteration, r.direction));
            ControlFlow::Continue(())
        })
        .unwrap();
        assert_eq!(
            seen,
            vec![(0, 0, Direction::Backward), (1, 1, Direction::Forward), (2, 1, Direction::Backward)]
        );
        assert_eq!(full.stages[0], sgm.stages[0]);
        let partial = run_dsb(&cfg, &data, &prior, &master, None, |_, r| {
            if r.stage == 1 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(partial.stages.len(), 2);
        let resumed = run_dsb(&cfg, &data, &prior, &master, Some(partial), |_, _| ControlFlow::Continue(())).unwrap();
        assert_eq!(resumed.stages, full.stages);
        assert_eq!(full.completed_iterations(), Some(1));
    }

    #[test]
    fn sampler_dimension_is_checked() {
        let cfg = tiny_cfg(2);
        let r = run_dsb(&cfg, &gauss(3, 0.0), &gauss(2, 0.0), &RngState::new(1), None, |_, _| ControlFlow::Continue(()));
        assert_eq!(r.unwrap_err(), DsbError::SamplerDim { expected: 2, got: 3 });
    }

    fn identity_map(d: usize) -> crate::diffusion::FnMap<impl FnMut(usize, f64, &[f64], &mut [f64])> {
        crate::diffusion::FnMap {
            dim: d,
            f: |_k: usize, _g: f64, x: &[f64], o: &mut [f64]| o.copy_from_slice(x),
        }
    }

    #[test]
    fn identity_without_noise_returns_prior_samples() {
        let prior = PriorSpec::gaussian(vec![0.0; 3], 2.0).unwrap();
        let schedule = StepSchedule::uniform(4, 0.1).unwrap();
        let rng = RngState::new(7);
        let opts = SimOptions {
            noise_scale: 0.0,
            ..SimOptions::default()
        };
        let out = generate(&mut identity_map(3), 10, &prior, &schedule, &rng, &opts).unwrap();
        assert_eq!(out, prior.sample_n(10, &mut rng.substream(0)));
        let again = generate(&mut identity_map(3), 10, &prior, &schedule, &rng, &opts).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn snapshots_bracket_generation() {
        let cfg = tiny_cfg(2);
        let (data, prior) = (gauss(2, 0.5), gauss(2, 0.0));
        let master = RngState::new(8);
        let mut c0 = cfg.clone();
        c0.ipf_iters = 0;
        let run = run_dsb(&c0, &data, &prior, &master, None, |_, _| ControlFlow::Continue(())).unwrap();
        let rng = RngState::new(9);
        let h = cfg.schedule.horizon();
        let snaps = run.marginal_snapshots(None, &[h, 0.0], 20, &prior, &rng).unwrap();
        assert_eq!(snaps[0], prior.sample_n(20, &mut rng.substream(0)));
        assert_eq!(snaps[1], run.generate(None, 20, &prior, &rng).unwrap());
        assert_eq!(
            run.marginal_snapshots(None, &[0.013], 5, &prior, &rng).unwrap_err(),
            DsbError::OffGrid(0.013)
        );
    }

    #[test]
    fn interpolation_endpoints_and_linear_midpoint() {
        let schedule = StepSchedule::uniform(6, 0.05).unwrap();
        let mut linear = crate::diffusion::FnMap {
            dim: 2,
            f: |_k: usize, _g: f64, x: &[f64], o: &mut [f64]| {
                o[0] = 0.9 * x[0] + 0.1 * x[1] + 0.05;
                o[1] = -0.2 * x[0] + 0.8 * x[1];
            },
        };
        let (xa, xb) = ([1.0, -2.0], [0.5, 3.0]);
        let rng = RngState::new(10);
        let res = latent_interpolate(&mut linear, &xa, &xb, &[0.0, 1.0, 0.5, 1.5], &schedule, &rng).unwrap();
        let single = |x: &[f64], m: &mut dyn TransitionMap| em_backward(x, m, &schedule, &rng, &SimOptions::default()).unwrap().state(0, 0).to_vec();
        assert_eq!(res.samples[0], single(&xa, &mut linear));
        assert_eq!(res.samples[1], single(&xb, &mut linear));
        for c in 0..2 {
            let mid = 0.5 * (res.samples[0][c] + res.samples[1][c]);
            assert!((res.samples[2][c] - mid).abs() < 1e-12);
        }
        assert_eq!(res.extrapolated, vec![3]);
    }

    #[test]
    fn composed_maps_and_field_jvp_match_finite_differences() {
        for variant in [LossVariant::MeanMatching, LossVariant::DriftMatching, LossVariant::ScoreMatching] {
            let mut cfg = tiny_cfg(2);
            cfg.variant = variant;
            cfg.net.activation = crate::approximator::Activation::Tanh;
            let mut run = IpfRun::new(&cfg).unwrap();
            let mut rng = RngState::new(12);
            for s in 0..3 {
                let p = run.net.init_params(InitScheme::FanIn, &mut rng);
                run.stages.push(StageRecord {
                    ema: p.clone(),
                    adam: AdamState::new(p.len()),
                    report: StageReport {
                        stage: s,
                        iteration: iteration_of_stage(s),
                        direction: Direction::of_stage(s),
                        grad_steps: 0,
                        initial_loss: 0.0,
                        final_loss: 0.0,
                        cache_refreshes: 0,
                    },
                    params: p,
                });
            }
            let field = run.flow_field(1).unwrap();
            let (x, u) = ([0.3, -0.7], [0.6, 0.8]);
            for k in 0..cfg.schedule.n_steps() {
                let t = cfg.schedule.time(k);
                let mut exact = [0.0; 2];
                field.velocity_jvp(k, t, &x, &u, &mut exact).unwrap().unwrap();
                let fd = crate::likelihood::fd_jvp(|y| crate::likelihood::velocity(&field, k, t, y), &x, &u, 1e-5).unwrap();
                for c in 0..2 {
                    assert!((exact[c] - fd[c]).abs() < 1e-6 * (1.0 + fd[c].abs()), "{variant:?} k={k}: {exact:?} vs {fd:?}");
                }
            }
            // batched and single-point evaluation agree
            let mut ws = Workspace::default();
            let mut out = [0.0; 2];
            run.apply(Some(2), ParamSet::Ema, 3, &x, &mut out, &mut ws).unwrap();
            let (single, _) = run.apply_jvp(Some(2), ParamSet::Ema, 3, &x, &u).unwrap();
            for c in 0..2 {
                assert!((out[c] - single[c]).abs() < 1e-12);
            }
        }
    }
}
