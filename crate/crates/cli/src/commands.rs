//! The subcommands. Every output directory is owned by one process; no
//! subcommand writes to any of its inputs.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use dsb_core::analytic_gauss::{empirical_gauss_stats, gaussian_sb_cross_cov, mean_var, GaussIpfTrace};
use dsb_core::bench::{energy_distance, sliced_wasserstein, DatasetSpec, Family, PriorSpec};
use dsb_core::diffusion::SimOptions;
use dsb_core::discrete_ipf::{discretize_gaussian_case, random_kernel_problem, GridSpec};
use dsb_core::dsb::{generate_paths, run_dsb, ConfigWarning, Direction, IpfRun, ParamSet, StageReport};
use dsb_core::likelihood::{self, log_likelihood, DivergenceMethod, ProbeKind};
use dsb_core::{PointSampler, RngState};

use crate::checkpoint::{encode_run, RunCheckpoint};
use crate::config::{ExperimentConfig, Resolved};
use crate::csvio::{fmt_f64, point_columns, read_numeric, write_atomic, Provenance, Table};
use crate::render::scatter_svg;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DSB_OUT_ROOT";

// Stream tags under the master seed, disjoint from the training streams.
const EVAL_STREAM: u64 = 0x4556_414c;
const FINAL_STREAM: u64 = 0x4649_4e41;

/// `$DSB_OUT_ROOT/<name>`, or `dsb_runs/<name>` when the variable is unset.
pub fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("dsb_runs"))
        .join(name)
}

pub const DIAG_COLUMNS: [&str; 9] = [
    "ipf_iter",
    "direction",
    "grad_steps",
    "final_loss",
    "mean_err",
    "var_err",
    "cov_err",
    "sliced_wasserstein",
    "wall_seconds",
];

pub const DIAG_FILE: &str = "diagnostics.csv";
pub const RUN_FILE: &str = "run.ckpt";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub resume: bool,
    pub render: bool,
    /// Stop once this many stages exist, as if the process were killed.
    pub max_stages: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub stages: usize,
    pub complete: bool,
}

fn warning_text(w: ConfigWarning) -> &'static str {
    match w {
        ConfigWarning::MeanMatchingWithoutResidual => {
            "mean matching without a residual net: the net must learn the identity part of the map"
        }
        ConfigWarning::ResidualWithoutMeanMatching => {
            "residual net with a drift or score target: the skip connection works against the target"
        }
    }
}

/// Cross-covariance of the exact bridge, when one is known: Brownian
/// reference between isotropic Gaussians.
fn bridge_cross_cov(res: &Resolved) -> Option<f64> {
    if res.dsb.alpha != 0.0 {
        return None;
    }
    let Family::Gaussian { std, .. } = &res.data.family else { return None };
    let PriorSpec::Gaussian { var, .. } = &res.prior else { return None };
    Some(gaussian_sb_cross_cov(std * std, *var, 2.0 * res.dsb.schedule.horizon()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct StageEval {
    mean_err: f64,
    var_err: f64,
    cov_err: f64,
    sw: f64,
}

fn evaluate_stage(run: &IpfRun, stage: usize, cfg: &ExperimentConfig, res: &Resolved, rng: &RngState) -> Result<StageEval> {
    let d = res.dim;
    let n = cfg.eval.n_samples;
    let mut map = run.stage_map(Some(stage), ParamSet::Ema);
    let paths = generate_paths(&mut map, n, &res.prior, &run.schedule, &rng.substream(0), &SimOptions::default())?;
    let x0 = paths.slice_at(0);
    let target = res.data.sample_n(n, &mut rng.substream(1));
    let (ms, vs) = mean_var(&x0, d)?;
    let (mt, vt) = mean_var(&target, d)?;
    let cov_err = match bridge_cross_cov(res) {
        Some(c) => {
            let st = empirical_gauss_stats(&x0, &paths.slice_at(paths.n_steps()), d)?;
            (st.cross_cov - c).abs()
        }
        None => f64::NAN,
    };
    Ok(StageEval {
        mean_err: max_abs_diff(&ms, &mt),
        var_err: max_abs_diff(&vs, &vt),
        cov_err,
        sw: sliced_wasserstein(&x0, &target, d, cfg.eval.n_projections, &mut rng.substream(2))?,
    })
}

fn diag_row(
    run: &IpfRun,
    rep: &StageReport,
    cfg: &ExperimentConfig,
    res: &Resolved,
    eval_base: &RngState,
    wall: f64,
) -> Result<String> {
    let last = cfg.training.ipf_iters;
    let due = rep.direction == Direction::Backward && (rep.iteration % cfg.eval.every == 0 || rep.iteration == last);
    let ev = if due {
        evaluate_stage(run, rep.stage, cfg, res, &eval_base.substream(rep.stage as u64))?
    } else {
        StageEval {
            mean_err: f64::NAN,
            var_err: f64::NAN,
            cov_err: f64::NAN,
            sw: f64::NAN,
        }
    };
    let wall = if cfg.eval.record_wall_time { wall } else { f64::NAN };
    Ok(format!(
        "{},{},{},{},{},{},{},{},{}",
        rep.iteration,
        rep.direction.name(),
        rep.grad_steps,
        fmt_f64(rep.final_loss),
        fmt_f64(ev.mean_err),
        fmt_f64(ev.var_err),
        fmt_f64(ev.cov_err),
        fmt_f64(ev.sw),
        fmt_f64(wall)
    ))
}

fn diag_text(prov: &Provenance, rows: &[String]) -> String {
    let mut s = format!("{}\n{}\n", prov.comment(), DIAG_COLUMNS.join(","));
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Trains (or resumes) a run. After every stage the diagnostics file, the
/// stage's net and the whole-run checkpoint are replaced atomically, so an
/// interrupted run leaves a consistent prefix behind.
pub fn cmd_train(opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut cfg = ExperimentConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let res = cfg.resolve().with_context(|| format!("in {}", opts.config.display()))?;
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| default_out(&cfg.name));
    let hash = cfg.hash();
    let toml_text = cfg.to_toml();
    let prov = Provenance {
        config_hash: hash.clone(),
        seed: cfg.seed,
    };
    for w in res.dsb.warnings() {
        eprintln!("warning: {}", warning_text(w));
    }
    let ckpt_path = out_dir.join(RUN_FILE);
    let (resume, mut rows) = if opts.resume {
        let ck = RunCheckpoint::load(&ckpt_path)?;
        if ck.config_hash != hash {
            bail!(
                "{} was written by config {}, current config is {}",
                ckpt_path.display(),
                ck.config_hash,
                hash
            );
        }
        (Some(ck.run), ck.diag_rows)
    } else {
        if ckpt_path.exists() {
            bail!("{} already holds a run; pass --resume or another --out", out_dir.display());
        }
        (None, Vec::new())
    };
    let have = resume.as_ref().map_or(0, |r| r.stages.len());
    write_atomic(&out_dir.join("config.toml"), toml_text.as_bytes())?;

    let master = RngState::new(cfg.seed);
    let eval_base = master.substream(EVAL_STREAM);
    let n_stages = res.dsb.n_stages();
    if opts.max_stages.is_some_and(|m| m <= have) || have >= n_stages {
        return Ok(TrainOutcome {
            out_dir,
            stages: have,
            complete: have >= n_stages,
        });
    }
    let mut failure = None;
    let mut clock = Instant::now();
    let run = run_dsb(&res.dsb, &res.data, &res.prior, &master, resume, |run, rep| {
        let wall = clock.elapsed().as_secs_f64();
        let saved = (|| -> Result<()> {
            rows.push(diag_row(run, rep, &cfg, &res, &eval_base, wall)?);
            write_atomic(&out_dir.join(DIAG_FILE), diag_text(&prov, &rows).as_bytes())?;
            write_atomic(&ckpt_path, &encode_run(&hash, cfg.seed, &toml_text, run, &rows))?;
            eprintln!(
                "stage {} (iteration {}, {}): loss {:.4e} -> {:.4e}",
                rep.stage,
                rep.iteration,
                rep.direction.name(),
                rep.initial_loss,
                rep.final_loss
            );
            Ok(())
        })();
        clock = Instant::now();
        if let Err(e) = saved {
            failure = Some(e);
            return ControlFlow::Break(());
        }
        if opts.max_stages.is_some_and(|m| run.stages.len() >= m) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let complete = run.stages.len() == n_stages;
    if complete {
        write_final_artifacts(&run, &cfg, &res, &prov, &master, &out_dir, opts.render)?;
    }
    Ok(TrainOutcome {
        out_dir,
        stages: run.stages.len(),
        complete,
    })
}

/// `samples.csv` from the last backward net and one point file per
/// snapshot time, all from the same backward paths.
fn write_final_artifacts(
    run: &IpfRun,
    cfg: &ExperimentConfig,
    res: &Resolved,
    prov: &Provenance,
    master: &RngState,
    out_dir: &Path,
    render: bool,
) -> Result<()> {
    let mut times = vec![0.0];
    times.extend(cfg.eval.snapshot_times.iter().copied().filter(|&t| t != 0.0));
    let clouds = run.marginal_snapshots(None, &times, cfg.eval.n_samples, &res.prior, &master.substream(FINAL_STREAM))?;
    let cols = point_columns(res.dim);
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    for (i, (t, cloud)) in times.iter().zip(&clouds).enumerate() {
        let mut table = Table::new(prov, &cols);
        table.points(cloud, res.dim);
        let name = if i == 0 {
            "samples".to_string()
        } else {
            let k = run.schedule.index_of_time(*t).ok_or_else(|| anyhow!("{t} is not a grid time"))?;
            format!("snapshot_k{k:03}")
        };
        table.write(&out_dir.join(format!("{name}.csv")))?;
        if render {
            let svg = scatter_svg(cloud, res.dim, &format!("{} t={t}", cfg.name));
            write_atomic(&out_dir.join(format!("{name}.svg")), svg.as_bytes())?;
        }
    }
    if render {
        let data = res.data.sample_n(cfg.eval.n_samples, &mut master.substream(FINAL_STREAM).substream(9));
        write_atomic(&out_dir.join("data.svg"), scatter_svg(&data, res.dim, "data").as_bytes())?;
    }
    Ok(())
}

fn load_run(checkpoint: &Path) -> Result<(RunCheckpoint, ExperimentConfig, Resolved)> {
    let ck = RunCheckpoint::load(checkpoint)?;
    let cfg = ExperimentConfig::parse(&ck.config_toml).context("config stored in checkpoint")?;
    let res = cfg.resolve()?;
    if res.dim != ck.run.dim() {
        bail!("checkpoint net has dimension {}, its config {}", ck.run.dim(), res.dim);
    }
    Ok((ck, cfg, res))
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub seed: u64,
    /// Backward stage to sample; default the last one.
    pub stage: Option<usize>,
    /// Directory; default the checkpoint's directory.
    pub out: Option<PathBuf>,
    pub render: bool,
}

/// Writes `samples_seed<seed>_n<n>.csv` and returns its path.
pub fn cmd_sample(opts: &SampleOptions) -> Result<PathBuf> {
    let (ck, _, res) = load_run(&opts.checkpoint)?;
    let xs = ck.run.generate(opts.stage, opts.n, &res.prior, &RngState::new(opts.seed))?;
    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| opts.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    let path = dir.join(format!("samples_seed{}_n{}.csv", opts.seed, opts.n));
    let prov = Provenance {
        config_hash: ck.config_hash.clone(),
        seed: opts.seed,
    };
    let cols = point_columns(res.dim);
    let mut table = Table::new(&prov, &cols.iter().map(String::as_str).collect::<Vec<_>>());
    table.points(&xs, res.dim);
    table.write(&path)?;
    if opts.render {
        write_atomic(&path.with_extension("svg"), scatter_svg(&xs, res.dim, "samples").as_bytes())?;
    }
    Ok(path)
}

/// Writes `gamma_trace.csv` with columns `n, gamma, abs_err, ratio`; the
/// ratio in row `n` is `|gamma_n - gamma*| / |gamma_{n-1} - gamma*|`.
pub fn cmd_gauss_ipf(alpha: f64, beta: f64, n_iters: usize, out: &Path) -> Result<PathBuf> {
    let trace = GaussIpfTrace::run(alpha, beta, n_iters)?;
    let prov = Provenance::of_params(&format!("gauss-ipf alpha={alpha:e} beta={beta:e} n={n_iters}"), 0);
    let mut table = Table::new(&prov, &["n", "gamma", "abs_err", "ratio"]);
    let errs = trace.errors();
    let ratios = trace.ratios();
    for (n, g) in trace.gammas.iter().enumerate() {
        let ratio = if n == 0 { None } else { ratios[n - 1] };
        table.row(&[n.to_string(), fmt_f64(*g), fmt_f64(errs[n]), fmt_f64(ratio.unwrap_or(f64::NAN))]);
    }
    let path = out.join("gamma_trace.csv");
    table.write(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Gaussian kernel between `N(-a, 1)` and `N(a, 1)` on a uniform grid.
    GaussianBridge,
    /// Random strictly positive kernel on `states` points.
    Random,
}

/// Input of `sinkhorn`, a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornProblem {
    pub kind: ProblemKind,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub a: f64,
    pub variance: f64,
    pub states: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornProblem {
    fn default() -> Self {
        Self {
            kind: ProblemKind::GaussianBridge,
            lo: -8.0,
            hi: 8.0,
            points: 60,
            a: 0.1,
            variance: 1.0,
            states: 30,
            seed: 0,
            max_iters: 100_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOutcome {
    pub half_steps: usize,
    pub correlation: f64,
}

/// Writes `coupling.csv` (`i, j, x, y, p`) and `sinkhorn_diagnostics.csv`.
pub fn cmd_sinkhorn(problem_path: Option<&Path>, out: &Path) -> Result<SinkhornOutcome> {
    let problem: SinkhornProblem = match problem_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| anyhow!("invalid problem file {}: {e}", p.display()))?
        }
        None => SinkhornProblem::default(),
    };
    let canonical = toml::to_string(&problem)?;
    let prov = Provenance::of_params(&canonical, problem.seed);
    let gp = match problem.kind {
        ProblemKind::GaussianBridge => {
            let grid = GridSpec::uniform(problem.lo, problem.hi, problem.points)?;
            discretize_gaussian_case(problem.a, &grid, problem.variance)?
        }
        ProblemKind::Random => random_kernel_problem(problem.states, &mut RngState::new(problem.seed))?,
    };
    let result = gp.solve(problem.max_iters, problem.tol)?;
    let xs = &gp.grid.points;
    let c = &result.coupling;
    let mut table = Table::new(&prov, &["i", "j", "x", "y", "p"]);
    for i in 0..c.rows {
        for j in 0..c.cols {
            table.row(&[i.to_string(), j.to_string(), fmt_f64(xs[i]), fmt_f64(xs[j]), fmt_f64(c.at(i, j))]);
        }
    }
    table.write(&out.join("coupling.csv"))?;
    let mut diag = Table::new(&prov, &["iter", "kl_fwd", "kl_bwd", "tv_step", "tv_marg0", "tv_marg1"]);
    for st in &result.trace {
        diag.row(&[
            st.iter.to_string(),
            fmt_f64(st.kl_fwd),
            fmt_f64(st.kl_bwd),
            fmt_f64(st.tv_step),
            fmt_f64(st.tv_marg0),
            fmt_f64(st.tv_marg1),
        ]);
    }
    diag.write(&out.join("sinkhorn_diagnostics.csv"))?;
    Ok(SinkhornOutcome {
        half_steps: result.trace.len(),
        correlation: c.correlation(xs, xs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikDirection {
    FromData,
    FromPrior,
}

#[derive(Debug, Clone)]
pub struct LikelihoodOptions {
    pub checkpoint: PathBuf,
    pub points: PathBuf,
    /// IPF iteration whose flow is integrated; default the last complete one.
    pub iteration: Option<usize>,
    pub direction: LikDirection,
    /// Hutchinson probes per step; 0 uses the full finite-difference
    /// divergence.
    pub probes: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `likelihood.csv` with columns `point_id, log_lik, div_stderr, steps`.
pub fn cmd_likelihood(opts: &LikelihoodOptions) -> Result<PathBuf> {
    let (ck, _, res) = load_run(&opts.checkpoint)?;
    if res.prior.log_density(&vec![0.0; res.dim]).is_none() {
        bail!("likelihoods need a Gaussian prior; this run bridges two datasets");
    }
    let run = &ck.run;
    let n = match opts.iteration {
        Some(n) => n,
        None => run.last_backward().map(|s| s / 2).ok_or_else(|| anyhow!("checkpoint has no trained stage"))?,
    };
    let field = run.flow_field(n)?;
    let (header, values) = read_numeric(&opts.points)?;
    if header.len() != res.dim {
        bail!("{} has {} columns, the model has dimension {}", opts.points.display(), header.len(), res.dim);
    }
    let method = if opts.probes == 0 {
        DivergenceMethod::FiniteDifference { h: 1e-5 }
    } else {
        DivergenceMethod::Hutchinson {
            probes: opts.probes,
            kind: ProbeKind::Rademacher,
            h: 1e-5,
        }
    };
    let direction = match opts.direction {
        LikDirection::FromData => likelihood::Direction::FromData,
        LikDirection::FromPrior => likelihood::Direction::FromPrior,
    };
    let prov = Provenance {
        config_hash: ck.config_hash.clone(),
        seed: opts.seed,
    };
    let master = RngState::new(opts.seed);
    let mut table = Table::new(&prov, &["point_id", "log_lik", "div_stderr", "steps"]);
    for (i, x) in values.chunks_exact(res.dim).enumerate() {
        let ll = log_likelihood(
            &field,
            &run.schedule,
            x,
            direction,
            |y| res.prior.log_density(y).unwrap_or(f64::NAN),
            method,
            &mut master.substream(i as u64),
        )
        .with_context(|| format!("point {i}"))?;
        table.row(&[i.to_string(), fmt_f64(ll.log_lik), fmt_f64(ll.div_std_err), ll.steps.to_string()]);
    }
    let path = opts.out.join("likelihood.csv");
    table.write(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Generate the evaluated samples from this run.
    pub checkpoint: Option<PathBuf>,
    /// Or read them from a points CSV.
    pub samples: Option<PathBuf>,
    /// Target family by name; default the `[data]` section of `config`, then
    /// of the checkpoint's config.
    pub dataset: Option<String>,
    pub config: Option<PathBuf>,
    /// Samples to generate from a checkpoint; default its `eval.n_samples`.
    pub n: Option<usize>,
    pub seed: u64,
    pub n_projections: usize,
    /// Target-vs-target replicates behind the baseline.
    pub replicates: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub value: f64,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    /// `baseline_mean + 3 baseline_sd`: what two honest draws of the target
    /// rarely exceed at this sample size.
    pub baseline: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Writes `metrics.csv`: sliced Wasserstein and energy distance of the
/// samples to fresh target draws, next to the same statistics between pairs
/// of independent target draws of equal size.
pub fn cmd_eval(opts: &EvalOptions) -> Result<Vec<MetricRow>> {
    if opts.replicates < 2 {
        bail!("at least 2 baseline replicates are needed");
    }
    let run = match &opts.checkpoint {
        Some(p) => Some(load_run(p)?),
        None => None,
    };
    let target: DatasetSpec = if let Some(name) = &opts.dataset {
        DatasetSpec::new(Family::from_name(name).with_context(|| format!("--dataset {name}"))?)
    } else if let Some(c) = &opts.config {
        ExperimentConfig::load(c)?.data.spec("data")?
    } else if let Some((_, _, res)) = &run {
        res.data.clone()
    } else {
        bail!("no target: pass --dataset, --config or --checkpoint");
    };
    let d = target.dim();
    let master = RngState::new(opts.seed);
    let (xs, prov) = match (&opts.samples, &run) {
        (Some(path), _) => {
            let (header, values) = read_numeric(path)?;
            if header.len() != d {
                bail!("{} has {} columns, the target has dimension {d}", path.display(), header.len());
            }
            (values, Provenance::of_params(&format!("eval samples={}", path.display()), opts.seed))
        }
        (None, Some((ck, cfg, res))) => {
            if res.dim != d {
                bail!("checkpoint dimension {} does not match the target's {d}", res.dim);
            }
            let n = opts.n.unwrap_or(cfg.eval.n_samples);
            let xs = ck.run.generate(None, n, &res.prior, &master.substream(0))?;
            let prov = Provenance {
                config_hash: ck.config_hash.clone(),
                seed: opts.seed,
            };
            (xs, prov)
        }
        (None, None) => bail!("nothing to evaluate: pass --samples or --checkpoint"),
    };
    let m = xs.len() / d;
    if m < 2 {
        bail!("need at least 2 samples, got {m}");
    }
    let ref_draw = target.sample_n(m, &mut master.substream(1));
    let sw = sliced_wasserstein(&xs, &ref_draw, d, opts.n_projections, &mut master.substream(2))?;
    let ed = energy_distance(&xs, &ref_draw, d)?;
    let mut base_sw = Vec::with_capacity(opts.replicates);
    let mut base_ed = Vec::with_capacity(opts.replicates);
    for r in 0..opts.replicates as u64 {
        let a = target.sample_n(m, &mut master.substream2(3, 2 * r));
        let b = target.sample_n(m, &mut master.substream2(3, 2 * r + 1));
        base_sw.push(sliced_wasserstein(&a, &b, d, opts.n_projections, &mut master.substream2(4, r))?);
        base_ed.push(energy_distance(&a, &b, d)?);
    }
    let rows: Vec<MetricRow> = [("sliced_wasserstein", sw, base_sw), ("energy_distance", ed, base_ed)]
        .into_iter()
        .map(|(metric, value, base)| {
            let (bm, bs) = mean_sd(&base);
            MetricRow {
                metric,
                value,
                baseline_mean: bm,
                baseline_sd: bs,
                baseline: bm + 3.0 * bs,
            }
        })
        .collect();
    let mut table = Table::new(&prov, &["metric", "value", "baseline_mean", "baseline_sd", "baseline", "n_samples"]);
    for r in &rows {
        table.row(&[
            r.metric.to_string(),
            fmt_f64(r.value),
            fmt_f64(r.baseline_mean),
            fmt_f64(r.baseline_sd),
            fmt_f64(r.baseline),
            m.to_string(),
        ]);
    }
    table.write(&opts.out.join("metrics.csv"))?;
    Ok(rows)
}
