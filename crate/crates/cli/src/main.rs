use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dsb::commands::{self, EvalOptions, LikDirection, LikelihoodOptions, SampleOptions, TrainOptions, OUT_ROOT_ENV};
use dsb::config::DEFAULT_CONFIG_DOC;

#[derive(Parser)]
#[command(name = "dsb", version, about = "Schrödinger bridges by iterative proportional fitting of diffusions")]
#[command(after_help = "Outputs default to $DSB_OUT_ROOT/<name>, or ./dsb_runs/<name> when unset.")]
struct Cli {
    /// Print the default configuration, every key documented, and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirArg {
    FromData,
    FromPrior,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a bridge from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Also write SVG scatter plots.
        #[arg(long)]
        render: bool,
        #[arg(long, hide = true)]
        max_stages: Option<usize>,
    },
    /// Draw samples from a trained run.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Backward stage to sample (default: the last).
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        render: bool,
    },
    /// Trace the closed-form Gaussian IPF recursion.
    GaussIpf {
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 50)]
        n_iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a grid bridge problem with IPF (Sinkhorn).
    Sinkhorn {
        /// Problem TOML; defaults to the 60-point Gaussian bridge.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Log-likelihoods of points under a trained run's probability flow.
    Likelihood {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        iteration: Option<usize>,
        #[arg(long, value_enum, default_value_t = DirArg::FromData)]
        direction: DirArg,
        /// Hutchinson probes per step; 0 for the full divergence.
        #[arg(long, default_value_t = 0)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare samples with a target dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Target family name (two_moons, circles, ...).
        #[arg(long)]
        dataset: Option<String>,
        /// Config whose [data] section is the target.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        n_projections: usize,
        #[arg(long, default_value_t = 8)]
        replicates: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.print_config {
        print!("{DEFAULT_CONFIG_DOC}");
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        anyhow::bail!("no subcommand; see --help (output root: ${OUT_ROOT_ENV})");
    };
    match cmd {
        Cmd::Train { config, seed, out, resume, render, max_stages } => {
            let o = commands::cmd_train(&TrainOptions { config, seed, out, resume, render, max_stages })?;
            let state = if o.complete { "complete" } else { "incomplete" };
            println!("{} stages ({state}) in {}", o.stages, o.out_dir.display());
        }
        Cmd::Sample { checkpoint, n, seed, stage, out, render } => {
            let path = commands::cmd_sample(&SampleOptions { checkpoint, n, seed, stage, out, render })?;
            println!("{}", path.display());
        }
        Cmd::GaussIpf { alpha, beta, n_iters, out } => {
            let out = out.unwrap_or_else(|| commands::default_out("gauss_ipf"));
            println!("{}", commands::cmd_gauss_ipf(alpha, beta, n_iters, &out)?.display());
        }
        Cmd::Sinkhorn { config, out } => {
            let out = out.unwrap_or_else(|| commands::default_out("sinkhorn"));
            let o = commands::cmd_sinkhorn(config.as_deref(), &out)?;
            println!("converged after {} half-steps; correlation {:.6}", o.half_steps, o.correlation);
        }
        Cmd::Likelihood { checkpoint, points, iteration, direction, probes, seed, out } => {
            let direction = match direction {
                DirArg::FromData => LikDirection::FromData,
                DirArg::FromPrior => LikDirection::FromPrior,
            };
            let out = out.unwrap_or_else(|| commands::default_out("likelihood"));
            let opts = LikelihoodOptions { checkpoint, points, iteration, direction, probes, seed, out };
            println!("{}", commands::cmd_likelihood(&opts)?.display());
        }
        Cmd::Eval { checkpoint, samples, dataset, config, n, seed, n_projections, replicates, out } => {
            let out = out.unwrap_or_else(|| commands::default_out("eval"));
            let opts = EvalOptions { checkpoint, samples, dataset, config, n, seed, n_projections, replicates, out };
            for r in commands::cmd_eval(&opts)? {
                println!("{} {:.6} (baseline {:.6})", r.metric, r.value, r.baseline);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
