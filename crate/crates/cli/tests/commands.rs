use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dsb::checkpoint::{NetCheckpoint, RunCheckpoint};
use dsb::commands::{
    cmd_eval, cmd_gauss_ipf, cmd_likelihood, cmd_sample, cmd_sinkhorn, cmd_train, EvalOptions, LikDirection,
    LikelihoodOptions, SampleOptions, TrainOptions, DIAG_FILE, RUN_FILE,
};
use dsb::config::ExperimentConfig;
use dsb::csvio::{read_numeric, read_provenance};

const TINY: &str = r#"
name = "tiny"
seed = 5

[schedule]
kind = "uniform"
n_steps = 5
gamma = 0.05

[reference]
alpha = 1.0

[net]
enc_dim = 8
state_widths = [8]
time_widths = [8]
head_widths = [16]

[training]
ipf_iters = 1
steps_per_half_bridge = 30
batch_size = 16
cache_size = 16
refresh_period = 10
lr = 0.001

[data]
kind = "gaussian"
mean = [0.5, -0.5]

[prior]
kind = "gaussian"

[eval]
n_samples = 64
n_projections = 8
snapshot_times = [0.0, 0.1, 0.25]
record_wall_time = false
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn train(config: &Path, out: &Path) -> dsb::commands::TrainOutcome {
    cmd_train(&TrainOptions {
        config: config.to_path_buf(),
        out: Some(out.to_path_buf()),
        ..Default::default()
    })
    .unwrap()
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(2).map(str::to_string).collect()
}

#[test]
fn gauss_ipf_trace_reaches_the_closed_form_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let path = cmd_gauss_ipf(0.5, 1.0, 50, dir.path()).unwrap();
    let (header, v) = read_numeric(&path).unwrap();
    assert_eq!(header, ["n", "gamma", "abs_err", "ratio"]);
    let last = &v[v.len() - 4..];
    assert_eq!(last[0], 50.0);
    let gamma_star = (2f64.sqrt() - 1.0) / 2.0;
    assert!((last[1] - gamma_star).abs() <= 1e-12, "{}", last[1]);
    assert!(read_provenance(&path).unwrap().is_some());
}

#[test]
fn smoke_train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = train(&cfg, &out);
    assert!(o.complete);
    assert_eq!(o.stages, 3);
    let diag = out.join(DIAG_FILE);
    let rows = data_rows(&diag);
    let iters: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["0", "1", "1"]);
    assert!(rows[0].contains(",backward,") && rows[1].contains(",forward,"));
    let (header, _) = read_numeric(&out.join("samples.csv")).unwrap();
    assert_eq!(header, ["x0", "x1"]);
    assert!(out.join("snapshot_k002.csv").exists() && out.join("snapshot_k005.csv").exists());
    let prov = read_provenance(&diag).unwrap().unwrap();
    assert_eq!(prov.seed, 5);
    assert_eq!(prov.config_hash, ExperimentConfig::load(&cfg).unwrap().hash());
    // the input config is untouched
    assert_eq!(fs::read_to_string(&cfg).unwrap(), TINY);
    // a second plain run refuses to clobber the first
    assert!(cmd_train(&TrainOptions {
        config: cfg.clone(),
        out: Some(out.clone()),
        ..Default::default()
    })
    .is_err());
}

#[test]
fn same_seed_reproduces_diagnostics_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    train(&cfg, &dir.path().join("a"));
    train(&cfg, &dir.path().join("b"));
    let a = fs::read(dir.path().join("a").join(DIAG_FILE)).unwrap();
    let b = fs::read(dir.path().join("b").join(DIAG_FILE)).unwrap();
    assert_eq!(a, b);
    let sa = fs::read(dir.path().join("a/samples.csv")).unwrap();
    let sb = fs::read(dir.path().join("b/samples.csv")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn resume_after_interruption_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("ipf_iters = 1", "ipf_iters = 3");
    let cfg = write_config(dir.path(), &text);
    let whole = dir.path().join("whole");
    train(&cfg, &whole);

    let split = dir.path().join("split");
    // interrupted while iteration 3 is under way: stages 0..=4 exist
    let part = cmd_train(&TrainOptions {
        config: cfg.clone(),
        out: Some(split.clone()),
        max_stages: Some(5),
        ..Default::default()
    })
    .unwrap();
    assert!(!part.complete);
    assert_eq!(part.stages, 5);
    assert_eq!(data_rows(&split.join(DIAG_FILE)).len(), 5);
    let done = cmd_train(&TrainOptions {
        config: cfg.clone(),
        out: Some(split.clone()),
        resume: true,
        ..Default::default()
    })
    .unwrap();
    assert!(done.complete);
    assert_eq!(fs::read(whole.join(DIAG_FILE)).unwrap(), fs::read(split.join(DIAG_FILE)).unwrap());
    assert_eq!(fs::read(whole.join(RUN_FILE)).unwrap(), fs::read(split.join(RUN_FILE)).unwrap());
    assert_eq!(fs::read(whole.join("samples.csv")).unwrap(), fs::read(split.join("samples.csv")).unwrap());
}

#[test]
fn resume_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    cmd_train(&TrainOptions {
        config: cfg.clone(),
        out: Some(out.clone()),
        max_stages: Some(1),
        ..Default::default()
    })
    .unwrap();
    let err = cmd_train(&TrainOptions {
        config: cfg,
        seed: Some(6),
        out: Some(out),
        resume: true,
        ..Default::default()
    })
    .unwrap_err();
    assert!(format!("{err:#}").contains("config"));
}

#[test]
fn checkpoint_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    train(&cfg, &out);
    let bytes = fs::read(out.join(RUN_FILE)).unwrap();
    let ck = RunCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert_eq!(ck.run.stages.len(), 3);
    let net = ck.stage_net(2);
    assert_eq!(NetCheckpoint::from_bytes(&net.to_bytes()).unwrap(), net);
    assert_eq!(net.params, ck.run.stages[2].params);
}

#[test]
fn sample_with_zero_points_writes_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    train(&cfg, &out);
    let path = cmd_sample(&SampleOptions {
        checkpoint: out.join(RUN_FILE),
        n: 0,
        seed: 1,
        stage: None,
        out: Some(dir.path().join("s")),
        render: false,
    })
    .unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().nth(1), Some("x0,x1"));

    let opts = SampleOptions {
        checkpoint: out.join(RUN_FILE),
        n: 10,
        seed: 2,
        stage: Some(0),
        out: Some(dir.path().join("s")),
        render: true,
    };
    let p = cmd_sample(&opts).unwrap();
    let first = fs::read(&p).unwrap();
    assert_eq!(read_numeric(&p).unwrap().1.len(), 20);
    assert!(p.with_extension("svg").exists());
    cmd_sample(&opts).unwrap();
    assert_eq!(fs::read(&p).unwrap(), first);
    // forward stages cannot generate
    assert!(cmd_sample(&SampleOptions { stage: Some(1), ..opts }).is_err());
}

#[test]
fn sinkhorn_default_problem_recovers_the_bridge_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_sinkhorn(None, dir.path()).unwrap();
    assert!((o.correlation - 0.618034).abs() < 0.01, "{}", o.correlation);
    let (h, v) = read_numeric(&dir.path().join("coupling.csv")).unwrap();
    assert_eq!(h, ["i", "j", "x", "y", "p"]);
    assert_eq!(v.len(), 60 * 60 * 5);
    let mass: f64 = v.chunks_exact(5).map(|r| r[4]).sum();
    assert!((mass - 1.0).abs() < 1e-9);
    let (h, v) = read_numeric(&dir.path().join("sinkhorn_diagnostics.csv")).unwrap();
    assert_eq!(h, ["iter", "kl_fwd", "kl_bwd", "tv_step", "tv_marg0", "tv_marg1"]);
    let last = &v[v.len() - 6..];
    assert!(last[4] <= 1e-10 && last[5] <= 1e-10);

    let problem = dir.path().join("p.toml");
    fs::write(&problem, "kind = \"random\"\nstates = 12\nseed = 4\n").unwrap();
    cmd_sinkhorn(Some(&problem), &dir.path().join("r")).unwrap();
    assert_eq!(read_numeric(&dir.path().join("r/coupling.csv")).unwrap().1.len(), 144 * 5);
    fs::write(&problem, "kind = \"random\"\nsize = 12\n").unwrap();
    assert!(cmd_sinkhorn(Some(&problem), &dir.path().join("r2")).is_err());
}

#[test]
fn likelihood_rows_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    train(&cfg, &out);
    let pts = dir.path().join("pts.csv");
    fs::write(&pts, "x0,x1\n0.1,0.2\n-1.0,0.5\n0.0,0.0\n").unwrap();
    let mut opts = LikelihoodOptions {
        checkpoint: out.join(RUN_FILE),
        points: pts.clone(),
        iteration: None,
        direction: LikDirection::FromData,
        probes: 0,
        seed: 0,
        out: dir.path().join("lik"),
    };
    let path = cmd_likelihood(&opts).unwrap();
    let (h, v) = read_numeric(&path).unwrap();
    assert_eq!(h, ["point_id", "log_lik", "div_stderr", "steps"]);
    assert_eq!(v.len(), 12);
    for r in v.chunks_exact(4) {
        assert!(r[1].is_finite());
        assert_eq!(r[2], 0.0);
        assert_eq!(r[3], 5.0);
    }
    opts.probes = 16;
    opts.direction = LikDirection::FromPrior;
    let (_, v) = read_numeric(&cmd_likelihood(&opts).unwrap()).unwrap();
    assert!(v.chunks_exact(4).all(|r| r[1].is_finite() && r[2] > 0.0));
    fs::write(&pts, "x0\n0.1\n").unwrap();
    assert!(cmd_likelihood(&opts).is_err());
}

#[test]
fn eval_of_target_draws_sits_below_the_same_distribution_baseline() {
    let dir = tempfile::tempdir().unwrap();
    // samples from the target itself, drawn on a stream eval never uses
    let spec = dsb::config::DataConfig::default().spec("data").unwrap();
    let xs = dsb_core::PointSampler::sample_n(&spec, 1000, &mut dsb_core::RngState::new(99));
    let prov = dsb::csvio::Provenance::of_params("test", 99);
    let mut t = dsb::csvio::Table::new(&prov, &["x0", "x1"]);
    t.points(&xs, 2);
    let samples = dir.path().join("moons.csv");
    t.write(&samples).unwrap();
    let rows = cmd_eval(&EvalOptions {
        samples: Some(samples.clone()),
        dataset: Some("two_moons".into()),
        seed: 3,
        n_projections: 50,
        replicates: 8,
        out: dir.path().join("e"),
        ..Default::default()
    })
    .unwrap();
    for r in &rows {
        assert!(r.value < r.baseline, "{r:?}");
    }
    // a different distribution lands far above it
    let rows = cmd_eval(&EvalOptions {
        samples: Some(samples),
        dataset: Some("circles".into()),
        seed: 3,
        n_projections: 50,
        replicates: 8,
        out: dir.path().join("f"),
        ..Default::default()
    })
    .unwrap();
    for r in &rows {
        assert!(r.value > 3.0 * r.baseline, "{r:?}");
    }
    assert!(dir.path().join("e/metrics.csv").exists());
}

#[test]
fn eval_from_checkpoint_uses_its_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    train(&cfg, &out);
    let rows = cmd_eval(&EvalOptions {
        checkpoint: Some(out.join(RUN_FILE)),
        n: Some(50),
        n_projections: 10,
        replicates: 3,
        out: dir.path().join("e"),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.value.is_finite()));
}

#[test]
fn binary_reports_config_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[training]\nlearning_rate = 1\n");
    let o = Command::new(env!("CARGO_BIN_EXE_dsb"))
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 2"), "{err}");
    assert!(!dir.path().join("o").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_dsb")).arg("--print-config").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn binary_honours_the_output_root_variable() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dsb"))
        .args(["gauss-ipf", "--n-iters", "5"])
        .env("DSB_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("gauss_ipf/gamma_trace.csv").exists());
}
