//! The three regression targets are unbiased for the same transition map.
//! Pairs come from a linear chain `E = r S + sqrt(2 gamma) Z` with `S` drawn
//! from a two-component Gaussian mixture, so `m(y) = E[S | E = y]` is known
//! in closed form and every variant's implied map must equal
//! `(1 - r) y + r m(y)`.

use core::ops::ControlFlow;

use dsb_core::approximator::Workspace;
use dsb_core::bench::{DatasetSpec, Family, PriorSpec};
use dsb_core::dsb::{backward_target, forward_target, run_dsb, DsbConfig, LossVariant, ParamSet};
use dsb_core::{NetSpec, RngState, StepSchedule};

const VARIANTS: [LossVariant; 3] = [LossVariant::MeanMatching, LossVariant::DriftMatching, LossVariant::ScoreMatching];

// (weight, mean, variance)
const MIX: [(f64, f64, f64); 2] = [(0.3, -1.0, 0.0625), (0.7, 0.8, 0.25)];

fn posterior_mean(y: f64, r: f64, gamma: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(w, mu, v) in &MIX {
        let vy = r * r * v + 2.0 * gamma;
        let lik = w * (-(y - r * mu).powi(2) / (2.0 * vy)).exp() / vy.sqrt();
        num += lik * (mu + r * v / vy * (y - r * mu));
        den += lik;
    }
    num / den
}

fn implied_map(variant: LossVariant, gamma: f64, r: f64, y: f64, net: f64) -> f64 {
    match variant {
        LossVariant::MeanMatching => net,
        LossVariant::DriftMatching => y + gamma * net,
        LossVariant::ScoreMatching => 2.0 * y - r * y + 2.0 * gamma * net,
    }
}

fn check_binned(forward: bool) {
    let (gamma, r): (f64, f64) = (0.05, 0.95);
    let mut rng = RngState::new(if forward { 11 } else { 10 });
    let m = 400_000;
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..m {
        let c = if rng.uniform() < MIX[0].0 { 0 } else { 1 };
        let s = MIX[c].1 + MIX[c].2.sqrt() * rng.normal();
        let e = r * s + (2.0 * gamma).sqrt() * rng.normal();
        pairs.push((s, e));
    }
    for variant in VARIANTS {
        // bins of width 0.25 over [-2, 2]: (sum, sum of squares, count)
        let mut bins = [(0.0, 0.0, 0usize); 16];
        for &(s, e) in &pairs {
            let mut t = [0.0];
            if forward {
                // backward chain X_{i-1} = r X_i + noise; the input is X_{i-1}
                forward_target(variant, gamma, &[e], &[s], &[r * s], &[r * e], &mut t);
            } else {
                backward_target(variant, gamma, &[s], &[e], &[r * s], &[r * e], &mut t);
            }
            let resid = implied_map(variant, gamma, r, e, t[0]) - ((1.0 - r) * e + r * posterior_mean(e, r, gamma));
            let b = ((e + 2.0) / 0.25).floor();
            if (0.0..16.0).contains(&b) {
                let bin = &mut bins[b as usize];
                bin.0 += resid;
                bin.1 += resid * resid;
                bin.2 += 1;
            }
        }
        for (k, &(s1, s2, n)) in bins.iter().enumerate() {
            assert!(n > 500, "bin {k} too sparse");
            let nf = n as f64;
            let mean = s1 / nf;
            let se = ((s2 / nf - mean * mean) / nf).sqrt();
            assert!(mean.abs() <= 5.0 * se, "{variant:?} forward={forward} bin {k}: bias {mean:.3e}, se {se:.3e}");
        }
    }
}

#[test]
fn backward_targets_are_unbiased_for_the_implied_map() {
    check_binned(false);
}

#[test]
fn forward_targets_are_unbiased_for_the_implied_map() {
    check_binned(true);
}

// Training each variant on the same 1-D Gaussian problem gives maps that
// agree with each other and with the population regressor.
#[test]
fn trained_variants_agree() {
    let (mu, sd, alpha, n) = (1.0, 0.5, 1.0, 10);
    let schedule = StepSchedule::uniform(n, 0.05).unwrap();
    let data = DatasetSpec::new(Family::Gaussian { mean: vec![mu], std: sd });
    let prior = PriorSpec::gaussian(vec![0.0], 1.0).unwrap();
    let probe = [1, n / 2, n];
    // X_k = c_k X_0 + noise of variance s_k under the reference chain
    let (mut c, mut s) = (vec![1.0], vec![0.0]);
    for i in 1..=n {
        let r = 1.0 - alpha * schedule.gamma(i);
        c.push(r * c[i - 1]);
        s.push(r * r * s[i - 1] + 2.0 * schedule.gamma(i));
    }
    // 17 points spanning two standard deviations of the law of X_i
    let grids: Vec<Vec<f64>> = probe
        .iter()
        .map(|&i| {
            let sd_i = (c[i] * c[i] * sd * sd + s[i]).sqrt();
            (0..=16).map(|j| c[i] * mu + sd_i * (-2.0 + 0.25 * j as f64)).collect()
        })
        .collect();
    let mut maps = Vec::new();
    for variant in VARIANTS {
        let mut net = NetSpec::small(1);
        net.residual = variant == LossVariant::MeanMatching;
        let mut cfg = DsbConfig::new(net, schedule.clone(), alpha);
        cfg.variant = variant;
        cfg.ipf_iters = 0;
        cfg.steps_per_half_bridge = 10_000;
        cfg.adam.lr = 1e-3;
        let run = run_dsb(&cfg, &data, &prior, &RngState::new(3), None, |_, _| ControlFlow::Continue(())).unwrap();
        let mut ws = Workspace::default();
        let mut vals = Vec::new();
        for (&i, grid) in probe.iter().zip(&grids) {
            let mut out = vec![0.0; grid.len()];
            run.apply(Some(0), ParamSet::Ema, i, grid, &mut out, &mut ws).unwrap();
            vals.push(out);
        }
        maps.push(vals);
    }
    let mut worst: f64 = 0.0;
    for (p, &i) in probe.iter().enumerate() {
        let (g, r) = (schedule.gamma(i), 1.0 - alpha * schedule.gamma(i));
        let (mk, vk) = (c[i - 1] * mu, c[i - 1] * c[i - 1] * sd * sd + s[i - 1]);
        for (j, &y) in grids[p].iter().enumerate() {
            let m = mk + r * vk / (r * r * vk + 2.0 * g) * (y - r * mk);
            let want = (1.0 - r) * y + r * m;
            for v in &maps {
                worst = worst.max((v[p][j] - want).abs());
            }
        }
    }
    assert!(worst < 0.05, "worst map error {worst}");
}
