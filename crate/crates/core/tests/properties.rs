use dsb_core::analytic_gauss::{gauss_ipf_fixed_point, gauss_ipf_step, gaussian_sb_cross_cov};
use dsb_core::bench::{energy_distance, sliced_wasserstein, wasserstein_1d_sorted};
use dsb_core::discrete_ipf::{random_kernel_problem, run_discrete_ipf_steps, tv};
use dsb_core::approximator::InitScheme;
use dsb_core::{Activation, NetSpec, Network, RngState, StepSchedule};
use proptest::prelude::*;

fn cloud(seed: u64, m: usize, d: usize, shift: f64) -> Vec<f64> {
    let mut rng = RngState::new(seed);
    (0..m * d).map(|_| rng.normal() + shift).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn substreams_are_reproducible_and_distinct(seed in any::<u64>(), i in 0u64..1000, j in 0u64..1000) {
        let root = RngState::new(seed);
        let a: Vec<u64> = { let mut r = root.substream(i); (0..4).map(|_| r.next_u64()).collect() };
        let b: Vec<u64> = { let mut r = root.substream(i); (0..4).map(|_| r.next_u64()).collect() };
        prop_assert_eq!(&a, &b);
        if i != j {
            let c: Vec<u64> = { let mut r = root.substream(j); (0..4).map(|_| r.next_u64()).collect() };
            prop_assert_ne!(a, c);
        }
    }

    #[test]
    fn uniform_range_stays_inside(seed in any::<u64>(), lo in -5.0f64..5.0, w in 1e-3f64..10.0) {
        let mut rng = RngState::new(seed);
        for _ in 0..64 {
            let u = rng.uniform_range(lo, lo + w);
            prop_assert!(u >= lo && u < lo + w);
        }
    }

    #[test]
    fn w1_of_a_translate_is_the_shift(seed in any::<u64>(), m in 1usize..50, c in -3.0f64..3.0) {
        let mut a = cloud(seed, m, 1, 0.0);
        a.sort_by(f64::total_cmp);
        let b: Vec<f64> = a.iter().map(|x| x + c).collect();
        prop_assert!((wasserstein_1d_sorted(&a, &b) - c.abs()).abs() < 1e-12);
    }

    #[test]
    fn sample_metrics_symmetric_nonnegative(seed in any::<u64>(), m in 2usize..40, d in 1usize..4, shift in -2.0f64..2.0) {
        let a = cloud(seed, m, d, 0.0);
        let b = cloud(seed ^ 0x55, m + 3, d, shift);
        let ab = sliced_wasserstein(&a, &b, d, 16, &mut RngState::new(7)).unwrap();
        let ba = sliced_wasserstein(&b, &a, d, 16, &mut RngState::new(7)).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(sliced_wasserstein(&a, &a, d, 16, &mut RngState::new(7)).unwrap() < 1e-12);
        let e_ab = energy_distance(&a, &b, d).unwrap();
        let e_ba = energy_distance(&b, &a, d).unwrap();
        prop_assert!(e_ab >= -1e-12);
        prop_assert!((e_ab - e_ba).abs() < 1e-10);
        prop_assert!(energy_distance(&a, &a, d).unwrap().abs() < 1e-12);
    }

    #[test]
    fn schedule_times_index_back(gammas in prop::collection::vec(1e-3f64..0.5, 1..30)) {
        let s = StepSchedule::from_gammas(gammas.clone()).unwrap();
        prop_assert_eq!(s.n_steps(), gammas.len());
        for k in 0..=s.n_steps() {
            prop_assert_eq!(s.index_of_time(s.time(k)), Some(k));
        }
        let total: f64 = gammas.iter().sum();
        prop_assert!((s.horizon() - total).abs() < 1e-12);
    }

    // After an odd number of half-steps the second marginal is exact, after
    // an even number the first; the coupling is always a (h mu0 mu1) b.
    #[test]
    fn ipf_half_steps_fit_one_marginal(seed in any::<u64>(), n in 2usize..9, steps in 1usize..12) {
        let p = random_kernel_problem(n, &mut RngState::new(seed)).unwrap();
        let r = run_discrete_ipf_steps(&p.h, &p.mu0, &p.mu1, &p.nu0, &p.nu1, steps).unwrap();
        let pi = &r.coupling;
        prop_assert!((pi.mass() - 1.0).abs() < 1e-12);
        if steps % 2 == 1 {
            prop_assert!(tv(&pi.col_marginal(), &p.nu1) < 1e-12);
        } else {
            prop_assert!(tv(&pi.row_marginal(), &p.nu0) < 1e-12);
        }
        let (a, b) = (&r.potentials.a, &r.potentials.b);
        for i in 0..n {
            for j in 0..n {
                let k = p.h[i * n + j] * p.mu0[i] * p.mu1[j];
                let want = a[i] * k * b[j];
                prop_assert!((pi.at(i, j) - want).abs() <= 1e-10 * want.max(1e-300));
            }
        }
    }

    #[test]
    fn gauss_ipf_fixed_point_is_stationary_and_attracting(alpha in 0.05f64..0.9, beta in 0.5f64..1.5, g0 in -0.5f64..0.5) {
        let fp = gauss_ipf_fixed_point(alpha, beta).unwrap();
        prop_assert!((gauss_ipf_step(fp, alpha, beta).unwrap() - fp).abs() < 1e-12);
        let mut g = g0;
        for _ in 0..400 {
            g = gauss_ipf_step(g, alpha, beta).unwrap();
        }
        prop_assert!((g - fp).abs() < 1e-9);
    }

    #[test]
    fn bridge_cross_cov_is_feasible(v0 in 0.01f64..10.0, v1 in 0.01f64..10.0, k in 1e-3f64..10.0) {
        let c = gaussian_sb_cross_cov(v0, v1, k);
        prop_assert!(c > 0.0);
        prop_assert!(c * c < v0 * v1);
    }

    #[test]
    fn batch_matches_single_rows(seed in any::<u64>(), m in 1usize..6, pos in 0.0f64..20.0) {
        let mut spec = NetSpec::small(3);
        spec.state_widths = vec![6];
        spec.time_widths = vec![5];
        spec.head_widths = vec![7];
        spec.enc_dim = 4;
        spec.activation = Activation::Silu;
        let net = Network::new(spec).unwrap();
        let params = net.init_params(InitScheme::FanIn, &mut RngState::new(seed));
        let xs = cloud(seed ^ 1, m, 3, 0.0);
        let mut out = vec![0.0; xs.len()];
        net.forward_batch(&params, pos, &xs, &mut out, &mut Default::default()).unwrap();
        for (row, o) in xs.chunks(3).zip(out.chunks(3)) {
            let single = net.forward(&params, pos, row).unwrap();
            for c in 0..3 {
                prop_assert!((single[c] - o[c]).abs() < 1e-12);
            }
        }
    }
}
