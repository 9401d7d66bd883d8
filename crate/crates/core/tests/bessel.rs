use cdlab_core::bessel::*;

fn log_config(dt: f64, n_paths: usize, seed: u64) -> SdeConfig {
    SdeConfig::new(0.1, 1.0, 1.0, dt, n_paths, seed)
}

#[test]
fn bessel_paths_start_at_one_and_stay_positive() {
    let batch = simulate_bessel(&log_config(0.05, 2_000, 1)).unwrap();
    assert_eq!(batch.n_times(), 21);
    for i in 0..batch.n_paths {
        assert_eq!(batch.b[i * 21], 1.0);
    }
    assert!(batch.b.iter().all(|b| *b > 0.0));
    assert_eq!(batch.scheme, SCHEME);
}

#[test]
fn second_moment_of_bessel_matches_coordinates() {
    let batch = simulate_bessel(&log_config(0.1, 40_000, 2)).unwrap();
    for row in moment_table(&batch, Process::B, 2, 0.99).unwrap() {
        let target = 1.0 + 3.0 * row.t;
        // widen by a hair for the t = 0 row, which has zero variance
        assert!(
            row.estimate.ci_lo - 1e-12 <= target && target <= row.estimate.ci_hi + 1e-12,
            "{row:?}"
        );
    }
}

#[test]
fn minimal_deflator_is_reciprocal_and_square_integrable() {
    let mut batch = simulate_bessel(&log_config(0.1, 5_000, 3)).unwrap();
    let z0 = minimal_deflator(&mut batch).to_vec();
    for (z, b) in z0.iter().zip(&batch.b) {
        assert_eq!(*z, 1.0 / b);
        assert!(*z > 0.0);
    }
    assert!(batch.column(Process::Z0, 0).unwrap().iter().all(|z| *z == 1.0));
    for row in moment_table(&batch, Process::Z0, 2, 0.99).unwrap() {
        assert!(row.estimate.mean.is_finite() && row.estimate.ci_hi.is_finite());
    }
}

#[test]
fn expectation_deficit_shape() {
    // grid coarse enough for the drop to exceed Monte Carlo noise
    let batch = simulate(&log_config(0.25, 50_000, 4)).unwrap();
    let d0 = expectation_deficit(&batch, 0.0, 0.99).unwrap();
    assert_eq!(d0.estimate.mean, 1.0);
    assert_eq!(d0.deficit, 0.0);
    let means: Vec<f64> = batch
        .times
        .iter()
        .map(|&t| expectation_deficit(&batch, t, 0.99).unwrap().estimate.mean)
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    for &t in &[0.5, 0.75, 1.0] {
        assert!(expectation_deficit(&batch, t, 0.99).unwrap().strict);
    }
    assert!(expectation_deficit(&batch, 0.33, 0.99).is_err());
}

#[test]
fn too_few_paths_is_a_statistics_error() {
    let batch = simulate(&log_config(0.5, 10, 5)).unwrap();
    assert!(matches!(
        expectation_deficit(&batch, 1.0, 0.99),
        Err(BesselError::Statistics(_))
    ));
}

#[test]
fn log_policy_identities_hold_pathwise() {
    let config = log_config(0.01, 500, 6);
    let batch = simulate(&config).unwrap();
    let policy = batch.policy.as_ref().unwrap();
    let n = batch.n_times();
    for i in 0..batch.n_paths {
        assert_eq!(policy.c_hat[i * n], config.alpha * config.x);
        assert_eq!(policy.m_hat[i * n], config.x);
    }
    let r = pathwise_invariant_check(&config, &batch).unwrap();
    assert!(r.consumption <= 1e-12, "{r:?}");
    assert!(r.deflated_wealth <= 1e-12, "{r:?}");
    assert!(r.m_hat <= config.alpha * config.x * config.dt);
}

#[test]
fn m_hat_residual_is_second_order() {
    let residual = |dt: f64| {
        let config = log_config(dt, 50, 7);
        let batch = simulate(&config).unwrap();
        pathwise_invariant_check(&config, &batch).unwrap().m_hat
    };
    let fine = residual(1e-3);
    // trapezoid error of int alpha x e^{-alpha s} ds
    let bound = 0.1f64.powi(3) * 1.0 * 1e-6 / 12.0 * 1.0;
    assert!(fine <= 1e-7 && fine <= 1.5 * bound, "{fine:e} vs {bound:e}");
    let (a, b) = (residual(1e-2), residual(5e-3));
    let slope = (a / b).log2();
    assert!((1.8..=2.2).contains(&slope), "slope {slope}");
}

#[test]
fn potential_decays_like_discount() {
    let mut config = log_config(0.05, 1_000, 8);
    config.alpha = std::f64::consts::LN_2;
    let batch = simulate(&config).unwrap();
    let rows = potential_decay(&config, &batch, &batch.times).unwrap();
    assert_eq!(rows[0].mean, config.x);
    assert!(rows.iter().all(|r| r.abs_error <= 1e-12));
    assert!(rows.windows(2).all(|w| w[1].mean < w[0].mean));
    let half = potential_decay(&config, &batch, &[1.0]).unwrap();
    assert!((half[0].mean - 0.5 * config.x).abs() <= 1e-12);
}

#[test]
fn budget_saturation_with_tail() {
    let config = log_config(0.01, 200, 9);
    let batch = simulate(&config).unwrap();
    let b = budget_saturation(&config, &batch).unwrap();
    assert!((b.truncated - b.truncated_target).abs() <= 1e-7);
    assert!((b.total - config.x).abs() <= 1e-7);
}

#[test]
fn increment_tests_separate_martingale_from_supermartingale() {
    let batch = simulate(&log_config(0.05, 100_000, 10)).unwrap();
    let opts = IncrementOptions::default();
    for row in martingale_increment_test(&batch, Process::MHat, &[0.25, 0.5, 0.75], opts).unwrap() {
        assert!(row.max_abs_z <= 3.0, "{row:?}");
    }
    let z0 = martingale_increment_test(&batch, Process::Z0, &[1.0], opts).unwrap();
    assert!(z0[0].mean < 0.0 && z0[0].z < -3.0, "{:?}", z0[0]);

    let constant = vec![2.5; 100];
    let cond: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let (mean, z, bins) = increment_z_scores(&constant, &constant, &cond, opts).unwrap();
    assert_eq!(mean, 0.0);
    assert_eq!(z, 0.0);
    assert!(bins.iter().all(|b| *b == 0.0));
}

#[test]
fn power_dual_scan_is_minimized_without_orthogonal_exposure() {
    let mut config = log_config(0.05, 20_000, 11);
    let scan = power_dual_scan(&config, &[0.0, 0.5], 0.99).unwrap();
    assert!(scan.rows[0].estimate.mean < scan.rows[1].estimate.mean);
    assert!(scan.rows[1].excess_over_zero.ci_lo > 0.0);

    for p in [0.5, -1.0] {
        config.p = p;
        let scan = power_dual_scan(&config, &[-0.6, -0.2, 0.0, 0.2, 0.6], 0.99).unwrap();
        assert_eq!(scan.argmin_psi, 0.0);
        assert!(scan.zero_is_minimal);
    }
    config.p = 1.0;
    assert!(matches!(power_dual_scan(&config, &[0.0], 0.99), Err(BesselError::Utility(_))));
}

#[test]
fn orthogonal_deflator_starts_at_one_and_keeps_the_mean() {
    let mut config = log_config(0.05, 40_000, 12);
    config.psi = PsiSpec::Tabulated {
        times: vec![0.0, 0.5],
        values: vec![0.4, -0.3],
    };
    let mut batch = simulate_bessel(&config).unwrap();
    minimal_deflator(&mut batch);
    assert!(batch.column(Process::ZPsi, 0).unwrap().iter().all(|z| *z == 1.0));
    let j = batch.time_index(1.0).unwrap();
    let zpsi = mean_estimate(&batch.column(Process::ZPsi, j).unwrap(), 0.99).unwrap();
    let z0 = mean_estimate(&batch.column(Process::Z0, j).unwrap(), 0.99).unwrap();
    let joint = z_quantile(0.99) * (zpsi.std_err.powi(2) + z0.std_err.powi(2)).sqrt();
    assert!((zpsi.mean - z0.mean).abs() <= joint);
}

#[test]
fn same_seed_same_batch_regardless_of_threads() {
    let mut config = log_config(0.1, 3_000, 13);
    config.psi = PsiSpec::Constant { value: 0.3 };
    config.record_every = 3;
    let a = simulate(&config).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| simulate(&config).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.times.last().copied(), Some(1.0));
    config.seed = 14;
    assert_ne!(simulate(&config).unwrap().b, a.b);
}

#[test]
fn config_validation() {
    let ok = log_config(0.1, 10, 0);
    assert!(ok.validate().is_ok());
    let mut c = ok.clone();
    c.alpha = 0.0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.dt = 0.3;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.dt = 2.0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.n_paths = 0;
    assert!(c.validate().is_err());
    let mut c = ok.clone();
    c.rho = 1.5;
    assert!(c.validate().is_err());
    let mut c = ok;
    c.psi = PsiSpec::Tabulated {
        times: vec![0.2],
        values: vec![1.0],
    };
    assert!(c.validate().is_err());
}
