use cdconv::cd::{run_cd, CdConfig};
use cdconv::diagnostics::{
    self as diag, beta_schedule, drift_constants, flag, CheckRecord, DiagnosticsReport, DriftInputs,
};
use cdconv::expfam::{mle, sample_from_model, MLE_DEFAULT_TOL};
use cdconv::{BinaryRbm, ExponentialFamily, GaussianMean, KernelKind, KernelSpec, ParamDomain, Parameter};

fn gaussian_inputs(alpha: f64, eta: f64) -> DriftInputs {
    DriftInputs {
        d: 2,
        lambda_min: 0.5,
        lambda_max: 1.5,
        c: 6.0,
        l: 9.17e10,
        alpha,
        m: 3,
        eta,
        n: 500,
        gamma1: 0.1,
    }
}

/// Independent transcription of the drift constants.
fn reference(i: &DriftInputs) -> (f64, f64, f64, f64) {
    let kappa = if i.alpha == 0.0 { 0.0 } else { (i.d as f64).sqrt() * i.c * i.l * i.alpha.powi(i.m as i32) };
    let (l1, l2, eta, n) = (i.lambda_min, i.lambda_max, i.eta, i.n as f64);
    let a = l1 * l1 - kappa * l2 - eta * l2 / 2.0 * (l2 + kappa) * (l2 + kappa);
    let b = l2 * (1.0 + kappa) * (1.0 + eta * l2 + eta * kappa) * n.powf(-0.5 + i.gamma1);
    let c = eta * l2 / 2.0
        * (i.d as f64 * i.c * i.c * n.powf(-2.0 * i.gamma1) + (1.0 + kappa) * (1.0 + kappa))
        * n.powf(-1.0 + 2.0 * i.gamma1);
    let r = (b + (b * b + 4.0 * a * c).sqrt()) / (2.0 * a);
    (a, b, c, r)
}

#[test]
fn gaussian_constants_with_alpha_zero_match_frozen_values() {
    let k = drift_constants(gaussian_inputs(0.0, 0.1)).unwrap();
    let (a, b, c, r) = reference(&k.inputs);
    for (got, want) in [(k.a, a), (k.b_n, b), (k.c_n, c), (k.r_n.unwrap(), r)] {
        assert!((got - want).abs() <= 1e-12 * want.abs());
    }
    // Frozen from the reference above.
    assert!((k.a - 0.08125).abs() < 1e-12);
    assert!((k.b_n - 0.143_62).abs() < 5e-6);
    assert!((k.c_n - 0.011_320).abs() < 5e-7);
    assert!((k.r_n.unwrap() - 1.843_16).abs() < 5e-6);
    // With α = 0, a = λ_min² − ηλ_max³/2 exactly.
    assert_eq!(k.a, 0.25 - 0.1 * 1.5 * 1.5 * 1.5 / 2.0);
}

#[test]
fn gibbs_alpha_breaks_the_gaussian_condition() {
    let k = drift_constants(gaussian_inputs(0.2498, 0.1)).unwrap();
    assert!(k.a < -1e18);
    assert!(!k.condition_holds());
    let rec = k.record();
    assert_eq!(rec.pass, None);
    assert!(rec.flags.iter().any(|f| f == flag::CONDITION_VIOLATED));
}

#[test]
fn beta_schedule_at_the_experiment_sizes() {
    assert_eq!(beta_schedule(50, 0.15), 2.0);
    assert!((beta_schedule(500, 0.15) - 500f64.powf(0.15)).abs() < 1e-15);
    assert!((beta_schedule(500, 0.15) - 2.540_07).abs() < 1e-5);
}

#[test]
fn huge_eta_skips_drift_and_hitting_checks() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::ExactResample, g.kind()).unwrap();
    let data = sample_from_model(&g, &Parameter::zeros(2), 500, 1).unwrap();
    let hat = mle(&g, &data, MLE_DEFAULT_TOL).unwrap();
    let constants = drift_constants(gaussian_inputs(0.0, 100.0)).unwrap();
    assert!(constants.a <= 0.0);
    let cfg = CdConfig {
        eta: 100.0,
        m: 3,
        steps: 10,
        theta0: Parameter::new(vec![3.0, 3.0]).unwrap(),
        domain: ParamDomain::cube(2, -4.0, 4.0).unwrap(),
        projection: false,
        seed: 1,
    };
    let drift = diag::drift_check(&g, &k, &data, &hat, &cfg.theta0, &cfg, &constants, 2.5, 1000, 1).unwrap();
    assert_eq!(drift.pass, None);
    assert!(drift.flags.iter().any(|f| f == flag::SKIPPED));
    let traj = run_cd(&g, &k, &data, &cfg).unwrap();
    let conc = diag::concentration_report(&traj, &hat, &constants, 2.5, 5).unwrap();
    assert!(conc.flags.iter().any(|f| f == flag::NOT_COMPUTED));
}

#[test]
fn exact_resample_bias_is_within_noise_and_empirical_process_vanishes() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::ExactResample, g.kind()).unwrap();
    let data = sample_from_model(&g, &Parameter::zeros(2), 500, 3).unwrap();
    let hat = mle(&g, &data, MLE_DEFAULT_TOL).unwrap();
    let constants = drift_constants(gaussian_inputs(0.0, 0.1)).unwrap();
    let theta = Parameter::new(vec![1.0, -2.0]).unwrap();
    let rec = diag::bias_report(&g, &k, &data, &theta, &hat, 3, 2000, &constants, 5).unwrap();
    assert!(rec.estimate.unwrap() <= 4.0 * 2f64.sqrt() * rec.std_error.unwrap());
    assert_eq!(rec.pass, Some(true));
    assert!(rec.flags.iter().any(|f| f == flag::UNBOUNDED_STATISTIC));

    let grid = ParamDomain::cube(2, -4.0, 4.0).unwrap().grid(5);
    let dev = diag::constraint_deviations(&g, &k, &data, &Parameter::zeros(2), 3, &grid).unwrap();
    assert_eq!(dev.empirical_process, Some(0.0));
}

#[test]
fn continuous_gibbs_constraint_three_is_not_computed() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::GaussianGibbs, g.kind()).unwrap();
    let data = sample_from_model(&g, &Parameter::zeros(2), 100, 3).unwrap();
    let dev = diag::constraint_deviations(&g, &k, &data, &Parameter::zeros(2), 3, &[]).unwrap();
    let recs = dev.records(100, 0.1);
    assert_eq!(recs[2].pass, None);
    assert!(recs[2].flags.iter().any(|f| f == flag::NOT_COMPUTED));
}

#[test]
fn rbm_variance_estimate_matches_exact_trace() {
    let f = BinaryRbm::new(2, 2).unwrap();
    let k = KernelSpec::new(KernelKind::RbmGibbs, f.kind()).unwrap();
    let data = sample_from_model(&f, &Parameter::new(vec![0.5; 4]).unwrap(), 200, 8).unwrap();
    let theta = Parameter::new(vec![-1.0, 0.5, 2.0, 0.0]).unwrap();
    let rec = diag::variance_report(&f, &k, &data, &theta, 3, 4000, 2).unwrap();
    let exact = rec.inputs["exact_trace"].as_f64().unwrap();
    assert!((rec.estimate.unwrap() - exact).abs() <= 4.0 * rec.std_error.unwrap());
    assert!(exact <= 4.0 / 200.0);
}

#[test]
fn rbm_constraint_three_is_exact_and_shrinks_with_n() {
    let f = BinaryRbm::new(2, 2).unwrap();
    let k = KernelSpec::new(KernelKind::RbmGibbs, f.kind()).unwrap();
    let star = Parameter::new(vec![0.5; 4]).unwrap();
    let grid = ParamDomain::cube(4, -3.0, 3.0).unwrap().grid(5);
    let sup = |n: usize| {
        let data = sample_from_model(&f, &star, n, 31).unwrap();
        diag::constraint_deviations(&f, &k, &data, &star, 3, &grid).unwrap().empirical_process.unwrap()
    };
    let (small, large) = (sup(100), sup(10_000));
    assert!(small.is_finite() && large < small, "{small} {large}");
}

#[test]
fn mcmc_bias_vanishes_for_exact_resampling() {
    let f = BinaryRbm::new(2, 2).unwrap();
    let k = KernelSpec::new(KernelKind::ExactResample, f.kind()).unwrap();
    let theta = Parameter::new(vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let c = diag::mcmc_bias_component(&f, &k, &theta, &Parameter::new(vec![0.5; 4]).unwrap(), 1).unwrap();
    assert!(c.norm() < 1e-12);
}

#[test]
fn hitting_time_from_outside_meets_the_bound() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::ExactResample, g.kind()).unwrap();
    let data = sample_from_model(&g, &Parameter::zeros(2), 500, 1).unwrap();
    let hat = mle(&g, &data, MLE_DEFAULT_TOL).unwrap();
    let constants = drift_constants(gaussian_inputs(0.0, 0.1)).unwrap();
    let beta = beta_schedule(500, 0.15);
    let ball = constants.ball(hat.clone(), beta).unwrap();
    let cfg = CdConfig {
        eta: 0.1,
        m: 3,
        steps: 1,
        theta0: Parameter::zeros(2),
        domain: ParamDomain::cube(2, -4.0, 4.0).unwrap(),
        projection: false,
        seed: 0,
    };
    let starts = [Parameter::new(vec![10.0, 10.0]).unwrap(), Parameter::new(vec![0.0, 0.5]).unwrap()];
    let recs = diag::hitting_time_check(&g, &k, &data, &hat, &cfg, &constants, &ball, &starts, 100, 10_000, 4).unwrap();
    assert_eq!(recs[0].pass, Some(true));
    assert!(recs[0].estimate.unwrap() > 1.0);
    assert!(recs[1].flags.iter().any(|f| f == flag::START_INSIDE_BALL));
    assert!(recs[1].flags.iter().any(|f| f == flag::ESTIMATED_BOUND));
}

#[test]
fn sweep_refuses_too_few_seeds() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::GaussianGibbs, g.kind()).unwrap();
    let cfg = CdConfig {
        eta: 0.1,
        m: 3,
        steps: 10,
        theta0: Parameter::zeros(2),
        domain: ParamDomain::cube(2, -4.0, 4.0).unwrap(),
        projection: false,
        seed: 0,
    };
    assert!(diag::ergodic_sweep(&g, &k, &Parameter::zeros(2), &[50, 100], &cfg, 1, 0).is_err());
    assert!(diag::ergodic_sweep(&g, &k, &Parameter::zeros(2), &[100, 50], &cfg, 20, 0).is_err());
}

#[test]
fn sample_mean_and_mle_deviation_scale_like_root_n() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::ExactResample, g.kind()).unwrap();
    let star = Parameter::zeros(2);
    let medians = |n: usize| {
        let (mut a, mut b): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        for s in 0..400 {
            let data = sample_from_model(&g, &star, n, 1000 + s).unwrap();
            let dev = diag::constraint_deviations(&g, &k, &data, &star, 1, &[]).unwrap();
            a.push(dev.sample_mean);
            b.push(dev.mle);
        }
        (diag::median(&a), diag::median(&b))
    };
    let (m100, m400) = (medians(100), medians(400));
    for ratio in [m100.0 / m400.0, m100.1 / m400.1] {
        assert!((1.5..=2.5).contains(&ratio), "{ratio}");
    }
}

#[test]
fn report_json_keeps_sorted_inputs_and_csv_schema() {
    let mut report = DiagnosticsReport::default();
    report.push(CheckRecord::new("bias").input("zeta", 1.0).input("alpha", 2.0).flag(flag::SKIPPED));
    let json = report.to_json();
    assert!(json.find("\"alpha\"").unwrap() < json.find("\"zeta\"").unwrap());
    assert!(json.ends_with('\n'));
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.lines().next().unwrap().starts_with("check,"));
}
