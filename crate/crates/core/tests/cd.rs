use cdconv::cd::{cd_gradient, cd_update, ergodic_average, run_cd, CdConfig};
use cdconv::diagnostics::{lattice_check, mean_se};
use cdconv::expfam::{exact_gradient, mle, sample_from_model, Vector, MLE_DEFAULT_TOL};
use cdconv::oracle::exact_cd_gradient_support;
use cdconv::rng::derive_seed;
use cdconv::{BinaryRbm, ExponentialFamily, GaussianMean, KernelKind, KernelSpec, ParamDomain, Parameter};
use proptest::prelude::*;

fn rbm() -> BinaryRbm {
    BinaryRbm::new(2, 2).unwrap()
}

fn rbm_config(eta: f64, steps: usize, seed: u64) -> CdConfig {
    CdConfig {
        eta,
        m: 1,
        steps,
        theta0: Parameter::zeros(4),
        domain: ParamDomain::cube(4, -3.0, 3.0).unwrap(),
        projection: false,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn rbm_path_stays_on_the_lattice(
        eta in 0.01..0.5f64,
        n in 5usize..200,
        seed in any::<u64>(),
    ) {
        let f = rbm();
        let k = KernelSpec::new(KernelKind::RbmGibbs, f.kind()).unwrap();
        let data = sample_from_model(&f, &Parameter::new(vec![0.5; 4]).unwrap(), n, seed).unwrap();
        let traj = run_cd(&f, &k, &data, &rbm_config(eta, 300, seed)).unwrap();
        let rec = lattice_check(&traj, &f, &data, 1e-9).unwrap();
        prop_assert_eq!(rec.pass, Some(true));
        let lattice = exact_cd_gradient_support(&f, &data, eta);
        for g in &traj.cd_grads {
            prop_assert!(lattice.contains(g.as_slice(), 1e-9));
        }
    }

    #[test]
    fn projection_keeps_the_path_in_the_box(seed in any::<u64>()) {
        let f = rbm();
        let k = KernelSpec::new(KernelKind::RbmGibbs, f.kind()).unwrap();
        let data = sample_from_model(&f, &Parameter::new(vec![2.5; 4]).unwrap(), 50, seed).unwrap();
        let cfg = CdConfig {
            projection: true,
            domain: ParamDomain::cube(4, -1.0, 1.0).unwrap(),
            ..rbm_config(5.0, 50, seed)
        };
        let traj = run_cd(&f, &k, &data, &cfg).unwrap();
        prop_assert!(traj.thetas.iter().all(|t| cfg.domain.contains(t)));
    }

    #[test]
    fn update_is_theta_plus_eta_g(
        t in prop::collection::vec(-2.0..2.0f64, 2),
        g in prop::collection::vec(-2.0..2.0f64, 2),
        eta in 0.0..1.0f64,
    ) {
        let domain = ParamDomain::cube(2, -4.0, 4.0).unwrap();
        let theta = Parameter::new(t.clone()).unwrap();
        let (next, clamped) = cd_update(&theta, &Vector::from_vec(g.clone()), eta, &domain, false).unwrap();
        prop_assert!(!clamped);
        for j in 0..2 {
            prop_assert_eq!(next[j], t[j] + eta * g[j]);
        }
    }
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let f = rbm();
    let k = KernelSpec::new(KernelKind::RbmGibbs, f.kind()).unwrap();
    let data = sample_from_model(&f, &Parameter::new(vec![0.5; 4]).unwrap(), 300, 4).unwrap();
    let a = run_cd(&f, &k, &data, &rbm_config(0.2, 100, 9)).unwrap();
    let b = run_cd(&f, &k, &data, &rbm_config(0.2, 100, 9)).unwrap();
    let c = run_cd(&f, &k, &data, &rbm_config(0.2, 100, 10)).unwrap();
    assert_eq!(a.thetas, b.thetas);
    assert_ne!(a.thetas, c.thetas);
}

#[test]
fn thread_count_does_not_change_results() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::GaussianGibbs, g.kind()).unwrap();
    // More chains than one block so the blocked reduction is exercised.
    let data = sample_from_model(&g, &Parameter::zeros(2), 1500, 2).unwrap();
    let cfg = CdConfig {
        eta: 0.1,
        m: 3,
        steps: 50,
        theta0: Parameter::new(vec![3.0, -3.0]).unwrap(),
        domain: ParamDomain::cube(2, -4.0, 4.0).unwrap(),
        projection: false,
        seed: 17,
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_cd(&g, &k, &data, &cfg).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(one.thetas, four.thetas);
    assert_eq!(one.cd_grads, four.cd_grads);
}

#[test]
fn zero_steps_writes_only_theta0() {
    let f = rbm();
    let k = KernelSpec::new(KernelKind::RbmGibbs, f.kind()).unwrap();
    let data = sample_from_model(&f, &Parameter::new(vec![0.5; 4]).unwrap(), 10, 1).unwrap();
    let traj = run_cd(&f, &k, &data, &rbm_config(0.2, 0, 1)).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "t,theta_1,theta_2,theta_3,theta_4,gcd_1,gcd_2,gcd_3,gcd_4");
    assert!(lines[1].starts_with("0,0.0000000000000000e0,"));
    assert!(lines[1].ends_with(",,,,"));
}

#[test]
fn exact_resampling_gradient_is_unbiased() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::ExactResample, g.kind()).unwrap();
    let data = sample_from_model(&g, &Parameter::zeros(2), 500, 12).unwrap();
    for (i, t) in [[0.0, 0.0], [2.0, -1.0], [-3.5, 3.5]].iter().enumerate() {
        let theta = Parameter::new(t.to_vec()).unwrap();
        let exact = exact_gradient(&g, &data, &theta).unwrap();
        let reps: Vec<Vector> = (0..2000u64)
            .map(|r| cd_gradient(&g, &k, &data, &theta, 1, derive_seed(i as u64, &[r])).unwrap())
            .collect();
        for j in 0..2 {
            let (m, se) = mean_se(&reps.iter().map(|v| v[j]).collect::<Vec<_>>());
            assert!((m - exact[j]).abs() <= 4.0 * se, "point {i} coord {j}: {m} vs {}", exact[j]);
        }
    }
}

#[test]
fn gaussian_cd_settles_near_the_mle() {
    let g = GaussianMean::paper_default();
    let k = KernelSpec::new(KernelKind::GaussianGibbs, g.kind()).unwrap();
    let data = sample_from_model(&g, &Parameter::zeros(2), 500, 7).unwrap();
    let hat = mle(&g, &data, MLE_DEFAULT_TOL).unwrap();
    for start in [[3.0, 3.0], [-3.0, 3.0], [3.0, -3.0], [-3.0, -3.0]] {
        let cfg = CdConfig {
            eta: 0.1,
            m: 3,
            steps: 2000,
            theta0: Parameter::new(start.to_vec()).unwrap(),
            domain: ParamDomain::cube(2, -4.0, 4.0).unwrap(),
            projection: false,
            seed: 3,
        };
        let traj = run_cd(&g, &k, &data, &cfg).unwrap();
        let avg = ergodic_average(&traj, 1000).unwrap();
        assert!(avg.distance(&hat) < 0.05, "{start:?}: {avg:?} vs {hat:?}");
    }
}
