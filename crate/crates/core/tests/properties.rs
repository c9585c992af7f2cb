use gla_icl::baselines::{lms_track, rls_track, StreamSpec};
use gla_icl::constants::{d1_closed, d1_direct, d2_closed, d2_direct, d3_closed, d3_direct};
use gla_icl::gla::{forward_scan, forward_unrolled, predict, predict_reduced, quadratic_form_prediction, stack_forward};
use gla_icl::task_gen::{sample_prompt, weight_cross_covariance};
use gla_icl::theory::{
    closed_form_optimum, flow_field, population_loss_min, population_loss_reduced, population_loss_residual,
    testing_error, training_error,
};
use gla_icl::training::mc_error_estimate;
use gla_icl::{constant_set, GlaParams, ReducedParams, TaskConfig, TestConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spd(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |i, j| entries[(i * d + j) % entries.len()]);
    let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
    (&m + m.transpose()) * 0.5
}

fn matrix(d: usize, entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| entries[(i * d + j) % entries.len()])
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_covariance_is_symmetric(gamma in 0.1f64..1.2, se2 in 0.0f64..2.0, a in 0usize..40, b in 0usize..40) {
        let cfg = TaskConfig::isotropic(2, 5, gamma, 1.0, se2).unwrap();
        prop_assert_eq!(weight_cross_covariance(&cfg, a, b), weight_cross_covariance(&cfg, b, a));
    }

    #[test]
    fn closed_forms_match_direct_sums(
        lam in 0.2f64..1.0,
        gamma in 0.2f64..1.0,
        n in 1usize..120,
        se2 in 0.0f64..1.5,
    ) {
        let cfg = TaskConfig::isotropic(1, n, gamma, 1.0, se2).unwrap();
        prop_assert!(rel(d1_closed(&cfg, lam), d1_direct(&cfg, lam)) < 1e-8);
        prop_assert!(rel(d2_closed(&cfg, lam), d2_direct(&cfg, lam)) < 1e-8);
        prop_assert!(rel(d3_closed(&cfg, lam), d3_direct(&cfg, lam)) < 1e-8);
    }

    #[test]
    fn d4_ignores_lambda(gamma in 0.1f64..0.99, l1 in 0.1f64..1.0, l2 in 0.1f64..1.0) {
        let cfg = TaskConfig::isotropic(2, 20, gamma, 1.0, 0.1).unwrap();
        prop_assert_eq!(constant_set(&cfg, l1).unwrap().d4, constant_set(&cfg, l2).unwrap().d4);
    }

    #[test]
    fn scan_unrolled_and_predict_agree(
        entries in prop::collection::vec(-1.0f64..1.0, 32),
        lam in 0.3f64..1.0,
        seed in any::<u64>(),
    ) {
        let cfg = TaskConfig::isotropic(2, 7, 0.9, 1.0, 0.1).unwrap();
        let p = sample_prompt(&cfg, seed);
        let params = GlaParams::new(matrix(3, &entries[..9]), matrix(3, &entries[9..18]), lam).unwrap();
        let scan = forward_scan(&params, &p).unwrap();
        let unrolled = forward_unrolled(&params, &p).unwrap();
        let scale = scan.amax().max(1.0);
        prop_assert!((&scan - &unrolled).amax() <= 1e-12 * scale);
        let yhat = predict(&params, &p).unwrap();
        prop_assert!((yhat - scan[(2, 7)]).abs() <= 1e-12 * scale);
        prop_assert!((stack_forward(std::slice::from_ref(&params), &p).unwrap() - yhat).abs() <= 1e-12 * scale);
    }

    #[test]
    fn reduced_predictions_agree(entries in prop::collection::vec(-1.0f64..1.0, 9), u in -2.0f64..2.0, lam in 0.3f64..1.0, seed in any::<u64>()) {
        let cfg = TaskConfig::isotropic(3, 6, 0.95, 1.0, 0.05).unwrap();
        let p = sample_prompt(&cfg, seed);
        let rp = ReducedParams::new(matrix(3, &entries), u).unwrap();
        let a = predict_reduced(&rp, &p, lam);
        let b = quadratic_form_prediction(&rp, &p, lam);
        let c = predict(&rp.embed(lam), &p).unwrap();
        let scale = a.abs().max(1.0);
        prop_assert!((a - b).abs() <= 1e-10 * scale && (a - c).abs() <= 1e-10 * scale);
    }

    #[test]
    fn scale_bilinearity(entries in prop::collection::vec(-1.0f64..1.0, 32), c in 0.1f64..10.0, seed in any::<u64>()) {
        let cfg = TaskConfig::isotropic(2, 5, 0.9, 1.0, 0.1).unwrap();
        let p = sample_prompt(&cfg, seed);
        let base = GlaParams::new(matrix(3, &entries[..9]), matrix(3, &entries[9..18]), 0.8).unwrap();
        let scaled = GlaParams::new(&base.w_v * c, &base.w_kq / c, 0.8).unwrap();
        let (a, b) = (predict(&base, &p).unwrap(), predict(&scaled, &p).unwrap());
        prop_assert!(rel(a, b) <= 1e-12 || (a - b).abs() < 1e-14);
    }

    #[test]
    fn residual_identity_and_stationarity(entries in prop::collection::vec(-1.0f64..1.0, 16), u in -2.0f64..2.0, lam in 0.3f64..1.0, gamma in 0.5f64..0.99) {
        let cfg = TaskConfig::new(8, gamma, 1.0, 0.05, spd(3, &entries)).unwrap();
        let cs = constant_set(&cfg, lam).unwrap();
        let rp = ReducedParams::new(matrix(3, &entries[7..]), u).unwrap();
        let lhs = population_loss_reduced(&rp, &cs) - population_loss_min(&cs).unwrap();
        let rhs = population_loss_residual(&rp, &cs).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(population_loss_min(&cs).unwrap().abs()));
        let opt = closed_form_optimum(&cs).unwrap();
        let (du, ds) = flow_field(&opt, &cs);
        let l2 = gla_icl::linalg::spectral_norm_sym(cs.lambda_cov()).powi(2);
        prop_assert!(du.norm().max(ds.abs()) <= 1e-9 * l2 * cs.d1);
    }

    #[test]
    fn train_test_consistency(lam in 0.3f64..1.0, gamma in 0.5f64..0.99, n in 2usize..60) {
        let cfg = TaskConfig::isotropic(3, n, gamma, 1.0, 0.05).unwrap();
        let cs = constant_set(&cfg, lam).unwrap();
        let test = TestConfig::from_task(cfg.clone(), lam).unwrap();
        let tr = training_error(&cs).unwrap();
        prop_assert!((testing_error(&cs, &test).unwrap() - tr).abs() <= 1e-14 * tr.max(1.0));
        prop_assert!(tr >= 0.0 && tr <= cs.d4 * cs.lambda_cov().trace() * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn filters_are_reproducible_and_nonnegative(gamma in 0.5f64..1.0, seed in any::<u64>()) {
        let task = TaskConfig::isotropic(3, 1, gamma, 1.0, 0.05).unwrap();
        let spec = StreamSpec::new(&task, 60).unwrap();
        let a = lms_track(&spec, 0.02, 8, seed).unwrap();
        prop_assert_eq!(&a, &lms_track(&spec, 0.02, 8, seed).unwrap());
        prop_assert!(a.per_step_sq_error.iter().all(|&e| e >= 0.0));
        let r = rls_track(&spec, 0.98, 1e-2, 8, seed).unwrap();
        prop_assert!(r.per_step_sq_error.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn causality_of_filters(seed in any::<u64>()) {
        // A longer stream shares its prefix errors with a shorter one.
        let task = TaskConfig::isotropic(3, 1, 0.9, 1.0, 0.05).unwrap();
        let short = lms_track(&StreamSpec::new(&task, 30).unwrap(), 0.02, 4, seed).unwrap();
        let long = lms_track(&StreamSpec::new(&task, 50).unwrap(), 0.02, 4, seed).unwrap();
        prop_assert_eq!(&short.per_step_sq_error[..], &long.per_step_sq_error[..30]);
    }
}

#[test]
fn monte_carlo_is_independent_of_thread_count() {
    let cfg = TaskConfig::isotropic(3, 10, 0.9, 1.0, 0.05).unwrap();
    let rp = closed_form_optimum(&constant_set(&cfg, 0.8).unwrap()).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mc_error_estimate(&rp, &cfg, 0.8, 3000, 17).unwrap())
    };
    assert_eq!(run(1), run(4));
}
