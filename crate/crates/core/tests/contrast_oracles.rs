use hfsem::fixtures;
use hfsem::lisrel::*;
use hfsem::matrix::*;
use hfsem::qmle::*;
use hfsem::realized::RealizedCov;
use hfsem::sparse::{default_g, po_refit, support};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::quadratic_form_by_quadrature;

fn model(name: &str) -> (ParameterMask, ThetaVector) {
    let cfg: ModelConfig = serde_json::from_str(fixtures::builtin(name).unwrap()).unwrap();
    (cfg.mask().unwrap(), cfg.theta_true().unwrap_or_else(|| cfg.theta_init()))
}

fn rc(q: DMatrix<f64>, n: usize) -> RealizedCov {
    RealizedCov::from_matrix(SymMatrix::new(q).unwrap(), n, n as f64 * 1e-3).unwrap()
}

/// PD matrix near `sigma`: `Σ + ε(AAᵀ − tr/p)` kept PD.
fn perturbed(sigma: &DMatrix<f64>, eps: f64, seed: u64) -> DMatrix<f64> {
    let p = sigma.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    let mut q = sigma + (&a * a.transpose()) * eps;
    for i in 0..p {
        q[(i, i)] += eps;
    }
    q
}

fn three_variable_mask() -> ParameterMask {
    MaskBuilder::new("tiny", ModelDims { p1: 2, p2: 1, k1: 1, k2: 1 })
        .fixed(MatrixKind::Lx1, 0, 0, 1.0).unwrap()
        .free(MatrixKind::Lx1, 1, 0, -10.0, 10.0).unwrap()
        .fixed(MatrixKind::Lx2, 0, 0, 1.0).unwrap()
        .free(MatrixKind::Gamma, 0, 0, -10.0, 10.0).unwrap()
        .free(MatrixKind::Sxx, 0, 0, 0.1, 10.0).unwrap()
        .free(MatrixKind::Sdd, 0, 0, 0.1, 10.0).unwrap()
        .free(MatrixKind::Sdd, 1, 1, 0.1, 10.0).unwrap()
        .free(MatrixKind::See, 0, 0, 0.1, 10.0).unwrap()
        .build()
        .unwrap()
}

#[test]
fn contrast_equals_quadrature_quadratic_form() {
    let mask = three_variable_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..6 {
        let theta = ThetaVector(vec![
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
        ]);
        let sigma = build_sigma(&mask, &theta).unwrap().into_matrix();
        let q = perturbed(&sigma, 0.3, 100 + case);
        let f = contrast_f(&rc(q.clone(), 1000), &mask, &theta).unwrap().value;
        let oracle = quadratic_form_by_quadrature(&q, &sigma, 48);
        assert!((f - oracle).abs() < 1e-8 * f.max(1.0), "case {case}: {f} vs {oracle}");
    }
}

#[test]
fn contrast_vanishes_at_the_truth() {
    for name in ["sec5_2_model", "sec6_2_model"] {
        let (mask, theta) = model(name);
        let sigma = build_sigma(&mask, &theta).unwrap().into_matrix();
        let q = rc(sigma, 10_000);
        assert!(contrast_f(&q, &mask, &theta).unwrap().value.abs() < 1e-12);
        let g = contrast_gradient(&q, &mask, &theta).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{name}");
    }
}

fn max_fd_gradient_error(q: &RealizedCov, mask: &ParameterMask, theta: &ThetaVector) -> f64 {
    let g = contrast_gradient(q, mask, theta).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..mask.q() {
        let h = 1e-6 * (1.0 + theta.0[j].abs());
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up.0[j] += h;
        dn.0[j] -= h;
        let fd = (contrast_f(q, mask, &up).unwrap().value - contrast_f(q, mask, &dn).unwrap().value) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs());
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for (name, seed) in [("sec5_2_model", 1), ("sec6_2_model", 2), ("sec6_3_model", 3)] {
        let (mask, theta) = model(name);
        let sys: hfsem::sde::SystemConfig = serde_json::from_str(fixtures::builtin(if name.starts_with("sec5") {
            "sec5_system"
        } else {
            "sec6_system"
        })
        .unwrap())
        .unwrap();
        let q = rc(perturbed(sys.build().unwrap().sigma0().as_matrix(), 0.05, seed), 10_000);
        let err = max_fd_gradient_error(&q, &mask, &theta);
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn identity_weight_gradient_matches_finite_differences() {
    let (mask, theta) = model("sec5_2_model");
    // rank-2 Q forces the identity-weighted form
    let v = DMatrix::from_fn(6, 2, |i, j| (i + 2 * j) as f64 * 0.3 + 1.0);
    let q = rc(&v * v.transpose(), 10_000);
    let cv = contrast_f(&q, &mask, &theta).unwrap();
    assert!(cv.identity_weight);
    assert!(max_fd_gradient_error(&q, &mask, &theta) < 1e-6 * cv.value.max(1.0));
}

#[test]
fn jacobian_matches_finite_differences() {
    for name in ["sec5_2_model", "sec6_2_model", "sec6_3_model"] {
        let (mask, theta) = model(name);
        let delta = sigma_jacobian(&mask, &theta).unwrap().delta;
        assert_eq!(delta.shape(), (vech_len(mask.p()), mask.q()));
        let mut worst: f64 = 0.0;
        for j in 0..mask.q() {
            let h = 1e-6 * (1.0 + theta.0[j].abs());
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up.0[j] += h;
            dn.0[j] -= h;
            let su = vech(&build_sigma(&mask, &up).unwrap()).into_values();
            let sd = vech(&build_sigma(&mask, &dn).unwrap()).into_values();
            for r in 0..su.len() {
                worst = worst.max(((su[r] - sd[r]) / (2.0 * h) - delta[(r, j)]).abs());
            }
        }
        assert!(worst < 1e-6, "{name}: {worst}");
    }
}

#[test]
fn jacobian_has_full_column_rank_for_the_identified_models() {
    for (name, q) in [("sec5_2_model", 15), ("sec6_2_model", 56)] {
        let (mask, theta) = model(name);
        let rep = check_local_identifiability(&mask, &theta).unwrap();
        assert_eq!((rep.rank, rep.q, rep.pass), (q, q, true), "{name}");
    }
}

#[test]
fn standard_errors_at_the_truth() {
    let (mask, theta) = model("sec5_2_model");
    let se = standard_errors_at(&mask, &theta, 10_000).unwrap();
    assert!((se[0] - 0.026).abs() < 0.0005, "{}", se[0]);
    assert!((se[13] - 0.343).abs() < 0.002, "{}", se[13]);
}

#[test]
fn numerical_hessian_matches_information() {
    for name in ["sec5_2_model", "sec6_2_model"] {
        let (mask, theta) = model(name);
        let sigma = build_sigma(&mask, &theta).unwrap().into_matrix();
        let q = rc(sigma, 10_000);
        let g = default_g(&q, &mask, &theta).unwrap();
        let info = information_matrix(&mask, &theta).unwrap();
        let scale = info.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = (&g - &info).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-5 * scale, "{name}: {err} vs scale {scale}");
    }
}

#[test]
fn fit_at_population_covariance_recovers_theta() {
    for name in ["sec5_2_model", "sec6_2_model"] {
        let (mask, theta) = model(name);
        let q = rc(build_sigma(&mask, &theta).unwrap().into_matrix(), 10_000);
        let at_truth = fit(&q, &mask, &theta).unwrap();
        assert!(at_truth.converged);
        assert_eq!(at_truth.iterations, 0);
        assert!(at_truth.contrast.abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut start = theta.0.clone();
        for (v, b) in start.iter_mut().zip(mask.bounds()) {
            *v = b.clamp(*v + 0.05 * v.abs().max(1.0) * rng.random_range(-1.0..1.0));
        }
        let r = fit(&q, &mask, &ThetaVector(start)).unwrap();
        assert!(r.converged, "{name}");
        let err = r.theta_hat.0.iter().zip(&theta.0).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn statistic_is_twice_the_loglik_ratio() {
    let (mask, theta) = model("sec5_2_model");
    let sigma = build_sigma(&mask, &theta).unwrap().into_matrix();
    let q = rc(perturbed(&sigma, 0.02, 5), 10_000);
    let r = fit(&q, &mask, &theta).unwrap();
    assert!(r.converged);
    let t = q.n() as f64 * r.contrast;
    let lr = 2.0 * (saturated_loglik(&q).unwrap() - r.loglik.unwrap());
    assert!((t - lr).abs() < 1e-6 * t.max(1.0), "{t} vs {lr}");
}

#[test]
fn refit_on_true_support_is_exact() {
    let (mask, theta) = model("sec6_2_model");
    let q = rc(build_sigma(&mask, &theta).unwrap().into_matrix(), 10_000);
    let active = support(&theta);
    assert_eq!(active.len(), 33);
    let mut start = theta.clone();
    for (j, v) in start.0.iter_mut().enumerate() {
        *v = mask.bounds()[j].clamp(*v * 1.02 + 0.01);
    }
    let po = po_refit(&q, &mask, &active, &start, &FitOptions::default()).unwrap();
    assert!(po.fit.converged);
    assert_eq!(po.reduced_mask.q(), 33);
    let err = po.theta_full.0.iter().zip(&theta.0).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(err < 1e-6, "{err}");
    assert!(po.fit.contrast < 1e-12);
}

fn theta_in_box(mask: &ParameterMask, u: &[f64]) -> ThetaVector {
    ThetaVector(
        mask.bounds()
            .iter()
            .zip(u)
            .map(|(b, t)| b.lo.max(-5.0) + t * (b.hi.min(5.0) - b.lo.max(-5.0)))
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_inverts_unpack(u in proptest::collection::vec(0.0f64..1.0, 56)) {
        let (mask, _) = model("sec6_2_model");
        let theta = theta_in_box(&mask, &u);
        let m = mask.unpack(&theta).unwrap();
        prop_assert_eq!(mask.pack(&m).unwrap(), theta);
        prop_assert!(m.b.diagonal().iter().all(|v| *v == 0.0));
        prop_assert_eq!(&m.sxx, &m.sxx.transpose());
    }

    #[test]
    fn contrast_is_a_discrepancy(u in proptest::collection::vec(0.0f64..1.0, 15), seed in 0u64..1000) {
        let (mask, theta0) = model("sec5_2_model");
        let q = rc(perturbed(&build_sigma(&mask, &theta0).unwrap().into_matrix(), 0.1, seed), 10_000);
        let theta = theta_in_box(&mask, &u);
        let cv = contrast_f(&q, &mask, &theta).unwrap();
        prop_assert!(!cv.sigma_pd || cv.value >= -1e-12);
    }
}
