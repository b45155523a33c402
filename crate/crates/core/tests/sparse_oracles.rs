use hfsem::lisrel::{Bounds, ThetaVector};
use hfsem::sparse::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

mod common;
use common::{grid_argmin, lasso_objective as objective};

/// The closed form must attain the grid minimum to 1e-10 in objective value.
/// Argmin agreement is limited by the flat minimum (an argmin error `e` moves
/// the objective by `e²`), so it is checked at 1e-6.
fn agrees(a: f64, k: f64, lo: f64, hi: f64) -> Result<(), String> {
    let closed = one(a, k, lo, hi);
    let grid = grid_argmin(a, k, lo, hi);
    let (fc, fg) = (objective(a, k, closed), objective(a, k, grid));
    if (fc - fg).abs() > 1e-10 || (closed - grid).abs() > 1e-6 || closed < lo || closed > hi {
        return Err(format!("a={a} κ={k} [{lo},{hi}]: {closed} ({fc}) vs {grid} ({fg})"));
    }
    Ok(())
}

fn one(a: f64, kappa: f64, lo: f64, hi: f64) -> f64 {
    lsa_estimate(&ThetaVector(vec![a]), &[kappa], &[Bounds { lo, hi }]).theta.0[0]
}

#[test]
fn soft_threshold_matches_grid_search() {
    let cases = [
        (1.7, 0.4, -100.0, 100.0),
        (-0.03, 10.0, -100.0, 100.0),
        (0.05, 0.08, -100.0, 100.0),
        (-2.5, 1.0, -100.0, 100.0),
        (0.3, 2.0, 0.1, 100.0),
        (3.0, 0.5, -1.0, 2.0),
        (-0.2, 0.1, -100.0, -0.5),
    ];
    for (a, k, lo, hi) in cases {
        agrees(a, k, lo, hi).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_threshold_matches_grid_search_random(a in -5.0f64..5.0, k in 0.0f64..6.0) {
        prop_assert!(agrees(a, k, -10.0, 10.0).is_ok(), "{:?}", agrees(a, k, -10.0, 10.0));
    }

    #[test]
    fn larger_weights_shrink_more(
        theta in proptest::collection::vec(-3.0f64..3.0, 12),
        k in proptest::collection::vec(0.0f64..2.0, 12),
        extra in proptest::collection::vec(0.0f64..2.0, 12),
    ) {
        let bounds = vec![Bounds { lo: -100.0, hi: 100.0 }; 12];
        let t = ThetaVector(theta.clone());
        let k2: Vec<f64> = k.iter().zip(&extra).map(|(a, b)| a + b).collect();
        let a = lsa_estimate(&t, &k, &bounds).theta;
        let b = lsa_estimate(&t, &k2, &bounds).theta;
        for j in 0..12 {
            prop_assert!(b.0[j].abs() <= a.0[j].abs());
            prop_assert!(a.0[j] == 0.0 || a.0[j].signum() == theta[j].signum());
            prop_assert!(a.0[j].abs() <= theta[j].abs());
        }
        let sa = support(&a);
        prop_assert!(support(&b).iter().all(|j| sa.contains(j)));
    }

    #[test]
    fn plsa_satisfies_optimality_conditions(
        theta in proptest::collection::vec(-3.0f64..3.0, 6),
        k in proptest::collection::vec(0.0f64..3.0, 6),
        a in proptest::collection::vec(-1.0f64..1.0, 36),
    ) {
        let q = 6;
        let m = DMatrix::from_row_slice(q, q, &a);
        let g = &m * m.transpose() + DMatrix::identity(q, q) * 0.5;
        let bounds = vec![Bounds { lo: -100.0, hi: 100.0 }; q];
        let th = ThetaVector(theta.clone());
        let out = plsa_estimate(&th, &k, &g, &bounds);
        prop_assert!(out.converged && !out.identity_fallback);
        // subgradient of (θ−θ̂)ᵀG(θ−θ̂) + Σκ|θ|
        let diff = DMatrix::from_fn(q, 1, |i, _| out.theta.0[i] - theta[i]);
        let grad = &g * diff * 2.0;
        for j in 0..q {
            let v = out.theta.0[j];
            if v == 0.0 {
                prop_assert!(grad[(j, 0)].abs() <= k[j] + 1e-7, "j {} grad {} κ {}", j, grad[(j, 0)], k[j]);
            } else {
                prop_assert!((grad[(j, 0)] + k[j] * v.signum()).abs() < 1e-7, "j {}", j);
            }
        }
    }

    #[test]
    fn plsa_with_identity_is_lsa(
        theta in proptest::collection::vec(-3.0f64..3.0, 8),
        k in proptest::collection::vec(0.0f64..3.0, 8),
    ) {
        let bounds = vec![Bounds { lo: -100.0, hi: 100.0 }; 8];
        let th = ThetaVector(theta);
        let p = plsa_estimate(&th, &k, &DMatrix::identity(8, 8), &bounds);
        prop_assert_eq!(p.theta, lsa_estimate(&th, &k, &bounds).theta);
    }
}

#[test]
fn weights_follow_the_screen() {
    let cfg = PenaltyConfig { lambda1: 0.01, lambda2: 10.0, gamma: 4.0, delta: 0.1, exclude_positive_lower: true };
    let k = adaptive_weights(&ThetaVector(vec![2.0, -0.5, 0.05, 0.1]), &cfg);
    assert!((k[0] - 0.01 / 16.0).abs() < 1e-15);
    assert!((k[1] - 0.01 * 16.0).abs() < 1e-12);
    assert_eq!(k[2], 10.0);
    assert!((k[3] - 0.01 * 1e4).abs() < 1e-9);
}
