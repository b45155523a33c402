use hfsem::fixtures;
use hfsem::realized::{clt_zscores, realized_cov};
use hfsem::sde::*;
use proptest::prelude::*;

fn system(name: &str) -> DiffusionSystem {
    let cfg: SystemConfig = serde_json::from_str(fixtures::builtin(name).unwrap()).unwrap();
    cfg.build().unwrap()
}

fn path(rows: usize, p: usize, vals: &[f64]) -> PathSample {
    let grid = SamplingGrid::new(rows - 1, 0.01).unwrap();
    PathSample::from_rows(grid, p, vals[..rows * p].to_vec()).unwrap()
}

/// `Σ ΔXΔXᵀ / T` accumulated naively.
fn naive(path: &PathSample) -> Vec<Vec<f64>> {
    let p = path.p;
    let mut q = vec![vec![0.0; p]; p];
    for i in 1..path.rows() {
        for a in 0..p {
            for b in 0..p {
                q[a][b] += (path.row(i)[a] - path.row(i - 1)[a]) * (path.row(i)[b] - path.row(i - 1)[b]);
            }
        }
    }
    let t = path.grid.horizon();
    q.iter().map(|r| r.iter().map(|v| v / t).collect()).collect()
}

proptest! {
    #[test]
    fn matches_naive_sum_and_is_psd(vals in proptest::collection::vec(-10.0f64..10.0, 3 * 40)) {
        let x = path(40, 3, &vals);
        let q = realized_cov(&x).unwrap();
        let r = naive(&x);
        for a in 0..3 {
            for b in 0..3 {
                prop_assert!((q.q().get(a, b) - r[a][b]).abs() < 1e-10 * (1.0 + r[a][b].abs()));
            }
        }
        prop_assert!(q.q().min_eigenvalue() > -1e-10);
        prop_assert_eq!(q.n(), 39);
    }

    #[test]
    fn invariant_to_level_shifts(vals in proptest::collection::vec(-10.0f64..10.0, 2 * 30), shift in proptest::collection::vec(-1e3f64..1e3, 2)) {
        let x = path(30, 2, &vals);
        let shifted: Vec<f64> = vals[..60].iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect();
        let y = path(30, 2, &shifted);
        let (a, b) = (realized_cov(&x).unwrap(), realized_cov(&y).unwrap());
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((a.q().get(i, j) - b.q().get(i, j)).abs() < 1e-7 * (1.0 + a.q().get(i, j).abs()));
            }
        }
    }

    #[test]
    fn scales_quadratically(vals in proptest::collection::vec(-10.0f64..10.0, 2 * 30), c in -5.0f64..5.0) {
        let x = path(30, 2, &vals);
        let scaled: Vec<f64> = vals[..60].iter().map(|v| v * c).collect();
        let (a, b) = (realized_cov(&x).unwrap(), realized_cov(&path(30, 2, &scaled)).unwrap());
        for i in 0..2 {
            for j in 0..2 {
                prop_assert!((c * c * a.q().get(i, j) - b.q().get(i, j)).abs() < 1e-10 * (1.0 + b.q().get(i, j).abs()));
            }
        }
    }
}

#[test]
fn non_finite_and_mis_sized_paths_are_rejected() {
    let grid = SamplingGrid::new(1, 0.1).unwrap();
    let with_nan = PathSample::from_rows(grid.clone(), 2, vec![0.0, 1.0, 0.5, f64::NAN]).unwrap();
    assert!(realized_cov(&with_nan).is_err());
    assert!(PathSample::from_rows(grid, 2, vec![0.0; 2]).is_err());
}

#[test]
fn simulation_is_reproducible_per_replication() {
    let sys = system("sec5_system");
    let grid = SamplingGrid::new(500, 1e-3).unwrap();
    let run = |rep| simulate_with(&sys, &grid, 77, &SimulateOptions { replication: rep, retain_latent: false }).unwrap();
    assert_eq!(run(3).data(), run(3).data());
    assert_ne!(run(3).data(), run(4).data());
    let p = run(0);
    assert_eq!(p.rows(), 501);
    assert_eq!(p.p, 6);
}

#[test]
fn csv_round_trip_is_exact() {
    let sys = system("sec6_system");
    let grid = SamplingGrid::new(50, 1e-4).unwrap();
    let p = simulate_with(&sys, &grid, 1, &SimulateOptions::default()).unwrap();
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    let back = PathSample::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.data(), p.data());
    assert_eq!(back.p, 15);
}

#[test]
fn realized_covariance_is_consistent_for_sigma0() {
    // 40 short replications: the average z-score of Q11 stays near 0
    let sys = system("sec5_system");
    let sigma0 = sys.sigma0();
    assert_eq!(sigma0.get(0, 0), 3.0);
    let grid = SamplingGrid::new(10_000, 1e-3).unwrap();
    let mut z11 = Vec::new();
    for rep in 0..40 {
        let p = simulate_with(&sys, &grid, 5, &SimulateOptions { replication: rep, retain_latent: false }).unwrap();
        z11.push(clt_zscores(&realized_cov(&p).unwrap(), &sigma0).unwrap()[0]);
    }
    let mean = z11.iter().sum::<f64>() / 40.0;
    assert!(mean.abs() < 4.0 / 40f64.sqrt(), "{mean}");
}
