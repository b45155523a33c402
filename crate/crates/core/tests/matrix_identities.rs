use hfsem::matrix::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

mod common;
use common::kron;

fn sym_from(p: usize, vals: &[f64]) -> SymMatrix {
    let mut m = DMatrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            m[(i, j)] = vals[k];
            m[(j, i)] = vals[k];
            k += 1;
        }
    }
    SymMatrix::new(m).unwrap()
}

fn pd_from(p: usize, vals: &[f64]) -> SymMatrix {
    // A Aᵀ + p I is PD for any A
    let a = DMatrix::from_fn(p, p, |i, j| vals[i * p + j]);
    SymMatrix::new(&a * a.transpose() + DMatrix::identity(p, p) * p as f64).unwrap()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Cofactor expansion along the first row.
fn det_cofactor(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[(0, 0)];
    }
    let mut det = 0.0;
    for c in 0..n {
        let minor = DMatrix::from_fn(n - 1, n - 1, |i, j| m[(i + 1, if j < c { j } else { j + 1 })]);
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * m[(0, c)] * det_cofactor(&minor);
    }
    det
}

proptest! {
    #[test]
    fn duplication_identities(p in 1usize..=8, seed in proptest::collection::vec(-5.0f64..5.0, 36)) {
        let dp = duplication(p).unwrap();
        let pbar = vech_len(p);
        prop_assert_eq!(dp.d.shape(), (p * p, pbar));
        for r in 0..p * p {
            let ones = dp.d.row(r).iter().filter(|v| **v == 1.0).count();
            let zeros = dp.d.row(r).iter().filter(|v| **v == 0.0).count();
            prop_assert_eq!((ones, zeros), (1, pbar - 1));
        }
        let a = sym_from(p, &seed);
        let dv = &dp.d * DMatrix::from_column_slice(pbar, 1, vech(&a).values());
        let va = vec_of(a.as_matrix());
        prop_assert_eq!(dv.as_slice(), va.as_slice());
        prop_assert!(max_abs(&(&dp.d_plus * &dp.d - DMatrix::identity(pbar, pbar))) < 1e-14);
        let dtd_inv = (dp.d.transpose() * &dp.d).try_inverse().unwrap();
        prop_assert!(max_abs(&(dtd_inv * dp.d.transpose() - &dp.d_plus)) < 1e-14);
        prop_assert_eq!(unvech(&vech(&a)), a);
    }

    #[test]
    fn w_inverse_matches_kronecker_form(p in 1usize..=5, seed in proptest::collection::vec(-2.0f64..2.0, 25)) {
        let sigma = pd_from(p, &seed);
        let dp = duplication(p).unwrap();
        let sinv = sigma.as_matrix().clone().try_inverse().unwrap();
        let reference = dp.d.transpose() * kron(&sinv, &sinv) * &dp.d * 0.5;
        let winv = asymcov_w_inv(&sigma).unwrap();
        let scale = max_abs(&reference).max(1.0);
        prop_assert!(max_abs(&(winv.as_matrix() - &reference)) < 1e-10 * scale);

        let w_ref = &dp.d_plus * kron(sigma.as_matrix(), sigma.as_matrix()) * dp.d_plus.transpose() * 2.0;
        let w = asymcov_w(&sigma).unwrap();
        prop_assert!(max_abs(&(w.as_matrix() - &w_ref)) < 1e-10 * max_abs(&w_ref));
        let prod = w.as_matrix() * winv.as_matrix();
        prop_assert!(max_abs(&(prod - DMatrix::identity(vech_len(p), vech_len(p)))) < 1e-9);
    }

    #[test]
    fn logdet_matches_cofactor_expansion(seed in proptest::collection::vec(-3.0f64..3.0, 36)) {
        let sigma = pd_from(6, &seed);
        let want = det_cofactor(sigma.as_matrix()).ln();
        let got = logdet_pd(&sigma).unwrap();
        prop_assert!(((got - want) / want.abs().max(1.0)).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn pd_factor_solves(seed in proptest::collection::vec(-3.0f64..3.0, 16)) {
        let sigma = pd_from(4, &seed);
        let f = PdFactor::new(sigma.as_matrix()).unwrap();
        let prod = sigma.as_matrix() * f.inverse();
        prop_assert!(max_abs(&(prod - DMatrix::identity(4, 4))) < 1e-12);
    }
}

#[test]
fn non_pd_is_rejected() {
    let m = SymMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
    assert!(PdFactor::new(m.as_matrix()).is_err());
    assert!(asymcov_w_inv(&m).is_err());
    assert!(logdet_pd(&m).is_err());
}
