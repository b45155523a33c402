//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use hfsem::matrix::{duplication, vech, vech_len, SymMatrix};
use nalgebra::DMatrix;

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    DMatrix::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

/// Gauss–Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out
}

/// `(vech Q − vech Σ)ᵀ V (vech Q − vech Σ)` with `V` from the double integral
/// `Dᵀ ∫∫ λ₂ (Σ + λ₁λ₂(Q−Σ))⁻¹ ⊗ (Σ + λ₁λ₂(Q−Σ))⁻¹ dλ₁dλ₂ D`.
pub fn quadratic_form_by_quadrature(q: &DMatrix<f64>, sigma: &DMatrix<f64>, nodes: usize) -> f64 {
    let p = q.nrows();
    let dp = duplication(p).unwrap();
    let r = q - sigma;
    let gl = gauss_legendre(nodes);
    let mut integral = DMatrix::zeros(p * p, p * p);
    for &(l1, w1) in &gl {
        for &(l2, w2) in &gl {
            let inv = (sigma + &r * (l1 * l2)).try_inverse().unwrap();
            integral += kron(&inv, &inv) * (w1 * w2 * l2);
        }
    }
    let v = dp.d.transpose() * integral * &dp.d;
    let d = DMatrix::from_column_slice(vech_len(p), 1, vech(&SymMatrix::new(r).unwrap()).values());
    (d.transpose() * v * d)[(0, 0)]
}

/// Minimizer of `(t − a)² + κ|t|` on `[lo, hi]` by three nested 10⁵-point grids.
pub fn grid_argmin(a: f64, kappa: f64, lo: f64, hi: f64) -> f64 {
    let obj = |t: f64| lasso_objective(a, kappa, t);
    let (mut l, mut h) = (lo, hi);
    let mut best = lo;
    for _ in 0..3 {
        let n = 100_000;
        let step = (h - l) / n as f64;
        let mut best_v = f64::INFINITY;
        // 0 is always a candidate when it lies in the interval
        let mut cands: Vec<f64> = (0..=n).map(|i| l + i as f64 * step).collect();
        if l <= 0.0 && 0.0 <= h {
            cands.push(0.0);
        }
        for t in cands {
            let v = obj(t);
            if v < best_v {
                best_v = v;
                best = t;
            }
        }
        l = (best - step).max(lo);
        h = (best + step).min(hi);
    }
    best
}

pub fn lasso_objective(a: f64, kappa: f64, t: f64) -> f64 {
    (t - a).powi(2) + kappa * t.abs()
}

