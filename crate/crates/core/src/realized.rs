//! Realized covariance of a discretely observed path.

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::matrix::{vech_pairs, PdFactor, SymMatrix};
use crate::sde::{fmt17, PathSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RealizedError {
    #[error("path needs at least two observations")]
    TooShort,
    #[error("non-finite observation in row {row}")]
    NonFinite { row: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("reference covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid realized covariance: {0}")]
    Invalid(String),
}

/// `Q = (1/T) Σ ΔX ΔXᵀ` together with the sample size and horizon it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedCov {
    q: SymMatrix,
    n: usize,
    horizon: f64,
}

impl RealizedCov {
    /// Wraps an externally computed matrix, e.g. a population covariance.
    pub fn from_matrix(q: SymMatrix, n: usize, horizon: f64) -> Result<Self, RealizedError> {
        if n == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(RealizedError::Invalid(format!("n = {n}, T = {horizon}")));
        }
        if q.as_matrix().iter().any(|v| !v.is_finite()) {
            return Err(RealizedError::Invalid("non-finite entry".into()));
        }
        Ok(RealizedCov { q, n, horizon })
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn p(&self) -> usize {
        self.q.dim()
    }

    /// Step size `h = T/n`.
    pub fn h(&self) -> f64 {
        self.horizon / self.n as f64
    }

    /// Writes `Q` as `p` comma-separated rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.q.as_matrix();
        for i in 0..self.p() {
            let row: Vec<String> = (0..self.p()).map(|j| fmt17(m[(i, j)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn realized_cov(path: &PathSample) -> Result<RealizedCov, RealizedError> {
    let rows = path.rows();
    if rows < 2 {
        return Err(RealizedError::TooShort);
    }
    let p = path.p;
    for i in 0..rows {
        if path.row(i).iter().any(|v| !v.is_finite()) {
            return Err(RealizedError::NonFinite { row: i });
        }
    }
    // Neumaier-compensated sums over the lower triangle
    let pairs = vech_pairs(p);
    let mut sum = vec![0.0f64; pairs.len()];
    let mut comp = vec![0.0f64; pairs.len()];
    let mut dx = vec![0.0f64; p];
    for i in 1..rows {
        let (prev, cur) = (path.row(i - 1), path.row(i));
        for k in 0..p {
            dx[k] = cur[k] - prev[k];
        }
        for (s, &(a, b)) in pairs.iter().enumerate() {
            let term = dx[a] * dx[b];
            let t = sum[s] + term;
            if sum[s].abs() >= term.abs() {
                comp[s] += (sum[s] - t) + term;
            } else {
                comp[s] += (term - t) + sum[s];
            }
            sum[s] = t;
        }
    }
    let horizon = path.grid.horizon();
    let mut q = DMatrix::zeros(p, p);
    for (s, &(a, b)) in pairs.iter().enumerate() {
        let v = (sum[s] + comp[s]) / horizon;
        q[(a, b)] = v;
        q[(b, a)] = v;
    }
    let q = SymMatrix::new(q).expect("square");
    Ok(RealizedCov { q, n: rows - 1, horizon })
}

/// Standardized CLT deviations `√n (vech Q − vech Σ₀)_k / √W_kk`.
pub fn clt_zscores(q: &RealizedCov, sigma0: &SymMatrix) -> Result<Vec<f64>, RealizedError> {
    let p = q.p();
    if sigma0.dim() != p {
        return Err(RealizedError::Dimension(format!("Q is {p}x{p}, Σ₀ is {0}x{0}", sigma0.dim())));
    }
    PdFactor::new(sigma0.as_matrix()).map_err(|_| RealizedError::NotPositiveDefinite)?;
    let s = sigma0.as_matrix();
    let qm = q.q().as_matrix();
    let rn = (q.n() as f64).sqrt();
    Ok(vech_pairs(p)
        .into_iter()
        .map(|(i, j)| {
            let w = s[(i, i)] * s[(j, j)] + s[(i, j)] * s[(i, j)];
            rn * (qm[(i, j)] - s[(i, j)]) / w.sqrt()
        })
        .collect())
}
