//! Symmetric-matrix calculus shared by every other module: half-vectorization,
//! the duplication matrix and its pseudoinverse, the asymptotic covariance
//! `W(Σ) = 2 D⁺(Σ⊗Σ)D⁺ᵀ` of a realized covariance, and a Cholesky-based
//! positive-definiteness test.
//!
//! `vech` always enumerates the lower triangle column by column:
//! `(1,1), (2,1), …, (p,1), (2,2), …, (p,p)`.

use nalgebra::DMatrix;
use thiserror::Error;

/// Relative pivot tolerance of the Cholesky PD test.
pub const PD_PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// A real symmetric matrix. Construction symmetrizes, so `m[i][j] == m[j][i]`
/// holds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, MatrixError> {
        if m.nrows() != m.ncols() {
            return Err(MatrixError::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(MatrixError::Dimension("dimension must be at least 1".into()));
        }
        let mut m = m;
        let p = m.nrows();
        for j in 0..p {
            for i in (j + 1)..p {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Ok(SymMatrix(m))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MatrixError> {
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(MatrixError::Dimension("rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
    }

    pub fn identity(p: usize) -> Self {
        SymMatrix(DMatrix::identity(p, p))
    }

    pub fn zeros(p: usize) -> Self {
        SymMatrix(DMatrix::zeros(p, p))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, a: f64) -> SymMatrix {
        SymMatrix(&self.0 * a)
    }

    /// Smallest eigenvalue (symmetric eigen-decomposition).
    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Half-vectorization of a `p × p` symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfVec {
    dim_p: usize,
    values: Vec<f64>,
}

impl HalfVec {
    /// Wraps a vector whose length must be `p(p+1)/2` for some `p ≥ 1`.
    pub fn from_values(values: Vec<f64>) -> Result<Self, MatrixError> {
        let dim_p = dim_from_vech_len(values.len()).ok_or_else(|| {
            MatrixError::Dimension(format!(
                "length {} is not of the form p(p+1)/2",
                values.len()
            ))
        })?;
        Ok(HalfVec { dim_p, values })
    }

    pub fn dim_p(&self) -> usize {
        self.dim_p
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// `p̄ = p(p+1)/2`.
pub fn vech_len(p: usize) -> usize {
    p * (p + 1) / 2
}

fn dim_from_vech_len(len: usize) -> Option<usize> {
    if len == 0 {
        return None;
    }
    let p = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (vech_len(p) == len).then_some(p)
}

/// Position of entry `(i, j)` (either order) inside `vech`.
pub fn vech_index(i: usize, j: usize, p: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    // columns 0..c contribute p, p-1, …, p-c+1 entries
    c * p - c * c.saturating_sub(1) / 2 + (r - c)
}

/// Row/column pairs `(i, j)`, `i ≥ j`, in `vech` order.
pub fn vech_pairs(p: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(vech_len(p));
    for j in 0..p {
        for i in j..p {
            out.push((i, j));
        }
    }
    out
}

pub fn vech(m: &SymMatrix) -> HalfVec {
    let p = m.dim();
    let values = vech_pairs(p).into_iter().map(|(i, j)| m.get(i, j)).collect();
    HalfVec { dim_p: p, values }
}

pub fn unvech(h: &HalfVec) -> SymMatrix {
    let p = h.dim_p;
    let mut m = DMatrix::zeros(p, p);
    for (k, (i, j)) in vech_pairs(p).into_iter().enumerate() {
        m[(i, j)] = h.values[k];
        m[(j, i)] = h.values[k];
    }
    SymMatrix(m)
}

/// Column-major `vec` of a square matrix.
pub fn vec_of(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// The duplication matrix `D_p` (`vec A = D_p vech A`) and its
/// Moore–Penrose inverse `D_p⁺ = (DᵀD)⁻¹Dᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicationPair {
    pub dim_p: usize,
    pub d: DMatrix<f64>,
    pub d_plus: DMatrix<f64>,
}

pub fn duplication(p: usize) -> Result<DuplicationPair, MatrixError> {
    if p == 0 {
        return Err(MatrixError::Dimension("duplication matrix needs p >= 1".into()));
    }
    let pbar = vech_len(p);
    let mut d = DMatrix::zeros(p * p, pbar);
    for (k, (i, j)) in vech_pairs(p).into_iter().enumerate() {
        d[(j * p + i, k)] = 1.0;
        d[(i * p + j, k)] = 1.0;
    }
    // DᵀD is diagonal: 1 for diagonal entries of A, 2 for off-diagonal ones.
    let mut d_plus = d.transpose();
    for (k, (i, j)) in vech_pairs(p).into_iter().enumerate() {
        if i != j {
            d_plus.row_mut(k).scale_mut(0.5);
        }
    }
    Ok(DuplicationPair { dim_p: p, d, d_plus })
}

/// Lower Cholesky factor with the relative pivot test
/// `pivot > PD_PIVOT_TOL · max diag`.
#[derive(Debug, Clone)]
pub struct PdFactor {
    l: DMatrix<f64>,
}

impl PdFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self, MatrixError> {
        let p = m.nrows();
        if p != m.ncols() || p == 0 {
            return Err(MatrixError::Dimension("Cholesky needs a non-empty square matrix".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite);
        }
        let max_diag = (0..p).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
        let tol = PD_PIVOT_TOL * max_diag;
        let mut l = DMatrix::<f64>::zeros(p, p);
        for j in 0..p {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > tol) {
                return Err(MatrixError::NotPositiveDefinite { index: j, pivot: d });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..p {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(PdFactor { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `M X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let p = self.l.nrows();
        let mut inv = self.solve(&DMatrix::identity(p, p));
        symmetrize_in_place(&mut inv);
        inv
    }
}

pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for j in 0..p {
        for i in (j + 1)..p {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `log det m` when `m` is positive definite.
pub fn logdet_pd(m: &SymMatrix) -> Result<f64, MatrixError> {
    PdFactor::new(m.as_matrix()).map(|f| f.logdet())
}

/// `W(Σ) = 2 D_p⁺ (Σ⊗Σ) D_p⁺ᵀ`, evaluated entrywise: the element for vech
/// pairs `(i,j), (k,l)` is `Σ_ik Σ_jl + Σ_il Σ_jk`.
pub fn asymcov_w(sigma: &SymMatrix) -> Result<SymMatrix, MatrixError> {
    PdFactor::new(sigma.as_matrix())?;
    Ok(kron_sandwich(sigma.as_matrix(), 1.0))
}

/// `W(Σ)⁻¹ = ½ D_pᵀ (Σ⁻¹⊗Σ⁻¹) D_p`.
pub fn asymcov_w_inv(sigma: &SymMatrix) -> Result<SymMatrix, MatrixError> {
    let inv = PdFactor::new(sigma.as_matrix())?.inverse();
    let mut w = kron_sandwich(&inv, 1.0).into_matrix();
    // entry of ½Dᵀ(S⊗S)D relative to the symmetrised Kronecker term
    let pairs = vech_pairs(sigma.dim());
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (b, &(k, l)) in pairs.iter().enumerate() {
            let mult = if i != j { 2.0 } else { 1.0 } * if k != l { 2.0 } else { 1.0 };
            w[(a, b)] *= 0.25 * mult;
        }
    }
    Ok(SymMatrix(w))
}

fn kron_sandwich(s: &DMatrix<f64>, scale: f64) -> SymMatrix {
    let pairs = vech_pairs(s.nrows());
    let pbar = pairs.len();
    let mut w = DMatrix::zeros(pbar, pbar);
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (b, &(k, l)) in pairs.iter().enumerate().skip(a) {
            let v = scale * (s[(i, k)] * s[(j, l)] + s[(i, l)] * s[(j, k)]);
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
    }
    SymMatrix(w)
}
