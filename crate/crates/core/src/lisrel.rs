//! LISREL covariance structure with free/fixed parameter masks.
//!
//! The implied covariance is assembled as `Σ(θ) = K Ω Kᵀ + E` with
//!
//! ```text
//! A = blockdiag(Λx1, Λx2)      T = [ I        0   ]      K = A T
//!                                  [ Ψ⁻¹Γ    Ψ⁻¹  ]
//! Ω = blockdiag(Σξξ, Σζζ)      E = blockdiag(Σδδ, Σεε)
//! ```
//!
//! which expands to the usual `Σ¹¹`, `Σ¹²`, `Σ²²` blocks. Free slots are
//! numbered in traversal order: `lx1, lx2, gamma, b` row by row, then
//! `sxx, sdd, see, szz` in vech order. Two entries may share one slot
//! (equality constraint).

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::matrix::{symmetrize_in_place, vech_len, vech_pairs, SymMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("Ψ = I − B is numerically singular")]
    SingularPsi,
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("fixed entries violated: {0:?}")]
    Consistency(Vec<String>),
    #[error("theta has length {got}, mask expects {expected}")]
    ThetaLength { expected: usize, got: usize },
    #[error("slot {label} cannot be pinned to zero: bounds [{lo}, {hi}]")]
    PinOutsideBounds { label: String, lo: f64, hi: f64 },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Lx1,
    Lx2,
    Gamma,
    B,
    Sxx,
    Sdd,
    See,
    Szz,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 8] = [
        MatrixKind::Lx1,
        MatrixKind::Lx2,
        MatrixKind::Gamma,
        MatrixKind::B,
        MatrixKind::Sxx,
        MatrixKind::Sdd,
        MatrixKind::See,
        MatrixKind::Szz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Lx1 => "lx1",
            MatrixKind::Lx2 => "lx2",
            MatrixKind::Gamma => "gamma",
            MatrixKind::B => "b",
            MatrixKind::Sxx => "sxx",
            MatrixKind::Sdd => "sdd",
            MatrixKind::See => "see",
            MatrixKind::Szz => "szz",
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, MatrixKind::Sxx | MatrixKind::Sdd | MatrixKind::See | MatrixKind::Szz)
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, d: &ModelDims) -> (usize, usize) {
        match self {
            MatrixKind::Lx1 => (d.p1, d.k1),
            MatrixKind::Lx2 => (d.p2, d.k2),
            MatrixKind::Gamma => (d.k2, d.k1),
            MatrixKind::B => (d.k2, d.k2),
            MatrixKind::Sxx => (d.k1, d.k1),
            MatrixKind::Sdd => (d.p1, d.p1),
            MatrixKind::See => (d.p2, d.p2),
            MatrixKind::Szz => (d.k2, d.k2),
        }
    }

    /// Entry positions in slot-numbering order.
    fn positions(self, d: &ModelDims) -> Vec<(usize, usize)> {
        let (r, c) = self.shape(d);
        if self.is_symmetric() {
            vech_pairs(r)
        } else {
            (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect()
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub p1: usize,
    pub p2: usize,
    pub k1: usize,
    pub k2: usize,
}

impl ModelDims {
    pub fn p(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn k(&self) -> usize {
        self.k1 + self.k2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryTag {
    Fixed(f64),
    Free(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector(pub Vec<f64>);

impl ThetaVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for ThetaVector {
    fn from(v: Vec<f64>) -> Self {
        ThetaVector(v)
    }
}

/// The eight structural matrices. Symmetric ones are stored in full.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub lx1: DMatrix<f64>,
    pub lx2: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sxx: DMatrix<f64>,
    pub sdd: DMatrix<f64>,
    pub see: DMatrix<f64>,
    pub szz: DMatrix<f64>,
}

impl ModelMatrices {
    pub fn zeros(d: &ModelDims) -> Self {
        let z = |k: MatrixKind| {
            let (r, c) = k.shape(d);
            DMatrix::zeros(r, c)
        };
        ModelMatrices {
            lx1: z(MatrixKind::Lx1),
            lx2: z(MatrixKind::Lx2),
            gamma: z(MatrixKind::Gamma),
            b: z(MatrixKind::B),
            sxx: z(MatrixKind::Sxx),
            sdd: z(MatrixKind::Sdd),
            see: z(MatrixKind::See),
            szz: z(MatrixKind::Szz),
        }
    }

    pub fn get(&self, k: MatrixKind) -> &DMatrix<f64> {
        match k {
            MatrixKind::Lx1 => &self.lx1,
            MatrixKind::Lx2 => &self.lx2,
            MatrixKind::Gamma => &self.gamma,
            MatrixKind::B => &self.b,
            MatrixKind::Sxx => &self.sxx,
            MatrixKind::Sdd => &self.sdd,
            MatrixKind::See => &self.see,
            MatrixKind::Szz => &self.szz,
        }
    }

    pub fn get_mut(&mut self, k: MatrixKind) -> &mut DMatrix<f64> {
        match k {
            MatrixKind::Lx1 => &mut self.lx1,
            MatrixKind::Lx2 => &mut self.lx2,
            MatrixKind::Gamma => &mut self.gamma,
            MatrixKind::B => &mut self.b,
            MatrixKind::Sxx => &mut self.sxx,
            MatrixKind::Sdd => &mut self.sdd,
            MatrixKind::See => &mut self.see,
            MatrixKind::Szz => &mut self.szz,
        }
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            p1: self.lx1.nrows(),
            p2: self.lx2.nrows(),
            k1: self.lx1.ncols(),
            k2: self.lx2.ncols(),
        }
    }
}

/// Free/fixed layout of a parametric model plus the box `Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMask {
    name: String,
    dims: ModelDims,
    // row-major tag arrays, lower triangle only meaningful for symmetric kinds
    tags: Vec<Vec<EntryTag>>,
    bounds: Vec<Bounds>,
    labels: Vec<String>,
    slot_entries: Vec<Vec<(MatrixKind, usize, usize)>>,
}

/// Incremental construction of a [`ParameterMask`]; every entry starts as
/// `Fixed(0)`.
#[derive(Debug, Clone)]
pub struct MaskBuilder {
    name: String,
    dims: ModelDims,
    tags: Vec<Vec<EntryTag>>,
    bounds: Vec<Bounds>,
    labels: Vec<String>,
}

impl MaskBuilder {
    pub fn new(name: impl Into<String>, dims: ModelDims) -> Self {
        let tags = MatrixKind::ALL
            .iter()
            .map(|k| {
                let (r, c) = k.shape(&dims);
                vec![EntryTag::Fixed(0.0); r * c]
            })
            .collect();
        MaskBuilder { name: name.into(), dims, tags, bounds: Vec::new(), labels: Vec::new() }
    }

    fn set(&mut self, kind: MatrixKind, i: usize, j: usize, tag: EntryTag) -> Result<(), ModelError> {
        let (r, c) = kind.shape(&self.dims);
        if i >= r || j >= c {
            return Err(ModelError::Mask(format!("{kind}[{},{}] is outside {r}x{c}", i + 1, j + 1)));
        }
        let (i, j) = if kind.is_symmetric() && i < j { (j, i) } else { (i, j) };
        self.tags[kind.index()][i * c + j] = tag;
        if kind.is_symmetric() {
            self.tags[kind.index()][j * c + i] = tag;
        }
        Ok(())
    }

    pub fn fixed(mut self, kind: MatrixKind, i: usize, j: usize, v: f64) -> Result<Self, ModelError> {
        self.set(kind, i, j, EntryTag::Fixed(v))?;
        Ok(self)
    }

    /// Adds a new free slot; slots are renumbered in traversal order by
    /// [`MaskBuilder::build`].
    pub fn free(self, kind: MatrixKind, i: usize, j: usize, lo: f64, hi: f64) -> Result<Self, ModelError> {
        self.free_labeled(kind, i, j, lo, hi, None)
    }

    pub fn free_labeled(
        mut self,
        kind: MatrixKind,
        i: usize,
        j: usize,
        lo: f64,
        hi: f64,
        label: Option<String>,
    ) -> Result<Self, ModelError> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(ModelError::Mask(format!("invalid bounds [{lo}, {hi}]")));
        }
        let (i, j) = if kind.is_symmetric() && i < j { (j, i) } else { (i, j) };
        let slot = self.bounds.len();
        self.set(kind, i, j, EntryTag::Free(slot))?;
        self.bounds.push(Bounds { lo, hi });
        self.labels.push(label.unwrap_or_else(|| format!("{kind}[{},{}]", i + 1, j + 1)));
        Ok(self)
    }

    /// Ties entry `(i, j)` of `kind` to an existing slot (equality constraint).
    pub fn shared(mut self, kind: MatrixKind, i: usize, j: usize, slot: usize) -> Result<Self, ModelError> {
        if slot >= self.bounds.len() {
            return Err(ModelError::Mask(format!("shared slot {slot} does not exist yet")));
        }
        self.set(kind, i, j, EntryTag::Free(slot))?;
        Ok(self)
    }

    pub fn build(self) -> Result<ParameterMask, ModelError> {
        let MaskBuilder { name, dims, mut tags, bounds, labels } = self;
        // renumber in traversal order
        let mut remap: Vec<Option<usize>> = vec![None; bounds.len()];
        let mut next = 0;
        for kind in MatrixKind::ALL {
            let (_, c) = kind.shape(&dims);
            for (i, j) in kind.positions(&dims) {
                if let EntryTag::Free(s) = tags[kind.index()][i * c + j] {
                    if remap[s].is_none() {
                        remap[s] = Some(next);
                        next += 1;
                    }
                }
            }
        }
        if remap.iter().any(|r| r.is_none()) {
            return Err(ModelError::Mask("a declared slot is not used by any entry".into()));
        }
        let mut new_bounds = vec![Bounds { lo: 0.0, hi: 0.0 }; next];
        let mut new_labels = vec![String::new(); next];
        for (old, new) in remap.iter().enumerate() {
            let new = new.unwrap();
            new_bounds[new] = bounds[old];
            new_labels[new] = labels[old].clone();
        }
        for t in tags.iter_mut().flatten() {
            if let EntryTag::Free(s) = t {
                *s = remap[*s].unwrap();
            }
        }
        ParameterMask::from_parts(name, dims, tags, new_bounds, new_labels)
    }
}

impl ParameterMask {
    fn from_parts(
        name: String,
        dims: ModelDims,
        tags: Vec<Vec<EntryTag>>,
        bounds: Vec<Bounds>,
        labels: Vec<String>,
    ) -> Result<Self, ModelError> {
        if dims.p1 == 0 || dims.p2 == 0 || dims.k1 == 0 || dims.k2 == 0 {
            return Err(ModelError::Mask("all dimensions must be positive".into()));
        }
        let q = bounds.len();
        let mut slot_entries = vec![Vec::new(); q];
        for kind in MatrixKind::ALL {
            let (_, c) = kind.shape(&dims);
            for (i, j) in kind.positions(&dims) {
                if let EntryTag::Free(s) = tags[kind.index()][i * c + j] {
                    if s >= q {
                        return Err(ModelError::Mask(format!("slot {s} out of range")));
                    }
                    slot_entries[s].push((kind, i, j));
                }
            }
        }
        if let Some(s) = slot_entries.iter().position(|e| e.is_empty()) {
            return Err(ModelError::Mask(format!("slot {s} is never used")));
        }
        let bc = MatrixKind::B.shape(&dims).1;
        for i in 0..dims.k2 {
            if tags[MatrixKind::B.index()][i * bc + i] != EntryTag::Fixed(0.0) {
                return Err(ModelError::Mask("diagonal of B must be fixed to 0".into()));
            }
        }
        for entries in &slot_entries {
            for &(kind, i, j) in entries {
                if kind.is_symmetric() && i == j {
                    let s = match tags[kind.index()][i * kind.shape(&dims).1 + j] {
                        EntryTag::Free(s) => s,
                        EntryTag::Fixed(_) => unreachable!(),
                    };
                    if !(bounds[s].lo > 0.0) {
                        return Err(ModelError::Mask(format!(
                            "variance slot {} needs a positive lower bound",
                            labels[s]
                        )));
                    }
                }
            }
        }
        Ok(ParameterMask { name, dims, tags, bounds, labels, slot_entries })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// Number of free slots.
    pub fn q(&self) -> usize {
        self.bounds.len()
    }

    pub fn p(&self) -> usize {
        self.dims.p()
    }

    pub fn bounds(&self) -> &[Bounds] {
        &self.bounds
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn tag(&self, kind: MatrixKind, i: usize, j: usize) -> EntryTag {
        let c = kind.shape(&self.dims).1;
        self.tags[kind.index()][i * c + j]
    }

    /// Entries (lower triangle for symmetric kinds) driven by `slot`.
    pub fn slot_entries(&self, slot: usize) -> &[(MatrixKind, usize, usize)] {
        &self.slot_entries[slot]
    }

    /// True when `slot` sits on the diagonal of a covariance matrix.
    pub fn is_variance_slot(&self, slot: usize) -> bool {
        self.slot_entries[slot].iter().any(|&(k, i, j)| k.is_symmetric() && i == j)
    }

    pub fn check_theta(&self, theta: &ThetaVector) -> Result<(), ModelError> {
        if theta.len() != self.q() {
            return Err(ModelError::ThetaLength { expected: self.q(), got: theta.len() });
        }
        Ok(())
    }

    pub fn within_bounds(&self, theta: &ThetaVector) -> bool {
        theta.len() == self.q() && theta.0.iter().zip(&self.bounds).all(|(v, b)| b.contains(*v))
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (v, b) in theta.iter_mut().zip(&self.bounds) {
            *v = b.clamp(*v);
        }
    }

    pub fn unpack(&self, theta: &ThetaVector) -> Result<ModelMatrices, ModelError> {
        self.check_theta(theta)?;
        let mut m = ModelMatrices::zeros(&self.dims);
        for kind in MatrixKind::ALL {
            let (r, c) = kind.shape(&self.dims);
            let tags = &self.tags[kind.index()];
            let target = m.get_mut(kind);
            for i in 0..r {
                for j in 0..c {
                    let (ti, tj) = if kind.is_symmetric() && i < j { (j, i) } else { (i, j) };
                    target[(i, j)] = match tags[ti * c + tj] {
                        EntryTag::Fixed(v) => v,
                        EntryTag::Free(s) => theta.0[s],
                    };
                }
            }
        }
        Ok(m)
    }

    pub fn pack(&self, m: &ModelMatrices) -> Result<ThetaVector, ModelError> {
        if m.dims() != self.dims {
            return Err(ModelError::Dimension("matrices do not match the mask dimensions".into()));
        }
        let mut theta: Vec<Option<f64>> = vec![None; self.q()];
        let mut offending = Vec::new();
        for kind in MatrixKind::ALL {
            let c = kind.shape(&self.dims).1;
            let mat = m.get(kind);
            for (i, j) in kind.positions(&self.dims) {
                let v = mat[(i, j)];
                match self.tags[kind.index()][i * c + j] {
                    EntryTag::Fixed(f) => {
                        if v != f {
                            offending.push(format!("{kind}[{},{}]", i + 1, j + 1));
                        }
                    }
                    EntryTag::Free(s) => match theta[s] {
                        None => theta[s] = Some(v),
                        Some(prev) if prev != v => {
                            offending.push(format!("{kind}[{},{}]", i + 1, j + 1))
                        }
                        Some(_) => {}
                    },
                }
            }
        }
        if !offending.is_empty() {
            return Err(ModelError::Consistency(offending));
        }
        Ok(ThetaVector(theta.into_iter().map(|v| v.unwrap()).collect()))
    }

    /// Mask with the listed slots turned into `Fixed(0)`, plus the original
    /// slot index of every remaining slot.
    pub fn pin_to_zero(&self, slots: &[usize]) -> Result<(ParameterMask, Vec<usize>), ModelError> {
        let mut pinned = vec![false; self.q()];
        for &s in slots {
            if s >= self.q() {
                return Err(ModelError::Mask(format!("slot {s} out of range")));
            }
            if !self.bounds[s].contains(0.0) {
                return Err(ModelError::PinOutsideBounds {
                    label: self.labels[s].clone(),
                    lo: self.bounds[s].lo,
                    hi: self.bounds[s].hi,
                });
            }
            pinned[s] = true;
        }
        let mut map_old_to_new = vec![usize::MAX; self.q()];
        let mut kept = Vec::new();
        for s in 0..self.q() {
            if !pinned[s] {
                map_old_to_new[s] = kept.len();
                kept.push(s);
            }
        }
        let tags = self
            .tags
            .iter()
            .map(|row| {
                row.iter()
                    .map(|t| match *t {
                        EntryTag::Free(s) if pinned[s] => EntryTag::Fixed(0.0),
                        EntryTag::Free(s) => EntryTag::Free(map_old_to_new[s]),
                        f => f,
                    })
                    .collect()
            })
            .collect();
        let bounds = kept.iter().map(|&s| self.bounds[s]).collect();
        let labels = kept.iter().map(|&s| self.labels[s].clone()).collect();
        let reduced = ParameterMask::from_parts(self.name.clone(), self.dims, tags, bounds, labels)?;
        Ok((reduced, kept))
    }

    /// Whether the latent covariance blocks `Σξξ` and `Σζζ` are PD at `theta`.
    pub fn latent_covariances_pd(&self, theta: &ThetaVector) -> Result<(bool, bool), ModelError> {
        let m = self.unpack(theta)?;
        let pd = |a: &DMatrix<f64>| crate::matrix::PdFactor::new(a).is_ok();
        Ok((pd(&m.sxx), pd(&m.szz)))
    }

    /// Sums structural gradient matrices into per-slot derivatives.
    pub(crate) fn gather(&self, g: &ModelMatrices) -> Vec<f64> {
        self.slot_entries
            .iter()
            .map(|entries| {
                entries
                    .iter()
                    .map(|&(kind, i, j)| {
                        let m = g.get(kind);
                        if kind.is_symmetric() && i != j {
                            m[(i, j)] + m[(j, i)]
                        } else {
                            m[(i, j)]
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

/// Evaluated pieces of `Σ = K Ω Kᵀ + E`.
#[derive(Debug, Clone)]
pub(crate) struct Structure {
    dims: ModelDims,
    a: DMatrix<f64>,
    t: DMatrix<f64>,
    kmat: DMatrix<f64>,
    omega: DMatrix<f64>,
    psi_inv: DMatrix<f64>,
    gamma: DMatrix<f64>,
    pub(crate) sigma: DMatrix<f64>,
}

pub(crate) fn psi_inverse(b: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let k2 = b.nrows();
    let psi = DMatrix::identity(k2, k2) - b;
    let norm = psi.norm();
    let lu = psi.lu();
    if lu.u().diagonal().iter().any(|u| u.abs() < 1e-12 * norm) {
        return Err(ModelError::SingularPsi);
    }
    lu.try_inverse().ok_or(ModelError::SingularPsi)
}

impl Structure {
    pub(crate) fn new(m: &ModelMatrices) -> Result<Self, ModelError> {
        let d = m.dims();
        let (p1, k1, k2) = (d.p1, d.k1, d.k2);
        let (p, k) = (d.p(), d.k());
        let psi_inv = psi_inverse(&m.b)?;
        let mut a = DMatrix::zeros(p, k);
        a.view_mut((0, 0), (p1, k1)).copy_from(&m.lx1);
        a.view_mut((p1, k1), (d.p2, k2)).copy_from(&m.lx2);
        let mut t = DMatrix::zeros(k, k);
        t.view_mut((0, 0), (k1, k1)).fill_with_identity();
        t.view_mut((k1, 0), (k2, k1)).copy_from(&(&psi_inv * &m.gamma));
        t.view_mut((k1, k1), (k2, k2)).copy_from(&psi_inv);
        let mut omega = DMatrix::zeros(k, k);
        omega.view_mut((0, 0), (k1, k1)).copy_from(&m.sxx);
        omega.view_mut((k1, k1), (k2, k2)).copy_from(&m.szz);
        let kmat = &a * &t;
        let mut sigma = &kmat * &omega * kmat.transpose();
        { let mut v = sigma.view_mut((0, 0), (p1, p1)); v += &m.sdd; }
        { let mut v = sigma.view_mut((p1, p1), (d.p2, d.p2)); v += &m.see; }
        symmetrize_in_place(&mut sigma);
        Ok(Structure { dims: d, a, t, kmat, omega, psi_inv, gamma: m.gamma.clone(), sigma })
    }

    /// Gradients of `tr(M Σ)` with respect to every structural matrix,
    /// treating all entries as independent (symmetric `M`).
    pub(crate) fn trace_gradient(&self, mm: &DMatrix<f64>) -> ModelMatrices {
        let d = self.dims;
        let (p1, k1, k2) = (d.p1, d.k1, d.k2);
        let g_e = mm;
        let g_omega = self.kmat.transpose() * mm * &self.kmat;
        let g_k = (mm * &self.kmat * &self.omega) * 2.0;
        let g_a = &g_k * self.t.transpose();
        let g_t = self.a.transpose() * &g_k;
        let g21 = g_t.view((k1, 0), (k2, k1)).into_owned();
        let g22 = g_t.view((k1, k1), (k2, k2)).into_owned();
        let h = &g21 * self.gamma.transpose() + g22;
        let psi_inv_t = self.psi_inv.transpose();
        ModelMatrices {
            lx1: g_a.view((0, 0), (p1, k1)).into_owned(),
            lx2: g_a.view((p1, k1), (d.p2, k2)).into_owned(),
            gamma: &psi_inv_t * g21,
            b: &psi_inv_t * h * &psi_inv_t,
            sxx: g_omega.view((0, 0), (k1, k1)).into_owned(),
            sdd: g_e.view((0, 0), (p1, p1)).into_owned(),
            see: g_e.view((p1, p1), (d.p2, d.p2)).into_owned(),
            szz: g_omega.view((k1, k1), (k2, k2)).into_owned(),
        }
    }

    /// `∂Σ/∂(entry)` for a single structural entry; symmetric kinds move
    /// `(i, j)` and `(j, i)` together.
    pub(crate) fn entry_derivative(&self, kind: MatrixKind, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.dims;
        let (p, k1) = (d.p(), d.k1);
        let mut out = DMatrix::zeros(p, p);
        let mut sym_unit = |r: usize, c: usize| {
            out[(r, c)] += 1.0;
            if r != c {
                out[(c, r)] += 1.0;
            }
        };
        match kind {
            MatrixKind::Sdd => {
                sym_unit(i, j);
                return out;
            }
            MatrixKind::See => {
                sym_unit(d.p1 + i, d.p1 + j);
                return out;
            }
            _ => {}
        }
        if matches!(kind, MatrixKind::Sxx | MatrixKind::Szz) {
            let off = if kind == MatrixKind::Sxx { 0 } else { k1 };
            let ca = self.kmat.column(off + i);
            let cb = self.kmat.column(off + j);
            let mut m = &ca * cb.transpose();
            if i != j {
                m += &cb * ca.transpose();
            }
            return m;
        }
        // dK = u yᵀ  ⇒  dΣ = u wᵀ + w uᵀ with w = K Ω y
        let (u, y) = match kind {
            MatrixKind::Lx1 => {
                let mut u = nalgebra::DVector::zeros(p);
                u[i] = 1.0;
                (u, self.t.row(j).transpose())
            }
            MatrixKind::Lx2 => {
                let mut u = nalgebra::DVector::zeros(p);
                u[d.p1 + i] = 1.0;
                (u, self.t.row(k1 + j).transpose())
            }
            MatrixKind::Gamma => {
                let u = self.a.columns(k1, d.k2) * self.psi_inv.column(i);
                let mut y = nalgebra::DVector::zeros(d.k());
                y[j] = 1.0;
                (u, y)
            }
            MatrixKind::B => {
                let u = self.a.columns(k1, d.k2) * self.psi_inv.column(i);
                let row = self.psi_inv.row(j);
                let mut y = nalgebra::DVector::zeros(d.k());
                for c in 0..k1 {
                    y[c] = (row * self.gamma.column(c))[(0, 0)];
                }
                for c in 0..d.k2 {
                    y[k1 + c] = row[c];
                }
                (u, y)
            }
            _ => unreachable!(),
        };
        let w = &self.kmat * (&self.omega * y);
        &u * w.transpose() + &w * u.transpose()
    }
}

/// `Σ` implied by explicit structural matrices.
pub fn implied_covariance(m: &ModelMatrices) -> Result<SymMatrix, ModelError> {
    let s = Structure::new(m)?;
    Ok(SymMatrix::new(s.sigma).expect("square by construction"))
}

pub fn build_sigma(mask: &ParameterMask, theta: &ThetaVector) -> Result<SymMatrix, ModelError> {
    implied_covariance(&mask.unpack(theta)?)
}

/// `Δ = ∂ vech Σ(θ) / ∂θ`, a `p̄ × q` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaJacobian {
    pub delta: DMatrix<f64>,
}

pub fn sigma_jacobian(mask: &ParameterMask, theta: &ThetaVector) -> Result<SigmaJacobian, ModelError> {
    let s = Structure::new(&mask.unpack(theta)?)?;
    Ok(jacobian_from_structure(mask, &s))
}

pub(crate) fn jacobian_from_structure(mask: &ParameterMask, s: &Structure) -> SigmaJacobian {
    let p = mask.p();
    let pairs = vech_pairs(p);
    let mut delta = DMatrix::zeros(vech_len(p), mask.q());
    for slot in 0..mask.q() {
        let mut dsig = DMatrix::zeros(p, p);
        for &(kind, i, j) in mask.slot_entries(slot) {
            dsig += s.entry_derivative(kind, i, j);
        }
        for (r, &(a, b)) in pairs.iter().enumerate() {
            delta[(r, slot)] = dsig[(a, b)];
        }
    }
    SigmaJacobian { delta }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifiabilityReport {
    pub rank: usize,
    pub q: usize,
    pub pass: bool,
    pub singular_values: Vec<f64>,
}

/// Local identifiability at a point: `rank Δ == q` with SVD tolerance
/// `1e-8 · σ_max`.
pub fn check_local_identifiability(
    mask: &ParameterMask,
    theta: &ThetaVector,
) -> Result<IdentifiabilityReport, ModelError> {
    let jac = sigma_jacobian(mask, theta)?;
    let sv = jac.delta.svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|s| **s > 1e-8 * smax).count();
    let q = mask.q();
    Ok(IdentifiabilityReport { rank, q, pass: rank == q, singular_values: sv.iter().cloned().collect() })
}

// ---------------------------------------------------------------------------
// JSON model configuration

/// A parametric model as stored on disk.
///
/// Non-symmetric matrices (`lx1`, `lx2`, `gamma`, `b`) are lists of rows.
/// Covariance matrices (`sxx`, `sdd`, `see`, `szz`) are either lower-triangular
/// ragged rows (row `i` has `i+1` cells) or `{"diag": [cells]}`.
/// A cell is a number (fixed), `{"fixed": v}`, or
/// `{"free": {"lo": a, "hi": b, "label"?: s, "same_as"?: label}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub dims: ModelDims,
    pub lx1: Value,
    pub lx2: Value,
    pub gamma: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Value>,
    pub sxx: Value,
    pub sdd: Value,
    pub see: Value,
    pub szz: Value,
    /// Starting point for the optimizer.
    pub theta_init: Vec<f64>,
    /// Data-generating value, when the model is correctly specified.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FreeCell {
    #[serde(default = "default_lo")]
    lo: f64,
    #[serde(default = "default_hi")]
    hi: f64,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    same_as: Option<String>,
}

fn default_lo() -> f64 {
    -100.0
}

fn default_hi() -> f64 {
    100.0
}

enum Cell {
    Fixed(f64),
    Free(FreeCell),
}

fn parse_cell(v: &Value, ctx: &str) -> Result<Cell, ModelError> {
    if let Some(x) = v.as_f64() {
        return Ok(Cell::Fixed(x));
    }
    let obj = v
        .as_object()
        .ok_or_else(|| ModelError::Config(format!("{ctx}: cell must be a number or object")))?;
    if obj.len() != 1 {
        return Err(ModelError::Config(format!("{ctx}: cell must have exactly one key")));
    }
    if let Some(f) = obj.get("fixed") {
        return f
            .as_f64()
            .map(Cell::Fixed)
            .ok_or_else(|| ModelError::Config(format!("{ctx}: `fixed` must be a number")));
    }
    if let Some(f) = obj.get("free") {
        let cell: FreeCell = serde_json::from_value(f.clone())
            .map_err(|e| ModelError::Config(format!("{ctx}: {e}")))?;
        return Ok(Cell::Free(cell));
    }
    Err(ModelError::Config(format!("{ctx}: unknown cell tag")))
}

fn parse_cells(kind: MatrixKind, v: &Value, dims: &ModelDims) -> Result<Vec<(usize, usize, Cell)>, ModelError> {
    let (r, c) = kind.shape(dims);
    let ctx = kind.name();
    let mut out = Vec::new();
    if kind.is_symmetric() {
        if let Some(diag) = v.get("diag") {
            let cells = diag
                .as_array()
                .ok_or_else(|| ModelError::Config(format!("{ctx}: `diag` must be an array")))?;
            if cells.len() != r {
                return Err(ModelError::Config(format!("{ctx}: `diag` needs {r} cells")));
            }
            for (i, cell) in cells.iter().enumerate() {
                out.push((i, i, parse_cell(cell, &format!("{ctx}[{},{}]", i + 1, i + 1))?));
            }
            return Ok(out);
        }
    }
    let rows = v
        .as_array()
        .ok_or_else(|| ModelError::Config(format!("{ctx}: expected an array of rows")))?;
    if rows.len() != r {
        return Err(ModelError::Config(format!("{ctx}: expected {r} rows, got {}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        let cells = row
            .as_array()
            .ok_or_else(|| ModelError::Config(format!("{ctx}: row {} is not an array", i + 1)))?;
        let expected = if kind.is_symmetric() { i + 1 } else { c };
        if cells.len() != expected {
            return Err(ModelError::Config(format!(
                "{ctx}: row {} must have {expected} cells, got {}",
                i + 1,
                cells.len()
            )));
        }
        for (j, cell) in cells.iter().enumerate() {
            out.push((i, j, parse_cell(cell, &format!("{ctx}[{},{}]", i + 1, j + 1))?));
        }
    }
    Ok(out)
}

impl ModelConfig {
    pub fn mask(&self) -> Result<ParameterMask, ModelError> {
        let dims = self.dims;
        let mut builder = MaskBuilder::new(self.name.clone(), dims);
        let zero_b = Value::Array(vec![Value::Array(vec![Value::from(0.0); dims.k2]); dims.k2]);
        let sources: [(MatrixKind, &Value); 8] = [
            (MatrixKind::Lx1, &self.lx1),
            (MatrixKind::Lx2, &self.lx2),
            (MatrixKind::Gamma, &self.gamma),
            (MatrixKind::B, self.b.as_ref().unwrap_or(&zero_b)),
            (MatrixKind::Sxx, &self.sxx),
            (MatrixKind::Sdd, &self.sdd),
            (MatrixKind::See, &self.see),
            (MatrixKind::Szz, &self.szz),
        ];
        let mut by_label: HashMap<String, usize> = HashMap::new();
        let mut next_slot = 0usize;
        // cells are visited in slot-numbering order so auto labels line up
        for (kind, v) in sources {
            let mut cells = parse_cells(kind, v, &dims)?;
            if kind.is_symmetric() {
                cells.sort_by_key(|(i, j, _)| (*j, *i));
            }
            for (i, j, cell) in cells {
                builder = match cell {
                    Cell::Fixed(x) => builder.fixed(kind, i, j, x)?,
                    Cell::Free(f) => {
                        if let Some(target) = &f.same_as {
                            let slot = *by_label.get(target).ok_or_else(|| {
                                ModelError::Config(format!("same_as refers to unknown label `{target}`"))
                            })?;
                            builder.shared(kind, i, j, slot)?
                        } else {
                            let label = f.label.clone().unwrap_or_else(|| format!("{kind}[{},{}]", i + 1, j + 1));
                            if by_label.insert(label.clone(), next_slot).is_some() {
                                return Err(ModelError::Config(format!("duplicate label `{label}`")));
                            }
                            next_slot += 1;
                            builder.free_labeled(kind, i, j, f.lo, f.hi, Some(label))?
                        }
                    }
                };
            }
        }
        let mask = builder.build()?;
        if self.theta_init.len() != mask.q() {
            return Err(ModelError::Config(format!(
                "theta_init has {} values, model has {} free slots",
                self.theta_init.len(),
                mask.q()
            )));
        }
        if let Some(t) = &self.theta_true {
            if t.len() != mask.q() {
                return Err(ModelError::Config(format!(
                    "theta_true has {} values, model has {} free slots",
                    t.len(),
                    mask.q()
                )));
            }
        }
        Ok(mask)
    }

    pub fn theta_init(&self) -> ThetaVector {
        ThetaVector(self.theta_init.clone())
    }

    pub fn theta_true(&self) -> Option<ThetaVector> {
        self.theta_true.clone().map(ThetaVector)
    }
}
