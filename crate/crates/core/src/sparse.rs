//! Adaptive-weight sparse estimation around an initial QMLE.
//!
//! The least squares approximation (LSA) replaces the contrast by
//! `Σ (θ_j − θ̂_j)² + Σ κ_j |θ_j|`, minimized coordinatewise in closed form.
//! The penalized variant (PLSA) uses `(θ − θ̂)ᵀ G (θ − θ̂)` and is solved by
//! cyclic coordinate descent. The support of the LSA solution drives a
//! refit with the inactive slots pinned to zero (P-O estimator).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::lisrel::{Bounds, ModelError, ParameterMask, ThetaVector};
use crate::matrix::PdFactor;
use crate::qmle::{fit_with, Contrast, FitError, FitOptions, FitResult};
use crate::realized::RealizedCov;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("invalid penalty: {0}")]
    Config(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Leave slots with a positive lower bound (variances) unpenalized.
    #[serde(default = "default_true")]
    pub exclude_positive_lower: bool,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), SparseError> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SparseError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `κ_j = λ₁ |θ̂_j|^{−γ}` when `|θ̂_j| ≥ δ`, else `λ₂`.
pub fn adaptive_weights(theta_init: &ThetaVector, cfg: &PenaltyConfig) -> Vec<f64> {
    theta_init
        .0
        .iter()
        .map(|t| if t.abs() >= cfg.delta { cfg.lambda1 * t.abs().powf(-cfg.gamma) } else { cfg.lambda2 })
        .collect()
}

/// Adaptive weights with excluded slots set to 0.
pub fn effective_weights(theta_init: &ThetaVector, cfg: &PenaltyConfig, mask: &ParameterMask) -> Vec<f64> {
    let mut k = adaptive_weights(theta_init, cfg);
    if cfg.exclude_positive_lower {
        for (kj, b) in k.iter_mut().zip(mask.bounds()) {
            if b.lo > 0.0 {
                *kj = 0.0;
            }
        }
    }
    k
}

/// Labels of slots whose `|θ̂_j|` lies within 20% of `δ`.
pub fn delta_proximity(theta_init: &ThetaVector, cfg: &PenaltyConfig, mask: &ParameterMask) -> Vec<String> {
    theta_init
        .0
        .iter()
        .enumerate()
        .filter(|(_, t)| (t.abs() - cfg.delta).abs() <= 0.2 * cfg.delta)
        .map(|(j, _)| mask.labels()[j].clone())
        .collect()
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaOutcome {
    pub theta: ThetaVector,
    /// Slots whose soft threshold reached 0 but whose bounds exclude 0.
    pub clipped: Vec<usize>,
}

/// `θ̃_j = clip(sign(θ̂_j)·(|θ̂_j| − κ_j/2)₊, bounds_j)`.
pub fn lsa_estimate(theta_init: &ThetaVector, kappa: &[f64], bounds: &[Bounds]) -> LsaOutcome {
    let mut clipped = Vec::new();
    let theta = theta_init
        .0
        .iter()
        .zip(kappa)
        .zip(bounds)
        .enumerate()
        .map(|(j, ((t, k), b))| {
            let s = soft(*t, k / 2.0);
            if s == 0.0 && !b.contains(0.0) {
                clipped.push(j);
            }
            let v = b.clamp(s);
            if v == 0.0 { 0.0 } else { v }
        })
        .collect();
    LsaOutcome { theta: ThetaVector(theta), clipped }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlsaOutcome {
    pub theta: ThetaVector,
    pub converged: bool,
    pub sweeps: usize,
    /// `G` was not PD and the identity was used instead.
    pub identity_fallback: bool,
}

pub const PLSA_TOL: f64 = 1e-10;
pub const PLSA_MAX_SWEEPS: usize = 10_000;

/// Minimizes `(θ − θ̂)ᵀ G (θ − θ̂) + Σ κ_j |θ_j|` over the box.
pub fn plsa_estimate(theta_init: &ThetaVector, kappa: &[f64], g: &DMatrix<f64>, bounds: &[Bounds]) -> PlsaOutcome {
    let q = theta_init.len();
    let identity_fallback = PdFactor::new(g).is_err();
    let g = if identity_fallback { DMatrix::identity(q, q) } else { g.clone() };
    let th = &theta_init.0;
    let mut theta: Vec<f64> = th.iter().zip(bounds).map(|(t, b)| b.clamp(*t)).collect();
    let mut sweeps = 0;
    let mut converged = q == 0;
    while !converged && sweeps < PLSA_MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..q {
            let gjj = g[(j, j)];
            let cross: f64 = (0..q).filter(|&k| k != j).map(|k| g[(j, k)] * (theta[k] - th[k])).sum();
            let r = th[j] - cross / gjj;
            let mut v = bounds[j].clamp(soft(r, kappa[j] / (2.0 * gjj)));
            if v == 0.0 {
                v = 0.0;
            }
            max_change = max_change.max((v - theta[j]).abs());
            theta[j] = v;
        }
        converged = max_change < PLSA_TOL;
    }
    PlsaOutcome { theta: ThetaVector(theta), converged, sweeps, identity_fallback }
}

/// `½ ∂²F` at `theta` from central differences of the analytic gradient,
/// symmetrized.
pub fn default_g(q: &RealizedCov, mask: &ParameterMask, theta: &ThetaVector) -> Result<DMatrix<f64>, SparseError> {
    let contrast = Contrast::new(q, mask)?;
    let n = mask.q();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let b = mask.bounds()[j];
        let step = 1e-5 * theta.0[j].abs().max(1.0);
        let mut up = theta.0.clone();
        let mut dn = theta.0.clone();
        up[j] = (up[j] + step).min(b.hi);
        dn[j] = (dn[j] - step).max(b.lo);
        let width = up[j] - dn[j];
        let gu = contrast.eval(&up, true)?.1;
        let gd = contrast.eval(&dn, true)?.1;
        for i in 0..n {
            hess[(i, j)] = (gu[i] - gd[i]) / width;
        }
    }
    Ok((&hess + hess.transpose()) * 0.25)
}

/// Indices of the nonzero entries.
pub fn support(theta: &ThetaVector) -> Vec<usize> {
    theta.0.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoRefit {
    pub fit: FitResult,
    /// Mask with the inactive slots pinned to 0; `fit` lives on this mask.
    pub reduced_mask: ParameterMask,
    /// `θ̌` embedded back into the full slot layout.
    pub theta_full: ThetaVector,
}

/// Refit on the sub-box where slots outside `active_set` are zero.
pub fn po_refit(
    q: &RealizedCov,
    mask: &ParameterMask,
    active_set: &[usize],
    theta_init: &ThetaVector,
    opts: &FitOptions,
) -> Result<PoRefit, SparseError> {
    mask.check_theta(theta_init)?;
    let mut is_active = vec![false; mask.q()];
    for &j in active_set {
        if j >= mask.q() {
            return Err(SparseError::Config(format!("active slot {j} out of range")));
        }
        is_active[j] = true;
    }
    let inactive: Vec<usize> = (0..mask.q()).filter(|&j| !is_active[j]).collect();
    let (reduced_mask, kept) = mask.pin_to_zero(&inactive)?;
    let start = ThetaVector(kept.iter().map(|&j| mask.bounds()[j].clamp(theta_init.0[j])).collect());
    let fit = fit_with(q, &reduced_mask, &start, opts)?;
    let mut full = vec![0.0; mask.q()];
    for (r, &j) in kept.iter().enumerate() {
        full[j] = fit.theta_hat.0[r];
    }
    Ok(PoRefit { fit, reduced_mask, theta_full: ThetaVector(full) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseFitResult {
    pub theta_init: ThetaVector,
    pub kappa: Vec<f64>,
    pub theta_lsa: ThetaVector,
    pub lsa_clipped: Vec<usize>,
    pub theta_plsa: Option<ThetaVector>,
    pub plsa_converged: Option<bool>,
    pub plsa_identity_fallback: Option<bool>,
    pub active_set: Vec<usize>,
    pub theta_po: ThetaVector,
    pub po: PoRefit,
    pub delta_warnings: Vec<String>,
    pub labels: Vec<String>,
}

impl SparseFitResult {
    pub fn to_json(&self) -> Value {
        let lab = |idx: &[usize]| idx.iter().map(|&j| self.labels[j].clone()).collect::<Vec<_>>();
        json!({
            "labels": self.labels,
            "theta_init": self.theta_init.0,
            "kappa": self.kappa,
            "theta_lsa": self.theta_lsa.0,
            "lsa_clipped": lab(&self.lsa_clipped),
            "theta_plsa": self.theta_plsa.as_ref().map(|t| t.0.clone()),
            "plsa_converged": self.plsa_converged,
            "plsa_identity_fallback": self.plsa_identity_fallback,
            "active_set": lab(&self.active_set),
            "theta_po": self.theta_po.0,
            "po_fit": self.po.fit.to_json(),
            "delta_warnings": self.delta_warnings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseOptions {
    pub fit: FitOptions,
    /// Also compute the PLSA estimate with `G = ½ ∂²F(θ̂)`.
    pub plsa: bool,
}

impl Default for SparseOptions {
    fn default() -> Self {
        SparseOptions { fit: FitOptions::default(), plsa: true }
    }
}

/// LSA/PLSA and P-O refit around an already computed initial fit `init`.
pub fn sparse_from_fit(
    q: &RealizedCov,
    mask: &ParameterMask,
    init: &FitResult,
    cfg: &PenaltyConfig,
    opts: &SparseOptions,
) -> Result<SparseFitResult, SparseError> {
    cfg.validate()?;
    let theta_init = init.theta_hat.clone();
    let kappa = effective_weights(&theta_init, cfg, mask);
    let lsa = lsa_estimate(&theta_init, &kappa, mask.bounds());
    let (theta_plsa, plsa_converged, plsa_identity_fallback) = if opts.plsa {
        let g = default_g(q, mask, &theta_init)?;
        let out = plsa_estimate(&theta_init, &kappa, &g, mask.bounds());
        (Some(out.theta), Some(out.converged), Some(out.identity_fallback))
    } else {
        (None, None, None)
    };
    let active_set = support(&lsa.theta);
    let po = po_refit(q, mask, &active_set, &theta_init, &opts.fit)?;
    Ok(SparseFitResult {
        delta_warnings: delta_proximity(&theta_init, cfg, mask),
        theta_init,
        kappa,
        theta_lsa: lsa.theta,
        lsa_clipped: lsa.clipped,
        theta_plsa,
        plsa_converged,
        plsa_identity_fallback,
        active_set,
        theta_po: po.theta_full.clone(),
        po,
        labels: mask.labels().to_vec(),
    })
}

/// Full pipeline: initial fit from `theta_start`, then [`sparse_from_fit`].
pub fn sparse_fit(
    q: &RealizedCov,
    mask: &ParameterMask,
    theta_start: &ThetaVector,
    cfg: &PenaltyConfig,
    opts: &SparseOptions,
) -> Result<(FitResult, SparseFitResult), SparseError> {
    let init = fit_with(q, mask, theta_start, &opts.fit)?;
    let sparse = sparse_from_fit(q, mask, &init, cfg, opts)?;
    Ok((init, sparse))
}
