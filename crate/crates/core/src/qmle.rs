//! Quasi-likelihood contrast, its minimization over the box, and
//! asymptotic standard errors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::lisrel::{jacobian_from_structure, ModelError, ParameterMask, Structure, ThetaVector};
use crate::matrix::{asymcov_w_inv, PdFactor, SymMatrix};
use crate::optim::{minimize_box, BoxBfgsOptions};
use crate::realized::RealizedCov;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Q is {q}x{q} but the model has p = {p}")]
    Dimension { q: usize, p: usize },
    #[error("theta[{label}] = {value} is outside [{lo}, {hi}]")]
    OutOfBounds { label: String, value: f64, lo: f64, hi: f64 },
    #[error("Σ(θ̂) is not positive definite")]
    SigmaNotPd,
    #[error("information matrix is singular along {directions:?}")]
    SingularInformation { directions: Vec<String> },
}

/// Value returned when `Σ(θ)` is not positive definite.
pub const INFEASIBLE_CONTRAST: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastValue {
    pub value: f64,
    /// False when `Σ(θ)` failed the PD test and `value` is the surrogate.
    pub sigma_pd: bool,
    /// True when `Q` is singular and the identity-weight form was used.
    pub identity_weight: bool,
}

/// Cached pieces of `Q` reused across evaluations.
#[derive(Debug, Clone)]
pub(crate) struct Contrast<'a> {
    mask: &'a ParameterMask,
    q: &'a DMatrix<f64>,
    q_logdet: Option<f64>,
}

impl<'a> Contrast<'a> {
    pub(crate) fn new(q: &'a RealizedCov, mask: &'a ParameterMask) -> Result<Self, FitError> {
        if q.p() != mask.p() {
            return Err(FitError::Dimension { q: q.p(), p: mask.p() });
        }
        let q_logdet = PdFactor::new(q.q().as_matrix()).ok().map(|f| f.logdet());
        Ok(Contrast { mask, q: q.q().as_matrix(), q_logdet })
    }

    pub(crate) fn identity_weight(&self) -> bool {
        self.q_logdet.is_none()
    }

    /// Value and (optionally) gradient at `theta`.
    pub(crate) fn eval(&self, theta: &[f64], want_grad: bool) -> Result<(ContrastValue, Vec<f64>), FitError> {
        let m = self.mask.unpack(&ThetaVector(theta.to_vec()))?;
        let s = Structure::new(&m)?;
        let p = self.q.nrows();
        match self.q_logdet {
            Some(q_logdet) => {
                let Ok(fac) = PdFactor::new(&s.sigma) else {
                    let cv = ContrastValue { value: INFEASIBLE_CONTRAST, sigma_pd: false, identity_weight: false };
                    return Ok((cv, vec![0.0; theta.len()]));
                };
                let sinv = fac.inverse();
                let sinv_q = &sinv * self.q;
                let value = fac.logdet() - q_logdet + sinv_q.trace() - p as f64;
                let grad = if want_grad {
                    let mut mm = &sinv - &sinv_q * &sinv;
                    crate::matrix::symmetrize_in_place(&mut mm);
                    self.mask.gather(&s.trace_gradient(&mm))
                } else {
                    Vec::new()
                };
                Ok((ContrastValue { value, sigma_pd: true, identity_weight: false }, grad))
            }
            None => {
                let r = self.q - &s.sigma;
                let mut value = 0.0;
                for j in 0..p {
                    for i in j..p {
                        value += r[(i, j)] * r[(i, j)];
                    }
                }
                let sigma_pd = PdFactor::new(&s.sigma).is_ok();
                let grad = if want_grad {
                    let mm = DMatrix::from_fn(p, p, |i, j| if i == j { -2.0 * r[(i, j)] } else { -r[(i, j)] });
                    self.mask.gather(&s.trace_gradient(&mm))
                } else {
                    Vec::new()
                };
                Ok((ContrastValue { value, sigma_pd, identity_weight: true }, grad))
            }
        }
    }
}

fn check_bounds(mask: &ParameterMask, theta: &ThetaVector) -> Result<(), FitError> {
    mask.check_theta(theta)?;
    for (s, (v, b)) in theta.0.iter().zip(mask.bounds()).enumerate() {
        if !b.contains(*v) {
            return Err(FitError::OutOfBounds { label: mask.labels()[s].clone(), value: *v, lo: b.lo, hi: b.hi });
        }
    }
    Ok(())
}

/// `F(Q, Σ(θ)) = log det Σ − log det Q + tr(Σ⁻¹Q) − p`, or the
/// identity-weighted quadratic form when `Q` is singular.
pub fn contrast_f(q: &RealizedCov, mask: &ParameterMask, theta: &ThetaVector) -> Result<ContrastValue, FitError> {
    check_bounds(mask, theta)?;
    Ok(Contrast::new(q, mask)?.eval(&theta.0, false)?.0)
}

/// Analytic gradient of [`contrast_f`].
pub fn contrast_gradient(q: &RealizedCov, mask: &ParameterMask, theta: &ThetaVector) -> Result<Vec<f64>, FitError> {
    check_bounds(mask, theta)?;
    Ok(Contrast::new(q, mask)?.eval(&theta.0, true)?.1)
}

/// Quasi-log-likelihood of Gaussian increments with covariance `h Σ`.
pub fn quasi_loglik(q: &RealizedCov, sigma: &SymMatrix) -> Result<f64, FitError> {
    let p = q.p();
    if sigma.dim() != p {
        return Err(FitError::Dimension { q: p, p: sigma.dim() });
    }
    let fac = PdFactor::new(sigma.as_matrix()).map_err(|_| FitError::SigmaNotPd)?;
    let n = q.n() as f64;
    let tr = (fac.inverse() * q.q().as_matrix()).trace();
    let pf = p as f64;
    Ok(-0.5 * pf * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * pf * n * q.h().ln() - 0.5 * n * fac.logdet() - 0.5 * n * tr)
}

/// Maximum of [`quasi_loglik`] over all PD `Σ`, attained at `Σ = Q`.
pub fn saturated_loglik(q: &RealizedCov) -> Result<f64, FitError> {
    quasi_loglik(q, q.q())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: ThetaVector,
    pub contrast: f64,
    /// Quasi-log-likelihood at `θ̂`; absent if `Σ(θ̂)` is not PD.
    pub loglik: Option<f64>,
    pub se: Option<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub fallback_identity_v: bool,
    pub sigma_pd: bool,
    pub labels: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> Value {
        let named = |vals: &[f64]| {
            let mut m = Map::new();
            for (l, v) in self.labels.iter().zip(vals) {
                m.insert(l.clone(), json!(v));
            }
            Value::Object(m)
        };
        json!({
            "theta": named(&self.theta_hat.0),
            "se": self.se.as_deref().map(named),
            "contrast": self.contrast,
            "loglik": self.loglik,
            "diagnostics": {
                "converged": self.converged,
                "iterations": self.iterations,
                "grad_norm": self.grad_norm,
                "fallback_identity_v": self.fallback_identity_v,
                "sigma_pd": self.sigma_pd,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Compute standard errors at `θ̂` (skipped silently when not converged).
    pub standard_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 2000, rel_tol: 1e-8, standard_errors: false }
    }
}

pub fn fit(q: &RealizedCov, mask: &ParameterMask, theta_init: &ThetaVector) -> Result<FitResult, FitError> {
    fit_with(q, mask, theta_init, &FitOptions::default())
}

pub fn fit_with(
    q: &RealizedCov,
    mask: &ParameterMask,
    theta_init: &ThetaVector,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    check_bounds(mask, theta_init)?;
    let contrast = Contrast::new(q, mask)?;
    let lo: Vec<f64> = mask.bounds().iter().map(|b| b.lo).collect();
    let hi: Vec<f64> = mask.bounds().iter().map(|b| b.hi).collect();
    let objective = |x: &[f64]| match contrast.eval(x, true) {
        Ok((cv, g)) => (cv.value, g),
        Err(_) => (INFEASIBLE_CONTRAST, vec![0.0; x.len()]),
    };
    let bopts = BoxBfgsOptions { max_iter: opts.max_iter, rel_tol: opts.rel_tol, ..Default::default() };
    let out = minimize_box(objective, &theta_init.0, &lo, &hi, &bopts);
    let theta_hat = ThetaVector(out.x);
    let (cv, _) = contrast.eval(&theta_hat.0, false)?;
    let sigma = crate::lisrel::build_sigma(mask, &theta_hat)?;
    let loglik = quasi_loglik(q, &sigma).ok();
    let mut result = FitResult {
        theta_hat,
        contrast: cv.value,
        loglik,
        se: None,
        converged: out.converged && cv.sigma_pd,
        iterations: out.iterations,
        grad_norm: out.proj_grad_norm,
        fallback_identity_v: contrast.identity_weight(),
        sigma_pd: cv.sigma_pd,
        labels: mask.labels().to_vec(),
    };
    if opts.standard_errors && result.converged {
        result.se = standard_errors(&result, mask, q.n()).ok();
    }
    Ok(result)
}

/// Best of `starts` fits: the given start plus jittered copies drawn from
/// `seed`. Converged fits are preferred, then the smaller contrast.
pub fn fit_multistart(
    q: &RealizedCov,
    mask: &ParameterMask,
    theta_init: &ThetaVector,
    starts: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    let mut best = fit_with(q, mask, theta_init, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 1..starts.max(1) {
        let start: Vec<f64> = theta_init
            .0
            .iter()
            .zip(mask.bounds())
            .map(|(v, b)| {
                let spread = 0.5 * v.abs().max(1.0);
                b.clamp(v + spread * rng.random_range(-1.0..1.0))
            })
            .collect();
        let cand = fit_with(q, mask, &ThetaVector(start), opts)?;
        let better = match (cand.converged, best.converged) {
            (true, false) => true,
            (false, true) => false,
            _ => cand.contrast < best.contrast,
        };
        if better {
            best = cand;
        }
    }
    Ok(best)
}

/// Asymptotic information `Δᵀ W(θ)⁻¹ Δ` at `theta`.
pub fn information_matrix(mask: &ParameterMask, theta: &ThetaVector) -> Result<DMatrix<f64>, FitError> {
    let s = Structure::new(&mask.unpack(theta)?)?;
    let sigma = SymMatrix::new(s.sigma.clone()).expect("square");
    let winv = asymcov_w_inv(&sigma).map_err(|_| FitError::SigmaNotPd)?;
    let delta = jacobian_from_structure(mask, &s).delta;
    Ok(delta.transpose() * winv.as_matrix() * delta)
}

/// Asymptotic covariance of `θ̂`, `(Δᵀ W⁻¹ Δ)⁻¹ / n`.
pub fn asymptotic_covariance(mask: &ParameterMask, theta: &ThetaVector, n: usize) -> Result<DMatrix<f64>, FitError> {
    let info = information_matrix(mask, theta)?;
    let eig = info.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let weak: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] <= 1e-10 * lmax).collect();
    if !weak.is_empty() || lmax <= 0.0 {
        let mut directions = Vec::new();
        for &k in &weak {
            let v = eig.eigenvectors.column(k);
            let (arg, _) = v.iter().enumerate().fold((0, 0.0), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
            directions.push(mask.labels()[arg].clone());
        }
        return Err(FitError::SingularInformation { directions });
    }
    let inv = PdFactor::new(&info).map_err(|_| FitError::SingularInformation { directions: vec![] })?.inverse();
    Ok(inv / n as f64)
}

pub fn standard_errors(fit: &FitResult, mask: &ParameterMask, n: usize) -> Result<Vec<f64>, FitError> {
    standard_errors_at(mask, &fit.theta_hat, n)
}

/// `se_j = √([(Δᵀ W⁻¹ Δ)⁻¹]_jj / n)` evaluated at `theta`.
pub fn standard_errors_at(mask: &ParameterMask, theta: &ThetaVector, n: usize) -> Result<Vec<f64>, FitError> {
    let cov = asymptotic_covariance(mask, theta, n)?;
    Ok(cov.diagonal().iter().map(|v| v.sqrt()).collect())
}
