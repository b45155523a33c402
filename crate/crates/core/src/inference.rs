//! Chi-squared quantiles and the goodness-of-fit tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lisrel::ParameterMask;
use crate::matrix::vech_len;
use crate::qmle::{contrast_f, FitError, FitResult};
use crate::realized::RealizedCov;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("test undefined: degrees of freedom {df} ≤ 0")]
    Saturated { df: i64 },
    #[error("fit did not converge")]
    NotConverged,
    #[error(transparent)]
    Fit(#[from] FitError),
}

// ---------------------------------------------------------------------------
// special functions

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower and upper incomplete gamma `(P(a, x), Q(a, x))`.
fn gamma_pq(a: f64, x: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 1.0);
    }
    let log_pref = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        let p = (log_pref.exp() * sum).min(1.0);
        (p, 1.0 - p)
    } else {
        // modified Lentz on the continued fraction for Q
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (log_pref.exp() * h).min(1.0);
        (1.0 - q, q)
    }
}

/// `P(χ²_df ≤ x)`.
pub fn chi2_cdf(df: u32, x: f64) -> f64 {
    gamma_pq(df as f64 / 2.0, x / 2.0).0
}

/// `P(χ²_df > x)`.
pub fn chi2_sf(df: u32, x: f64) -> f64 {
    gamma_pq(df as f64 / 2.0, x / 2.0).1
}

fn chi2_pdf(df: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = df as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * 2f64.ln() - ln_gamma(k)).exp()
}

/// Upper `alpha` point: `x` with `P(χ²_df > x) = alpha`.
pub fn chi2_upper_quantile(df: u32, alpha: f64) -> Result<f64, InferenceError> {
    if df == 0 {
        return Err(InferenceError::Domain("df must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::Domain(format!("alpha = {alpha} is not in (0, 1)")));
    }
    let f = |x: f64| chi2_sf(df, x) - alpha;
    let (mut lo, mut hi) = (0.0, df as f64 + 10.0);
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..500 {
        let fx = f(x);
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = chi2_pdf(df, x);
        let mut next = if dens > 0.0 { x + fx / dens } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-14 * x.max(1.0) || hi - lo <= 1e-14 * x.max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// tests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Plain,
    Penalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DfSource {
    Fixed,
    EstimatedActiveSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub df: u32,
    pub critical: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub kind: TestKind,
    pub df_source: DfSource,
}

impl TestReport {
    pub const CSV_HEADER: &'static str = "statistic,df,critical,p,reject";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.statistic, self.df, self.critical, self.p_value, self.reject)
    }

    fn build(statistic: f64, df: i64, alpha: f64, kind: TestKind, df_source: DfSource) -> Result<Self, InferenceError> {
        if df <= 0 {
            return Err(InferenceError::Saturated { df });
        }
        let df = df as u32;
        let critical = chi2_upper_quantile(df, alpha)?;
        let p_value = chi2_sf(df, statistic).clamp(0.0, 1.0);
        Ok(TestReport { statistic, df, critical, p_value, alpha, reject: statistic > critical, kind, df_source })
    }
}

/// `T_n = n F(Q, Σ(θ̂))` against `χ²_{p̄−q}`.
pub fn gof_test(q: &RealizedCov, fit: &FitResult, mask: &ParameterMask, alpha: f64) -> Result<TestReport, InferenceError> {
    if !fit.converged {
        return Err(InferenceError::NotConverged);
    }
    let df = vech_len(mask.p()) as i64 - mask.q() as i64;
    if df <= 0 {
        return Err(InferenceError::Saturated { df });
    }
    let stat = q.n() as f64 * contrast_f(q, mask, &fit.theta_hat)?.value;
    TestReport::build(stat, df, alpha, TestKind::Plain, DfSource::Fixed)
}

/// Penalized statistic `n F(Q, Σ(θ̌))` for a refit on an estimated support,
/// against `χ²_{p̄−|active|}`. `mask` is the mask the refit was computed on.
pub fn penalized_gof_test(
    q: &RealizedCov,
    po_fit: &FitResult,
    active_count: usize,
    mask: &ParameterMask,
    alpha: f64,
) -> Result<TestReport, InferenceError> {
    if !po_fit.converged {
        return Err(InferenceError::NotConverged);
    }
    let df = vech_len(mask.p()) as i64 - active_count as i64;
    if df <= 0 {
        return Err(InferenceError::Saturated { df });
    }
    let stat = q.n() as f64 * contrast_f(q, mask, &po_fit.theta_hat)?.value;
    TestReport::build(stat, df, alpha, TestKind::Penalized, DfSource::EstimatedActiveSet)
}
