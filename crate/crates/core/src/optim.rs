//! Box-constrained quasi-Newton minimization.
//!
//! Projected BFGS: variables sitting on a bound with the gradient pushing
//! outward are frozen for the iteration, the remaining ones take a
//! quasi-Newton step, and the trial point is projected back onto the box
//! before an Armijo backtracking test.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxBfgsOptions {
    pub max_iter: usize,
    /// Stop when `‖P(x − ∇f) − x‖∞ < rel_tol · (1 + |f|)`.
    pub rel_tol: f64,
    pub max_backtracks: usize,
}

impl Default for BoxBfgsOptions {
    fn default() -> Self {
        BoxBfgsOptions { max_iter: 2000, rel_tol: 1e-8, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub proj_grad_norm: f64,
    /// The last line search could not reduce `f` even along steepest descent.
    pub line_search_failed: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn proj_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| ((x[i] - g[i]).clamp(lo[i], hi[i]) - x[i]).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `f` over `[lo, hi]` starting from `x0` (projected first).
/// `f` returns the value and gradient; infeasible points should return a
/// huge finite value so the line search retreats.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &BoxBfgsOptions) -> BoxBfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    assert!(lo.len() == n && hi.len() == n, "bounds length mismatch");
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x);
    let mut h = identity(n);
    let mut h_is_identity = true;
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut pgn = proj_grad_norm(&x, &g, lo, hi);

    while iterations < opts.max_iter {
        if pgn < opts.rel_tol * (1.0 + fx.abs()) {
            return BoxBfgsOutcome { x, f: fx, grad: g, iterations, converged: true, proj_grad_norm: pgn, line_search_failed };
        }
        iterations += 1;
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))
            .collect();
        let mut d = direction(&h, &g, &active);
        if !(dot(&g, &d) < 0.0) {
            h = identity(n);
            h_is_identity = true;
            d = direction(&h, &g, &active);
        }
        let mut step = line_search(&mut f, &x, fx, &g, &d, lo, hi, opts.max_backtracks);
        if step.is_none() && !h_is_identity {
            h = identity(n);
            h_is_identity = true;
            d = direction(&h, &g, &active);
            step = line_search(&mut f, &x, fx, &g, &d, lo, hi, opts.max_backtracks);
        }
        let Some((x_new, f_new, g_new)) = step else {
            line_search_failed = true;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // curvature pairs only over the coordinates that moved
        let y: Vec<f64> = (0..n).map(|i| if s[i] == 0.0 { 0.0 } else { g_new[i] - g[i] }).collect();
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-10 * norm(&s) * yy.sqrt() && sy > 0.0 {
            if h_is_identity {
                let scale = sy / yy;
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = if i == j { scale } else { 0.0 };
                    }
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            h_is_identity = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        pgn = proj_grad_norm(&x, &g, lo, hi);
    }
    let converged = pgn < opts.rel_tol * (1.0 + fx.abs());
    BoxBfgsOutcome { x, f: fx, grad: g, iterations, converged, proj_grad_norm: pgn, line_search_failed }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `d_F = −H_FF g_F`, `d_A = 0`.
fn direction(h: &[f64], g: &[f64], active: &[bool]) -> Vec<f64> {
    let n = g.len();
    (0..n)
        .map(|i| {
            if active[i] {
                return 0.0;
            }
            -(0..n).filter(|&j| !active[j]).map(|j| h[i * n + j] * g[j]).sum::<f64>()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    lo: &[f64],
    hi: &[f64],
    max_backtracks: usize,
) -> Option<(Vec<f64>, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let mut t = 1.0;
    for _ in 0..max_backtracks {
        let mut xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        project(&mut xt, lo, hi);
        let p: Vec<f64> = xt.iter().zip(x).map(|(a, b)| a - b).collect();
        if p.iter().all(|v| *v == 0.0) {
            return None;
        }
        let moved = dot(g, &p);
        let (ft, gt) = f(&xt);
        if ft.is_finite() && ft <= fx + C1 * moved && moved < 0.0 {
            return Some((xt, ft, gt));
        }
        // f is flat to rounding: fall back on the slope along the step
        let flat = ft.is_finite() && (ft - fx) <= 1e-12 * (1.0 + fx.abs());
        if flat && moved < 0.0 && dot(&gt, &p).abs() <= C2 * moved.abs() {
            return Some((xt, ft, gt));
        }
        t *= 0.5;
    }
    None
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    // H⁺ = (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
