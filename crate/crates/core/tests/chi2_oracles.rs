use hfsem::inference::{chi2_cdf, chi2_sf, chi2_upper_quantile};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

fn density(df: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = df / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * 2f64.ln() - ln_gamma(k)).exp()
}

/// `P(χ²_df ≤ x)` by composite Simpson on the density; the df = 1 integrable
/// singularity at 0 is removed with the substitution `x = u²`.
fn cdf_by_integration(df: u32, x: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (0.0, x.sqrt());
    let step = (b - a) / n as f64;
    let g = |u: f64| if u == 0.0 && df == 1 { 2.0 * (2.0 * std::f64::consts::PI).sqrt().recip() } else { 2.0 * u * density(df as f64, u * u) };
    let mut s = g(a) + g(b);
    for i in 1..n {
        let u = a + i as f64 * step;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(u);
    }
    s * step / 3.0
}

fn quantile_by_bisection(df: u32, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 200.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - cdf_by_integration(df, mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn reference_points_from_integrated_density() {
    let x = chi2_upper_quantile(1, 0.5).unwrap();
    assert!((x - 0.454936).abs() < 1e-6, "{x}");
    assert!((x - quantile_by_bisection(1, 0.5)).abs() < 1e-8);

    let x = chi2_upper_quantile(6, 0.05).unwrap();
    assert!((x - 12.5916).abs() < 1e-4, "{x}");
    assert!((x - quantile_by_bisection(6, 0.05)).abs() < 1e-8);

    for (df, alpha) in [(87, 0.05), (64, 0.05), (3, 0.01)] {
        let x = chi2_upper_quantile(df, alpha).unwrap();
        assert!((x - quantile_by_bisection(df, alpha)).abs() < 1e-7 * x, "df {df}");
    }
}

proptest! {
    #[test]
    fn quantile_inverts_independent_cdf(df in 1u32..200, alpha in 0.001f64..0.999) {
        let x = chi2_upper_quantile(df, alpha).unwrap();
        let dist = ChiSquared::new(df as f64).unwrap();
        prop_assert!((dist.sf(x) - alpha).abs() < 1e-10, "df {} alpha {} x {}", df, alpha, x);
    }

    #[test]
    fn cdf_agrees_with_statrs(df in 1u32..200, x in 0.0f64..400.0) {
        let dist = ChiSquared::new(df as f64).unwrap();
        prop_assert!((chi2_cdf(df, x) - dist.cdf(x)).abs() < 1e-12);
        prop_assert!((chi2_cdf(df, x) + chi2_sf(df, x) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quantile_is_monotone_in_alpha(df in 1u32..100, a in 0.01f64..0.5, b in 0.5f64..0.99) {
        prop_assert!(chi2_upper_quantile(df, a).unwrap() > chi2_upper_quantile(df, b).unwrap());
    }
}
