//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the estimators are generic over: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + Sum<T>
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Lossy cast from `f64`, used when mixing literals into generic code.
#[inline]
pub fn real<R: Real>(x: f64) -> R {
    R::from_f64(x).expect("f64 must convert into the scalar type")
}

/// Lossy cast from an integer count.
#[inline]
pub fn real_of<R: Real>(x: u64) -> R {
    R::from_u64(x).expect("u64 must convert into the scalar type")
}

/// ln(1 - exp(-a)) for a > 0, stable for both tiny and large `a`.
pub fn log1mexp<R: Real>(a: R) -> R {
    debug_assert!(a > R::zero());
    if a > real::<R>(std::f64::consts::LN_2) {
        (-(-a).exp()).ln_1p()
    } else {
        (-(-a).exp_m1()).ln()
    }
}

/// ln(x!) via exact accumulation for small x and Stirling's series beyond.
pub fn ln_factorial<R: Real>(x: u64) -> R {
    real(ln_factorial_f64(x))
}

fn ln_factorial_f64(x: u64) -> f64 {
    const TABLE_LEN: usize = 256;
    static TABLE: std::sync::OnceLock<[f64; TABLE_LEN]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0.0f64; TABLE_LEN];
        for i in 2..TABLE_LEN {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    });
    if (x as usize) < TABLE_LEN {
        return table[x as usize];
    }
    // Stirling series for ln Γ(x+1); the 1/x³ term keeps the error
    // below 1e-12 for x ≥ 256.
    let n = x as f64;
    (n + 0.5) * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * n)
        - 1.0 / (360.0 * n * n * n)
}

/// Equal-tailed sample quantile with linear interpolation between order
/// statistics. `q` must lie in [0, 1]; the input need not be sorted.
pub fn quantile<R: Real>(values: &[R], q: f64) -> R {
    assert!(!values.is_empty(), "quantile of an empty sample");
    assert!((0.0..=1.0).contains(&q), "quantile level outside [0, 1]");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile input"));
    quantile_sorted(&sorted, q)
}

/// Quantile of an already-sorted sample.
pub fn quantile_sorted<R: Real>(sorted: &[R], q: f64) -> R {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = real::<R>(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Sample mean.
pub fn mean<R: Real>(values: &[R]) -> R {
    assert!(!values.is_empty());
    values.iter().copied().sum::<R>() / real_of(values.len() as u64)
}

/// Unbiased sample variance (denominator n − 1).
pub fn sample_variance<R: Real>(values: &[R]) -> R {
    assert!(values.len() >= 2);
    let m = mean(values);
    let ss = values.iter().map(|&v| (v - m) * (v - m)).sum::<R>();
    ss / real_of(values.len() as u64 - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log1mexp_matches_naive_in_easy_range() {
        for &a in &[0.5f64, 1.0, 2.0, 10.0] {
            let naive = (1.0 - (-a).exp()).ln();
            assert!((log1mexp(a) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn log1mexp_stable_for_tiny_argument() {
        let a = 1e-12f64;
        // 1 - e^{-a} ≈ a, so the log should be close to ln(a).
        assert!((log1mexp(a) - a.ln()).abs() < 1e-6);
    }

    #[test]
    fn ln_factorial_exact_small_and_stirling_consistent() {
        assert_eq!(ln_factorial::<f64>(0), 0.0);
        assert_eq!(ln_factorial::<f64>(1), 0.0);
        assert!((ln_factorial::<f64>(5) - 120f64.ln()).abs() < 1e-12);
        // Continuity across the table/Stirling boundary.
        let direct: f64 = (2..=300).map(|i| (i as f64).ln()).sum();
        assert!((ln_factorial::<f64>(300) - direct).abs() < 1e-9);
    }

    #[test]
    fn quantile_linear_interpolation() {
        let v = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }
}
