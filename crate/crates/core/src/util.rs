//! Shared numeric helpers: angle wrapping, stable reductions, threading.

use std::sync::OnceLock;

/// Wraps an angle in degrees into `[0, 360)`.
///
/// `rem_euclid` can round to exactly 360.0 for tiny negative inputs, so the
/// result is post-checked to keep the interval half-open.
pub fn wrap_deg_0_360(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_deg_signed(a: f64) -> f64 {
    let r = wrap_deg_0_360(a);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Circular distance between two headings in degrees, in `[0, 180]`.
pub fn circular_distance_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Numerically stable `log(sum(exp(xs)))` with max subtraction.
///
/// Returns `-inf` for an empty slice or a slice of `-inf` entries.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if !m.is_finite() {
        return m;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - m).exp();
    }
    m + sum.ln()
}

/// Builds the global worker pool, honoring the `PPLT_THREADS` cap.
///
/// Without the variable (or on any parse failure) the pool defaults to the
/// available cores. Safe to call more than once; only the first call wins.
pub fn init_thread_pool_from_env() {
    static ONCE: OnceLock<()> = OnceLock::new();
    ONCE.get_or_init(|| {
        if let Ok(raw) = std::env::var("PPLT_THREADS") {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n > 0 {
                    // Ignore failure: a pool may already exist (e.g. in tests).
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn wrap_0_360_half_open() {
        assert_eq!(wrap_deg_0_360(0.0), 0.0);
        assert_eq!(wrap_deg_0_360(360.0), 0.0);
        assert_eq!(wrap_deg_0_360(-1e-15), 0.0); // rem_euclid rounds up to 360 here
        assert_abs_diff_eq!(wrap_deg_0_360(-90.0), 270.0);
        assert_abs_diff_eq!(wrap_deg_0_360(725.0), 5.0);
    }

    #[test]
    fn wrap_signed_interval() {
        assert_eq!(wrap_deg_signed(180.0), 180.0);
        assert_eq!(wrap_deg_signed(-180.0), 180.0);
        assert_abs_diff_eq!(wrap_deg_signed(190.0), -170.0);
        assert_abs_diff_eq!(wrap_deg_signed(-190.0), 170.0);
    }

    #[test]
    fn circular_distance_wraps() {
        assert_abs_diff_eq!(circular_distance_deg(179.0, -179.0), 2.0);
        assert_abs_diff_eq!(circular_distance_deg(-179.0, 179.0), 2.0);
        assert_abs_diff_eq!(circular_distance_deg(10.0, 350.0), 20.0);
        assert_eq!(circular_distance_deg(42.0, 42.0), 0.0);
    }

    #[test]
    fn logsumexp_matches_naive_on_small_values() {
        let xs: [f64; 4] = [0.1, -0.4, 2.0, 0.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(logsumexp(&xs), naive, epsilon = 1e-14);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        // exp(1000) overflows f64; max subtraction keeps this finite.
        let xs = [1000.0, 999.0];
        let expect = 1000.0 + (1.0 + (-1.0f64).exp()).ln();
        assert_abs_diff_eq!(logsumexp(&xs), expect, epsilon = 1e-12);
    }

    #[test]
    fn logsumexp_handles_empty_and_neg_inf() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
