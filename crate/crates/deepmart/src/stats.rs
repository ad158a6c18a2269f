//! Descriptive statistics: stable sums, unbiased variance, the standard
//! normal distribution and the two-sided confidence interval for the
//! primal-dual bounds.

use crate::error::{Error, Result};

/// Pairwise (cascade) summation; error grows like log(n) instead of n.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 64 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance (divisor `n - 1`), two-pass pairwise scheme.
pub fn sample_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid("variance needs at least two values"));
    }
    let m = mean(values);
    let centered: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    Ok(pairwise_sum(&centered) / (values.len() - 1) as f64)
}

pub fn sample_std(values: &[f64]) -> Result<f64> {
    Ok(sample_variance(values)?.sqrt())
}

/// erf(x) to near machine precision: Maclaurin series on |x| <= 2, Lentz
/// continued fraction for the complementary function beyond.
fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x <= 2.0 {
        // erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
        let two_over_sqrt_pi = 1.1283791670955126;
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 1.0;
        loop {
            term *= -x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
            n += 1.0;
        }
        two_over_sqrt_pi * sum
    } else {
        1.0 - erfc_large(x)
    }
}

/// erfc(x) for x > 2 via the continued fraction
/// erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/2/(x + 2/2/(x + 3/2/(x + ...))))
/// evaluated with modified Lentz.
fn erfc_large(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    let mut n = 0.5;
    for _ in 0..200 {
        d = x + n * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + n / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 3e-16 {
            break;
        }
        n += 0.5;
    }
    let sqrt_pi = 1.7724538509055160;
    (-x * x).exp() / (sqrt_pi * f)
}

fn erfc(x: f64) -> f64 {
    if x > 2.0 {
        erfc_large(x)
    } else if x < -2.0 {
        2.0 - erfc_large(-x)
    } else {
        1.0 - erf(x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.3989422804014327;
    (-0.5 * x * x).exp() * INV_SQRT_2PI
}

/// Inverse standard normal CDF: Acklam's rational approximation polished by
/// two Newton steps on the erf-based CDF. Absolute error well below 1e-9.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p > 1.0 - P_LOW {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let err = normal_cdf(x) - p;
        x -= err / normal_pdf(x);
    }
    Ok(x)
}

/// Asymptotic `1 - alpha` confidence interval
/// `[L - z sigma_L / sqrt(J), U + z sigma_U / sqrt(J)]`.
pub fn confidence_interval(
    lower: f64,
    upper: f64,
    sigma_lower: f64,
    sigma_upper: f64,
    n_paths: usize,
    alpha: f64,
) -> Result<(f64, f64)> {
    if n_paths < 2 {
        return Err(Error::invalid("confidence interval needs at least 2 paths"));
    }
    if sigma_lower < 0.0 || sigma_upper < 0.0 {
        return Err(Error::invalid("standard deviations must be non-negative"));
    }
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let root_n = (n_paths as f64).sqrt();
    Ok((
        lower - z * sigma_lower / root_n,
        upper + z * sigma_upper / root_n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_anchors() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((normal_cdf(2.0) - 0.9772498680518208).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - (1.0 - 0.8413447460685429)).abs() < 1e-12);
        assert!((normal_cdf(5.0) - (1.0 - 2.866515718791939e-7)).abs() < 1e-13);
    }

    #[test]
    fn quantile_at_half_is_zero() {
        assert!(normal_quantile(0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn quantile_anchor_values() {
        let z = normal_quantile(0.975).unwrap();
        assert!((z - 1.959964).abs() < 1e-6, "{z}");
        let one = normal_quantile(0.84134474).unwrap();
        assert!((one - 1.0).abs() < 1e-6, "{one}");
    }

    #[test]
    fn quantile_round_trips_through_cdf() {
        for &p in &[1e-9, 1e-4, 0.02, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-7] {
            let x = normal_quantile(p).unwrap();
            assert!((normal_cdf(x) - p).abs() < 1e-12 * p.max(1.0 - p).max(1e-3));
        }
    }

    #[test]
    fn quantile_rejects_bad_probability() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(-0.1).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(sample_variance(&[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(sample_variance(&[4.0; 1000]).unwrap(), 0.0);
        assert!(sample_variance(&[1.0]).is_err());
    }

    #[test]
    fn variance_of_standard_normals() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| rand_distr::StandardNormal.sample(&mut rng))
            .collect();
        let var = sample_variance(&draws).unwrap();
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn interval_with_zero_noise_is_the_bounds() {
        let (lo, hi) = confidence_interval(3.0, 4.0, 0.0, 0.0, 100, 0.05).unwrap();
        assert_eq!((lo, hi), (3.0, 4.0));
    }

    #[test]
    fn interval_matches_published_row() {
        let (lo, hi) =
            confidence_interval(13.887, 13.960, 14.968, 5.468, 8_192_000, 0.05).unwrap();
        assert!((lo - 13.8768).abs() < 1e-3, "{lo}");
        assert!((hi - 13.9637).abs() < 1e-3, "{hi}");
    }

    #[test]
    fn interval_half_width_hand_check() {
        let (lo, hi) = confidence_interval(0.0, 0.0, 2.0, 2.0, 4, 0.05).unwrap();
        assert!((lo + 1.959964).abs() < 1e-5);
        assert!((hi - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn interval_rejects_bad_alpha() {
        assert!(confidence_interval(0.0, 1.0, 1.0, 1.0, 10, 0.0).is_err());
        assert!(confidence_interval(0.0, 1.0, 1.0, 1.0, 10, 2.0).is_err());
    }
}
