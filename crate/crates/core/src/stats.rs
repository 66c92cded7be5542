//! Small statistics toolbox used by the harness.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::scalar::Scalar;

/// Least-squares slope of `ln y` against `ln x`. Points must be positive.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom == 0.0 {
        return 0.0;
    }
    (n * sxy - sx * sy) / denom
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Unbiased sample covariance (divisor `k − 1`) of `k ≥ 2` vectors.
pub fn sample_covariance<T: Scalar>(samples: &[DVector<T>]) -> DMatrix<T> {
    let k = samples.len();
    assert!(k >= 2, "need at least two samples");
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= T::lit(k as f64);
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov.ger(T::one(), &d, &d, T::one());
    }
    cov / T::lit((k - 1) as f64)
}

/// One-sample Kolmogorov–Smirnov test against `N(0, variance)`.
/// Returns `(statistic, asymptotic p-value)`.
pub fn ks_normal(samples: &[f64], variance: f64) -> (f64, f64) {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let dist = Normal::new(0.0, variance.sqrt()).expect("positive variance");
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = dist.cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    (d, kolmogorov_sf((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn exact_power_law_slope() {
        let pts: Vec<_> = (1..50)
            .map(|k| {
                let t = 10f64.powf(k as f64 / 8.0);
                (t + 1.0, (t + 1.0).powf(-0.5))
            })
            .collect();
        assert!((loglog_slope(&pts) + 0.5).abs() < 1e-9);
        let flat: Vec<_> = pts.iter().map(|&(t, _)| (t, 3.0)).collect();
        assert!(loglog_slope(&flat).abs() < 1e-12);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn covariance_of_identical_samples_is_zero() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let c = sample_covariance(&[v.clone(), v.clone(), v]);
        assert!(c.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn ks_accepts_matching_gaussian_and_rejects_wrong_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs: Vec<f64> = (0..2000)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 * z })
            .collect();
        let (_, p) = ks_normal(&xs, 4.0);
        assert!(p > 0.01, "p = {p}");
        let (_, p_bad) = ks_normal(&xs, 1.0);
        assert!(p_bad < 1e-6);
    }
}
