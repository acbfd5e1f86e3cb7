//! Order-fixed reductions and small Monte Carlo summaries.
//!
//! All sums go through [`pairwise_sum`], whose association order depends only
//! on the slice length. Results therefore do not change with thread count.

use num_complex::Complex64;

const LEAF: usize = 32;

/// Pairwise (tree) summation with a fixed split rule.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= LEAF {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        return s;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub fn pairwise_sum_complex(v: &[Complex64]) -> Complex64 {
    if v.len() <= LEAF {
        let mut s = Complex64::new(0.0, 0.0);
        for x in v {
            s += x;
        }
        return s;
    }
    let mid = v.len() / 2;
    pairwise_sum_complex(&v[..mid]) + pairwise_sum_complex(&v[mid..])
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(v) / v.len() as f64
}

/// Sample mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    let m = mean(v);
    if n < 2 {
        return (m, f64::NAN);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Componentwise mean and standard errors of complex samples.
pub fn complex_mean_se(v: &[Complex64]) -> (Complex64, f64, f64) {
    let re: Vec<f64> = v.iter().map(|z| z.re).collect();
    let im: Vec<f64> = v.iter().map(|z| z.im).collect();
    let (mr, sr) = mean_se(&re);
    let (mi, si) = mean_se(&im);
    (Complex64::new(mr, mi), sr, si)
}

/// Weighted mean `Σ wᵢ vᵢ / Σ wᵢ`.
pub fn weighted_mean(weights: &[f64], values: &[f64]) -> f64 {
    let prod: Vec<f64> = weights.iter().zip(values).map(|(w, v)| w * v).collect();
    pairwise_sum(&prod) / pairwise_sum(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_exact_small_sums() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn mean_se_of_known_sample() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weighted_mean_example() {
        assert_eq!(weighted_mean(&[3.0, 1.0], &[0.0, 4.0]), 1.0);
    }
}
