//! Small fixed-order reductions used by every Monte Carlo estimate.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MeanEstimate {
    /// Relative standard error; zero when the mean is zero.
    pub fn rel_se(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.std_error / self.mean.abs()
        }
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.mean - target).abs() <= n_se * self.std_error
    }
}

/// Sample mean and standard error (sample variance with `n - 1`).
pub fn mean_se(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    if n == 0 {
        return MeanEstimate {
            mean: f64::NAN,
            std_error: f64::NAN,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanEstimate { mean, std_error, n }
}

/// Weighted mean `Σ w x / n` (importance sampling estimator of an integral,
/// not a normalised average) with its standard error.
pub fn weighted_sum_mean(xs: &[f64], weights: &[f64]) -> MeanEstimate {
    let prod: Vec<f64> = xs.iter().zip(weights).map(|(x, w)| x * w).collect();
    mean_se(&prod)
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Least-squares slope of `log2(err)` against `-log2(h)`; the observed order
/// of convergence of a refinement sequence with `h` halving at each level.
pub fn observed_order(errors: &[f64]) -> f64 {
    let n = errors.len();
    assert!(n >= 2, "need at least two refinement levels");
    let xs: Vec<f64> = (0..n).map(|k| k as f64).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    -sxy / sxx
}
