//! Monte Carlo estimates with standard errors and confidence intervals.
//!
//! All reductions run sequentially over slices in index order with
//! compensated summation, so a result depends only on the sample values and
//! never on how the samples were produced across threads.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Default two-sided confidence level (about three standard errors).
pub const DEFAULT_CONFIDENCE: f64 = 0.997;

/// Compensated (Neumaier) sum in iteration order.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    neumaier_sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample covariance of two aligned columns.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    neumaier_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my))) / (n - 1) as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    covariance(xs, xs)
}

/// Two-sided normal quantile for a confidence level in (0, 1).
pub fn z_for(confidence: f64) -> f64 {
    assert!(
        confidence > 0.0 && confidence < 1.0,
        "confidence {confidence} outside (0,1)"
    );
    Normal::standard().inverse_cdf(0.5 * (1.0 + confidence))
}

/// A Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub confidence: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl McEstimate {
    pub fn new(value: f64, std_error: f64, n: usize, confidence: f64) -> Self {
        let std_error = if std_error.is_nan() {
            f64::INFINITY
        } else {
            std_error.max(0.0)
        };
        let half = z_for(confidence) * std_error;
        Self {
            value,
            std_error,
            n,
            confidence,
            ci_low: value - half,
            ci_high: value + half,
        }
    }

    /// A value known without sampling error.
    pub fn exact(value: f64, n: usize) -> Self {
        Self::new(value, 0.0, n, DEFAULT_CONFIDENCE)
    }

    /// Sample mean with the usual `s / sqrt(n)` standard error.
    pub fn from_samples(xs: &[f64], confidence: f64) -> Self {
        let n = xs.len();
        let m = mean(xs);
        let se = if n > 1 {
            (variance(xs) / n as f64).sqrt()
        } else {
            f64::INFINITY
        };
        Self::new(m, se, n, confidence)
    }

    /// Ratio of means `mean(num) / mean(den)` with a delta-method error.
    pub fn ratio(num: &[f64], den: &[f64], confidence: f64) -> Self {
        delta_method(
            &[num, den],
            |m| m[0] / m[1],
            |m| vec![1.0 / m[1], -m[0] / (m[1] * m[1])],
            confidence,
        )
    }

    /// Product of two independent estimates.
    pub fn times_independent(&self, other: &McEstimate) -> Self {
        let var = (self.value * other.std_error).powi(2) + (other.value * self.std_error).powi(2);
        Self::new(
            self.value * other.value,
            var.sqrt(),
            self.n.min(other.n),
            self.confidence,
        )
    }

    /// Quotient of two independent estimates.
    pub fn div_independent(&self, other: &McEstimate) -> Self {
        let r = self.value / other.value;
        let rel = (self.std_error / self.value).powi(2) + (other.std_error / other.value).powi(2);
        let se = if self.value == 0.0 {
            self.std_error / other.value.abs()
        } else {
            r.abs() * rel.sqrt()
        };
        Self::new(r, se, self.n.min(other.n), self.confidence)
    }

    /// Affine map `alpha + beta * value`.
    pub fn affine(&self, alpha: f64, beta: f64) -> Self {
        Self::new(
            alpha + beta * self.value,
            beta.abs() * self.std_error,
            self.n,
            self.confidence,
        )
    }

    pub fn with_confidence(&self, confidence: f64) -> Self {
        Self::new(self.value, self.std_error, self.n, confidence)
    }

    /// `|value - target| <= k * std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }

    /// `value <= bound + k * std_error`.
    pub fn at_most(&self, bound: f64, k: f64) -> bool {
        self.value <= bound + k * self.std_error
    }

    /// `value >= bound - k * std_error`.
    pub fn at_least(&self, bound: f64, k: f64) -> bool {
        self.value >= bound - k * self.std_error
    }

    /// Relative standard error, infinite when the value is zero.
    pub fn relative_error(&self) -> f64 {
        if self.value == 0.0 {
            if self.std_error == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.std_error / self.value.abs()
        }
    }
}

/// Standard error of a difference of two independent estimates.
pub fn joint_std_error(a: &McEstimate, b: &McEstimate) -> f64 {
    a.std_error.hypot(b.std_error)
}

/// `|a - b| <= k * joint standard error`.
pub fn jointly_within(a: &McEstimate, b: &McEstimate, k: f64) -> bool {
    (a.value - b.value).abs() <= k * joint_std_error(a, b)
}

/// Delta-method estimate of `g(mean(col_0), ..., mean(col_k))`.
///
/// `grad` returns the gradient of `g` at the vector of means; the variance is
/// `grad' Sigma grad / n` with `Sigma` the sample covariance of the columns.
pub fn delta_method<G, D>(columns: &[&[f64]], g: G, grad: D, confidence: f64) -> McEstimate
where
    G: Fn(&[f64]) -> f64,
    D: Fn(&[f64]) -> Vec<f64>,
{
    let n = columns.first().map_or(0, |c| c.len());
    assert!(
        columns.iter().all(|c| c.len() == n),
        "delta_method: misaligned columns"
    );
    if n == 0 {
        return McEstimate::new(f64::NAN, f64::INFINITY, 0, confidence);
    }
    let means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
    let value = g(&means);
    if n < 2 {
        return McEstimate::new(value, f64::INFINITY, n, confidence);
    }
    let grad = grad(&means);
    // Project each sample onto the gradient; the variance of the projection
    // equals grad' Sigma grad.
    let projected: Vec<f64> = (0..n)
        .map(|i| neumaier_sum(columns.iter().zip(&grad).map(|(c, g)| c[i] * g)))
        .collect();
    let se = (variance(&projected) / n as f64).sqrt();
    McEstimate::new(value, se, n, confidence)
}
