//! Power utility, its conjugate, and Monte Carlo checks of the primal-dual
//! optimality conditions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ap::Verdict;
use crate::measure::weighted_mean;
use crate::model::{CounterexampleParams, DensityVariant};
use crate::stats::{self, McEstimate};

/// Tolerance on the coefficient of variation of `U'(X_T) / Y_T`.
pub const FOC_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DualityError {
    #[error("risk aversion a = {0} must satisfy 0 < a < 1")]
    InvalidRiskAversion(f64),
    #[error("misaligned samples: {what} has {got} entries, expected {expected}")]
    MisalignedSamples {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Power utility `U(x) = x^(1-a) / (1-a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    a: f64,
}

pub fn power_utility(a: f64) -> Result<UtilitySpec, DualityError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(DualityError::InvalidRiskAversion(a));
    }
    Ok(UtilitySpec { a })
}

impl UtilitySpec {
    pub fn a(&self) -> f64 {
        self.a
    }

    /// `1 / (1 - a)`, the exponent with `V(y) = (p-1) y^(-1/(p-1))`.
    pub fn conjugate_exponent(&self) -> f64 {
        1.0 / (1.0 - self.a)
    }

    pub fn u(&self, x: f64) -> f64 {
        x.powf(1.0 - self.a) / (1.0 - self.a)
    }

    pub fn marginal(&self, x: f64) -> f64 {
        x.powf(-self.a)
    }

    /// `V(y) = sup_x (U(x) - x y) = (a / (1-a)) y^(-(1-a)/a)`.
    pub fn conjugate(&self, y: f64) -> f64 {
        self.a / (1.0 - self.a) * y.powf(-(1.0 - self.a) / self.a)
    }

    /// `I(y) = (U')^(-1)(y) = y^(-1/a)`.
    pub fn inverse_marginal(&self, y: f64) -> f64 {
        y.powf(-1.0 / self.a)
    }
}

/// Result of an envelope check on a marginal utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub passed: bool,
    /// The pair with the smallest log-margin.
    pub worst_pair: Option<(f64, f64)>,
    /// Smallest `min(ln r - ln lower, ln upper - ln r)` with `r = U'(x)/U'(y)`;
    /// negative on violation.
    pub worst_margin: f64,
}

/// Checks `(1/C)(y/x)^a <= U'(x)/U'(y) <= C (y/x)^b` on every pair `x <= y`.
pub fn check_risk_aversion_bounds<F: Fn(f64) -> f64>(
    marginal: F,
    a: f64,
    b: f64,
    c: f64,
    pairs: &[(f64, f64)],
) -> EnvelopeCheck {
    let mut worst = EnvelopeCheck {
        passed: true,
        worst_pair: None,
        worst_margin: f64::INFINITY,
    };
    let ln_c = c.ln();
    for &(x, y) in pairs {
        let ln_ratio = (marginal(x) / marginal(y)).ln();
        let ln_q = (y / x).ln();
        let lower = -ln_c + a * ln_q;
        let upper = ln_c + b * ln_q;
        let margin = (ln_ratio - lower).min(upper - ln_ratio);
        if margin < worst.worst_margin {
            worst.worst_margin = margin;
            worst.worst_pair = Some((x, y));
        }
    }
    // Round-off in the logarithms is of order 1e-15 relative.
    worst.passed = worst.worst_margin >= -1e-12;
    worst
}

/// Geometric grid of pairs `x <= y` over `[1e-3, 1e3]`.
pub fn default_pairs() -> Vec<(f64, f64)> {
    let pts: Vec<f64> = (0..=24)
        .map(|k| 10f64.powf(-3.0 + 0.25 * k as f64))
        .collect();
    let mut out = Vec::new();
    for (i, &x) in pts.iter().enumerate() {
        for &y in &pts[i..] {
            out.push((x, y));
        }
    }
    out
}

/// Outcome of the first-order and budget checks for a candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    /// Coefficient of variation of `U'(X_T) / Y_T` under `P`.
    pub foc_cv: f64,
    /// `E_P[X_T Y_T]`.
    pub product_mean: McEstimate,
    /// `X_0 Y_0`.
    pub product_target: f64,
    /// `E_P[V(Y_T)]`.
    pub v_estimate: McEstimate,
    /// Hill estimate of the tail index of the `V` integrand over the largest
    /// 1% of samples.
    pub v_tail_index: f64,
    /// Tail index at most 2 (infinite variance is plausible).
    pub heavy_tail: bool,
    pub gap: Option<McEstimate>,
    pub variant: Option<DensityVariant>,
    pub verdict: Verdict,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

fn aligned(what: &'static str, got: usize, expected: usize) -> Result<(), DualityError> {
    if got != expected {
        return Err(DualityError::MisalignedSamples {
            what,
            got,
            expected,
        });
    }
    Ok(())
}

/// Hill estimator of the tail index from the largest `fraction` of values.
pub fn hill_tail_index(values: &[f64], fraction: f64) -> f64 {
    let mut v: Vec<f64> = values
        .iter()
        .copied()
        .filter(|x| *x > 0.0 && x.is_finite())
        .collect();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((v.len() as f64 * fraction) as usize).max(2);
    if v.len() <= k {
        return f64::NAN;
    }
    let threshold = v[k];
    let h = stats::neumaier_sum(v[..k].iter().map(|x| (x / threshold).ln())) / k as f64;
    if h > 0.0 {
        1.0 / h
    } else {
        f64::INFINITY
    }
}

/// `sd / mean` of `values` under the self-normalized weights.
pub fn weighted_cv(values: &[f64], weights: &[f64]) -> f64 {
    let sw = stats::neumaier_sum(weights.iter().copied());
    let m = stats::neumaier_sum(values.iter().zip(weights).map(|(v, w)| v * w)) / sw;
    let var = stats::neumaier_sum(
        values
            .iter()
            .zip(weights)
            .map(|(v, w)| w * (v - m) * (v - m)),
    ) / sw;
    var.max(0.0).sqrt() / m.abs()
}

/// Adds an independent relative error on an overall scale factor.
pub fn with_scale_error(e: McEstimate, rel: f64) -> McEstimate {
    McEstimate::new(e.value, e.std_error.hypot(e.value * rel), e.n, e.confidence)
}

/// Checks `U'(X_T) = Y_T` (up to a constant) and `E_P[X_T Y_T] = x0 y0`.
///
/// `y_terminal` are the dual values `Y_T(y0)`. `y_scale_rel_error` is the
/// relative standard error of a common factor in `y_terminal` that is not
/// reflected in the per-path spread (an independently estimated normalizer);
/// 0 when the dual values are exact.
#[allow(clippy::too_many_arguments)]
pub fn verify_primal_dual_pair(
    utility: &UtilitySpec,
    x_terminal: &[f64],
    y_terminal: &[f64],
    x0: f64,
    y0: f64,
    weights: &[f64],
    y_scale_rel_error: f64,
    confidence: f64,
) -> Result<DualityReport, DualityError> {
    let n = x_terminal.len();
    aligned("dual samples", y_terminal.len(), n)?;
    aligned("weights", weights.len(), n)?;
    let ratio: Vec<f64> = x_terminal
        .iter()
        .zip(y_terminal)
        .map(|(x, y)| utility.marginal(*x) / y)
        .collect();
    let foc_cv = weighted_cv(&ratio, weights);
    let xy: Vec<f64> = x_terminal
        .iter()
        .zip(y_terminal)
        .map(|(x, y)| x * y)
        .collect();
    let product_mean = with_scale_error(weighted_mean(&xy, weights, confidence), y_scale_rel_error);
    let v: Vec<f64> = y_terminal.iter().map(|y| utility.conjugate(*y)).collect();
    let v_estimate = weighted_mean(&v, weights, confidence);
    let w_mean = stats::mean(weights);
    let integrand: Vec<f64> = v.iter().zip(weights).map(|(v, w)| v * w / w_mean).collect();
    let v_tail_index = hill_tail_index(&integrand, 0.01);
    let target = x0 * y0;
    let verdict = if !product_mean.std_error.is_finite() || !v_estimate.value.is_finite() {
        Verdict::Inconclusive
    } else {
        Verdict::from_bool(
            foc_cv < FOC_TOLERANCE
                && (product_mean.value - target).abs() <= 3.0 * product_mean.std_error,
        )
    };
    Ok(DualityReport {
        foc_cv,
        product_mean,
        product_target: target,
        v_estimate,
        v_tail_index,
        heavy_tail: v_tail_index <= 2.0,
        gap: None,
        variant: None,
        verdict,
        n_samples: n,
        seed: None,
    })
}

/// Dual scale from the first-order condition: the geometric mean (under `P`)
/// of `U'(X_T) / Y_T`, exact when the ratio is constant.
pub fn foc_scale(
    utility: &UtilitySpec,
    x_terminal: &[f64],
    y_unit: &[f64],
    weights: &[f64],
) -> f64 {
    let logs: Vec<f64> = x_terminal
        .iter()
        .zip(y_unit)
        .map(|(x, y)| (utility.marginal(*x) / y).ln())
        .collect();
    let sw = stats::neumaier_sum(weights.iter().copied());
    (stats::neumaier_sum(logs.iter().zip(weights).map(|(l, w)| l * w)) / sw).exp()
}

/// Primal value, dual value, and their gap for candidate sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub y: f64,
    /// `v(y) + x y - u(x)`.
    pub gap: McEstimate,
    /// Best `E_P[U(X_T)]` over primal candidates.
    pub u_estimate: McEstimate,
    /// Best `E_P[V(y Y_T)]` over dual candidates.
    pub v_estimate: McEstimate,
    pub best_primal: usize,
    pub best_dual: usize,
}

/// `min_Y E_P[V(y Y_T)] + x y - max_X E_P[U(X_T)]` with a paired standard
/// error. Dual candidates are normalized to `Y_0 = 1`.
#[allow(clippy::too_many_arguments)]
pub fn duality_gap(
    utility: &UtilitySpec,
    x: f64,
    primal: &[&[f64]],
    dual: &[&[f64]],
    y: f64,
    weights: &[f64],
    y_scale_rel_error: f64,
    confidence: f64,
) -> Result<GapEstimate, DualityError> {
    let n = weights.len();
    for c in primal {
        aligned("primal candidate", c.len(), n)?;
    }
    for c in dual {
        aligned("dual candidate", c.len(), n)?;
    }
    let u_cols: Vec<Vec<f64>> = primal
        .iter()
        .map(|c| c.iter().map(|x| utility.u(*x)).collect())
        .collect();
    let v_cols: Vec<Vec<f64>> = dual
        .iter()
        .map(|c| c.iter().map(|yt| utility.conjugate(y * yt)).collect())
        .collect();
    let best = |cols: &[Vec<f64>], pick_max: bool| -> (usize, McEstimate) {
        cols.iter()
            .enumerate()
            .map(|(k, c)| (k, weighted_mean(c, weights, confidence)))
            .fold(None::<(usize, McEstimate)>, |acc, (k, e)| match acc {
                Some((_, b))
                    if (pick_max && b.value >= e.value) || (!pick_max && b.value <= e.value) =>
                {
                    acc
                }
                _ => Some((k, e)),
            })
            .expect("at least one candidate")
    };
    let (best_primal, u_estimate) = best(&u_cols, true);
    let (best_dual, v_estimate) = best(&v_cols, false);
    let wv: Vec<f64> = v_cols[best_dual]
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .collect();
    let wu: Vec<f64> = u_cols[best_primal]
        .iter()
        .zip(weights)
        .map(|(u, w)| u * w)
        .collect();
    let paired = stats::delta_method(
        &[&wv, &wu, weights],
        |m| (m[0] - m[1]) / m[2],
        |m| vec![1.0 / m[2], -1.0 / m[2], -(m[0] - m[1]) / (m[2] * m[2])],
        confidence,
    );
    let xy = x * y;
    let gap = McEstimate::new(
        paired.value + xy,
        paired.std_error.hypot(xy * y_scale_rel_error),
        paired.n,
        confidence,
    );
    Ok(GapEstimate {
        y,
        gap,
        u_estimate,
        v_estimate,
        best_primal,
        best_dual,
    })
}

/// [`duality_gap`] over a grid of `y`, returning every point.
#[allow(clippy::too_many_arguments)]
pub fn duality_gap_scan(
    utility: &UtilitySpec,
    x: f64,
    primal: &[&[f64]],
    dual: &[&[f64]],
    y_grid: &[f64],
    weights: &[f64],
    confidence: f64,
) -> Result<Vec<GapEstimate>, DualityError> {
    y_grid
        .iter()
        .map(|&y| duality_gap(utility, x, primal, dual, y, weights, 0.0, confidence))
        .collect()
}

/// `X_tau / I(y Y_tau)` at a pre-terminal state of the counterexample with
/// `X = x S` and `y` set by the first-order condition.
///
/// With `Y_tau = e^(gamma tau) N / W_tau` and `y N = x^(-a) 2^delta` the
/// ratio is `S_tau 2^(delta/a) e^(gamma tau / a) W_tau^(-1/a)`; `x` and the
/// normalizer cancel. `w_mean` estimates `W_tau = E_Q[w | F_tau]`.
pub fn counterexample_wealth_ratio(
    s: f64,
    t: f64,
    w_mean: &McEstimate,
    params: &CounterexampleParams,
) -> McEstimate {
    let a = params.a();
    let c = s * 2f64.powf(params.delta() / a) * (params.gamma() * t / a).exp();
    let value = c * w_mean.value.powf(-1.0 / a);
    let se = value / a * w_mean.relative_error();
    McEstimate::new(value, se, w_mean.n, w_mean.confidence)
}

/// Maximum wealth-to-dual ratio per rule and its stability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthRatioRule {
    pub rule: String,
    pub n_states: usize,
    pub max: McEstimate,
    /// Maximum over the first half of the probed states.
    pub max_half: f64,
    /// `|max - max_half| / max`.
    pub relative_change: f64,
    pub stable: bool,
}

/// Summarizes per-state ratios; `stable` when doubling the number of probed
/// states moves the maximum by less than 10%.
pub fn wealth_dual_ratio(rule: &str, ratios: &[McEstimate]) -> WealthRatioRule {
    let max_of = |xs: &[McEstimate]| {
        xs.iter()
            .copied()
            .filter(|e| e.value.is_finite())
            .fold(None::<McEstimate>, |acc, e| match acc {
                Some(b) if b.value >= e.value => Some(b),
                _ => Some(e),
            })
    };
    let full = max_of(ratios).unwrap_or(McEstimate::exact(1.0, 0));
    let half = max_of(&ratios[..ratios.len() / 2]).map_or(full.value, |e| e.value);
    let relative_change = if full.value != 0.0 {
        (full.value - half).abs() / full.value.abs()
    } else {
        0.0
    };
    WealthRatioRule {
        rule: rule.to_string(),
        n_states: ratios.len(),
        max: full,
        max_half: half,
        relative_change,
        stable: relative_change < 0.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_power_examples() {
        let u = power_utility(0.5).unwrap();
        for y in [0.1f64, 1.0, 3.7] {
            assert!((u.conjugate(y) - 1.0 / y).abs() < 1e-14);
            assert!((u.inverse_marginal(y) - y.powi(-2)).abs() < 1e-12);
        }
        assert_eq!(u.inverse_marginal(1.0), 1.0);
        assert_eq!(u.marginal(1.0), 1.0);
    }

    #[test]
    fn conjugate_matches_p_form() {
        for a in [0.2, 0.5, 0.8] {
            let u = power_utility(a).unwrap();
            let p = u.conjugate_exponent();
            for y in [0.3f64, 1.0, 2.5] {
                let alt = (p - 1.0) * y.powf(-1.0 / (p - 1.0));
                assert!((u.conjugate(y) - alt).abs() < 1e-12 * alt.max(1.0));
            }
        }
    }

    #[test]
    fn rejects_bad_risk_aversion() {
        for a in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                power_utility(a),
                Err(DualityError::InvalidRiskAversion(_))
            ));
        }
    }

    #[test]
    fn envelope_examples() {
        let pairs = default_pairs();
        let u = power_utility(0.5).unwrap();
        assert!(check_risk_aversion_bounds(|x| u.marginal(x), 0.5, 0.5, 1.0, &pairs).passed);
        let r = check_risk_aversion_bounds(|x: f64| x.powf(-0.3), 0.5, 0.5, 1.0, &pairs);
        assert!(!r.passed);
        let (x, y) = r.worst_pair.unwrap();
        let max_ratio = pairs.iter().map(|(x, y)| y / x).fold(0.0, f64::max);
        assert!((y / x - max_ratio).abs() < 1e-9 * max_ratio);
        assert!(check_risk_aversion_bounds(|x| 1.0 / x, 0.9, 1.0, 1.0, &pairs).passed);
    }

    #[test]
    fn constant_wealth_fails_first_order_condition() {
        let u = power_utility(0.5).unwrap();
        let y: Vec<f64> = (1..=50).map(|k| 0.5 + k as f64 / 25.0).collect();
        let x = vec![1.0; 50];
        let w = vec![1.0; 50];
        let r = verify_primal_dual_pair(&u, &x, &y, 1.0, 1.0, &w, 0.0, 0.997).unwrap();
        assert!(r.foc_cv > 0.1);
        assert_eq!(r.verdict, Verdict::Violated);
    }

    #[test]
    fn misaligned_samples_error() {
        let u = power_utility(0.5).unwrap();
        let r = verify_primal_dual_pair(&u, &[1.0, 2.0], &[1.0], 1.0, 1.0, &[1.0, 1.0], 0.0, 0.997);
        assert!(matches!(r, Err(DualityError::MisalignedSamples { .. })));
    }

    #[test]
    fn hill_recovers_pareto_index() {
        // Deterministic Pareto(alpha = 1.5) quantiles.
        let n = 100_000;
        let v: Vec<f64> = (1..=n)
            .map(|i| (i as f64 / (n + 1) as f64).powf(-1.0 / 1.5))
            .collect();
        let h = hill_tail_index(&v, 0.01);
        assert!((h - 1.5).abs() < 0.05, "{h}");
    }

    #[test]
    fn wealth_ratio_stability() {
        let xs: Vec<McEstimate> = [1.0, 2.0, 1.5, 2.05]
            .iter()
            .map(|v| McEstimate::exact(*v, 1))
            .collect();
        let r = wealth_dual_ratio("r", &xs);
        assert_eq!(r.max.value, 2.05);
        assert!(r.stable);
    }

    proptest! {
        #[test]
        fn conjugacy_invariants(a in 0.05f64..0.95, y in 1e-3f64..1e3, x in 1e-3f64..1e3) {
            let u = power_utility(a).unwrap();
            let i = u.inverse_marginal(y);
            prop_assert!((u.marginal(i) / y - 1.0).abs() < 1e-9);
            let v = u.conjugate(y);
            prop_assert!((v - (u.u(i) - y * i)).abs() <= 1e-9 * v.abs().max(1.0));
            prop_assert!(v >= u.u(x) - x * y - 1e-9 * v.abs().max(1.0));
        }

        #[test]
        fn foc_cv_is_scale_invariant(scale in 1e-3f64..1e3) {
            let u = power_utility(0.4).unwrap();
            let x: Vec<f64> = (1..40).map(|k| k as f64 * 0.1).collect();
            let y: Vec<f64> = x.iter().enumerate().map(|(k, x)| u.marginal(*x) * (1.0 + 0.01 * (k % 3) as f64)).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
            let w = vec![1.0; x.len()];
            let a = verify_primal_dual_pair(&u, &x, &y, 1.0, 1.0, &w, 0.0, 0.997).unwrap().foc_cv;
            let b = verify_primal_dual_pair(&u, &x, &ys, 1.0, 1.0, &w, 0.0, 0.997).unwrap().foc_cv;
            prop_assert!((a - b).abs() < 1e-9 * a.max(1e-12));
        }
    }
}
