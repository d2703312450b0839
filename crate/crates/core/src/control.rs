//! The Black-Scholes control market.
//!
//! Everything is simulated under `P`, where `W` is a Brownian motion and the
//! minimal martingale density is `Z_t = exp(-mpr W_t - mpr^2 t / 2)`. The
//! closed forms here serve as independent oracles for the nested estimators.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::model::ControlParams;
use crate::rng::StreamFamily;
use crate::stats::McEstimate;

/// State of the control market at a deterministic time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlState {
    pub t: f64,
    pub w: f64,
}

impl ControlParams {
    /// `Z_t` at Brownian value `w`.
    pub fn density(&self, t: f64, w: f64) -> f64 {
        (-self.mpr * w - 0.5 * self.mpr * self.mpr * t).exp()
    }

    /// `E[(Z_tau / Z_T)^(1/(p-1))] = exp(mpr^2 (T - tau) p / (2 (p-1)^2))`.
    pub fn ap_closed_form(&self, tau: f64, p: f64) -> f64 {
        let rem = self.maturity - tau;
        (self.mpr * self.mpr * rem * p / (2.0 * (p - 1.0).powi(2))).exp()
    }

    /// `E[Z_T^k] = exp(mpr^2 T k (k-1) / 2)`.
    pub fn density_moment(&self, k: f64, horizon: f64) -> f64 {
        (0.5 * self.mpr * self.mpr * horizon * k * (k - 1.0)).exp()
    }
}

/// Optimal investment with power utility `x^(1-a)/(1-a)` in the control
/// market: `X_T = (y Z_T)^(-1/a)` with `y` fixed by the budget constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertonSolution {
    pub a: f64,
    pub x: f64,
    /// Dual variable `y = u'(x)`.
    pub y: f64,
    /// Value function `u(x)`.
    pub value: f64,
}

impl MertonSolution {
    pub fn new(params: &ControlParams, a: f64, x: f64) -> Self {
        let k = 1.0 - 1.0 / a;
        let m = params.density_moment(k, params.maturity);
        let y = (m / x).powf(a);
        let value = y.powf(k) * m / (1.0 - a);
        Self { a, x, y, value }
    }

    pub fn terminal_wealth(&self, z_t: f64) -> f64 {
        (self.y * z_t).powf(-1.0 / self.a)
    }

    /// `X_tau / I(y Z_tau)`, deterministic in `tau`.
    pub fn wealth_dual_ratio(&self, params: &ControlParams, tau: f64) -> f64 {
        let k = 1.0 - 1.0 / self.a;
        params.density_moment(k, params.maturity - tau)
    }
}

/// Terminal Brownian values `W_T` for `n` paths.
pub fn terminal_brownian(params: &ControlParams, n: usize, family: &StreamFamily) -> Vec<f64> {
    let sd = params.maturity.sqrt();
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let z: f64 = family.stream(i).sample(StandardNormal);
            sd * z
        })
        .collect()
}

/// Brownian increments on a uniform grid of `steps` steps over `[0, T]`.
pub fn brownian_increments(
    params: &ControlParams,
    n: usize,
    steps: usize,
    family: &StreamFamily,
) -> Vec<Vec<f64>> {
    let sd = (params.maturity / steps as f64).sqrt();
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = family.stream(i);
            (0..steps)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Brownian values at sorted deterministic times, one row per path.
pub fn brownian_at(
    params: &ControlParams,
    times: &[f64],
    n: usize,
    family: &StreamFamily,
) -> Vec<Vec<f64>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = family.stream(i);
            let mut prev = 0.0;
            let mut w = 0.0;
            times
                .iter()
                .map(|&t| {
                    let t = t.min(params.maturity);
                    w += (t - prev).max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal);
                    prev = t;
                    w
                })
                .collect()
        })
        .collect()
}

/// Terminal Brownian values `W_T` of `n_inner` continuations of a state.
pub fn continuation_brownian(
    params: &ControlParams,
    state: &ControlState,
    n_inner: usize,
    family: &StreamFamily,
) -> Vec<f64> {
    let sd = (params.maturity - state.t).max(0.0).sqrt();
    (0..n_inner as u64)
        .into_par_iter()
        .map(|i| state.w + sd * family.stream(i).sample::<f64, _>(StandardNormal))
        .collect()
}

/// Conditional A_p functional `E_tau[(Z_tau / Z_T)^(1/(p-1))]` at a state,
/// estimated from `n_inner` fresh increments.
pub fn ap_functional_at(
    params: &ControlParams,
    state: &ControlState,
    p: f64,
    n_inner: usize,
    family: &StreamFamily,
    confidence: f64,
) -> McEstimate {
    if params.maturity - state.t <= 0.0 {
        return McEstimate::new(1.0, 0.0, n_inner, confidence);
    }
    let e = 1.0 / (p - 1.0);
    let z_tau = params.density(state.t, state.w);
    let vals: Vec<f64> = continuation_brownian(params, state, n_inner, family)
        .into_iter()
        .map(|w_t| (z_tau / params.density(params.maturity, w_t)).powf(e))
        .collect();
    McEstimate::from_samples(&vals, confidence)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_calibration_value() {
        let c = ControlParams::new(0.5, 1.0, 0.2).unwrap();
        assert!((c.ap_closed_form(0.0, 4.0) - (1.0f64 / 18.0).exp()).abs() < 1e-15);
        assert!((c.ap_closed_form(0.0, 4.0) - 1.0571277).abs() < 1e-7);
        assert_eq!(c.ap_closed_form(1.0, 2.0), 1.0);
    }

    #[test]
    fn merton_budget_and_value() {
        let c = ControlParams::new(0.5, 1.0, 0.2).unwrap();
        let m = MertonSolution::new(&c, 0.5, 2.0);
        // E[Z X] = x and E[U(X)] = u(x), by Gaussian quadrature on W_T
        let nodes = 4001;
        let (mut budget, mut util) = (0.0, 0.0);
        for k in 0..nodes {
            let u = -8.0 + 16.0 * k as f64 / (nodes - 1) as f64;
            let dens = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt() * 16.0
                / (nodes - 1) as f64;
            let z = c.density(1.0, u);
            let x = m.terminal_wealth(z);
            budget += dens * z * x;
            util += dens * x.sqrt() / 0.5;
        }
        assert!((budget - 2.0).abs() < 1e-6, "{budget}");
        assert!((util - m.value).abs() < 1e-6, "{util} vs {}", m.value);
        assert!((m.y * m.terminal_wealth(1.0).powf(0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_remaining_time_is_exact() {
        let c = ControlParams::default();
        let e = ap_functional_at(
            &c,
            &ControlState { t: 1.0, w: 0.3 },
            3.0,
            10,
            &StreamFamily::new(1),
            0.997,
        );
        assert_eq!(e.value, 1.0);
        assert_eq!(e.std_error, 0.0);
    }
}
