//! Parameter records for the two built-in markets.
//!
//! The counterexample market is driven by a Brownian motion `B` with price
//! `S = exp(B - t/2)` absorbed at level 2, and a Cox counting process whose
//! intensity blows up as the price approaches the absorbing level. The
//! control market is a Black-Scholes model with constant market price of risk.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absorbing price level of the counterexample market.
pub const ABSORBING_LEVEL: f64 = 2.0;

const B_SEARCH_TOL: f64 = 1e-12;
const DERIVED_REL_TOL: f64 = 1e-9;

/// Which Radon-Nikodym density `dP/dQ` the counterexample uses.
///
/// `Literal` weights terminal outcomes by `S_T^b`. `Corrected` weights them
/// by `exp(gamma T) S_T^b`, under which the dual candidate is exactly
/// proportional to marginal utility of the buy-and-hold wealth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityVariant {
    Literal,
    #[default]
    Corrected,
}

impl fmt::Display for DensityVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityVariant::Literal => f.write_str("literal"),
            DensityVariant::Corrected => f.write_str("corrected"),
        }
    }
}

impl std::str::FromStr for DensityVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(DensityVariant::Literal),
            "corrected" => Ok(DensityVariant::Corrected),
            other => Err(format!(
                "unknown density variant `{other}` (expected literal|corrected)"
            )),
        }
    }
}

/// The named inequalities a parameter record must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inequality {
    /// `0 < a < 1`
    RiskAversionRange,
    /// `p > 1/(1-a)`
    ExponentFloor,
    /// `a < b`
    DensityExponentFloor,
    /// `b < 1/q`
    DensityExponentCeiling,
    /// `gamma <= delta (1 - delta) / 2`
    IntensityFloor,
}

impl fmt::Display for Inequality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inequality::RiskAversionRange => "0 < a < 1",
            Inequality::ExponentFloor => "p > 1/(1-a)",
            Inequality::DensityExponentFloor => "a < b",
            Inequality::DensityExponentCeiling => "b < 1/q",
            Inequality::IntensityFloor => "gamma <= delta*(1-delta)/2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("invalid risk aversion a = {a}: requires 0 < a < 1")]
    InvalidRiskAversion { a: f64 },
    #[error("invalid exponent p = {p}: requires p > 1/(1-a) = {bound}")]
    InvalidP { p: f64, bound: f64 },
    #[error("constraint `{inequality}` violated: lhs = {lhs}, rhs = {rhs}")]
    ConstraintViolated {
        inequality: Inequality,
        lhs: f64,
        rhs: f64,
    },
    #[error("derived field `{field}` = {stored} does not match recomputed value {computed}")]
    DerivedMismatch {
        field: &'static str,
        stored: f64,
        computed: f64,
    },
    #[error("absorbing level must be 2, got {0}")]
    UnsupportedLevel(f64),
    #[error("intensity is singular at s = 2 before the hitting time")]
    SingularIntensity,
    #[error("price {0} outside [0, 2]")]
    PriceOutOfRange(f64),
    #[error("invalid control parameter `{field}` = {value}")]
    InvalidControl { field: &'static str, value: f64 },
}

/// Validated parameters of the counterexample market.
///
/// Construct with [`select_counterexample_params`]; every instance satisfies
/// `0 < a < 1`, `p > 1/(1-a)`, `a < b < 1/q` and `gamma <= delta(1-delta)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRecord", into = "ParamsRecord")]
pub struct CounterexampleParams {
    a: f64,
    p: f64,
    q: f64,
    b: f64,
    delta: f64,
    gamma: f64,
    variant: DensityVariant,
}

impl CounterexampleParams {
    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn q(&self) -> f64 {
        self.q
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn variant(&self) -> DensityVariant {
        self.variant
    }
    pub fn level(&self) -> f64 {
        ABSORBING_LEVEL
    }

    /// Same market with a different density variant.
    pub fn with_variant(mut self, variant: DensityVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Bound `1 + eps(1-eps)/(2 gamma)` on `S_tau^eps / E_tau[S_T^eps]`.
    pub fn sandwich_factor(&self, eps: f64) -> f64 {
        1.0 + eps * (1.0 - eps) / (2.0 * self.gamma)
    }

    /// Upper bound `(1 + b(1-b)/(2 gamma))^q` on the A_p functional of the
    /// density process of `Q` with respect to `P`.
    pub fn ap_bound(&self) -> f64 {
        self.sandwich_factor(self.b).powf(self.q)
    }

    /// Upper bound `2^(-delta)` on `E_P[Y_T]` for the dual candidate.
    pub fn dual_mean_bound(&self) -> f64 {
        ABSORBING_LEVEL.powf(-self.delta)
    }

    /// Horizon at which `exp(-gamma t)` drops to `tail`.
    pub fn horizon_for_tail(&self, tail: f64) -> f64 {
        -tail.ln() / self.gamma
    }

    /// Log of the absorbing level.
    pub(crate) fn log_level(&self) -> f64 {
        std::f64::consts::LN_2
    }

    /// Intensity before the hitting time as a function of the log-price.
    #[inline]
    pub(crate) fn pre_hit_intensity_log(&self, x: f64) -> f64 {
        // 1 - (S/2)^delta = -expm1(delta (x - ln 2))
        self.gamma / -(self.delta * (x - std::f64::consts::LN_2)).exp_m1()
    }

    fn validate(self) -> Result<Self, ParamError> {
        let Self {
            a,
            p,
            q,
            b,
            delta,
            gamma,
            ..
        } = self;
        if !(a > 0.0 && a < 1.0) {
            return Err(ParamError::InvalidRiskAversion { a });
        }
        let bound = 1.0 / (1.0 - a);
        if !(p > bound) || !p.is_finite() {
            return Err(ParamError::InvalidP { p, bound });
        }
        if !(a < b) {
            return Err(ParamError::ConstraintViolated {
                inequality: Inequality::DensityExponentFloor,
                lhs: a,
                rhs: b,
            });
        }
        if !(b < 1.0 / q) {
            return Err(ParamError::ConstraintViolated {
                inequality: Inequality::DensityExponentCeiling,
                lhs: b,
                rhs: 1.0 / q,
            });
        }
        let cap = 0.5 * delta * (1.0 - delta);
        if !(gamma <= cap) {
            return Err(ParamError::ConstraintViolated {
                inequality: Inequality::IntensityFloor,
                lhs: gamma,
                rhs: cap,
            });
        }
        debug_assert!(delta > 0.0 && gamma > 0.0 && q < 1.0 / a);
        Ok(self)
    }

    fn derive(a: f64, p: f64, b: f64, variant: DensityVariant) -> Self {
        let q = p / (p - 1.0);
        Self {
            a,
            p,
            q,
            b,
            delta: b - a,
            gamma: 0.5 * b * (1.0 - q * b),
            variant,
        }
    }
}

/// Validates `(a, p)` and either checks the supplied `b` or searches for one.
///
/// Without `b`, bisection starts at the midpoint of `(a, 1/q)` and moves
/// toward `1/q` until `gamma <= delta(1-delta)/2`; the feasible set is an
/// interval adjacent to `1/q` so the search terminates.
pub fn select_counterexample_params(
    a: f64,
    p: f64,
    b: Option<f64>,
    variant: DensityVariant,
) -> Result<CounterexampleParams, ParamError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(ParamError::InvalidRiskAversion { a });
    }
    let bound = 1.0 / (1.0 - a);
    if !(p > bound) || !p.is_finite() {
        return Err(ParamError::InvalidP { p, bound });
    }
    if let Some(b) = b {
        return CounterexampleParams::derive(a, p, b, variant).validate();
    }
    let q = p / (p - 1.0);
    let (mut lo, hi) = (a, 1.0 / q);
    loop {
        let mid = 0.5 * (lo + hi);
        let candidate = CounterexampleParams::derive(a, p, mid, variant);
        if candidate.validate().is_ok() {
            return Ok(candidate);
        }
        if hi - lo < B_SEARCH_TOL {
            // unreachable for valid (a, p): gamma -> 0 while delta stays positive
            return candidate.validate();
        }
        lo = mid;
    }
}

/// Stochastic intensity of the counting process.
///
/// `gamma / (1 - (s/2)^delta)` before the hitting time of level 2 and the
/// floor `gamma` afterwards.
pub fn intensity(s: f64, params: &CounterexampleParams, post_hit: bool) -> Result<f64, ParamError> {
    if !(0.0..=ABSORBING_LEVEL).contains(&s) {
        return Err(ParamError::PriceOutOfRange(s));
    }
    if post_hit {
        return Ok(params.gamma);
    }
    if s == ABSORBING_LEVEL {
        return Err(ParamError::SingularIntensity);
    }
    if s == 0.0 {
        return Ok(params.gamma);
    }
    Ok(params.pre_hit_intensity_log(s.ln()))
}

/// `1 + b/(1-a)`, the A_p exponent inherited by the dual minimizer.
pub fn p_prime(a: f64, b: f64) -> f64 {
    assert!(a > 0.0 && a < 1.0, "p_prime requires 0 < a < 1, got {a}");
    assert!(b >= a, "p_prime requires b >= a, got a = {a}, b = {b}");
    1.0 + b / (1.0 - a)
}

/// Flat serialized form; derived fields are re-validated on input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub a: f64,
    pub p: f64,
    pub q: f64,
    pub b: f64,
    pub delta: f64,
    pub gamma: f64,
    pub variant: DensityVariant,
    pub level: f64,
}

impl From<CounterexampleParams> for ParamsRecord {
    fn from(c: CounterexampleParams) -> Self {
        Self {
            a: c.a,
            p: c.p,
            q: c.q,
            b: c.b,
            delta: c.delta,
            gamma: c.gamma,
            variant: c.variant,
            level: ABSORBING_LEVEL,
        }
    }
}

impl TryFrom<ParamsRecord> for CounterexampleParams {
    type Error = ParamError;

    fn try_from(r: ParamsRecord) -> Result<Self, Self::Error> {
        if r.level != ABSORBING_LEVEL {
            return Err(ParamError::UnsupportedLevel(r.level));
        }
        let params = select_counterexample_params(r.a, r.p, Some(r.b), r.variant)?;
        for (field, stored, computed) in [
            ("q", r.q, params.q),
            ("delta", r.delta, params.delta),
            ("gamma", r.gamma, params.gamma),
        ] {
            if (stored - computed).abs() > DERIVED_REL_TOL * computed.abs().max(1e-300) {
                return Err(ParamError::DerivedMismatch {
                    field,
                    stored,
                    computed,
                });
            }
        }
        Ok(params)
    }
}

/// Black-Scholes control market: `dS = vol S (mpr dt + dW)` under `P`.
///
/// The minimal martingale measure has density process `exp(-mpr W - mpr^2 t / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub mpr: f64,
    pub maturity: f64,
    pub vol: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            mpr: 0.5,
            maturity: 1.0,
            vol: 0.2,
        }
    }
}

impl ControlParams {
    pub fn new(mpr: f64, maturity: f64, vol: f64) -> Result<Self, ParamError> {
        if !mpr.is_finite() {
            return Err(ParamError::InvalidControl {
                field: "mpr",
                value: mpr,
            });
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return Err(ParamError::InvalidControl {
                field: "maturity",
                value: maturity,
            });
        }
        if !(vol > 0.0 && vol.is_finite()) {
            return Err(ParamError::InvalidControl {
                field: "vol",
                value: vol,
            });
        }
        Ok(Self { mpr, maturity, vol })
    }

    pub fn validate(self) -> Result<Self, ParamError> {
        Self::new(self.mpr, self.maturity, self.vol)
    }
}
