//! Changes of measure between `P` and `Q`, stochastic exponentials, and the
//! dual candidate `Y = E(L) Z`.
//!
//! Paths are simulated under `Q`. A `P`-expectation is the self-normalized
//! importance-sampling ratio `E_Q[w X] / E_Q[w]` with `w` the unnormalized
//! density `dP/dQ`. The density process of `Q` with respect to `P` at the
//! terminal time is `Z_T = normalizer / w`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CounterexampleParams, DensityVariant, ABSORBING_LEVEL};
use crate::path::{self, GridSpec, MarkovState, PathBundle, PathSummary, SimError};
use crate::rng::{domain, StreamFamily};
use crate::stats::{self, McEstimate};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("path {0} is censored: its terminal time was not resolved before t_max")]
    CensoredPath(u64),
    #[error(
        "conditional weight mean {mean} is indistinguishable from zero (std error {std_error})"
    )]
    DegenerateWeight { mean: f64, std_error: f64 },
    #[error(
        "only {hits} of the inner continuations reached the barrier (at least {required} needed)"
    )]
    UnresolvedRareEvent { hits: usize, required: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Exact stochastic exponential of a Brownian path sampled on a grid.
///
/// Returns the values at every node, starting with 1.
pub fn stoch_exp_continuous(increments: &[f64], dts: &[f64]) -> Vec<f64> {
    assert_eq!(
        increments.len(),
        dts.len(),
        "increments and steps must align"
    );
    let mut out = Vec::with_capacity(increments.len() + 1);
    let mut log_value = 0.0;
    out.push(1.0);
    for (db, dt) in increments.iter().zip(dts) {
        log_value += db - 0.5 * dt;
        out.push(log_value.exp());
    }
    out
}

fn terminal(summary: &PathSummary) -> Result<f64, MeasureError> {
    summary
        .terminal_time()
        .ok_or(MeasureError::CensoredPath(summary.path_id))
}

/// `E(L)_T = exp(gamma T) (S_T / 2)^delta`, which equals `exp(gamma T1)` on
/// paths stopped at the hitting time.
pub fn stoch_exp_jump_terminal(
    summary: &PathSummary,
    params: &CounterexampleParams,
) -> Result<f64, MeasureError> {
    let t = terminal(summary)?;
    Ok((params.gamma() * t).exp() * (summary.s_final / ABSORBING_LEVEL).powf(params.delta()))
}

/// Unnormalized `dP/dQ` on one path: `S_T^b` (literal) or
/// `exp(gamma T) S_T^b` (corrected).
pub fn density_weight(
    summary: &PathSummary,
    params: &CounterexampleParams,
) -> Result<f64, MeasureError> {
    let t = terminal(summary)?;
    Ok(raw_weight(t, summary.s_final, params))
}

#[inline]
pub(crate) fn raw_weight(t: f64, s: f64, params: &CounterexampleParams) -> f64 {
    let power = s.powf(params.b());
    match params.variant() {
        DensityVariant::Literal => power,
        DensityVariant::Corrected => (params.gamma() * t).exp() * power,
    }
}

/// `Y_T = E(L)_T Z_T` with `Z_T = normalizer / w`.
///
/// Under the corrected density this is `(normalizer / 2^delta) S_T^(-a)`.
pub fn dual_minimizer_terminal(
    summary: &PathSummary,
    params: &CounterexampleParams,
    normalizer: f64,
) -> Result<f64, MeasureError> {
    Ok(stoch_exp_jump_terminal(summary, params)? * normalizer / density_weight(summary, params)?)
}

/// Per-path density data of an ensemble. Censored paths are excluded from the
/// vectors and counted in `n_censored`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTriple {
    pub path_ids: Vec<u64>,
    pub w_raw: Vec<f64>,
    pub normalizer: McEstimate,
    pub el_terminal: Vec<f64>,
    pub y_hat_terminal: Vec<f64>,
    pub s_terminal: Vec<f64>,
    pub t_terminal: Vec<f64>,
    pub variant: DensityVariant,
    pub n_censored: usize,
}

/// Whether the normalizer `E_Q[w]` comes from the same paths or from an
/// independent ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizerMode {
    #[default]
    Independent,
    Same,
}

impl DensityTriple {
    /// Builds the triple using a supplied normalizer estimate.
    pub fn with_normalizer(bundle: &PathBundle, normalizer: McEstimate) -> Self {
        let params = &bundle.params;
        let mut out = Self {
            path_ids: Vec::new(),
            w_raw: Vec::new(),
            normalizer,
            el_terminal: Vec::new(),
            y_hat_terminal: Vec::new(),
            s_terminal: Vec::new(),
            t_terminal: Vec::new(),
            variant: params.variant(),
            n_censored: 0,
        };
        for s in &bundle.summaries {
            let Some(t) = s.terminal_time() else {
                out.n_censored += 1;
                continue;
            };
            let w = raw_weight(t, s.s_final, params);
            let el =
                (params.gamma() * t).exp() * (s.s_final / ABSORBING_LEVEL).powf(params.delta());
            out.path_ids.push(s.path_id);
            out.w_raw.push(w);
            out.el_terminal.push(el);
            out.y_hat_terminal.push(el * normalizer.value / w);
            out.s_terminal.push(s.s_final);
            out.t_terminal.push(t);
        }
        out
    }

    /// Builds the triple, estimating the normalizer per `mode`. The
    /// independent ensemble has the same size and grid as `bundle`.
    pub fn from_bundle(
        bundle: &PathBundle,
        mode: NormalizerMode,
        confidence: f64,
    ) -> Result<Self, MeasureError> {
        let normalizer = match mode {
            NormalizerMode::Same => normalizer_of(bundle, confidence),
            NormalizerMode::Independent => {
                let indep = simulate_normalizer_ensemble(bundle)?;
                normalizer_of(&indep, confidence)
            }
        };
        Ok(Self::with_normalizer(bundle, normalizer))
    }

    pub fn len(&self) -> usize {
        self.w_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_raw.is_empty()
    }

    /// Self-normalized `E_P[X]` for per-path values aligned with this triple.
    pub fn p_mean(&self, values: &[f64], confidence: f64) -> McEstimate {
        weighted_mean(values, &self.w_raw, confidence)
    }

    /// `E_P[X]` together with a bracket accounting for censored paths whose
    /// weight lies in `[0, max observed weight]` and whose value lies in
    /// `[value_low, value_high]`.
    pub fn p_mean_bracketed(
        &self,
        values: &[f64],
        value_low: f64,
        value_high: f64,
        confidence: f64,
    ) -> PExpectation {
        let estimate = self.p_mean(values, confidence);
        let num = stats::neumaier_sum(values.iter().zip(&self.w_raw).map(|(v, w)| v * w));
        let den = stats::neumaier_sum(self.w_raw.iter().copied());
        let w_max = self.w_raw.iter().copied().fold(0.0, f64::max);
        let extra = self.n_censored as f64 * w_max;
        let candidates = [
            num / den,
            (num + extra * value_low) / (den + extra),
            (num + extra * value_high) / (den + extra),
        ];
        PExpectation {
            estimate,
            bracket_low: candidates.iter().copied().fold(f64::INFINITY, f64::min),
            bracket_high: candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n_censored: self.n_censored,
        }
    }
}

/// A `P`-expectation with the worst-case effect of censored paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PExpectation {
    pub estimate: McEstimate,
    pub bracket_low: f64,
    pub bracket_high: f64,
    pub n_censored: usize,
}

/// `E_Q[w]` over the uncensored paths of a bundle.
pub fn normalizer_of(bundle: &PathBundle, confidence: f64) -> McEstimate {
    let ws: Vec<f64> = bundle
        .uncensored()
        .map(|s| {
            raw_weight(
                s.terminal_time().unwrap_or(f64::NAN),
                s.s_final,
                &bundle.params,
            )
        })
        .collect();
    McEstimate::from_samples(&ws, confidence)
}

/// Independent ensemble for the normalizer, on its own stream family.
pub fn simulate_normalizer_ensemble(bundle: &PathBundle) -> Result<PathBundle, MeasureError> {
    let family = StreamFamily::new(bundle.seed).child(domain::NORMALIZER);
    let start = MarkovState::initial();
    let summaries = path::continuations(
        &start,
        &bundle.params,
        &bundle.grid,
        bundle.n_paths,
        &family,
    )?;
    let censored = summaries.iter().filter(|s| s.censored).count();
    Ok(PathBundle {
        params: bundle.params,
        grid: bundle.grid,
        n_paths: summaries.len(),
        seed: bundle.seed,
        censored_mass: censored as f64 / summaries.len() as f64,
        summaries,
        paths: None,
    })
}

/// Self-normalized weighted mean `sum(w x) / sum(w)` with a delta-method error.
pub fn weighted_mean(values: &[f64], weights: &[f64], confidence: f64) -> McEstimate {
    assert_eq!(values.len(), weights.len(), "values and weights must align");
    let wx: Vec<f64> = values.iter().zip(weights).map(|(v, w)| v * w).collect();
    McEstimate::ratio(&wx, weights, confidence)
}

/// Which measure a conditional expectation is taken under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    P,
    Q,
}

/// Continuations of a state that were resolved before `t_max`, with their
/// density weights.
#[derive(Debug, Clone)]
pub struct ConditionalSample {
    pub state: MarkovState,
    pub summaries: Vec<PathSummary>,
    pub weights: Vec<f64>,
    pub n_censored: usize,
}

impl ConditionalSample {
    pub fn draw(
        state: &MarkovState,
        params: &CounterexampleParams,
        grid: &GridSpec,
        n_inner: usize,
        family: &StreamFamily,
    ) -> Result<Self, MeasureError> {
        let all = path::continuations(state, params, grid, n_inner, family)?;
        let n_censored = all.iter().filter(|s| s.censored).count();
        let summaries: Vec<PathSummary> = all.into_iter().filter(|s| !s.censored).collect();
        let weights = summaries
            .iter()
            .map(|s| raw_weight(s.terminal_time().unwrap_or(f64::NAN), s.s_final, params))
            .collect();
        Ok(Self {
            state: *state,
            summaries,
            weights,
            n_censored,
        })
    }

    /// `E_measure[X | state]` for a per-continuation integrand.
    pub fn expectation<F>(
        &self,
        measure: Measure,
        integrand: F,
        confidence: f64,
    ) -> Result<McEstimate, MeasureError>
    where
        F: Fn(&PathSummary) -> f64,
    {
        let xs: Vec<f64> = self.summaries.iter().map(integrand).collect();
        match measure {
            Measure::Q => Ok(McEstimate::from_samples(&xs, confidence)),
            Measure::P => {
                let w = McEstimate::from_samples(&self.weights, confidence);
                if w.value.abs() <= 3.0 * w.std_error || w.value == 0.0 {
                    return Err(MeasureError::DegenerateWeight {
                        mean: w.value,
                        std_error: w.std_error,
                    });
                }
                Ok(weighted_mean(&xs, &self.weights, confidence))
            }
        }
    }
}

/// `E_P[X | F_tau]` (or `E_Q` with [`Measure::Q`]) at a Markov state, by
/// re-simulation and Bayes' rule `E_Q[X w | F_tau] / E_Q[w | F_tau]`.
#[allow(clippy::too_many_arguments)]
pub fn bayes_conditional<F>(
    state: &MarkovState,
    integrand: F,
    measure: Measure,
    params: &CounterexampleParams,
    grid: &GridSpec,
    n_inner: usize,
    seed: u64,
    confidence: f64,
) -> Result<McEstimate, MeasureError>
where
    F: Fn(&PathSummary) -> f64,
{
    let family = StreamFamily::new(seed).child(domain::INNER);
    ConditionalSample::draw(state, params, grid, n_inner, &family)?
        .expectation(measure, integrand, confidence)
}

/// Parallel map of [`density_weight`] over a bundle's summaries.
pub fn density_weights(bundle: &PathBundle) -> Vec<Result<f64, MeasureError>> {
    bundle
        .summaries
        .par_iter()
        .map(|s| density_weight(s, &bundle.params))
        .collect()
}
