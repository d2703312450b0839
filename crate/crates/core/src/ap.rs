//! A_p functionals over a finite family of stopping rules, uniform
//! integrability defects, dominance of the dual minimizer, the `S^eps`
//! sandwich, and BMO norms.
//!
//! Conditional expectations at stopped states use nested simulation: outer
//! paths run until each rule fires, a subsample of the stopped states is
//! resimulated with fresh inner paths, and every diagnostic is a function of
//! the inner sample.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measure::{ConditionalSample, MeasureError};
use crate::model::{CounterexampleParams, ABSORBING_LEVEL};
use crate::path::{
    self, GridSpec, MarkovState, Node, NodeObserver, Outcome, PathSummary, SimError, WalkStart,
};
use crate::rng::{domain, StreamFamily};
use crate::stats::{self, z_for, McEstimate};

/// Estimates whose standard error exceeds this fraction of the value are
/// flagged instead of compared.
pub const FLAG_RELATIVE_ERROR: f64 = 0.2;

/// Functionals of `Z` and `Y` at a pre-terminal state are dominated by the
/// continuations that reach the barrier; with fewer such continuations than
/// this the estimate and its standard error are not credible.
pub const MIN_BARRIER_HITS: usize = 10;

/// Outcome of a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    VerifiedWithinTolerance,
    Violated,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::VerifiedWithinTolerance => "VerifiedWithinTolerance",
            Verdict::Violated => "Violated",
            Verdict::Inconclusive => "Inconclusive",
        })
    }
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::VerifiedWithinTolerance
        } else {
            Verdict::Violated
        }
    }

    /// Violated dominates Inconclusive dominates Verified.
    pub fn combine(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Violated, _) | (_, Violated) => Violated,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => VerifiedWithinTolerance,
        }
    }
}

pub fn is_flagged(e: &McEstimate) -> bool {
    !e.value.is_finite()
        || !e.std_error.is_finite()
        || e.std_error > FLAG_RELATIVE_ERROR * e.value.abs()
}

/// One stopping rule of the probe family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum StoppingRule {
    Zero,
    Time(f64),
    /// First grid time the price is at or beyond the level (from `S_0 = 1`).
    Level(f64),
    /// First grid time the compensator reaches the level.
    Compensator(f64),
    Terminal,
}

impl fmt::Display for StoppingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoppingRule::Zero => write!(f, "zero"),
            StoppingRule::Time(t) => write!(f, "time={t}"),
            StoppingRule::Level(l) => write!(f, "level={l}"),
            StoppingRule::Compensator(c) => write!(f, "compensator={c}"),
            StoppingRule::Terminal => write!(f, "terminal"),
        }
    }
}

/// Finite probe of "every stopping time".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingFamily {
    pub deterministic_times: Vec<f64>,
    pub level_hits: Vec<f64>,
    pub compensator_levels: Vec<f64>,
    pub include_zero: bool,
    pub include_terminal: bool,
}

impl Default for StoppingFamily {
    fn default() -> Self {
        Self {
            deterministic_times: vec![0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            level_hits: vec![0.25, 0.5, 1.25, 1.5, 1.75, 1.9],
            compensator_levels: vec![0.25, 0.5, 0.75],
            include_zero: true,
            include_terminal: true,
        }
    }
}

impl StoppingFamily {
    /// Deterministic times only (the control market has no other state).
    pub fn deterministic(times: &[f64]) -> Self {
        Self {
            deterministic_times: times.to_vec(),
            level_hits: Vec::new(),
            compensator_levels: Vec::new(),
            include_zero: false,
            include_terminal: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(t) = self
            .deterministic_times
            .iter()
            .find(|t| !(t.is_finite() && **t >= 0.0))
        {
            return Err(format!(
                "deterministic time {t} must be finite and non-negative"
            ));
        }
        if let Some(l) = self
            .level_hits
            .iter()
            .find(|l| !(**l > 0.0 && **l < ABSORBING_LEVEL))
        {
            return Err(format!("level {l} must lie in (0, 2)"));
        }
        if let Some(c) = self
            .compensator_levels
            .iter()
            .find(|c| !(c.is_finite() && **c > 0.0))
        {
            return Err(format!("compensator level {c} must be positive"));
        }
        Ok(())
    }

    pub fn rules(&self) -> Vec<StoppingRule> {
        let mut out = Vec::new();
        if self.include_zero {
            out.push(StoppingRule::Zero);
        }
        out.extend(
            self.deterministic_times
                .iter()
                .map(|&t| StoppingRule::Time(t)),
        );
        out.extend(self.level_hits.iter().map(|&l| StoppingRule::Level(l)));
        out.extend(
            self.compensator_levels
                .iter()
                .map(|&c| StoppingRule::Compensator(c)),
        );
        if self.include_terminal {
            out.push(StoppingRule::Terminal);
        }
        out
    }
}

/// Where an outer path sits when a rule is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stopped {
    /// The rule fired strictly before `T`.
    State(MarkovState),
    /// The rule did not fire before `T`; the path is stopped at `T`.
    Terminal(MarkovState),
    /// Neither the rule nor `T` occurred before `t_max`.
    Censored,
}

/// The terminal Markov state of a resolved path.
pub fn terminal_state(summary: &PathSummary) -> Option<MarkovState> {
    let t = summary.terminal_time()?;
    Some(match summary.outcome() {
        Outcome::Hit => MarkovState {
            t,
            s: ABSORBING_LEVEL,
            post_hit: true,
            jumped: false,
        },
        _ => MarkovState {
            t,
            s: summary.s_final,
            post_hit: false,
            jumped: true,
        },
    })
}

struct RuleWatcher<'a> {
    rules: &'a [StoppingRule],
    log_levels: Vec<f64>,
    fired: Vec<Option<MarkovState>>,
}

impl NodeObserver for RuleWatcher<'_> {
    fn node(&mut self, n: &Node) {
        for (k, rule) in self.rules.iter().enumerate() {
            if self.fired[k].is_some() {
                continue;
            }
            let fire = match *rule {
                StoppingRule::Zero => true,
                StoppingRule::Time(t) => n.t >= t,
                StoppingRule::Level(l) => {
                    if l < 1.0 {
                        n.log_price <= self.log_levels[k]
                    } else {
                        n.log_price >= self.log_levels[k]
                    }
                }
                StoppingRule::Compensator(c) => n.compensator >= c,
                StoppingRule::Terminal => false,
            };
            if fire {
                self.fired[k] = Some(MarkovState {
                    t: n.t,
                    s: n.log_price.exp().min(ABSORBING_LEVEL),
                    post_hit: false,
                    jumped: false,
                });
            }
        }
    }
}

/// Outer ensemble with each rule applied to each path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStops {
    pub rules: Vec<StoppingRule>,
    pub summaries: Vec<PathSummary>,
    /// `stops[rule][path]`.
    pub stops: Vec<Vec<Stopped>>,
}

/// Runs `n_outer` paths from `S_0 = 1` (the same paths as
/// [`path::simulate_paths`] with this seed) and records where each rule stops
/// them.
pub fn stop_outer_paths(
    params: &CounterexampleParams,
    grid: &GridSpec,
    family: &StoppingFamily,
    n_outer: usize,
    seed: u64,
) -> Result<OuterStops, SimError> {
    grid.validate()?;
    if n_outer == 0 {
        return Err(SimError::EmptyEnsemble);
    }
    let rules = family.rules();
    let mut checkpoints: Vec<f64> = family
        .deterministic_times
        .iter()
        .copied()
        .filter(|&t| t > 0.0)
        .collect();
    checkpoints.sort_by(f64::total_cmp);
    checkpoints.dedup();
    let log_levels: Vec<f64> = rules
        .iter()
        .map(|r| match r {
            StoppingRule::Level(l) => l.ln(),
            _ => 0.0,
        })
        .collect();
    let outer = StreamFamily::new(seed).child(domain::OUTER);
    let start = WalkStart::from_state(&MarkovState::initial());
    let per_path: Vec<(PathSummary, Vec<Stopped>)> = (0..n_outer as u64)
        .into_par_iter()
        .map(|i| {
            let mut watcher = RuleWatcher {
                rules: &rules,
                log_levels: log_levels.clone(),
                fired: vec![None; rules.len()],
            };
            let summary = path::walk(
                params,
                grid,
                start,
                &checkpoints,
                i,
                &mut outer.stream(i),
                &mut watcher,
            );
            let end = terminal_state(&summary);
            let stops = watcher
                .fired
                .iter()
                .map(|f| match (f, end) {
                    (Some(s), _) => Stopped::State(*s),
                    (None, Some(e)) => Stopped::Terminal(e),
                    (None, None) => Stopped::Censored,
                })
                .collect();
            (summary, stops)
        })
        .collect();
    let mut stops = vec![Vec::with_capacity(n_outer); rules.len()];
    let mut summaries = Vec::with_capacity(n_outer);
    for (summary, row) in per_path {
        summaries.push(summary);
        for (k, s) in row.into_iter().enumerate() {
            stops[k].push(s);
        }
    }
    Ok(OuterStops {
        rules,
        summaries,
        stops,
    })
}

/// A diagnostic value at one probed state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEval<T> {
    pub path_id: u64,
    pub state: MarkovState,
    pub n_inner: usize,
    pub n_inner_censored: usize,
    pub value: T,
}

/// Diagnostic values for one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEval<T> {
    pub rule: StoppingRule,
    pub n_outer: usize,
    /// Paths stopped strictly before `T`.
    pub n_stopped: usize,
    /// Paths reaching `T` before the rule fired.
    pub n_terminal: usize,
    pub n_censored: usize,
    /// The first `n_states` stopped states in path order.
    pub states: Vec<StateEval<T>>,
}

impl<T> RuleEval<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> RuleEval<U> {
        RuleEval {
            rule: self.rule,
            n_outer: self.n_outer,
            n_stopped: self.n_stopped,
            n_terminal: self.n_terminal,
            n_censored: self.n_censored,
            states: self
                .states
                .iter()
                .map(|s| StateEval {
                    path_id: s.path_id,
                    state: s.state,
                    n_inner: s.n_inner,
                    n_inner_censored: s.n_inner_censored,
                    value: f(&s.value),
                })
                .collect(),
        }
    }
}

/// Resimulates up to `n_states` stopped states per rule with `n_inner`
/// continuations each and applies `eval` to every inner sample.
///
/// The inner stream of a state depends only on `(seed, rule index, path id)`;
/// `eval` also receives that family so it can derive further streams.
pub fn evaluate_nested<T, F>(
    params: &CounterexampleParams,
    grid: &GridSpec,
    outer: &OuterStops,
    n_states: usize,
    n_inner: usize,
    seed: u64,
    eval: F,
) -> Result<Vec<RuleEval<T>>, MeasureError>
where
    T: Send,
    F: Fn(&ConditionalSample, &StreamFamily) -> T + Sync,
{
    let base = StreamFamily::new(seed).child(domain::INNER);
    let mut jobs = Vec::new();
    let mut rule_evals = Vec::with_capacity(outer.rules.len());
    for (k, rule) in outer.rules.iter().enumerate() {
        let column = &outer.stops[k];
        let mut n_stopped = 0;
        let mut n_terminal = 0;
        let mut n_censored = 0;
        for (i, s) in column.iter().enumerate() {
            match s {
                Stopped::State(state) => {
                    if n_stopped < n_states {
                        jobs.push((k, outer.summaries[i].path_id, *state));
                    }
                    n_stopped += 1;
                }
                Stopped::Terminal(_) => n_terminal += 1,
                Stopped::Censored => n_censored += 1,
            }
        }
        rule_evals.push(RuleEval {
            rule: *rule,
            n_outer: column.len(),
            n_stopped,
            n_terminal,
            n_censored,
            states: Vec::new(),
        });
    }
    let results: Vec<Result<(usize, StateEval<T>), MeasureError>> = jobs
        .into_par_iter()
        .map(|(k, path_id, state)| {
            let family = base.child(k as u64).child(path_id);
            let sample = ConditionalSample::draw(&state, params, grid, n_inner, &family)?;
            Ok((
                k,
                StateEval {
                    path_id,
                    state,
                    n_inner: sample.summaries.len(),
                    n_inner_censored: sample.n_censored,
                    value: eval(&sample, &family),
                },
            ))
        })
        .collect();
    for r in results {
        let (k, e) = r?;
        rule_evals[k].states.push(e);
    }
    Ok(rule_evals)
}

/// The process `R` whose A_p functional is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Constant,
    /// The density process `Z` of `Q` with respect to `P`.
    Density,
    /// The dual candidate `Y = E(L) Z`.
    Dual,
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Process::Constant => "constant",
            Process::Density => "Z",
            Process::Dual => "Y_hat",
        })
    }
}

/// `E^P_tau[(R_tau / R_T)^(1/(p-1))]` from an inner sample.
///
/// With `Z_t = N / W_t`, `W_t = E^Q_t[w]`, Bayes' rule gives
/// `mean(w^(1+e) rho^e) / mean(w)^(1+e)`, `e = 1/(p-1)`, where `rho = 1`
/// for `Z` and `rho = E(L)_tau / E(L)_T` for the dual candidate. The
/// normalizer `N` cancels.
pub fn functional(
    sample: &ConditionalSample,
    process: Process,
    p: f64,
    params: &CounterexampleParams,
    confidence: f64,
) -> Result<McEstimate, MeasureError> {
    let n = sample.summaries.len();
    if process == Process::Constant {
        return Ok(McEstimate::new(1.0, 0.0, n, confidence));
    }
    let w_est = McEstimate::from_samples(&sample.weights, confidence);
    if w_est.value == 0.0 || w_est.value.abs() <= 3.0 * w_est.std_error {
        return Err(MeasureError::DegenerateWeight {
            mean: w_est.value,
            std_error: w_est.std_error,
        });
    }
    let hits = barrier_hits(sample);
    if hits < MIN_BARRIER_HITS && !sample.state.is_terminal() {
        return Err(MeasureError::UnresolvedRareEvent {
            hits,
            required: MIN_BARRIER_HITS,
        });
    }
    let e = 1.0 / (p - 1.0);
    let w_max = sample.weights.iter().copied().fold(0.0, f64::max);
    let w: Vec<f64> = sample.weights.iter().map(|x| x / w_max).collect();
    let el_tau = (params.gamma() * sample.state.t).exp();
    let num: Vec<f64> = w
        .iter()
        .zip(&sample.summaries)
        .map(|(wi, s)| {
            let base = wi.powf(1.0 + e);
            match process {
                Process::Dual => {
                    let t = s.terminal_time().unwrap_or(f64::NAN);
                    let el_t = (params.gamma() * t).exp()
                        * (s.s_final / ABSORBING_LEVEL).powf(params.delta());
                    base * (el_tau / el_t).powf(e)
                }
                _ => base,
            }
        })
        .collect();
    Ok(stats::delta_method(
        &[&num, &w],
        |m| m[0] / m[1].powf(1.0 + e),
        |m| {
            vec![
                1.0 / m[1].powf(1.0 + e),
                -(1.0 + e) * m[0] / m[1].powf(2.0 + e),
            ]
        },
        confidence,
    ))
}

/// Inner continuations ending at the barrier.
pub fn barrier_hits(sample: &ConditionalSample) -> usize {
    sample
        .summaries
        .iter()
        .filter(|s| s.outcome() == Outcome::Hit)
        .count()
}

/// Turns sampling failures into a flagged estimate so the state is reported
/// but never compared; other errors pass through.
pub fn flag_unreliable(
    r: Result<McEstimate, MeasureError>,
    confidence: f64,
) -> Result<McEstimate, MeasureError> {
    match r {
        Err(MeasureError::DegenerateWeight { .. })
        | Err(MeasureError::UnresolvedRareEvent { .. }) => {
            Ok(McEstimate::new(f64::NAN, f64::INFINITY, 0, confidence))
        }
        other => other,
    }
}

/// `E^Q_tau[w]` (the unnormalized `1/Z_tau`).
pub fn weight_mean(sample: &ConditionalSample, confidence: f64) -> McEstimate {
    McEstimate::from_samples(&sample.weights, confidence)
}

/// `E^Q_tau[S_T^eps]` as a plain sample mean. At small prices and
/// `2 eps^2 - eps >= gamma` the integrand has infinite variance; prefer
/// [`tilted_price_moment`].
pub fn price_moment(sample: &ConditionalSample, eps: f64, confidence: f64) -> McEstimate {
    let xs: Vec<f64> = sample
        .summaries
        .iter()
        .map(|s| s.s_final.powf(eps))
        .collect();
    McEstimate::from_samples(&xs, confidence)
}

/// `E^Q_tau[S_T^eps]` sampled under the measure that gives `B` drift `eps`.
///
/// There `E^Q_tau[S_T^eps] = s^eps E[exp(-eps(1-eps)(T - tau)/2)]`, an
/// integrand in `(0, s^eps]`. Censored continuations are scored at `t_max`,
/// an error below `s^eps exp(-eps(1-eps)(t_max - tau)/2)` each.
pub fn tilted_price_moment(
    state: &MarkovState,
    eps: f64,
    params: &CounterexampleParams,
    grid: &GridSpec,
    n_inner: usize,
    family: &StreamFamily,
    confidence: f64,
) -> Result<McEstimate, MeasureError> {
    let fam = family.child(domain::AUX).child(eps.to_bits());
    let paths = path::tilted_continuations(state, params, grid, n_inner, eps, &fam)?;
    let c = 0.5 * eps * (1.0 - eps);
    let scale = state.s.powf(eps);
    let xs: Vec<f64> = paths
        .iter()
        .map(|p| scale * (-c * (p.terminal_time().unwrap_or(grid.t_max) - state.t)).exp())
        .collect();
    Ok(McEstimate::from_samples(&xs, confidence))
}

/// `E^Q_tau[E(L)_T]`.
pub fn exponential_mean(
    sample: &ConditionalSample,
    params: &CounterexampleParams,
    confidence: f64,
) -> McEstimate {
    let xs: Vec<f64> = sample
        .summaries
        .iter()
        .map(|s| {
            let t = s.terminal_time().unwrap_or(f64::NAN);
            (params.gamma() * t).exp() * (s.s_final / ABSORBING_LEVEL).powf(params.delta())
        })
        .collect();
    McEstimate::from_samples(&xs, confidence)
}

/// A_p functional at a single state, from `n_inner` fresh continuations.
#[allow(clippy::too_many_arguments)]
pub fn ap_functional_at(
    state: &MarkovState,
    process: Process,
    p: f64,
    params: &CounterexampleParams,
    grid: &GridSpec,
    n_inner: usize,
    seed: u64,
    confidence: f64,
) -> Result<McEstimate, MeasureError> {
    if state.is_terminal() || process == Process::Constant {
        return Ok(McEstimate::new(1.0, 0.0, n_inner, confidence));
    }
    let family = StreamFamily::new(seed).child(domain::INNER);
    let sample = ConditionalSample::draw(state, params, grid, n_inner, &family)?;
    functional(&sample, process, p, params, confidence)
}

/// Per-rule summary of a conditional functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: StoppingRule,
    pub n_outer: usize,
    pub n_stopped: usize,
    pub n_terminal: usize,
    pub n_censored: usize,
    pub n_probed: usize,
    pub n_flagged: usize,
    /// Average over outer paths; states at `T` contribute exactly 1.
    pub mean: McEstimate,
    /// Largest non-flagged probed estimate (1 when none was probed).
    pub max: McEstimate,
    pub argmax_path: Option<u64>,
}

/// A_p report of one process at one exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub process: Process,
    pub p: f64,
    pub rules: Vec<RuleSummary>,
    pub family_max: McEstimate,
    pub family_max_rule: StoppingRule,
    /// A lower bound on the true A_p constant.
    pub implied_constant: f64,
    /// Bonferroni two-sided normal quantile across rules.
    pub joint_z: f64,
    pub n_flagged: usize,
}

impl ApReport {
    pub fn from_rules(
        process: Process,
        p: f64,
        rules: &[RuleEval<McEstimate>],
        confidence: f64,
    ) -> Self {
        let summaries: Vec<RuleSummary> = rules
            .iter()
            .map(|r| summarize_rule(r, confidence))
            .collect();
        let (best_k, best) = summaries.iter().enumerate().map(|(k, s)| (k, s.max)).fold(
            (0, McEstimate::new(1.0, 0.0, 0, confidence)),
            |acc, (k, m)| {
                if m.value > acc.1.value {
                    (k, m)
                } else {
                    acc
                }
            },
        );
        let n_rules = summaries.len().max(1) as f64;
        Self {
            process,
            p,
            family_max_rule: summaries.get(best_k).map_or(StoppingRule::Zero, |s| s.rule),
            implied_constant: best.value,
            family_max: best,
            joint_z: z_for(1.0 - (1.0 - confidence) / n_rules),
            n_flagged: summaries.iter().map(|s| s.n_flagged).sum(),
            rules: summaries,
        }
    }
}

fn summarize_rule(r: &RuleEval<McEstimate>, confidence: f64) -> RuleSummary {
    let ok: Vec<&StateEval<McEstimate>> =
        r.states.iter().filter(|s| !is_flagged(&s.value)).collect();
    let values: Vec<f64> = ok.iter().map(|s| s.value.value).collect();
    let resolved = (r.n_stopped + r.n_terminal) as f64;
    let mean = if values.is_empty() {
        McEstimate::new(1.0, 0.0, r.n_terminal, confidence)
    } else {
        let probed = McEstimate::from_samples(&values, confidence);
        let stopped_frac = r.n_stopped as f64 / resolved;
        let se = if values.len() > 1 {
            probed.std_error
        } else {
            ok[0].value.std_error
        };
        McEstimate::new(
            stopped_frac * probed.value + (1.0 - stopped_frac),
            stopped_frac * se,
            values.len(),
            confidence,
        )
    };
    let arg = ok
        .iter()
        .copied()
        .max_by(|a, b| a.value.value.total_cmp(&b.value.value));
    let one = McEstimate::new(1.0, 0.0, 0, confidence);
    let max = match arg {
        Some(s) if s.value.value > 1.0 || r.n_terminal == 0 => s.value,
        _ => one,
    };
    RuleSummary {
        rule: r.rule,
        n_outer: r.n_outer,
        n_stopped: r.n_stopped,
        n_terminal: r.n_terminal,
        n_censored: r.n_censored,
        n_probed: r.states.len(),
        n_flagged: r.states.len() - ok.len(),
        mean,
        max,
        argmax_path: arg.map(|s| s.path_id),
    }
}

/// Nested estimate of the A_p report for `process` over `family`.
#[allow(clippy::too_many_arguments)]
pub fn ap_constant(
    params: &CounterexampleParams,
    grid: &GridSpec,
    process: Process,
    p: f64,
    family: &StoppingFamily,
    n_outer: usize,
    n_states: usize,
    n_inner: usize,
    seed: u64,
    confidence: f64,
) -> Result<ApReport, MeasureError> {
    let outer = stop_outer_paths(params, grid, family, n_outer, seed)?;
    let evals = evaluate_nested(params, grid, &outer, n_states, n_inner, seed, |s, _| {
        flag_unreliable(functional(s, process, p, params, confidence), confidence)
    })?;
    let clean = evals
        .into_iter()
        .map(transpose_rule)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ApReport::from_rules(process, p, &clean, confidence))
}

/// Lifts per-state errors out of a rule evaluation.
pub fn transpose_rule<T, E>(r: RuleEval<Result<T, E>>) -> Result<RuleEval<T>, E> {
    let mut states = Vec::with_capacity(r.states.len());
    for s in r.states {
        states.push(StateEval {
            path_id: s.path_id,
            state: s.state,
            n_inner: s.n_inner,
            n_inner_censored: s.n_inner_censored,
            value: s.value?,
        });
    }
    Ok(RuleEval {
        rule: r.rule,
        n_outer: r.n_outer,
        n_stopped: r.n_stopped,
        n_terminal: r.n_terminal,
        n_censored: r.n_censored,
        states,
    })
}

/// Class (D) check `R_tau <= C^(p-1) E_tau[R_T]` per rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDReport {
    pub constant: f64,
    pub p: f64,
    /// Per rule: the smallest margin `C^(p-1) (E + 3 se) - R_tau`.
    pub worst_margin: Vec<(StoppingRule, f64)>,
    pub verdict: Verdict,
}

/// `inputs[rule]` holds `(R_tau, estimate of E_tau[R_T])` per probed state.
pub fn class_d_check(
    inputs: &[(StoppingRule, Vec<(f64, McEstimate)>)],
    constant: f64,
    p: f64,
) -> ClassDReport {
    let factor = constant.powf(p - 1.0);
    let mut worst_margin = Vec::with_capacity(inputs.len());
    let mut ok = true;
    for (rule, states) in inputs {
        let m = states
            .iter()
            .map(|(r, e)| factor * (e.value + 3.0 * e.std_error) - r)
            .fold(f64::INFINITY, f64::min);
        // Relative slack absorbs round-off in the equality case.
        let tol = 1e-12 * states.iter().map(|(r, _)| r.abs()).fold(1.0, f64::max);
        ok &= m >= -tol;
        worst_margin.push((*rule, m));
    }
    ClassDReport {
        constant,
        p,
        worst_margin,
        verdict: Verdict::from_bool(ok),
    }
}

/// `1 - E_P[Y_T] / Y_0` with self-normalized weights.
pub fn ui_defect(y_terminal: &[f64], y0: f64, weights: &[f64], confidence: f64) -> McEstimate {
    crate::measure::weighted_mean(y_terminal, weights, confidence).affine(1.0, -1.0 / y0)
}

/// Per-rule comparison of the dual minimizer's functional with a competitor's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceRule {
    pub rule: StoppingRule,
    pub n_compared: usize,
    pub n_flagged: usize,
    pub optimal_mean: McEstimate,
    pub competitor_mean: McEstimate,
    /// Probed states where the per-state comparison fails at 3 joint errors
    /// (informational: many states are compared).
    pub n_state_failures: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub p: f64,
    pub rules: Vec<DominanceRule>,
    pub verdict: Verdict,
}

/// Checks `E_tau[(Y^_tau/Y^_T)^(1/(p-1))] <= E_tau[(Y_tau/Y_T)^(1/(p-1))]`.
///
/// Each state carries `(optimal, competitor)` estimates. States where either
/// side is flagged are excluded; per rule the state averages of the
/// remaining pairs are compared at 3 joint standard errors. A rule with no
/// usable state, or with more than half its states flagged, is Inconclusive.
pub fn dual_dominance(
    p: f64,
    rules: &[RuleEval<(McEstimate, McEstimate)>],
    confidence: f64,
) -> DominanceReport {
    let mut out = Vec::with_capacity(rules.len());
    for r in rules {
        let usable: Vec<&(McEstimate, McEstimate)> = r
            .states
            .iter()
            .map(|s| &s.value)
            .filter(|(a, b)| !is_flagged(a) && !is_flagged(b))
            .collect();
        let n_flagged = r.states.len() - usable.len();
        let n_state_failures = usable
            .iter()
            .filter(|(a, b)| a.value > b.value + 3.0 * stats::joint_std_error(a, b))
            .count();
        let avg = |pick: fn(&(McEstimate, McEstimate)) -> McEstimate| {
            let k = usable.len().max(1) as f64;
            let v = stats::neumaier_sum(usable.iter().map(|x| pick(x).value)) / k;
            let var =
                stats::neumaier_sum(usable.iter().map(|x| pick(x).std_error.powi(2))) / (k * k);
            McEstimate::new(v, var.sqrt(), usable.len(), confidence)
        };
        let (optimal_mean, competitor_mean) = (avg(|x| x.0), avg(|x| x.1));
        let verdict = if usable.is_empty() && r.states.is_empty() {
            Verdict::VerifiedWithinTolerance
        } else if usable.is_empty() || 2 * n_flagged > r.states.len() {
            Verdict::Inconclusive
        } else {
            Verdict::from_bool(
                optimal_mean.value
                    <= competitor_mean.value
                        + 3.0 * stats::joint_std_error(&optimal_mean, &competitor_mean)
                        + 1e-12,
            )
        };
        out.push(DominanceRule {
            rule: r.rule,
            n_compared: usable.len(),
            n_flagged,
            optimal_mean,
            competitor_mean,
            n_state_failures,
            verdict,
        });
    }
    let verdict = out
        .iter()
        .map(|r| match r.verdict {
            Verdict::Inconclusive => Verdict::VerifiedWithinTolerance,
            v => v,
        })
        .fold(Verdict::VerifiedWithinTolerance, Verdict::combine);
    DominanceReport {
        p,
        rules: out,
        verdict,
    }
}

/// Sandwich `E_tau[S_T^eps] <= S_tau^eps <= k E_tau[S_T^eps]` for one eps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichRule {
    pub rule: StoppingRule,
    pub n_checked: usize,
    pub n_fail_lower: usize,
    pub n_fail_upper: usize,
    /// Largest `(E - S^eps) / se` over states (negative when all hold).
    pub worst_lower_z: f64,
    /// Smallest `k (E + 3 se) / S^eps` over states.
    pub worst_upper_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub epsilon: f64,
    pub factor: f64,
    pub rules: Vec<SandwichRule>,
    pub verdict: Verdict,
}

/// Checks the sandwich at every probed state; `rules` carry `E_Q[S_T^eps]`
/// estimates.
pub fn sandwich_from_states(
    epsilon: f64,
    params: &CounterexampleParams,
    rules: &[RuleEval<McEstimate>],
) -> SandwichReport {
    let factor = params.sandwich_factor(epsilon);
    let mut out = Vec::with_capacity(rules.len());
    for r in rules {
        let mut row = SandwichRule {
            rule: r.rule,
            n_checked: r.states.len(),
            n_fail_lower: 0,
            n_fail_upper: 0,
            worst_lower_z: f64::NEG_INFINITY,
            worst_upper_ratio: f64::INFINITY,
        };
        for s in &r.states {
            let se_pow = s.state.s.powf(epsilon);
            let e = &s.value;
            let tol = 1e-12 * se_pow;
            if e.value > se_pow + 3.0 * e.std_error + tol {
                row.n_fail_lower += 1;
            }
            if se_pow > factor * (e.value + 3.0 * e.std_error) + tol {
                row.n_fail_upper += 1;
            }
            let z = if e.std_error > 0.0 {
                (e.value - se_pow) / e.std_error
            } else if e.value > se_pow + tol {
                f64::INFINITY
            } else {
                0.0
            };
            row.worst_lower_z = row.worst_lower_z.max(z);
            row.worst_upper_ratio = row
                .worst_upper_ratio
                .min(factor * (e.value + 3.0 * e.std_error) / se_pow);
        }
        out.push(row);
    }
    let ok = out
        .iter()
        .all(|r| r.n_fail_lower == 0 && r.n_fail_upper == 0);
    SandwichReport {
        epsilon,
        factor,
        rules: out,
        verdict: Verdict::from_bool(ok),
    }
}

/// Nested sandwich check for one exponent.
#[allow(clippy::too_many_arguments)]
pub fn moment_sandwich(
    epsilon: f64,
    family: &StoppingFamily,
    params: &CounterexampleParams,
    grid: &GridSpec,
    n_outer: usize,
    n_states: usize,
    n_inner: usize,
    seed: u64,
    confidence: f64,
) -> Result<SandwichReport, MeasureError> {
    let outer = stop_outer_paths(params, grid, family, n_outer, seed)?;
    let evals = evaluate_nested(params, grid, &outer, n_states, n_inner, seed, |s, fam| {
        tilted_price_moment(&s.state, epsilon, params, grid, n_inner, fam, confidence)
    })?;
    let evals = evals
        .into_iter()
        .map(transpose_rule)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sandwich_from_states(epsilon, params, &evals))
}

/// BMO norm estimate over deterministic times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmoReport {
    /// `(tau, E_tau[<M>_T - <M>_tau])` per probed time.
    pub remaining: Vec<(f64, McEstimate)>,
    pub norm_squared: McEstimate,
    pub argmax_time: f64,
    /// `q(M)_t = E_t[<M>_T]` along the first path, at every grid time.
    pub q_path: Vec<(f64, f64)>,
}

/// Squared BMO norm from per-path increments on a uniform grid of step `dt`.
///
/// Remaining quadratic variation is averaged across paths, which equals the
/// conditional expectation when increments are independent of the past (the
/// Brownian case).
pub fn bmo_norm(increments: &[Vec<f64>], dt: f64, times: &[f64], confidence: f64) -> BmoReport {
    let steps = increments.first().map_or(0, |r| r.len());
    let qv: Vec<Vec<f64>> = increments
        .par_iter()
        .map(|row| {
            let mut acc = Vec::with_capacity(row.len() + 1);
            acc.push(0.0);
            let mut c = 0.0;
            for x in row {
                c += x * x;
                acc.push(c);
            }
            acc
        })
        .collect();
    let index_of = |t: f64| ((t / dt).round() as usize).min(steps);
    let remaining: Vec<(f64, McEstimate)> = times
        .iter()
        .map(|&t| {
            let k = index_of(t);
            let xs: Vec<f64> = qv.iter().map(|a| a[steps] - a[k]).collect();
            (t, McEstimate::from_samples(&xs, confidence))
        })
        .collect();
    let (argmax_time, norm_squared) = remaining.iter().copied().fold(
        (0.0, McEstimate::new(0.0, 0.0, increments.len(), confidence)),
        |acc, (t, e)| {
            if e.value > acc.1.value {
                (t, e)
            } else {
                acc
            }
        },
    );
    let mean_remaining: Vec<f64> = (0..=steps)
        .map(|k| stats::mean(&qv.iter().map(|a| a[steps] - a[k]).collect::<Vec<_>>()))
        .collect();
    let q_path = qv
        .first()
        .map(|a| {
            (0..=steps)
                .map(|k| (k as f64 * dt, a[k] + mean_remaining[k]))
                .collect()
        })
        .unwrap_or_default();
    BmoReport {
        remaining,
        norm_squared,
        argmax_time,
        q_path,
    }
}
