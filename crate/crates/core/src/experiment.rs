//! Experiment configuration, orchestration, and report files.
//!
//! A run validates its configuration, executes the selected suites on a
//! dedicated worker pool, and writes `summary.json` (all numbers, byte-stable
//! for a fixed configuration and seed), `manifest.json` (configuration echo,
//! verdicts, wall time, artifacts), and long-form CSV reports.

use std::fmt;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::ap::{self, ApReport, Process, RuleEval, StoppingFamily, Verdict};
use crate::control::{self, ControlState, MertonSolution};
use crate::duality::{self, power_utility};
use crate::measure::{self, DensityTriple, MeasureError, NormalizerMode};
use crate::model::{
    p_prime, select_counterexample_params, ControlParams, CounterexampleParams, DensityVariant,
    Inequality, ParamError,
};
use crate::path::{self, GridError, GridSpec, Outcome, PathBundle, SimError, DEFAULT_TAIL_MASS};
use crate::report::{self, fmt_float};
use crate::rng::{domain, StreamFamily};
use crate::stats::{McEstimate, DEFAULT_CONFIDENCE};

/// Environment variable overriding the seed (and nothing else).
pub const SEED_ENV: &str = "APVERIFY_SEED";

/// Largest censored fraction accepted at the default horizon.
pub const MAX_CENSORED_MASS: f64 = 2e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Counterexample,
    Control,
    ApCheck,
    DualityCheck,
    BmoCheck,
    All,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::Control => "control",
            ExperimentKind::ApCheck => "ap-check",
            ExperimentKind::DualityCheck => "duality-check",
            ExperimentKind::BmoCheck => "bmo-check",
            ExperimentKind::All => "all",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "counterexample" => ExperimentKind::Counterexample,
            "control" => ExperimentKind::Control,
            "ap-check" => ExperimentKind::ApCheck,
            "duality-check" => ExperimentKind::DualityCheck,
            "bmo-check" => ExperimentKind::BmoCheck,
            "all" => ExperimentKind::All,
            other => {
                return Err(format!(
                    "unknown experiment `{other}` (expected counterexample|control|ap-check|duality-check|bmo-check|all)"
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Control,
    Bmo,
    Terminal,
    Duality,
    Nested,
}

impl ExperimentKind {
    fn sections(self) -> &'static [Section] {
        use Section::*;
        match self {
            ExperimentKind::Counterexample => &[Terminal, Nested],
            ExperimentKind::Control => &[Control, Bmo],
            ExperimentKind::ApCheck => &[Nested],
            ExperimentKind::DualityCheck => &[Duality, Nested],
            ExperimentKind::BmoCheck => &[Bmo],
            ExperimentKind::All => &[Control, Bmo, Terminal, Duality, Nested],
        }
    }
}

/// Black-Scholes control market settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub mpr: f64,
    pub maturity: f64,
    pub vol: f64,
    /// Inner paths per calibration state.
    pub n_inner: usize,
    pub bmo_paths: usize,
    pub bmo_steps: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let c = ControlParams::default();
        Self {
            mpr: c.mpr,
            maturity: c.maturity,
            vol: c.vol,
            n_inner: 20_000,
            bmo_paths: 10_000,
            bmo_steps: 256,
        }
    }
}

/// A complete run description. Every field has a default; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub a: f64,
    pub p: f64,
    /// `None` searches for a feasible `b`.
    pub b: Option<f64>,
    pub variant: DensityVariant,
    pub dt: f64,
    /// `None` picks the horizon where `exp(-gamma t)` falls to 1e-4.
    pub t_max: Option<f64>,
    pub refine_threshold: f64,
    pub refine_factor: u32,
    pub coarse_threshold: f64,
    pub coarse_factor: u32,
    /// Paths for terminal statistics.
    pub n_paths: usize,
    /// Outer paths for stopped states.
    pub n_outer: usize,
    /// Stopped states resimulated per rule.
    pub n_outer_states: usize,
    /// Inner paths per stopped state.
    pub n_inner: usize,
    pub seed: u64,
    pub confidence_level: f64,
    pub out_dir: PathBuf,
    /// Worker threads; `None` uses every core. Never affects results.
    pub workers: Option<usize>,
    pub normalizer: NormalizerMode,
    /// Initial wealth for the duality checks.
    pub x0: f64,
    pub epsilons: Vec<f64>,
    pub family: StoppingFamily,
    pub control: ControlConfig,
    pub emit_paths_csv: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            experiment: ExperimentKind::All,
            a: 0.5,
            p: 4.0,
            b: Some(0.7),
            variant: DensityVariant::Corrected,
            dt: g.dt,
            t_max: None,
            refine_threshold: g.refine_threshold,
            refine_factor: g.refine_factor,
            coarse_threshold: g.coarse_threshold,
            coarse_factor: g.coarse_factor,
            n_paths: 100_000,
            n_outer: 20_000,
            n_outer_states: 200,
            n_inner: 2_000,
            seed: 20_240_917,
            confidence_level: DEFAULT_CONFIDENCE,
            out_dir: PathBuf::from("apverify-out"),
            workers: None,
            normalizer: NormalizerMode::Independent,
            x0: 1.0,
            epsilons: vec![0.3, 0.5, 0.7],
            family: StoppingFamily::default(),
            control: ControlConfig::default(),
            emit_paths_csv: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl RunError {
    fn config(key: &str, message: impl Into<String>) -> Self {
        RunError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn io(path: &FsPath, e: impl fmt::Display) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Process exit status: 2 for configuration, 3 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config { .. } => 2,
            RunError::Io { .. } => 3,
            RunError::Numerical(_) => 1,
        }
    }
}

impl From<MeasureError> for RunError {
    fn from(e: MeasureError) -> Self {
        RunError::Numerical(e.to_string())
    }
}

impl From<SimError> for RunError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Grid(GridError::Invalid {
                field,
                value,
                reason,
            }) => RunError::config(field, format!("{value} {reason}")),
            other => RunError::Numerical(other.to_string()),
        }
    }
}

fn param_key(e: &ParamError) -> &'static str {
    match e {
        ParamError::InvalidRiskAversion { .. } => "a",
        ParamError::InvalidP { .. } => "p",
        ParamError::ConstraintViolated { inequality, .. } => match inequality {
            Inequality::RiskAversionRange => "a",
            Inequality::ExponentFloor => "p",
            _ => "b",
        },
        ParamError::InvalidControl { field, .. } => field,
        _ => "b",
    }
}

impl ExperimentConfig {
    /// Parses a JSON document; unknown keys and type errors are config errors.
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("unknown field"))
                .unwrap_or("<document>")
                .to_string();
            RunError::Config { key, message: msg }
        })
    }

    pub fn params(&self) -> Result<CounterexampleParams, RunError> {
        select_counterexample_params(self.a, self.p, self.b, self.variant)
            .map_err(|e| RunError::config(param_key(&e), e.to_string()))
    }

    pub fn grid(&self, params: &CounterexampleParams) -> GridSpec {
        GridSpec {
            dt: self.dt,
            t_max: self
                .t_max
                .unwrap_or_else(|| params.horizon_for_tail(DEFAULT_TAIL_MASS).ceil()),
            refine_threshold: self.refine_threshold,
            refine_factor: self.refine_factor,
            coarse_threshold: self.coarse_threshold,
            coarse_factor: self.coarse_factor,
        }
    }

    pub fn control_params(&self) -> Result<ControlParams, RunError> {
        ControlParams::new(self.control.mpr, self.control.maturity, self.control.vol).map_err(|e| {
            match e {
                ParamError::InvalidControl { field, .. } => {
                    RunError::config(&format!("control.{field}"), e.to_string())
                }
                other => RunError::config("control", other.to_string()),
            }
        })
    }

    /// Checks every field; the error names the offending key.
    pub fn validate(&self) -> Result<(), RunError> {
        let params = self.params()?;
        self.grid(&params).validate().map_err(|e| match e {
            GridError::Invalid {
                field,
                value,
                reason,
            } => RunError::config(field, format!("{value} {reason}")),
        })?;
        self.control_params()?;
        let positive = [
            ("n_paths", self.n_paths, 2),
            ("n_outer", self.n_outer, 1),
            ("n_outer_states", self.n_outer_states, 1),
            ("n_inner", self.n_inner, 2),
            ("control.n_inner", self.control.n_inner, 2),
            ("control.bmo_paths", self.control.bmo_paths, 2),
            ("control.bmo_steps", self.control.bmo_steps, 1),
        ];
        for (key, v, min) in positive {
            if v < min {
                return Err(RunError::config(key, format!("{v} must be at least {min}")));
            }
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(RunError::config(
                "confidence_level",
                format!("{} must lie in (0, 1)", self.confidence_level),
            ));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return Err(RunError::config(
                "x0",
                format!("{} must be positive", self.x0),
            ));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(RunError::config(
                "epsilons",
                format!("{e} must lie in (0, 1)"),
            ));
        }
        if self.workers == Some(0) {
            return Err(RunError::config("workers", "must be at least 1"));
        }
        self.family
            .validate()
            .map_err(|m| RunError::config("family", m))?;
        Ok(())
    }
}

/// One verdict of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub verdict: Verdict,
    /// Whether the verdict affects the exit status.
    pub gating: bool,
    pub detail: String,
}

/// Record of a run, written even when a suite fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub wall_time_seconds: f64,
    pub checks: Vec<Check>,
    /// Combined verdict per suite section.
    pub section_verdicts: Map<String, Value>,
    pub censored_mass: Option<f64>,
    pub artifacts: Vec<String>,
    pub exit_code: i32,
    pub error: Option<String>,
}

impl RunManifest {
    /// True when no gating check was violated and the run completed.
    pub fn passed(&self) -> bool {
        self.exit_code == 0
    }
}

#[derive(Default)]
struct RunOutput {
    sections: Map<String, Value>,
    checks: Vec<(String, Check)>,
    ap_rows: Vec<Vec<String>>,
    duality_rows: Vec<Vec<String>>,
    path_rows: Vec<Vec<String>>,
    censored_mass: Option<f64>,
}

impl RunOutput {
    fn check(&mut self, section: &str, name: &str, ok: Verdict, gating: bool, detail: String) {
        self.checks.push((
            section.to_string(),
            Check {
                name: name.to_string(),
                verdict: ok,
                gating,
                detail,
            },
        ));
    }
}

fn est(e: &McEstimate) -> Value {
    json!({"value": e.value, "std_error": e.std_error, "n": e.n})
}

fn ap_state_rows(out: &mut Vec<Vec<String>>, quantity: &str, rules: &[RuleEval<McEstimate>]) {
    for r in rules {
        for s in &r.states {
            let verdict = if ap::is_flagged(&s.value) {
                Verdict::Inconclusive
            } else {
                Verdict::VerifiedWithinTolerance
            };
            out.push(vec![
                quantity.to_string(),
                r.rule.to_string(),
                format!(
                    "path={};t={};s={}",
                    s.path_id,
                    fmt_float(s.state.t),
                    fmt_float(s.state.s)
                ),
                fmt_float(s.value.value),
                fmt_float(s.value.std_error),
                verdict.to_string(),
            ]);
        }
    }
}

fn duality_row(
    check: &str,
    variant: &str,
    quantity: &str,
    e: &McEstimate,
    verdict: Verdict,
) -> Vec<String> {
    vec![
        check.to_string(),
        variant.to_string(),
        quantity.to_string(),
        fmt_float(e.value),
        fmt_float(e.std_error),
        verdict.to_string(),
    ]
}

// ---------------------------------------------------------------- control

fn run_control(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<(), RunError> {
    const SEC: &str = "control";
    let c = cfg.control_params()?;
    let conf = cfg.confidence_level;
    let fam = StreamFamily::new(cfg.seed).child(domain::CONTROL);
    let t_end = c.maturity;
    let taus: Vec<f64> = [0.0, 0.25, 0.5, 0.75].iter().map(|f| f * t_end).collect();

    // Calibration of the single-state estimator against the closed form.
    let outer = control::brownian_at(&c, &taus, cfg.n_outer_states, &fam.child(1));
    let mut calibration = Vec::new();
    for (j, &tau) in taus.iter().enumerate() {
        for (k, p) in [2.0, 4.0].into_iter().enumerate() {
            let state = ControlState {
                t: tau,
                w: outer[0][j],
            };
            let e = control::ap_functional_at(
                &c,
                &state,
                p,
                cfg.control.n_inner,
                &fam.child(2).child((j * 2 + k) as u64),
                conf,
            );
            let target = c.ap_closed_form(tau, p);
            let v = Verdict::from_bool(e.within(target, 3.0));
            out.check(
                SEC,
                &format!("control.ap_calibration[tau={tau},p={p}]"),
                v,
                true,
                format!(
                    "estimate {} +- {} vs closed form {}",
                    fmt_float(e.value),
                    fmt_float(e.std_error),
                    fmt_float(target)
                ),
            );
            calibration.push(json!({"tau": tau, "p": p, "estimate": est(&e), "closed_form": target, "verdict": v}));
        }
    }

    // Family over deterministic times: average over outer states.
    let mut family_times = taus.clone();
    family_times.push(t_end);
    let outer = control::brownian_at(&c, &family_times, cfg.n_outer_states, &fam.child(3));
    let mut per_time = Vec::new();
    let mut state_rows = Vec::new();
    for (j, &tau) in family_times.iter().enumerate() {
        let values: Vec<McEstimate> = outer
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let st = ControlState { t: tau, w: row[j] };
                control::ap_functional_at(
                    &c,
                    &st,
                    cfg.p,
                    cfg.n_inner,
                    &fam.child(4).child(j as u64).child(i as u64),
                    conf,
                )
            })
            .collect();
        for (i, v) in values.iter().enumerate() {
            state_rows.push(vec![
                "control.Z".to_string(),
                format!("time={tau}"),
                format!("path={i};t={};w={}", fmt_float(tau), fmt_float(outer[i][j])),
                fmt_float(v.value),
                fmt_float(v.std_error),
                Verdict::VerifiedWithinTolerance.to_string(),
            ]);
        }
        let xs: Vec<f64> = values.iter().map(|e| e.value).collect();
        per_time.push((tau, McEstimate::from_samples(&xs, conf)));
    }
    out.ap_rows.extend(state_rows);
    let (arg_tau, top) = per_time.iter().copied().fold(
        (f64::NAN, McEstimate::exact(f64::NEG_INFINITY, 0)),
        |acc, (t, e)| {
            if e.value > acc.1.value {
                (t, e)
            } else {
                acc
            }
        },
    );
    let closed0 = c.ap_closed_form(0.0, cfg.p);
    let v = Verdict::from_bool(arg_tau == 0.0 && top.within(closed0, 3.0));
    out.check(
        SEC,
        "control.ap_family_max",
        v,
        true,
        format!(
            "max at tau={arg_tau}: {} +- {} vs closed form {}",
            fmt_float(top.value),
            fmt_float(top.std_error),
            fmt_float(closed0)
        ),
    );

    // Martingale property of Z and the Merton duality.
    let w_t = control::terminal_brownian(&c, cfg.n_paths, &fam.child(5));
    let z_t: Vec<f64> = w_t.iter().map(|w| c.density(t_end, *w)).collect();
    let ones = vec![1.0; z_t.len()];
    let defect = ap::ui_defect(&z_t, 1.0, &ones, conf);
    let v_ui = Verdict::from_bool(defect.within(0.0, 3.0));
    out.check(
        SEC,
        "control.ui_defect",
        v_ui,
        true,
        format!(
            "defect {} +- {}",
            fmt_float(defect.value),
            fmt_float(defect.std_error)
        ),
    );

    let u = power_utility(cfg.a).map_err(|e| RunError::config("a", e.to_string()))?;
    let m = MertonSolution::new(&c, cfg.a, cfg.x0);
    let x_t: Vec<f64> = z_t.iter().map(|z| m.terminal_wealth(*z)).collect();
    let y_t: Vec<f64> = z_t.iter().map(|z| m.y * z).collect();
    let mut primal_dual =
        duality::verify_primal_dual_pair(&u, &x_t, &y_t, cfg.x0, m.y, &ones, 0.0, conf)
            .map_err(|e| RunError::Numerical(e.to_string()))?;
    let gap = duality::duality_gap(&u, cfg.x0, &[&x_t], &[&z_t], m.y, &ones, 0.0, conf)
        .map_err(|e| RunError::Numerical(e.to_string()))?;
    primal_dual.gap = Some(gap.gap);
    primal_dual.seed = Some(cfg.seed);
    out.check(
        SEC,
        "control.primal_dual",
        primal_dual.verdict,
        true,
        format!(
            "foc_cv {}, E[XY] {} vs {}",
            fmt_float(primal_dual.foc_cv),
            fmt_float(primal_dual.product_mean.value),
            fmt_float(primal_dual.product_target)
        ),
    );
    let v_gap = Verdict::from_bool(gap.gap.within(0.0, 3.0));
    out.check(
        SEC,
        "control.duality_gap",
        v_gap,
        true,
        format!(
            "gap {} +- {}",
            fmt_float(gap.gap.value),
            fmt_float(gap.gap.std_error)
        ),
    );
    let v_val = Verdict::from_bool(gap.u_estimate.within(m.value, 3.0));
    out.check(
        SEC,
        "control.merton_value",
        v_val,
        true,
        format!(
            "E[U(X)] {} +- {} vs u(x) {}",
            fmt_float(gap.u_estimate.value),
            fmt_float(gap.u_estimate.std_error),
            fmt_float(m.value)
        ),
    );
    out.duality_rows.push(duality_row(
        "primal_dual",
        "control",
        "product_mean",
        &primal_dual.product_mean,
        primal_dual.verdict,
    ));
    out.duality_rows.push(duality_row(
        "primal_dual",
        "control",
        "v_estimate",
        &primal_dual.v_estimate,
        primal_dual.verdict,
    ));
    out.duality_rows.push(duality_row(
        "duality_gap",
        "control",
        "gap",
        &gap.gap,
        v_gap,
    ));

    // Wealth-to-dual ratio: X_tau = E_tau[Z_T X_T] / Z_tau at a few states.
    let n_ratio_states = cfg.n_outer_states.min(20);
    let outer = control::brownian_at(&c, &taus, n_ratio_states, &fam.child(6));
    let mut ratios = Vec::new();
    let mut ratio_ok = true;
    let joint_z = crate::stats::z_for(1.0 - (1.0 - conf) / (taus.len() * n_ratio_states) as f64);
    for (j, &tau) in taus.iter().enumerate() {
        let closed = m.wealth_dual_ratio(&c, tau);
        let ests: Vec<McEstimate> = (0..n_ratio_states)
            .map(|i| {
                let st = ControlState {
                    t: tau,
                    w: outer[i][j],
                };
                let z_tau = c.density(tau, st.w);
                let w_inner = control::continuation_brownian(
                    &c,
                    &st,
                    cfg.control.n_inner,
                    &fam.child(7).child(j as u64).child(i as u64),
                );
                let vals: Vec<f64> = w_inner
                    .iter()
                    .map(|w| {
                        let z = c.density(t_end, *w);
                        z / z_tau * m.terminal_wealth(z)
                    })
                    .collect();
                let x_tau = McEstimate::from_samples(&vals, conf);
                x_tau.affine(0.0, 1.0 / u.inverse_marginal(m.y * z_tau))
            })
            .collect();
        ratio_ok &= ests.iter().all(|e| e.within(closed, joint_z));
        let values: Vec<f64> = ests.iter().map(|e| e.value).collect();
        let spread = crate::stats::variance(&values).sqrt();
        ratios.push(json!({"tau": tau, "closed_form": closed, "mean": crate::stats::mean(&values), "cross_state_sd": spread}));
    }
    out.check(
        SEC,
        "control.wealth_ratio",
        Verdict::from_bool(ratio_ok),
        false,
        format!(
            "{} states against the deterministic closed form at joint z {}",
            taus.len() * n_ratio_states,
            fmt_float(joint_z)
        ),
    );

    out.sections.insert(
        SEC.to_string(),
        json!({
            "params": {"mpr": c.mpr, "maturity": c.maturity, "vol": c.vol},
            "calibration": calibration,
            "family": per_time.iter().map(|(t, e)| json!({"tau": t, "mean_functional": est(e)})).collect::<Vec<_>>(),
            "family_max": {"tau": arg_tau, "estimate": est(&top), "closed_form": closed0},
            "ui_defect": est(&defect),
            "merton": {"a": cfg.a, "x0": cfg.x0, "y": m.y, "value": m.value},
            "primal_dual": serde_json::to_value(&primal_dual).unwrap_or(Value::Null),
            "duality_gap": serde_json::to_value(gap).unwrap_or(Value::Null),
            "wealth_ratio": ratios,
        }),
    );
    Ok(())
}

fn run_bmo(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<(), RunError> {
    const SEC: &str = "bmo";
    let c = cfg.control_params()?;
    let fam = StreamFamily::new(cfg.seed)
        .child(domain::CONTROL)
        .child(100);
    let steps = cfg.control.bmo_steps;
    let dt = c.maturity / steps as f64;
    let inc: Vec<Vec<f64>> = control::brownian_increments(&c, cfg.control.bmo_paths, steps, &fam)
        .into_iter()
        .map(|row| row.into_iter().map(|x| -c.mpr * x).collect())
        .collect();
    let times: Vec<f64> = [0.0, 0.25, 0.5, 0.75]
        .iter()
        .map(|f| f * c.maturity)
        .collect();
    let r = ap::bmo_norm(&inc, dt, &times, cfg.confidence_level);
    let target = c.mpr * c.mpr * c.maturity;
    let v = Verdict::from_bool(r.norm_squared.within(target, 3.0) && r.argmax_time == 0.0);
    out.check(
        SEC,
        "bmo.control_norm",
        v,
        true,
        format!(
            "norm^2 {} +- {} vs {}",
            fmt_float(r.norm_squared.value),
            fmt_float(r.norm_squared.std_error),
            fmt_float(target)
        ),
    );
    let stride = (steps / 16).max(1);
    let q_path: Vec<Value> = r
        .q_path
        .iter()
        .step_by(stride)
        .map(|(t, q)| json!({"t": t, "q": q}))
        .collect();
    out.sections.insert(
        SEC.to_string(),
        json!({
            "target": target,
            "norm_squared": est(&r.norm_squared),
            "argmax_time": r.argmax_time,
            "remaining": r.remaining.iter().map(|(t, e)| json!({"tau": t, "estimate": est(e)})).collect::<Vec<_>>(),
            "q_path": q_path,
        }),
    );
    Ok(())
}

// ---------------------------------------------------------- counterexample

struct Ensembles {
    bundle: PathBundle,
    normalizer_bundle: Option<PathBundle>,
}

impl Ensembles {
    fn build(
        cfg: &ExperimentConfig,
        params: &CounterexampleParams,
        grid: &GridSpec,
    ) -> Result<Self, RunError> {
        let bundle = path::simulate_paths(params, grid, cfg.n_paths, cfg.seed)?;
        let normalizer_bundle = match cfg.normalizer {
            NormalizerMode::Independent => Some(measure::simulate_normalizer_ensemble(&bundle)?),
            NormalizerMode::Same => None,
        };
        Ok(Self {
            bundle,
            normalizer_bundle,
        })
    }

    /// Density data under `variant`, with the normalizer per the config.
    fn triple(&self, variant: DensityVariant, conf: f64) -> (DensityTriple, f64) {
        let params = self.bundle.params.with_variant(variant);
        let bundle = PathBundle {
            params,
            ..self.bundle.clone()
        };
        let source = match &self.normalizer_bundle {
            Some(nb) => PathBundle {
                params,
                ..nb.clone()
            },
            None => bundle.clone(),
        };
        let normalizer = measure::normalizer_of(&source, conf);
        // The independent normalizer's error is a common scale on Y.
        let rel = if self.normalizer_bundle.is_some() {
            normalizer.relative_error()
        } else {
            0.0
        };
        (DensityTriple::with_normalizer(&bundle, normalizer), rel)
    }
}

fn run_terminal(
    cfg: &ExperimentConfig,
    ens: &Ensembles,
    out: &mut RunOutput,
) -> Result<(), RunError> {
    const SEC: &str = "counterexample";
    let conf = cfg.confidence_level;
    let b = &ens.bundle;
    let params = b.params;
    let n = b.summaries.len() as f64;
    out.censored_mass = Some(b.censored_mass);
    let hits = b
        .summaries
        .iter()
        .filter(|s| s.outcome() == Outcome::Hit)
        .count();
    let jumps = b
        .summaries
        .iter()
        .filter(|s| s.outcome() == Outcome::Jump)
        .count();

    let v_cens = Verdict::from_bool(b.censored_mass <= MAX_CENSORED_MASS);
    out.check(
        SEC,
        "counterexample.censored_mass",
        v_cens,
        true,
        format!(
            "{} (limit {})",
            fmt_float(b.censored_mass),
            fmt_float(MAX_CENSORED_MASS)
        ),
    );

    // Q(T > t) <= exp(-gamma t) on a unit grid; censored paths count as T > t.
    let mut finals: Vec<f64> = b
        .summaries
        .iter()
        .map(|s| s.terminal_time().unwrap_or(f64::INFINITY))
        .collect();
    finals.sort_by(f64::total_cmp);
    let mut worst = (f64::NAN, f64::INFINITY);
    let mut tail_ok = true;
    let mut tail_points = Vec::new();
    let mut t = 1.0;
    while t <= b.grid.t_max {
        let above = finals.len() - finals.partition_point(|&x| x <= t);
        let f = above as f64 / n;
        let se = (f * (1.0 - f) / n).sqrt();
        let bound = (-params.gamma() * t).exp();
        let slack = bound + 3.0 * se - f;
        tail_ok &= slack >= 0.0;
        if slack < worst.1 {
            worst = (t, slack);
        }
        if (t as u64).is_power_of_two() || t == 1.0 {
            tail_points.push(json!({"t": t, "fraction": f, "std_error": se, "bound": bound}));
        }
        t += 1.0;
    }
    out.check(
        SEC,
        "counterexample.tail_bound",
        Verdict::from_bool(tail_ok),
        true,
        format!("smallest slack {} at t={}", fmt_float(worst.1), worst.0),
    );

    let (triple, rel) = ens.triple(params.variant(), conf);
    let ey = duality::with_scale_error(triple.p_mean(&triple.y_hat_terminal, conf), rel);
    let bracket = triple.p_mean_bracketed(
        &triple.y_hat_terminal,
        0.0,
        triple.y_hat_terminal.iter().copied().fold(0.0, f64::max),
        conf,
    );
    let bound = params.dual_mean_bound();
    let defect = ey.affine(1.0, -1.0);
    let v_ui = Verdict::from_bool(ey.at_most(bound, 3.0) && defect.at_least(1.0 - bound, 3.0));
    out.check(
        SEC,
        "counterexample.ui_defect",
        v_ui,
        true,
        format!(
            "E_P[Y_T] {} +- {} (bound {}), defect {}",
            fmt_float(ey.value),
            fmt_float(ey.std_error),
            fmt_float(bound),
            fmt_float(defect.value)
        ),
    );
    let el_q = McEstimate::from_samples(&triple.el_terminal, conf);
    let t_mean = McEstimate::from_samples(&triple.t_terminal, conf);

    if cfg.emit_paths_csv {
        for s in &b.summaries {
            let time = |st: &path::StopTime| st.time().map_or_else(|| String::from(""), fmt_float);
            out.path_rows.push(vec![
                s.path_id.to_string(),
                time(&s.t1),
                time(&s.t2),
                time(&s.t_final),
                s.censored.to_string(),
                fmt_float(s.s_final),
                fmt_float(s.b_final),
                fmt_float(s.compensator_final),
            ]);
        }
    }

    out.sections.insert(
        SEC.to_string(),
        json!({
            "params": serde_json::to_value(params).unwrap_or(Value::Null),
            "grid": serde_json::to_value(b.grid).unwrap_or(Value::Null),
            "n_paths": b.summaries.len(),
            "hit_fraction": hits as f64 / n,
            "jump_fraction": jumps as f64 / n,
            "censored_mass": b.censored_mass,
            "mean_terminal_time_q": est(&t_mean),
            "normalizer": est(&triple.normalizer),
            "normalizer_mode": cfg.normalizer,
            "stoch_exp_mean_q": est(&el_q),
            "dual_mean_p": est(&ey),
            "dual_mean_bracket": [bracket.bracket_low, bracket.bracket_high],
            "dual_mean_bound": bound,
            "ui_defect": est(&defect),
            "tail": tail_points,
        }),
    );
    Ok(())
}

fn run_duality(
    cfg: &ExperimentConfig,
    ens: &Ensembles,
    out: &mut RunOutput,
) -> Result<(), RunError> {
    const SEC: &str = "duality";
    let conf = cfg.confidence_level;
    let u = power_utility(cfg.a).map_err(|e| RunError::config("a", e.to_string()))?;
    let mut variants = Map::new();
    for variant in [DensityVariant::Corrected, DensityVariant::Literal] {
        let (triple, rel) = ens.triple(variant, conf);
        let x_t: Vec<f64> = triple.s_terminal.iter().map(|s| cfg.x0 * s).collect();
        let y = duality::foc_scale(&u, &x_t, &triple.y_hat_terminal, &triple.w_raw);
        let y_t: Vec<f64> = triple.y_hat_terminal.iter().map(|v| y * v).collect();
        let mut rep =
            duality::verify_primal_dual_pair(&u, &x_t, &y_t, cfg.x0, y, &triple.w_raw, rel, conf)
                .map_err(|e| RunError::Numerical(e.to_string()))?;
        let gap = duality::duality_gap(
            &u,
            cfg.x0,
            &[&x_t],
            &[&triple.y_hat_terminal],
            y,
            &triple.w_raw,
            rel,
            conf,
        )
        .map_err(|e| RunError::Numerical(e.to_string()))?;
        let sy: Vec<f64> = triple
            .s_terminal
            .iter()
            .zip(&triple.y_hat_terminal)
            .map(|(s, v)| s * v)
            .collect();
        let s_y = duality::with_scale_error(triple.p_mean(&sy, conf), rel);
        rep.gap = Some(gap.gap);
        rep.variant = Some(variant);
        rep.seed = Some(cfg.seed);
        let name = variant.to_string();
        let gating = variant == DensityVariant::Corrected;
        if gating {
            out.check(
                SEC,
                "duality.primal_dual[corrected]",
                rep.verdict,
                true,
                format!(
                    "foc_cv {}, E_P[S_T Y_T] {} +- {}",
                    fmt_float(rep.foc_cv),
                    fmt_float(s_y.value),
                    fmt_float(s_y.std_error)
                ),
            );
            let v_gap = Verdict::from_bool(gap.gap.within(0.0, 3.0));
            out.check(
                SEC,
                "duality.gap[corrected]",
                v_gap,
                true,
                format!(
                    "gap {} +- {}",
                    fmt_float(gap.gap.value),
                    fmt_float(gap.gap.std_error)
                ),
            );
            let v_sy = Verdict::from_bool(s_y.within(1.0, 3.0));
            out.check(
                SEC,
                "duality.price_dual_product[corrected]",
                v_sy,
                true,
                format!(
                    "E_P[S_T Y_T] {} +- {}",
                    fmt_float(s_y.value),
                    fmt_float(s_y.std_error)
                ),
            );
        } else {
            let dispersed = rep.foc_cv >= duality::FOC_TOLERANCE;
            out.check(
                SEC,
                "duality.foc_dispersion[literal]",
                if dispersed {
                    Verdict::VerifiedWithinTolerance
                } else {
                    Verdict::Inconclusive
                },
                false,
                format!(
                    "foc_cv {} (nonzero dispersion expected from exp(gamma T))",
                    fmt_float(rep.foc_cv)
                ),
            );
        }
        out.duality_rows.push(duality_row(
            "primal_dual",
            &name,
            "foc_cv",
            &McEstimate::exact(rep.foc_cv, rep.n_samples),
            rep.verdict,
        ));
        out.duality_rows.push(duality_row(
            "primal_dual",
            &name,
            "product_mean",
            &rep.product_mean,
            rep.verdict,
        ));
        out.duality_rows.push(duality_row(
            "primal_dual",
            &name,
            "v_estimate",
            &rep.v_estimate,
            rep.verdict,
        ));
        out.duality_rows.push(duality_row(
            "primal_dual",
            &name,
            "price_dual_product",
            &s_y,
            rep.verdict,
        ));
        out.duality_rows.push(duality_row(
            "duality_gap",
            &name,
            "gap",
            &gap.gap,
            Verdict::from_bool(gap.gap.within(0.0, 3.0)),
        ));
        variants.insert(
            name,
            json!({
                "report": serde_json::to_value(&rep).unwrap_or(Value::Null),
                "y": y,
                "price_dual_product": est(&s_y),
                "gap": serde_json::to_value(gap).unwrap_or(Value::Null),
                "normalizer": est(&triple.normalizer),
            }),
        );
    }
    let env = duality::check_risk_aversion_bounds(
        |x| u.marginal(x),
        cfg.a,
        cfg.a,
        1.0,
        &duality::default_pairs(),
    );
    out.check(
        SEC,
        "duality.envelope",
        Verdict::from_bool(env.passed),
        true,
        format!("worst log-margin {}", fmt_float(env.worst_margin)),
    );
    variants.insert(
        "envelope".to_string(),
        serde_json::to_value(env).unwrap_or(Value::Null),
    );
    out.sections
        .insert(SEC.to_string(), Value::Object(variants));
    Ok(())
}

// ------------------------------------------------------------------ nested

/// Everything evaluated at one stopped state.
struct StateStats {
    w_mean: McEstimate,
    z_model: McEstimate,
    z_utility: McEstimate,
    y_utility: McEstimate,
    y_low: McEstimate,
    el_mean: McEstimate,
    /// Tilted estimate of `E_Q[S_T^eps]` per epsilon.
    moments: Vec<McEstimate>,
    /// Plain sample mean of `S_T^eps` per epsilon.
    plain_moments: Vec<McEstimate>,
}

fn split<T: Clone>(
    rules: &[RuleEval<StateStats>],
    f: impl Fn(&StateStats) -> T,
) -> Vec<RuleEval<T>> {
    rules.iter().map(|r| r.map(&f)).collect()
}

fn ap_json(r: &ApReport) -> Value {
    json!({
        "process": r.process,
        "p": r.p,
        "family_max": est(&r.family_max),
        "family_max_rule": r.family_max_rule.to_string(),
        "implied_constant": r.implied_constant,
        "joint_z": r.joint_z,
        "n_flagged": r.n_flagged,
        "rules": r.rules.iter().map(|s| json!({
            "rule": s.rule.to_string(),
            "n_outer": s.n_outer,
            "n_stopped": s.n_stopped,
            "n_terminal": s.n_terminal,
            "n_censored": s.n_censored,
            "n_probed": s.n_probed,
            "n_flagged": s.n_flagged,
            "mean": est(&s.mean),
            "max": est(&s.max),
            "argmax_path": s.argmax_path,
        })).collect::<Vec<_>>(),
    })
}

fn run_nested(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<(), RunError> {
    const SEC: &str = "ap";
    let conf = cfg.confidence_level;
    let params = cfg.params()?;
    let grid = cfg.grid(&params);
    let a = params.a();
    let p_model = params.p();
    let p_utility = p_prime(a, a);
    let p_low = 1.0 + 0.5 * a;
    let outer = ap::stop_outer_paths(&params, &grid, &cfg.family, cfg.n_outer, cfg.seed)?;
    let evals = ap::evaluate_nested(
        &params,
        &grid,
        &outer,
        cfg.n_outer_states,
        cfg.n_inner,
        cfg.seed,
        |s, fam| {
            let f = |process, p| {
                ap::flag_unreliable(ap::functional(s, process, p, &params, conf), conf)
            };
            Ok::<_, MeasureError>(StateStats {
                w_mean: ap::weight_mean(s, conf),
                z_model: f(Process::Density, p_model)?,
                z_utility: f(Process::Density, p_utility)?,
                y_utility: f(Process::Dual, p_utility)?,
                y_low: f(Process::Dual, p_low)?,
                el_mean: ap::exponential_mean(s, &params, conf),
                moments: cfg
                    .epsilons
                    .iter()
                    .map(|e| {
                        ap::tilted_price_moment(
                            &s.state,
                            *e,
                            &params,
                            &grid,
                            cfg.n_inner,
                            fam,
                            conf,
                        )
                    })
                    .collect::<Result<_, _>>()?,
                plain_moments: cfg
                    .epsilons
                    .iter()
                    .map(|e| ap::price_moment(s, *e, conf))
                    .collect(),
            })
        },
    )?;
    let evals: Vec<RuleEval<StateStats>> = evals
        .into_iter()
        .map(ap::transpose_rule)
        .collect::<Result<_, _>>()?;
    let inner_censored: usize = evals
        .iter()
        .flat_map(|r| r.states.iter())
        .map(|s| s.n_inner_censored)
        .sum();
    let inner_total: usize = evals
        .iter()
        .flat_map(|r| r.states.iter())
        .map(|s| s.n_inner + s.n_inner_censored)
        .sum();

    // A_p of Z at the model exponent against the analytic bound.
    let z_rules = split(&evals, |s| s.z_model);
    let ap_z = ApReport::from_rules(Process::Density, p_model, &z_rules, conf);
    let bound = params.ap_bound();
    let v_ap = Verdict::from_bool(ap_z.family_max.at_most(bound, 3.0));
    out.check(
        SEC,
        "ap.density_family_max",
        v_ap,
        true,
        format!(
            "family max {} +- {} at {} (bound {}, {} flagged states)",
            fmt_float(ap_z.family_max.value),
            fmt_float(ap_z.family_max.std_error),
            ap_z.family_max_rule,
            fmt_float(bound),
            ap_z.n_flagged
        ),
    );
    ap_state_rows(&mut out.ap_rows, &format!("Z[p={p_model}]"), &z_rules);

    // Dominance of the dual minimizer at p = 1/(1-a).
    let pair_rules = split(&evals, |s| (s.y_utility, s.z_utility));
    let dom = ap::dual_dominance(p_utility, &pair_rules, conf);
    out.check(
        SEC,
        "ap.dual_dominance",
        dom.verdict,
        true,
        format!(
            "{} rules compared, {} inconclusive",
            dom.rules
                .iter()
                .filter(|r| r.verdict != Verdict::Inconclusive)
                .count(),
            dom.rules
                .iter()
                .filter(|r| r.verdict == Verdict::Inconclusive)
                .count()
        ),
    );
    let y_rules = split(&evals, |s| s.y_utility);
    let zu_rules = split(&evals, |s| s.z_utility);
    let ylow_rules = split(&evals, |s| s.y_low);
    let ap_y = ApReport::from_rules(Process::Dual, p_utility, &y_rules, conf);
    let ap_zu = ApReport::from_rules(Process::Density, p_utility, &zu_rules, conf);
    let ap_ylow = ApReport::from_rules(Process::Dual, p_low, &ylow_rules, conf);
    ap_state_rows(&mut out.ap_rows, &format!("Y_hat[p={p_utility}]"), &y_rules);
    ap_state_rows(&mut out.ap_rows, &format!("Z[p={p_utility}]"), &zu_rules);
    ap_state_rows(&mut out.ap_rows, &format!("Y_hat[p={p_low}]"), &ylow_rules);
    out.check(
        SEC,
        "ap.dual_exponent_below_threshold",
        if ap_ylow.n_flagged > ap_y.n_flagged || ap_ylow.implied_constant > ap_y.implied_constant {
            Verdict::VerifiedWithinTolerance
        } else {
            Verdict::Inconclusive
        },
        false,
        format!(
            "Y_hat implied constant {} at p={} vs {} at p={} ({} vs {} flagged)",
            fmt_float(ap_y.implied_constant),
            p_utility,
            fmt_float(ap_ylow.implied_constant),
            p_low,
            ap_y.n_flagged,
            ap_ylow.n_flagged
        ),
    );

    // Class (D) for the dual minimizer with its implied constant.
    let class_inputs: Vec<_> = evals
        .iter()
        .map(|r| {
            let states = r
                .states
                .iter()
                .filter(|s| !ap::is_flagged(&s.value.y_utility))
                .map(|s| ((params.gamma() * s.state.t).exp(), s.value.el_mean))
                .collect::<Vec<_>>();
            (r.rule, states)
        })
        .collect();
    let class_d = ap::class_d_check(&class_inputs, ap_y.implied_constant, p_utility);
    out.check(
        SEC,
        "ap.dual_class_d",
        class_d.verdict,
        true,
        format!(
            "constant {} at p={}",
            fmt_float(class_d.constant),
            p_utility
        ),
    );

    // Sandwich of S^eps.
    let mut sandwich = Vec::new();
    for (k, &eps) in cfg.epsilons.iter().enumerate() {
        let rules = split(&evals, |s| s.moments[k]);
        let rep = ap::sandwich_from_states(eps, &params, &rules);
        let fails: usize = rep
            .rules
            .iter()
            .map(|r| r.n_fail_lower + r.n_fail_upper)
            .sum();
        out.check(
            SEC,
            &format!("ap.sandwich[eps={eps}]"),
            rep.verdict,
            true,
            format!("factor {}, {} failing states", fmt_float(rep.factor), fails),
        );
        ap_state_rows(&mut out.ap_rows, &format!("S^{eps}"), &rules);
        let plain_rules = split(&evals, |s| s.plain_moments[k]);
        let plain = ap::sandwich_from_states(eps, &params, &plain_rules);
        let plain_fails: usize = plain
            .rules
            .iter()
            .map(|r| r.n_fail_lower + r.n_fail_upper)
            .sum();
        let finite_variance = 2.0 * eps * eps - eps < params.gamma();
        out.check(
            SEC,
            &format!("ap.sandwich_plain[eps={eps}]"),
            plain.verdict,
            false,
            format!(
                "plain sample mean of S_T^eps, {} failing states ({} variance at small prices)",
                plain_fails,
                if finite_variance {
                    "finite"
                } else {
                    "infinite"
                }
            ),
        );
        ap_state_rows(&mut out.ap_rows, &format!("S^{eps}[plain]"), &plain_rules);
        // The zero rule probes the initial state repeatedly; pool it.
        let zero: Vec<f64> = rules
            .iter()
            .filter(|r| r.rule == ap::StoppingRule::Zero)
            .flat_map(|r| r.states.iter().map(|s| s.value.value))
            .collect();
        let initial = if zero.is_empty() {
            None
        } else {
            let pooled = McEstimate::from_samples(&zero, conf);
            let ses: Vec<f64> = rules
                .iter()
                .filter(|r| r.rule == ap::StoppingRule::Zero)
                .flat_map(|r| r.states.iter().map(|s| s.value.std_error))
                .collect();
            let inner_se = (ses.iter().map(|s| s * s).sum::<f64>()).sqrt() / ses.len() as f64;
            let pooled =
                McEstimate::new(pooled.value, pooled.std_error.max(inner_se), pooled.n, conf);
            let lower = 1.0 / rep.factor;
            let v = Verdict::from_bool(pooled.at_least(lower, 3.0) && pooled.at_most(1.0, 3.0));
            out.check(
                SEC,
                &format!("ap.sandwich_initial[eps={eps}]"),
                v,
                true,
                format!(
                    "E_Q[S_T^eps] {} +- {} in [{}, 1]",
                    fmt_float(pooled.value),
                    fmt_float(pooled.std_error),
                    fmt_float(lower)
                ),
            );
            Some(pooled)
        };
        sandwich.push(json!({
            "epsilon": eps,
            "factor": rep.factor,
            "verdict": rep.verdict,
            "plain_verdict": plain.verdict,
            "initial_moment": initial.map(|e| est(&e)),
            "rules": rep.rules.iter().map(|r| json!({
                "rule": r.rule.to_string(),
                "n_checked": r.n_checked,
                "n_fail_lower": r.n_fail_lower,
                "n_fail_upper": r.n_fail_upper,
                "worst_lower_z": r.worst_lower_z,
                "worst_upper_ratio": r.worst_upper_ratio,
            })).collect::<Vec<_>>(),
        }));
    }

    // Wealth-to-dual ratio under the corrected density.
    let wealth = if params.variant() == DensityVariant::Corrected {
        let rows: Vec<duality::WealthRatioRule> = evals
            .iter()
            .map(|r| {
                let ratios: Vec<McEstimate> = r
                    .states
                    .iter()
                    .map(|s| {
                        duality::counterexample_wealth_ratio(
                            s.state.s,
                            s.state.t,
                            &s.value.w_mean,
                            &params,
                        )
                    })
                    .collect();
                duality::wealth_dual_ratio(&r.rule.to_string(), &ratios)
            })
            .collect();
        let all_stable = rows.iter().all(|r| r.stable);
        out.check(
            SEC,
            "ap.wealth_ratio_stability",
            if all_stable {
                Verdict::VerifiedWithinTolerance
            } else {
                Verdict::Inconclusive
            },
            false,
            format!(
                "largest max ratio {}",
                fmt_float(
                    rows.iter()
                        .map(|r| r.max.value)
                        .fold(f64::NEG_INFINITY, f64::max)
                )
            ),
        );
        serde_json::to_value(rows).unwrap_or(Value::Null)
    } else {
        Value::Null
    };

    out.sections.insert(
        SEC.to_string(),
        json!({
            "n_outer": cfg.n_outer,
            "n_states_per_rule": cfg.n_outer_states,
            "n_inner": cfg.n_inner,
            "inner_censored": inner_censored,
            "inner_total": inner_total,
            "density_bound": bound,
            "density": ap_json(&ap_z),
            "density_utility_exponent": ap_json(&ap_zu),
            "dual_utility_exponent": ap_json(&ap_y),
            "dual_low_exponent": ap_json(&ap_ylow),
            "dominance": serde_json::to_value(&dom).unwrap_or(Value::Null),
            "class_d": serde_json::to_value(&class_d).unwrap_or(Value::Null),
            "sandwich": sandwich,
            "wealth_ratio": wealth,
        }),
    );
    Ok(())
}

// -------------------------------------------------------------------- run

fn execute(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<(), RunError> {
    let sections = cfg.experiment.sections();
    let needs_paths = sections
        .iter()
        .any(|s| matches!(s, Section::Terminal | Section::Duality));
    let ensembles = if needs_paths {
        let params = cfg.params()?;
        let grid = cfg.grid(&params);
        Some(Ensembles::build(cfg, &params, &grid)?)
    } else {
        None
    };
    for s in sections {
        match s {
            Section::Control => run_control(cfg, out)?,
            Section::Bmo => run_bmo(cfg, out)?,
            Section::Terminal => {
                run_terminal(cfg, ensembles.as_ref().expect("paths simulated"), out)?
            }
            Section::Duality => {
                run_duality(cfg, ensembles.as_ref().expect("paths simulated"), out)?
            }
            Section::Nested => run_nested(cfg, out)?,
        }
    }
    Ok(())
}

fn gating_violated(checks: &[(String, Check)]) -> bool {
    checks
        .iter()
        .any(|(_, c)| c.gating && c.verdict == Verdict::Violated)
}

/// The deterministic part of a run: everything in `summary.json`.
fn summary_value(cfg: &ExperimentConfig, out: &RunOutput, status: &str) -> Value {
    json!({
        "experiment": cfg.experiment.to_string(),
        "seed": cfg.seed,
        "confidence_level": cfg.confidence_level,
        "sizes": {
            "n_paths": cfg.n_paths,
            "n_outer": cfg.n_outer,
            "n_outer_states": cfg.n_outer_states,
            "n_inner": cfg.n_inner,
        },
        "sections": Value::Object(out.sections.clone()),
        "checks": out.checks.iter().map(|(_, c)| serde_json::to_value(c).unwrap_or(Value::Null)).collect::<Vec<_>>(),
        "status": status,
    })
}

/// Runs the configured suite and writes all reports to `out_dir`.
///
/// Returns the manifest for completed runs (check `exit_code`); returns an
/// error for invalid configurations, I/O failures, and numerical failures,
/// after writing a manifest whenever the output directory is usable.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest, RunError> {
    let started = Instant::now();
    cfg.validate()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Numerical(e.to_string()))?;
    let mut out = RunOutput::default();
    let result = pool.install(|| execute(cfg, &mut out));

    let violated = gating_violated(&out.checks);
    let (exit_code, error) = match &result {
        Ok(()) => (i32::from(violated), None),
        Err(e) => (e.exit_code(), Some(e.to_string())),
    };
    let status = match (&result, violated) {
        (Err(_), _) => "error",
        (Ok(()), true) => "violated",
        (Ok(()), false) => "pass",
    };

    let mut artifacts = Vec::new();
    let mut write_err = None;
    let mut emit = |name: &str, f: &dyn Fn(&FsPath) -> std::io::Result<()>| {
        let p = dir.join(name);
        match f(&p) {
            Ok(()) => artifacts.push(p.display().to_string()),
            Err(e) => {
                if write_err.is_none() {
                    write_err = Some(RunError::io(&p, e));
                }
            }
        }
    };
    let summary = summary_value(cfg, &out, status);
    emit("summary.json", &|p| report::write_json(p, &summary));
    emit("ap_report.csv", &|p| {
        report::write_csv(
            p,
            &[
                "quantity",
                "rule",
                "state",
                "estimate",
                "std_error",
                "verdict",
            ],
            &out.ap_rows,
        )
    });
    emit("duality_report.csv", &|p| {
        report::write_csv(
            p,
            &[
                "check",
                "variant",
                "quantity",
                "value",
                "std_error",
                "verdict",
            ],
            &out.duality_rows,
        )
    });
    if cfg.emit_paths_csv && !out.path_rows.is_empty() {
        emit("paths.csv", &|p| {
            report::write_csv(
                p,
                &[
                    "path_id", "t1", "t2", "t_final", "censored", "S_T", "B_T", "Lambda_T",
                ],
                &out.path_rows,
            )
        });
    }

    let mut section_verdicts = Map::new();
    for (section, c) in &out.checks {
        let prev = section_verdicts
            .get(section)
            .and_then(|v: &Value| serde_json::from_value::<Verdict>(v.clone()).ok())
            .unwrap_or(Verdict::VerifiedWithinTolerance);
        let this = if c.gating {
            c.verdict
        } else {
            Verdict::VerifiedWithinTolerance
        };
        section_verdicts.insert(
            section.clone(),
            serde_json::to_value(prev.combine(this)).unwrap_or(Value::Null),
        );
    }
    let manifest_path = dir.join("manifest.json");
    artifacts.push(manifest_path.display().to_string());
    let (exit_code, error) = match (&write_err, exit_code) {
        (Some(e), 0) => (3, Some(e.to_string())),
        _ => (exit_code, error),
    };
    let manifest = RunManifest {
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        checks: out.checks.iter().map(|(_, c)| c.clone()).collect(),
        section_verdicts,
        censored_mass: out.censored_mass,
        artifacts,
        exit_code,
        error,
    };
    report::write_json(&manifest_path, &manifest).map_err(|e| RunError::io(&manifest_path, e))?;
    result?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Ok(manifest)
}
