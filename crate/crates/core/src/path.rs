//! Trajectories of the counterexample market under `Q`.
//!
//! The Brownian motion is sampled exactly on a state-dependent grid. The
//! price is the exact stochastic exponential `exp(B - t/2)` at every node.
//! Hitting of the absorbing level is detected on the grid and, inside each
//! step, by a Brownian-bridge crossing draw. The jump time of the Cox process
//! is obtained by inverting the compensator against a standard exponential
//! draw, which stays exact however large the intensity becomes near the
//! absorbing level (no global thinning majorant exists there).

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CounterexampleParams, ABSORBING_LEVEL};
use crate::rng::{domain, PathRng, StreamFamily};

/// Bridge-crossing exponents above this are treated as probability zero
/// (`exp(-40) < 5e-18`).
const BRIDGE_CUTOFF: f64 = 40.0;

/// Default tail mass `exp(-gamma t_max)` left unresolved at the horizon.
pub const DEFAULT_TAIL_MASS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid field `{field}` = {value} is invalid: {reason}")]
    Invalid {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
}

/// Time discretization.
///
/// Steps are `dt` in the bulk, `dt / refine_factor` once the price exceeds
/// `refine_threshold`, and `dt * coarse_factor` while the price is below
/// `coarse_threshold`. Setting `coarse_factor = 1` gives a two-level grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dt: f64,
    pub t_max: f64,
    pub refine_threshold: f64,
    pub refine_factor: u32,
    pub coarse_threshold: f64,
    pub coarse_factor: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dt: 1.0 / 256.0,
            t_max: 400.0,
            refine_threshold: 1.9,
            refine_factor: 16,
            coarse_threshold: 0.5,
            coarse_factor: 16,
        }
    }
}

impl GridSpec {
    /// Default grid with `t_max` chosen so that `exp(-gamma t_max) <= 1e-4`.
    pub fn for_params(params: &CounterexampleParams) -> Self {
        Self {
            t_max: params.horizon_for_tail(DEFAULT_TAIL_MASS).ceil(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |field, value, reason| {
            Err(GridError::Invalid {
                field,
                value,
                reason,
            })
        };
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", self.dt, "must be positive");
        }
        if !(self.t_max >= self.dt && self.t_max.is_finite()) {
            return bad("t_max", self.t_max, "must be finite and at least dt");
        }
        if !(self.refine_threshold > 0.0 && self.refine_threshold < ABSORBING_LEVEL) {
            return bad(
                "refine_threshold",
                self.refine_threshold,
                "must lie in (0, 2)",
            );
        }
        if self.refine_factor < 1 {
            return bad("refine_factor", self.refine_factor as f64, "must be >= 1");
        }
        if !(self.coarse_threshold >= 0.0 && self.coarse_threshold <= self.refine_threshold) {
            return bad(
                "coarse_threshold",
                self.coarse_threshold,
                "must lie in [0, refine_threshold]",
            );
        }
        if self.coarse_factor < 1 {
            return bad("coarse_factor", self.coarse_factor as f64, "must be >= 1");
        }
        Ok(())
    }

    /// Same grid with every step divided by `k`.
    pub fn refined(&self, k: u32) -> Self {
        Self {
            dt: self.dt / k as f64,
            ..*self
        }
    }

    #[inline]
    fn step_at(&self, s: f64) -> f64 {
        if s > self.refine_threshold {
            self.dt / self.refine_factor as f64
        } else if s < self.coarse_threshold {
            self.dt * self.coarse_factor as f64
        } else {
            self.dt
        }
    }
}

/// A stopping time that either occurred, occurs after the market has
/// terminated (not simulated), or was not resolved before the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopTime {
    At(f64),
    AfterTerminal,
    Censored,
}

impl StopTime {
    pub fn time(&self) -> Option<f64> {
        match *self {
            StopTime::At(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self, StopTime::Censored)
    }
}

/// How a path terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// Price reached the absorbing level first (`T = T1`).
    Hit,
    /// The counting process jumped first (`T = T2`).
    Jump,
    /// Neither happened before `t_max`.
    Censored,
}

/// Terminal data of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub path_id: u64,
    pub t1: StopTime,
    pub t2: StopTime,
    pub t_final: StopTime,
    pub censored: bool,
    /// `S_T`, or the price at `t_max` for censored paths.
    pub s_final: f64,
    /// `B_T`, or the Brownian value at `t_max` for censored paths.
    pub b_final: f64,
    /// Compensator at `T` (or at `t_max`).
    pub compensator_final: f64,
    pub exp_draw: f64,
}

impl PathSummary {
    pub fn outcome(&self) -> Outcome {
        if self.censored {
            Outcome::Censored
        } else if matches!(self.t1, StopTime::At(t) if Some(t) == self.t_final.time()) {
            Outcome::Hit
        } else {
            Outcome::Jump
        }
    }

    /// `T` for uncensored paths.
    pub fn terminal_time(&self) -> Option<f64> {
        self.t_final.time()
    }
}

/// A fully recorded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub summary: PathSummary,
    pub times: Vec<f64>,
    pub brownian: Vec<f64>,
    pub price: Vec<f64>,
    pub compensator: Vec<f64>,
}

/// An ensemble of paths with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub params: CounterexampleParams,
    pub grid: GridSpec,
    pub n_paths: usize,
    pub seed: u64,
    pub summaries: Vec<PathSummary>,
    pub paths: Option<Vec<Path>>,
    pub censored_mass: f64,
}

impl PathBundle {
    fn assemble(
        params: &CounterexampleParams,
        grid: &GridSpec,
        seed: u64,
        summaries: Vec<PathSummary>,
        paths: Option<Vec<Path>>,
    ) -> Self {
        let censored = summaries.iter().filter(|s| s.censored).count();
        let n = summaries.len();
        Self {
            params: *params,
            grid: *grid,
            n_paths: n,
            seed,
            censored_mass: if n == 0 {
                0.0
            } else {
                censored as f64 / n as f64
            },
            summaries,
            paths,
        }
    }

    pub fn uncensored(&self) -> impl Iterator<Item = &PathSummary> {
        self.summaries.iter().filter(|s| !s.censored)
    }
}

/// Markov state of the counterexample under `Q`: time, price, and whether
/// the hitting time or the jump time has passed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovState {
    pub t: f64,
    pub s: f64,
    pub post_hit: bool,
    pub jumped: bool,
}

impl MarkovState {
    pub fn initial() -> Self {
        Self {
            t: 0.0,
            s: 1.0,
            post_hit: false,
            jumped: false,
        }
    }

    /// True when the market has already terminated at this state.
    pub fn is_terminal(&self) -> bool {
        self.post_hit || self.jumped
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("cannot continue from a state after the jump time")]
    AlreadyJumped,
    #[error("state price {0} outside (0, 2]")]
    BadState(f64),
    #[error("path count must be at least 1")]
    EmptyEnsemble,
}

/// A grid node visited before termination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub t: f64,
    pub brownian: f64,
    pub log_price: f64,
    pub compensator: f64,
}

/// Receives every grid node of a path (including the start) before the path
/// terminates.
pub trait NodeObserver {
    fn node(&mut self, node: &Node);
}

impl NodeObserver for () {
    #[inline]
    fn node(&mut self, _: &Node) {}
}

struct Recorder {
    times: Vec<f64>,
    brownian: Vec<f64>,
    price: Vec<f64>,
    compensator: Vec<f64>,
}

impl NodeObserver for Recorder {
    fn node(&mut self, n: &Node) {
        self.times.push(n.t);
        self.brownian.push(n.brownian);
        self.price.push(n.log_price.exp());
        self.compensator.push(n.compensator);
    }
}

/// Probability that a Brownian bridge of variance rate 1 between log-prices
/// `x0` and `x1` (both below `m`) over a step of length `h` touches `m`.
pub fn bridge_crossing_probability(x0: f64, x1: f64, m: f64, h: f64) -> f64 {
    if x0 >= m || x1 >= m {
        return 1.0;
    }
    (-2.0 * (m - x0) * (m - x1) / h).exp()
}

/// Starting point of a walk: the Brownian value is tracked separately so the
/// price stays the exact exponential `exp(B - t/2)`.
///
/// A nonzero `drift` simulates `B` with drift under a Girsanov-tilted
/// measure; the jump clock is unchanged as a function of the price path.
#[derive(Debug, Clone, Copy)]
pub(crate) struct WalkStart {
    pub t: f64,
    pub brownian: f64,
    pub drift: f64,
}

impl WalkStart {
    pub fn from_state(state: &MarkovState) -> Self {
        Self {
            t: state.t,
            brownian: state.s.ln() + 0.5 * state.t,
            drift: 0.0,
        }
    }
}

/// Simulates one path from a pre-hit state until `T` or `t_max`.
///
/// `checkpoints` are sorted absolute times the grid must land on exactly.
pub(crate) fn walk<O: NodeObserver>(
    params: &CounterexampleParams,
    grid: &GridSpec,
    start: WalkStart,
    checkpoints: &[f64],
    path_id: u64,
    rng: &mut PathRng,
    observer: &mut O,
) -> PathSummary {
    let m = params.log_level();
    let gamma = params.gamma();
    let exp_draw: f64 = rng.sample(Exp1);

    let mut t = start.t;
    let mut b = start.brownian;
    let mut x = b - 0.5 * t;
    let mut comp = 0.0;
    let mut lam = params.pre_hit_intensity_log(x);
    let mut cp = checkpoints.partition_point(|&c| c <= t);
    observer.node(&Node {
        t,
        brownian: b,
        log_price: x,
        compensator: comp,
    });

    let summary = |t1, t2, t_final, censored, x: f64, b, comp| PathSummary {
        path_id,
        t1,
        t2,
        t_final,
        censored,
        s_final: x.exp(),
        b_final: b,
        compensator_final: comp,
        exp_draw,
    };

    loop {
        let remaining = grid.t_max - t;
        if remaining <= 1e-12 * grid.t_max.max(1.0) {
            return summary(
                StopTime::Censored,
                StopTime::Censored,
                StopTime::Censored,
                true,
                x,
                b,
                comp,
            );
        }
        while cp < checkpoints.len() && checkpoints[cp] <= t {
            cp += 1;
        }
        let mut t_next = t + grid.step_at(x.exp());
        if t_next >= grid.t_max {
            t_next = grid.t_max;
        }
        if let Some(&c) = checkpoints.get(cp) {
            if t_next >= c {
                t_next = c;
            }
        }
        let h = t_next - t;
        let z: f64 = rng.sample(StandardNormal);
        let b1 = b + start.drift * h + h.sqrt() * z;
        let x1 = b1 - 0.5 * t_next;

        let crossed = x1 >= m || {
            let arg = 2.0 * (m - x) * (m - x1) / h;
            arg < BRIDGE_CUTOFF && rng.random::<f64>() < (-arg).exp()
        };

        if crossed {
            // Hit placed at the step midpoint; the compensator over the half
            // step uses the left-point intensity since the pole sits at the
            // right end.
            let half = 0.5 * h;
            let t_hit = t + half;
            let comp_hit = comp + lam * half;
            if comp_hit >= exp_draw {
                let theta = (exp_draw - comp) / (comp_hit - comp);
                let tj = t + theta * half;
                let xj = x + theta * (m - x);
                return summary(
                    StopTime::AfterTerminal,
                    StopTime::At(tj),
                    StopTime::At(tj),
                    false,
                    xj,
                    xj + 0.5 * tj,
                    exp_draw,
                );
            }
            let t2_post = t_hit + (exp_draw - comp_hit) / gamma;
            let t2 = if t2_post <= grid.t_max {
                StopTime::At(t2_post)
            } else {
                StopTime::Censored
            };
            return PathSummary {
                s_final: ABSORBING_LEVEL,
                ..summary(
                    StopTime::At(t_hit),
                    t2,
                    StopTime::At(t_hit),
                    false,
                    m,
                    m + 0.5 * t_hit,
                    comp_hit,
                )
            };
        }

        let lam1 = params.pre_hit_intensity_log(x1);
        let comp1 = comp + 0.5 * h * (lam + lam1);
        if comp1 >= exp_draw {
            let theta = (exp_draw - comp) / (comp1 - comp);
            let tj = t + theta * h;
            let bj = b + theta * (b1 - b);
            return summary(
                StopTime::AfterTerminal,
                StopTime::At(tj),
                StopTime::At(tj),
                false,
                bj - 0.5 * tj,
                bj,
                exp_draw,
            );
        }
        t = t_next;
        b = b1;
        x = x1;
        lam = lam1;
        comp = comp1;
        observer.node(&Node {
            t,
            brownian: b,
            log_price: x,
            compensator: comp,
        });
    }
}

/// Continuation from a state at or after the hitting time: the market has
/// terminated at `T1 = state.t`, and the counting process runs at the floor
/// intensity `gamma`.
fn post_hit_continuation(
    params: &CounterexampleParams,
    grid: &GridSpec,
    state: &MarkovState,
    path_id: u64,
    rng: &mut PathRng,
) -> PathSummary {
    let exp_draw: f64 = rng.sample(Exp1);
    let t2 = state.t + exp_draw / params.gamma();
    PathSummary {
        path_id,
        t1: StopTime::At(state.t),
        t2: if t2 <= grid.t_max {
            StopTime::At(t2)
        } else {
            StopTime::Censored
        },
        t_final: StopTime::At(state.t),
        censored: false,
        s_final: state.s,
        b_final: state.s.ln() + 0.5 * state.t,
        compensator_final: 0.0,
        exp_draw,
    }
}

fn check_inputs(params: &CounterexampleParams, grid: &GridSpec, n: usize) -> Result<(), SimError> {
    let _ = params;
    grid.validate()?;
    if n == 0 {
        return Err(SimError::EmptyEnsemble);
    }
    Ok(())
}

/// Simulates `n` independent paths from `S_0 = 1` under `Q`.
///
/// Path `i` uses stream `i` of the outer family derived from `seed`, so the
/// bundle is identical for any worker count.
pub fn simulate_paths(
    params: &CounterexampleParams,
    grid: &GridSpec,
    n: usize,
    seed: u64,
) -> Result<PathBundle, SimError> {
    check_inputs(params, grid, n)?;
    let family = StreamFamily::new(seed).child(domain::OUTER);
    let start = WalkStart::from_state(&MarkovState::initial());
    let summaries: Vec<PathSummary> = (0..n as u64)
        .into_par_iter()
        .map(|i| walk(params, grid, start, &[], i, &mut family.stream(i), &mut ()))
        .collect();
    Ok(PathBundle::assemble(params, grid, seed, summaries, None))
}

/// Like [`simulate_paths`] but keeps every grid node of every path.
///
/// Summaries coincide with those of [`simulate_paths`] for the same inputs.
pub fn simulate_full_paths(
    params: &CounterexampleParams,
    grid: &GridSpec,
    n: usize,
    seed: u64,
) -> Result<PathBundle, SimError> {
    check_inputs(params, grid, n)?;
    let family = StreamFamily::new(seed).child(domain::OUTER);
    let start = WalkStart::from_state(&MarkovState::initial());
    let paths: Vec<Path> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rec = Recorder {
                times: Vec::new(),
                brownian: Vec::new(),
                price: Vec::new(),
                compensator: Vec::new(),
            };
            let summary = walk(params, grid, start, &[], i, &mut family.stream(i), &mut rec);
            Path {
                summary,
                times: rec.times,
                brownian: rec.brownian,
                price: rec.price,
                compensator: rec.compensator,
            }
        })
        .collect();
    let summaries = paths.iter().map(|p| p.summary).collect();
    Ok(PathBundle::assemble(
        params,
        grid,
        seed,
        summaries,
        Some(paths),
    ))
}

/// Fresh continuations from `state`, on streams disjoint from the outer
/// ensemble of the same seed.
pub fn resimulate_from(
    state: &MarkovState,
    params: &CounterexampleParams,
    grid: &GridSpec,
    n_inner: usize,
    seed: u64,
) -> Result<PathBundle, SimError> {
    let family = StreamFamily::new(seed).child(domain::INNER);
    let summaries = continuations(state, params, grid, n_inner, &family)?;
    Ok(PathBundle::assemble(params, grid, seed, summaries, None))
}

/// Continuation summaries drawn from an explicit stream family.
pub(crate) fn continuations(
    state: &MarkovState,
    params: &CounterexampleParams,
    grid: &GridSpec,
    n_inner: usize,
    family: &StreamFamily,
) -> Result<Vec<PathSummary>, SimError> {
    tilted_continuations(state, params, grid, n_inner, 0.0, family)
}

/// Continuations of a state with the Brownian motion given drift `drift`.
///
/// Under `Q` tilted by `exp(drift B - drift^2 t / 2)` the price keeps the
/// form `exp(B - t/2)` with `B` drifting; the hitting rule and the jump clock
/// act on the simulated price exactly as under `Q`. The bridge-crossing
/// correction is drift-free given both endpoints.
pub(crate) fn tilted_continuations(
    state: &MarkovState,
    params: &CounterexampleParams,
    grid: &GridSpec,
    n_inner: usize,
    drift: f64,
    family: &StreamFamily,
) -> Result<Vec<PathSummary>, SimError> {
    check_inputs(params, grid, n_inner)?;
    if state.jumped {
        return Err(SimError::AlreadyJumped);
    }
    if !(state.s > 0.0 && state.s <= ABSORBING_LEVEL) {
        return Err(SimError::BadState(state.s));
    }
    let post_hit = state.post_hit || state.s >= ABSORBING_LEVEL;
    let start = WalkStart {
        drift,
        ..WalkStart::from_state(state)
    };
    Ok((0..n_inner as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = family.stream(i);
            if post_hit {
                post_hit_continuation(params, grid, state, i, &mut rng)
            } else {
                walk(params, grid, start, &[], i, &mut rng, &mut ())
            }
        })
        .collect())
}

/// First time a recorded segment reaches `level`.
///
/// `prices` are sampled at `times` and start below `level`. A step whose
/// endpoint reaches the level is a grid crossing; otherwise a Brownian-bridge
/// draw on the log-price decides an intra-step crossing. Either way the
/// crossing time is the step midpoint.
pub fn hitting_time_level<R: Rng + ?Sized>(
    times: &[f64],
    prices: &[f64],
    level: f64,
    rng: &mut R,
) -> StopTime {
    assert_eq!(times.len(), prices.len(), "times and prices must align");
    let m = level.ln();
    if prices.first().is_some_and(|&s| s >= level) {
        return StopTime::At(times[0]);
    }
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        let (x0, x1) = (prices[k - 1].ln(), prices[k].ln());
        let crossed = x1 >= m || {
            let arg = 2.0 * (m - x0) * (m - x1) / h;
            arg < BRIDGE_CUTOFF && rng.random::<f64>() < (-arg).exp()
        };
        if crossed {
            return StopTime::At(times[k - 1] + 0.5 * h);
        }
    }
    StopTime::Censored
}

/// First time the compensator reaches `exp_draw`, by linear interpolation
/// between grid nodes.
pub fn jump_time_via_time_change(times: &[f64], compensator: &[f64], exp_draw: f64) -> StopTime {
    assert_eq!(
        times.len(),
        compensator.len(),
        "times and compensator must align"
    );
    if compensator.first().is_some_and(|&c| c >= exp_draw) {
        return StopTime::At(times[0]);
    }
    for k in 1..times.len() {
        if compensator[k] >= exp_draw {
            let (c0, c1) = (compensator[k - 1], compensator[k]);
            let theta = (exp_draw - c0) / (c1 - c0);
            return StopTime::At(times[k - 1] + theta * (times[k] - times[k - 1]));
        }
    }
    StopTime::Censored
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{select_counterexample_params, DensityVariant};

    fn params() -> CounterexampleParams {
        select_counterexample_params(0.5, 4.0, Some(0.7), DensityVariant::Corrected).unwrap()
    }

    #[test]
    fn grid_validation() {
        let g = GridSpec::for_params(&params());
        assert!(g.validate().is_ok());
        assert!((g.t_max - 395.0).abs() < 1.0);
        assert!(GridSpec { dt: 0.0, ..g }.validate().is_err());
        assert!(GridSpec {
            refine_threshold: 2.0,
            ..g
        }
        .validate()
        .is_err());
        assert!(GridSpec {
            refine_factor: 0,
            ..g
        }
        .validate()
        .is_err());
        assert!(GridSpec { t_max: 1e-5, ..g }.validate().is_err());
    }

    #[test]
    fn synthetic_grid_crossing() {
        let mut rng = StreamFamily::new(1).stream(0);
        let t = hitting_time_level(&[0.1, 0.2], &[1.99, 2.01], 2.0, &mut rng);
        assert!(matches!(t, StopTime::At(t) if (t - 0.15).abs() < 1e-15));
    }

    #[test]
    fn far_from_level_is_censored() {
        let mut rng = StreamFamily::new(1).stream(0);
        let times: Vec<f64> = (0..1000).map(|k| k as f64 / 256.0).collect();
        let prices = vec![1.5; 1000];
        assert_eq!(
            hitting_time_level(&times, &prices, 2.0, &mut rng),
            StopTime::Censored
        );
        let bound = (-2.0 * (4.0f64 / 3.0).ln().powi(2) * 256.0).exp();
        assert!(
            bridge_crossing_probability(1.5f64.ln(), 1.5f64.ln(), 2f64.ln(), 1.0 / 256.0)
                <= bound * 1.0000001
        );
    }

    #[test]
    fn time_change_constant_intensity() {
        let g = params().gamma();
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.5).collect();
        let comp: Vec<f64> = times.iter().map(|t| g * t).collect();
        let t0 = 17.3;
        match jump_time_via_time_change(&times, &comp, g * t0) {
            StopTime::At(t) => assert!((t - t0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            jump_time_via_time_change(&times, &comp, g * 51.0),
            StopTime::Censored
        );
    }

    #[test]
    fn full_paths_respect_invariants() {
        let p = params();
        let grid = GridSpec {
            t_max: 30.0,
            ..GridSpec::default()
        };
        let bundle = simulate_full_paths(&p, &grid, 40, 9).unwrap();
        let plain = simulate_paths(&p, &grid, 40, 9).unwrap();
        assert_eq!(bundle.summaries, plain.summaries);
        for path in bundle.paths.as_ref().unwrap() {
            assert_eq!(path.times[0], 0.0);
            assert_eq!(path.price[0], 1.0);
            assert_eq!(path.compensator[0], 0.0);
            for k in 0..path.times.len() {
                let exact = (path.brownian[k] - path.times[k] / 2.0).exp();
                assert!((path.price[k] - exact).abs() <= 1e-12 * exact);
                assert!(path.price[k] > 0.0 && path.price[k] < 2.0);
                if k > 0 {
                    assert!(path.times[k] > path.times[k - 1]);
                    assert!(path.compensator[k] >= path.compensator[k - 1]);
                }
            }
            let s = &path.summary;
            match s.outcome() {
                Outcome::Hit => {
                    assert_eq!(s.s_final, 2.0);
                    assert!(s.compensator_final < s.exp_draw);
                }
                Outcome::Jump => {
                    assert_eq!(s.compensator_final, s.exp_draw);
                    assert!(s.s_final < 2.0);
                    let t2 = s.t2.time().unwrap();
                    assert_eq!(Some(t2), s.terminal_time());
                    // the recorded compensator inverts to the same jump time
                    // up to the final partial step
                    assert!(t2 >= *path.times.last().unwrap());
                }
                Outcome::Censored => assert!(s.censored),
            }
        }
    }

    #[test]
    fn post_hit_continuation_is_linear_compensator() {
        let p = params();
        let grid = GridSpec::for_params(&p);
        let state = MarkovState {
            t: 3.0,
            s: 2.0,
            post_hit: true,
            jumped: false,
        };
        let b = resimulate_from(&state, &p, &grid, 100, 5).unwrap();
        for s in &b.summaries {
            let t2 = s.t2.time().unwrap();
            assert!(((t2 - 3.0) * p.gamma() - s.exp_draw).abs() < 1e-12);
            assert_eq!(s.terminal_time(), Some(3.0));
        }
    }

    #[test]
    fn jumped_state_is_rejected() {
        let p = params();
        let state = MarkovState {
            t: 1.0,
            s: 0.5,
            post_hit: false,
            jumped: true,
        };
        assert_eq!(
            resimulate_from(&state, &p, &GridSpec::default(), 10, 1).unwrap_err(),
            SimError::AlreadyJumped
        );
    }

    #[test]
    fn checkpoints_are_landed_on() {
        struct Times(Vec<f64>);
        impl NodeObserver for Times {
            fn node(&mut self, n: &Node) {
                self.0.push(n.t);
            }
        }
        let p = params();
        let grid = GridSpec {
            t_max: 10.0,
            ..GridSpec::default()
        };
        let fam = StreamFamily::new(3);
        for i in 0..20 {
            let mut obs = Times(Vec::new());
            let s = walk(
                &p,
                &grid,
                WalkStart {
                    t: 0.0,
                    brownian: 0.0,
                    drift: 0.0,
                },
                &[0.3, 1.0, 2.0, 5.0],
                i,
                &mut fam.stream(i),
                &mut obs,
            );
            let end = s.terminal_time().unwrap_or(grid.t_max);
            for cp in [0.3, 1.0, 2.0, 5.0] {
                if cp < end {
                    assert!(obs.0.contains(&cp), "checkpoint {cp} missing");
                }
            }
        }
    }
}
