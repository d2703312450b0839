//! Monte Carlo laboratory for Muckenhoupt A_p conditions, dual optimizers in
//! utility maximization, and a market where the dual minimizer fails to be a
//! uniformly integrable martingale.

// `!(x < y)` is used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ap;
pub mod control;
pub mod duality;
pub mod experiment;
pub mod measure;
pub mod model;
pub mod path;
pub mod report;
pub mod rng;
pub mod stats;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentKind, RunError, RunManifest};
pub use model::{
    intensity, p_prime, select_counterexample_params, ControlParams, CounterexampleParams,
    DensityVariant, Inequality, ParamError,
};
pub use path::{
    hitting_time_level, jump_time_via_time_change, resimulate_from, simulate_full_paths,
    simulate_paths, GridSpec, MarkovState, Outcome, Path, PathBundle, PathSummary, StopTime,
};
pub use stats::McEstimate;
