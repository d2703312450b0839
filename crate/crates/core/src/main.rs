use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use apverify::experiment::{ExperimentConfig, ExperimentKind, RunError, SEED_ENV};
use apverify::measure::NormalizerMode;
use apverify::model::DensityVariant;
use clap::Parser;

/// Monte Carlo verification of A_p conditions and dual optimizers.
///
/// Exit status: 0 when every gating check passes, 1 when a check is violated
/// or the computation fails, 2 for configuration errors, 3 for I/O errors.
#[derive(Debug, Parser)]
#[command(name = "apverify", version)]
struct Cli {
    /// counterexample | control | ap-check | duality-check | bmo-check | all
    experiment: ExperimentKind,
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Risk-aversion exponent, 0 < a < 1.
    #[arg(long)]
    a: Option<f64>,
    /// Integrability exponent, must exceed 1/(1-a).
    #[arg(long)]
    p: Option<f64>,
    /// Density exponent, or `auto` to search for a feasible value.
    #[arg(long)]
    b: Option<String>,
    /// Paths for terminal statistics.
    #[arg(long)]
    paths: Option<usize>,
    /// Outer paths for stopped states.
    #[arg(long)]
    outer: Option<usize>,
    /// Stopped states resimulated per rule.
    #[arg(long)]
    states: Option<usize>,
    /// Inner paths per stopped state.
    #[arg(long)]
    inner: Option<usize>,
    /// Master seed; overrides APVERIFY_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Base time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Simulation horizon.
    #[arg(long)]
    tmax: Option<f64>,
    /// literal | corrected
    #[arg(long)]
    variant: Option<DensityVariant>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Two-sided confidence level for verdicts.
    #[arg(long)]
    confidence: Option<f64>,
    /// independent | same
    #[arg(long, value_parser = parse_normalizer)]
    normalizer: Option<NormalizerMode>,
    /// Also write paths.csv.
    #[arg(long)]
    paths_csv: bool,
}

fn parse_normalizer(s: &str) -> Result<NormalizerMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown normalizer `{s}` (expected independent|same)"))
}

fn build_config(cli: Cli) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| RunError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.experiment = cli.experiment;
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.trim().parse().map_err(|_| RunError::Config {
            key: SEED_ENV.to_string(),
            message: format!("`{v}` is not an unsigned integer"),
        })?;
    }
    if let Some(b) = cli.b {
        cfg.b = if b == "auto" {
            None
        } else {
            Some(b.parse().map_err(|_| RunError::Config {
                key: "b".to_string(),
                message: format!("`{b}` is neither a number nor `auto`"),
            })?)
        };
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = cli.$flag { cfg.$field = v; })*
        };
    }
    set!(a => a, p => p, paths => n_paths, outer => n_outer, states => n_outer_states, inner => n_inner,
         seed => seed, dt => dt, variant => variant, out => out_dir, confidence => confidence_level,
         normalizer => normalizer);
    if cli.tmax.is_some() {
        cfg.t_max = cli.tmax;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    cfg.emit_paths_csv |= cli.paths_csv;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(cli).and_then(|cfg| apverify::run_experiment(&cfg));
    match result {
        Ok(manifest) => {
            for c in &manifest.checks {
                let tag = if c.gating { "" } else { " (informational)" };
                println!("{:<48} {}{}  {}", c.name, c.verdict, tag, c.detail);
            }
            println!(
                "status: {}",
                if manifest.passed() {
                    "pass"
                } else {
                    "violated"
                }
            );
            ExitCode::from(manifest.exit_code as u8)
        }
        Err(e) => {
            eprintln!("apverify: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
