use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use apverify::experiment::{ExperimentConfig, ExperimentKind, RunManifest};
use serde_json::Value;

fn apverify(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_apverify"));
    cmd.args(args).env_remove("APVERIFY_SEED");
    if let Some(s) = env_seed {
        cmd.env("APVERIFY_SEED", s);
    }
    cmd.output().unwrap()
}

fn small_bmo(out: &Path) -> Vec<String> {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::BmoCheck,
        control: apverify::experiment::ControlConfig {
            bmo_paths: 2_000,
            bmo_steps: 64,
            ..Default::default()
        },
        ..ExperimentConfig::default()
    };
    let path = out.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    vec![
        "bmo-check".into(),
        "--config".into(),
        path.display().to_string(),
        "--out".into(),
        out.join("run").display().to_string(),
    ]
}

fn read_manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn passing_run_exits_zero_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let args = small_bmo(tmp.path());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = apverify(&args, None);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = tmp.path().join("run");
    for f in [
        "manifest.json",
        "summary.json",
        "ap_report.csv",
        "duality_report.csv",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let m = read_manifest(&run);
    assert_eq!(m.exit_code, 0);
    assert!(m.checks.iter().any(|c| c.name == "bmo.control_norm"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("status: pass"));
}

#[test]
fn boundary_exponent_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let out = apverify(
        &[
            "counterexample",
            "--a",
            "0.5",
            "--p",
            "2",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`p`") && err.contains("p > 1/(1-a)"), "{err}");
    assert!(!out_dir.exists(), "nothing is written for invalid configs");
}

#[test]
fn unknown_config_key_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"a": 0.5, "n_pathz": 10}"#).unwrap();
    let out = apverify(&["control", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_pathz"));

    let out = apverify(&["control", "--b", "abc"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = apverify(&["control", "--confidence", "1.5"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_failures_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = apverify(
        &[
            "control",
            "--config",
            tmp.path().join("missing.json").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(3));

    // out_dir is an existing file.
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let mut args = small_bmo(tmp.path());
    let n = args.len();
    args[n - 1] = blocker.display().to_string();
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(apverify(&args, None).status.code(), Some(3));
}

#[test]
fn seed_precedence_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let base = small_bmo(tmp.path());
    let run = |name: &str, seed_flag: Option<&str>, env: Option<&str>| -> (Value, Vec<u8>) {
        let mut args = base.clone();
        let n = args.len();
        args[n - 1] = tmp.path().join(name).display().to_string();
        if let Some(s) = seed_flag {
            args.push("--seed".into());
            args.push(s.into());
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = apverify(&args, env);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let bytes = fs::read(tmp.path().join(name).join("summary.json")).unwrap();
        (serde_json::from_slice(&bytes).unwrap(), bytes)
    };
    let (env_only, env_bytes) = run("env", None, Some("77"));
    assert_eq!(env_only["seed"], 77);
    let (flag_wins, flag_bytes) = run("flag", Some("78"), Some("77"));
    assert_eq!(flag_wins["seed"], 78);
    assert_ne!(env_bytes, flag_bytes);
    let (_, again) = run("again", Some("77"), None);
    assert_eq!(
        env_bytes, again,
        "same seed gives byte-identical summary.json"
    );

    let out = apverify(&["bmo-check"], Some("not-a-number"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nested_out_dir_is_created() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = small_bmo(tmp.path());
    let n = args.len();
    args[n - 1] = tmp.path().join("a/b/c").display().to_string();
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(apverify(&args, None).status.code(), Some(0));
    assert!(tmp.path().join("a/b/c/summary.json").exists());
}
