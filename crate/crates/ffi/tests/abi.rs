use std::ffi::{c_int, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use apverify_ffi::*;

fn last_error() -> String {
    let p = apv_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn default_params() -> *mut ApvParams {
    let mut h = ptr::null_mut();
    let st = unsafe { apv_params_new(0.5, 4.0, 0.7, ApvVariant::Corrected as c_int, &mut h) };
    assert_eq!(st, ApvStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn params_round_trip() {
    let h = default_params();
    let mut v = ApvParamValues::default();
    assert_eq!(unsafe { apv_params_get(h, &mut v) }, ApvStatus::Ok);
    assert!((v.q - 4.0 / 3.0).abs() < 1e-15);
    assert!((v.delta - 0.2).abs() < 1e-12);
    assert!((v.gamma - 7.0 / 300.0).abs() < 1e-12);
    assert_eq!(v.level, 2.0);
    assert_eq!(v.variant, 1);

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { apv_params_to_json(h, &mut s) }, ApvStatus::Ok);
    let json = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    assert!(json.contains("\"gamma\""), "{json}");
    unsafe {
        apv_string_free(s);
        apv_params_free(h);
    }
}

#[test]
fn invalid_parameters_report_errors() {
    let mut h = ptr::null_mut();
    let st = unsafe { apv_params_new(0.5, 2.0, 0.7, ApvVariant::Corrected as c_int, &mut h) };
    assert_eq!(st, ApvStatus::InvalidArgument);
    assert!(h.is_null());
    assert!(last_error().contains("p > 1/(1-a)"), "{}", last_error());

    let st = unsafe { apv_params_new(0.5, 4.0, 0.7, 7, &mut h) };
    assert_eq!(st, ApvStatus::InvalidArgument);

    let st = unsafe { apv_params_new(0.5, 4.0, 0.7, 1, ptr::null_mut()) };
    assert_eq!(st, ApvStatus::NullPointer);

    let mut out = 0.0;
    assert_eq!(
        unsafe { apv_p_prime(0.5, 0.3, &mut out) },
        ApvStatus::InvalidArgument
    );
    assert_eq!(unsafe { apv_p_prime(0.5, 0.5, &mut out) }, ApvStatus::Ok);
    assert_eq!(out, 2.0);

    // Success clears the previous message.
    assert!(apv_last_error_message().is_null());
}

#[test]
fn intensity_values() {
    let h = default_params();
    let mut v = 0.0;
    assert_eq!(
        unsafe { apv_intensity(h, 0.0, false, &mut v) },
        ApvStatus::Ok
    );
    assert!((v - 7.0 / 300.0).abs() < 1e-15);
    let s_half = 2.0 * 0.5f64.powf(1.0 / 0.2);
    assert_eq!(
        unsafe { apv_intensity(h, s_half, false, &mut v) },
        ApvStatus::Ok
    );
    assert!((v - 14.0 / 300.0).abs() < 1e-12);
    assert_eq!(
        unsafe { apv_intensity(h, 2.0, false, &mut v) },
        ApvStatus::InvalidArgument
    );
    unsafe { apv_params_free(h) };
}

#[test]
fn simulation_through_handles() {
    let h = default_params();
    let mut b = ptr::null_mut();
    assert_eq!(
        unsafe { apv_simulate(h, 500, 11, f64::NAN, &mut b) },
        ApvStatus::Ok
    );
    assert_eq!(unsafe { apv_bundle_len(b) }, 500);
    let mass = unsafe { apv_bundle_censored_mass(b) };
    assert!((0.0..=0.01).contains(&mass));
    let mut hits = 0;
    for i in 0..500 {
        let mut s = ApvPathSummary {
            path_id: 0,
            outcome: ApvOutcome::Censored,
            t1: 0.0,
            t2: 0.0,
            t_final: 0.0,
            s_final: 0.0,
            b_final: 0.0,
            compensator_final: 0.0,
        };
        assert_eq!(unsafe { apv_bundle_path(b, i, &mut s) }, ApvStatus::Ok);
        assert_eq!(s.path_id, i);
        match s.outcome {
            ApvOutcome::Hit => {
                hits += 1;
                assert_eq!(s.s_final, 2.0);
                assert_eq!(s.t1, s.t_final);
            }
            ApvOutcome::Jump => {
                assert!(s.t1.is_nan());
                assert_eq!(s.t2, s.t_final);
                assert!(s.s_final < 2.0);
            }
            ApvOutcome::Censored => assert!(s.t_final.is_nan()),
        }
    }
    assert!(hits > 0);
    let mut s = std::mem::MaybeUninit::<ApvPathSummary>::uninit();
    assert_eq!(
        unsafe { apv_bundle_path(b, 500, s.as_mut_ptr()) },
        ApvStatus::InvalidArgument
    );
    assert_eq!(unsafe { apv_bundle_len(ptr::null()) }, 0);
    unsafe {
        apv_bundle_free(b);
        apv_params_free(h);
        apv_bundle_free(ptr::null_mut());
    }
}

#[test]
fn run_experiment_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"experiment": "bmo-check", "out_dir": {:?}, "control": {{"bmo_paths": 2000, "bmo_steps": 64}}}}"#,
        dir.path().display().to_string()
    );
    let cfg = CString::new(cfg).unwrap();
    let mut code: c_int = -1;
    assert_eq!(
        unsafe { apv_run_experiment(cfg.as_ptr(), &mut code) },
        ApvStatus::Ok
    );
    assert_eq!(code, 0);
    assert!(dir.path().join("summary.json").exists());

    let bad = CString::new(r#"{"p": 2.0}"#).unwrap();
    assert_eq!(
        unsafe { apv_run_experiment(bad.as_ptr(), &mut code) },
        ApvStatus::Config
    );
    assert_eq!(code, 2);
    assert!(last_error().contains("`p`"), "{}", last_error());

    let unknown = CString::new(r#"{"nonsense": 1}"#).unwrap();
    assert_eq!(
        unsafe { apv_run_experiment(unknown.as_ptr(), &mut code) },
        ApvStatus::Config
    );
    assert_eq!(
        unsafe { apv_run_experiment(ptr::null(), &mut code) },
        ApvStatus::NullPointer
    );
}

#[test]
fn header_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/apverify.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "apv_params_new",
        "apv_simulate",
        "apv_run_experiment",
        "apv_last_error_message",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"apverify.h\"\nint main(void) { ApvParams *h = 0; return apv_params_new(0.5, 4.0, 0.7, APV_VARIANT_CORRECTED, &h) == APV_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .expect("C compiler");
    assert!(status.success());
}
