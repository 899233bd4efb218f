use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use selfplay_ffi::*;

const SMALL: &str = "seed = 4\niterations = 1\nfresh_problems = 5\n\
[corpus]\ncount = 20\n[mcts]\nrollouts = 16\n[tcg]\nsteps = 20\n";

fn last_error() -> String {
    let p = sp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take(s: *mut c_char) -> String {
    let out = unsafe { CStr::from_ptr(s) }.to_string_lossy().into_owned();
    unsafe { sp_string_free(s) };
    out
}

fn config(text: &str) -> *mut SpConfig {
    let text = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { sp_config_from_toml(text.as_ptr(), &mut cfg) },
        SpStatus::Ok
    );
    cfg
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(sp_config_default(11, &mut cfg), SpStatus::Ok);
        assert_eq!(sp_config_set_iterations(cfg, 3), SpStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(sp_config_to_toml(cfg, &mut s), SpStatus::Ok);
        let text = take(s);
        assert!(text.contains("seed = 11") && text.contains("iterations = 3"));
        let again = config(&text);
        let mut s2 = ptr::null_mut();
        assert_eq!(sp_config_to_toml(again, &mut s2), SpStatus::Ok);
        assert_eq!(take(s2), text);
        sp_config_free(again);
        sp_config_free(cfg);
    }
    assert!(sp_last_error().is_null());
}

#[test]
fn errors_map_to_status_codes() {
    let mut cfg = ptr::null_mut();
    let bad = CString::new("seeds = 1").unwrap();
    unsafe {
        assert_eq!(
            sp_config_from_toml(bad.as_ptr(), &mut cfg),
            SpStatus::Config
        );
        assert!(cfg.is_null());
        assert!(last_error().contains("seeds"));
        assert_eq!(
            sp_config_from_toml(ptr::null(), &mut cfg),
            SpStatus::NullArgument
        );
        assert_eq!(
            sp_config_default(0, ptr::null_mut()),
            SpStatus::NullArgument
        );
        let invalid = [0xffu8, 0];
        assert_eq!(
            sp_config_from_toml(invalid.as_ptr().cast(), &mut cfg),
            SpStatus::InvalidUtf8
        );
        sp_config_free(ptr::null_mut());
        sp_run_free(ptr::null_mut());
        sp_string_free(ptr::null_mut());
    }
}

#[test]
fn program_evaluation() {
    let mut v = 0i64;
    let prog = CString::new("+ x0 * x1 2").unwrap();
    unsafe {
        assert_eq!(
            sp_program_eval(prog.as_ptr(), 3, 4, 0, 256, &mut v),
            SpStatus::Ok
        );
        assert_eq!(v, 11);
        let bad = CString::new("+ x0").unwrap();
        assert_eq!(
            sp_program_eval(bad.as_ptr(), 0, 0, 0, 256, &mut v),
            SpStatus::Parse
        );
        assert_eq!(
            sp_program_eval(prog.as_ptr(), 0, 0, 0, 0, &mut v),
            SpStatus::Eval
        );
    }
}

#[test]
fn selfplay_run_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let cfg = config(SMALL);
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(sp_selfplay_run(cfg, out.as_ptr(), &mut run), SpStatus::Ok);
        let (mut b, mut s, mut f) = (-1.0, -1.0, -1.0);
        assert_eq!(sp_run_pass_at_1(run, &mut b, &mut s, &mut f), SpStatus::Ok);
        assert!([b, s, f].iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(
            sp_run_pass_at_1(run, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()),
            SpStatus::Ok
        );
        let mut n = 0u32;
        assert_eq!(sp_run_iterations(run, &mut n), SpStatus::Ok);
        assert_eq!(n, 1);
        let mut js = ptr::null_mut();
        assert_eq!(sp_run_report_json(run, &mut js), SpStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take(js)).unwrap();
        assert_eq!(report["final_pass_at_1"].as_f64(), Some(f));

        let ckpt = dir.path().join("checkpoints/policy_iter1.json");
        let ckpt = CString::new(ckpt.to_str().unwrap()).unwrap();
        let mut p = -1.0;
        assert_eq!(sp_eval_policy(cfg, ckpt.as_ptr(), &mut p), SpStatus::Ok);
        assert_eq!(p, f);
        let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
        assert_eq!(sp_eval_policy(cfg, missing.as_ptr(), &mut p), SpStatus::Io);
        sp_run_free(run);
        sp_config_free(cfg);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/selfplay.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "sp_last_error",
        "sp_selfplay_run",
        "sp_program_eval",
        "SP_STATUS_PANIC",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        return;
    };
    assert!(status.success());
}
