use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use stochflow::flow::{initial_points, BrownianDriver, Pairing};
use stochflow::{density, seed, ReferenceMeasure};
use stochflow_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe { stochflow_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn measure(dim: usize, alpha: f64) -> *mut StochflowMeasure {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { stochflow_measure_new(dim, alpha, &mut m) }, StochflowStatus::Ok);
    m
}

fn field(json: &str) -> *mut StochflowField {
    let mut f = ptr::null_mut();
    let s = CString::new(json).unwrap();
    assert_eq!(unsafe { stochflow_field_from_json(s.as_ptr(), &mut f) }, StochflowStatus::Ok, "{}", last_error());
    f
}

#[test]
fn measure_matches_the_library() {
    let m = measure(2, 2.0);
    let (mut w, mut mass) = (0.0, 0.0);
    unsafe {
        assert_eq!(stochflow_measure_weight(m, [1.0, 2.0].as_ptr(), 2, &mut w), StochflowStatus::Ok);
        assert_eq!(stochflow_measure_mass(m, &mut mass), StochflowStatus::Ok);
    }
    assert!((w - 36f64.recip()).abs() < 1e-15);
    // (1 + r^2)^-2 over the plane integrates to pi
    assert!((mass - std::f64::consts::PI).abs() < 1e-12);
    unsafe {
        assert_eq!(stochflow_measure_weight(m, [1.0].as_ptr(), 1, &mut w), StochflowStatus::InvalidArgument);
        stochflow_measure_free(m);
    }
}

#[test]
fn errors_become_status_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { stochflow_measure_new(2, -1.0, &mut m) }, StochflowStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("alpha"));
    // a valid weight whose total mass is infinite
    let heavy = measure(2, 0.5);
    assert_eq!(unsafe { stochflow_measure_mass(heavy, &mut 0.0) }, StochflowStatus::InvalidArgument);
    assert!(last_error().contains("infinite mass"));
    unsafe { stochflow_measure_free(heavy) };
    assert_eq!(unsafe { stochflow_measure_new(1, 1.0, ptr::null_mut()) }, StochflowStatus::NullPointer);
    assert_eq!(unsafe { stochflow_measure_mass(ptr::null(), &mut 0.0) }, StochflowStatus::NullPointer);

    let bad = CString::new("{\"name\": \"nope\"}").unwrap();
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { stochflow_field_from_json(bad.as_ptr(), &mut f) }, StochflowStatus::InvalidConfig);
    assert!(last_error().contains("nope"));

    // a message longer than the buffer is truncated but its length reported
    let mut tiny = [0 as c_char; 4];
    let full = unsafe { stochflow_last_error(tiny.as_mut_ptr(), tiny.len()) };
    assert!(full > 3);
    assert_eq!(unsafe { CStr::from_ptr(tiny.as_ptr()) }.to_bytes().len(), 3);
}

#[test]
fn simulation_matches_the_library() {
    let m = measure(1, 2.5);
    let f = field(r#"{"name": "ou", "theta": 1.0, "s": 0.5}"#);
    let mut e = ptr::null_mut();
    unsafe {
        assert_eq!(stochflow_simulate(f, m, 1.0 / 64.0, 1.0, 8, 100, 42, &mut e), StochflowStatus::Ok);
    }
    let (mut paths, mut records, mut dim) = (0, 0, 0);
    unsafe { stochflow_ensemble_shape(e, &mut paths, &mut records, &mut dim) };
    assert_eq!((paths, records, dim), (100, 9, 1));

    let rm = ReferenceMeasure::new(1, 2.5).unwrap();
    let raw = stochflow::coefficients::Family::Ou { dim: 1, theta: 1.0, s: 0.5 }.build().unwrap();
    let x0 = initial_points(&rm, 42, "x0", 100).unwrap();
    let d = BrownianDriver::new(1, 1.0 / 64.0, seed::derive_seed(42, "driver", 0), 100).unwrap();
    let (flow, track) = density::integrate_with_density(&raw, &rm, &d, &x0, Pairing::Diagonal, 1.0, 8).unwrap();
    for (j, r) in [(0, 0), (17, 4), (99, 8)] {
        let (mut x, mut rho) = ([0.0; 1], 0.0);
        unsafe {
            assert_eq!(stochflow_ensemble_state(e, j, r, x.as_mut_ptr(), 1), StochflowStatus::Ok);
            assert_eq!(stochflow_ensemble_rho(e, j, r, &mut rho), StochflowStatus::Ok);
        }
        assert_eq!(x[0].to_bits(), flow.trajectories[j].state(r, 1)[0].to_bits());
        assert_eq!(rho.to_bits(), track.rho_tilde(j, r).to_bits());
    }
    let (mut norm, mut se) = (0.0, 0.0);
    unsafe { assert_eq!(stochflow_density_lp(e, 2.0, 8, &mut norm, &mut se), StochflowStatus::Ok) };
    assert_eq!(norm, density::lp_density_norm(&track, &rm, 2.0, 8).unwrap().norm.value);
    unsafe {
        assert_eq!(stochflow_ensemble_rho(e, 100, 0, &mut 0.0), StochflowStatus::InvalidArgument);
        assert_eq!(stochflow_ensemble_state(e, 0, 0, [0.0; 1].as_mut_ptr(), 0), StochflowStatus::InvalidArgument);
        stochflow_ensemble_free(e);
        stochflow_field_free(f);
        stochflow_measure_free(m);
    }
}

#[test]
fn mollified_field_keeps_dimensions() {
    let f = field(r#"{"name": "rough_sobolev"}"#);
    let mut g = ptr::null_mut();
    let (mut n, mut k) = (0, 0);
    unsafe {
        assert_eq!(stochflow_field_mollify(f, 4, &mut g), StochflowStatus::Ok);
        assert_eq!(stochflow_field_dims(g, &mut n, &mut k), StochflowStatus::Ok);
        assert_eq!(stochflow_field_mollify(f, 0, &mut ptr::null_mut()), StochflowStatus::InvalidArgument);
        stochflow_field_free(g);
        stochflow_field_free(f);
    }
    assert_eq!((n, k), (1, 1));
}

#[test]
fn run_config_writes_summary() {
    let dir = std::env::temp_dir().join(format!("stochflow-ffi-{}", std::process::id()));
    let toml = CString::new("kind = \"simulate\"\nseed = 3\n[family]\nname = \"zero\"\n[measure]\nn = 1\nalpha = 3.0\n[budgets]\nomegas = 50\nx_count = 50\n").unwrap();
    let out = CString::new(dir.to_str().unwrap()).unwrap();
    let mut pass = -1;
    assert_eq!(unsafe { stochflow_run_config(toml.as_ptr(), out.as_ptr(), &mut pass) }, StochflowStatus::Ok, "{}", last_error());
    assert_eq!(pass, 1);
    assert!(dir.join("summary.json").exists());
    std::fs::remove_dir_all(&dir).unwrap();

    let bad = CString::new("kind = \"simulate\"\n[family]\nname = \"zero\"\n[measure]\nn = 1\nalpha = 1.0\n").unwrap();
    assert_eq!(unsafe { stochflow_run_config(bad.as_ptr(), out.as_ptr(), &mut pass) }, StochflowStatus::InvalidConfig);
    assert!(last_error().contains("alpha must exceed q + n/2"));
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(stochflow_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include/stochflow.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["stochflow_measure_new", "stochflow_simulate", "stochflow_density_lp", "stochflow_run_config", "STOCHFLOW_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let lib = target_dir().join("libstochflow_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("no C compiler or static library; skipping the C build");
        return;
    }
    let exe = std::env::temp_dir().join(format!("stochflow-c-smoke-{}", std::process::id()));
    let build = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c_smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    std::fs::remove_file(&exe).ok();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(&fields[..4], [env!("CARGO_PKG_VERSION"), "200", "9", "1"]);
}
