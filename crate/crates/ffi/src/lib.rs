//! C ABI over `stochflow`.
//!
//! Every function returns a [`StochflowStatus`]; results come back through out
//! pointers. Objects are opaque handles released with their `_free` function.
//! After a failure, [`stochflow_last_error`] copies the message of the most
//! recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stochflow::coefficients::mollifier::mollify;
use stochflow::coefficients::{CoefficientField, Family, MollifierSpec};
use stochflow::config::ExperimentConfig;
use stochflow::density::{integrate_with_density, lp_density_norm, DensityTrack};
use stochflow::experiment::run;
use stochflow::flow::{initial_points, BrownianDriver, FlowEnsemble, Pairing};
use stochflow::{seed, Error, ReferenceMeasure};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StochflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// Weight measure `(1 + |x|^2)^(-alpha) dx`.
pub struct StochflowMeasure(ReferenceMeasure);

/// Coefficient field `(sigma, b)`.
pub struct StochflowField(CoefficientField);

/// Simulated trajectories with their pathwise densities.
pub struct StochflowEnsemble {
    flow: FlowEnsemble,
    density: DensityTrack,
    measure: ReferenceMeasure,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: StochflowStatus, msg: impl Into<String>) -> StochflowStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn status_of(e: &Error) -> StochflowStatus {
    match e {
        Error::Config(_) => StochflowStatus::InvalidConfig,
        Error::Io(_) => StochflowStatus::Io,
        Error::Domain(_) | Error::MissingEstimate(_) => StochflowStatus::Numerical,
        _ => StochflowStatus::InvalidArgument,
    }
}

/// Runs `body`, mapping errors and panics to status codes.
fn guard(body: impl FnOnce() -> Result<(), StochflowStatus>) -> StochflowStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => StochflowStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(StochflowStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, StochflowStatus>;
}

impl<T> OrStatus<T> for stochflow::Result<T> {
    fn or_status(self) -> Result<T, StochflowStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, StochflowStatus> {
    p.as_ref().ok_or_else(|| fail(StochflowStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, StochflowStatus> {
    p.as_mut().ok_or_else(|| fail(StochflowStatus::NullPointer, format!("{what} is null")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, StochflowStatus> {
    if p.is_null() {
        return Err(fail(StochflowStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(StochflowStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], StochflowStatus> {
    if p.is_null() {
        return Err(fail(StochflowStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn stochflow_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stochflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out_measure` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stochflow_measure_new(dim: usize, alpha: f64, out_measure: *mut *mut StochflowMeasure) -> StochflowStatus {
    guard(|| {
        let slot = out(out_measure, "out_measure")?;
        let m = ReferenceMeasure::new(dim, alpha).or_status()?;
        *slot = Box::into_raw(Box::new(StochflowMeasure(m)));
        Ok(())
    })
}

/// Weight at `x` (length = the measure dimension).
///
/// # Safety
/// `measure` must come from `stochflow_measure_new`; `x` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn stochflow_measure_weight(
    measure: *const StochflowMeasure,
    x: *const f64,
    dim: usize,
    out_weight: *mut f64,
) -> StochflowStatus {
    guard(|| {
        let m = &deref(measure, "measure")?.0;
        if dim != m.dim() {
            return Err(fail(StochflowStatus::InvalidArgument, format!("x has {dim} coordinates, measure has {}", m.dim())));
        }
        *out(out_weight, "out_weight")? = m.weight(slice(x, dim, "x")?).or_status()?;
        Ok(())
    })
}

/// Total mass `mu(R^n)`.
///
/// # Safety
/// `measure` must come from `stochflow_measure_new`.
#[no_mangle]
pub unsafe extern "C" fn stochflow_measure_mass(measure: *const StochflowMeasure, out_mass: *mut f64) -> StochflowStatus {
    guard(|| {
        *out(out_mass, "out_mass")? = deref(measure, "measure")?.0.total_mass().or_status()?;
        Ok(())
    })
}

/// # Safety
/// `measure` must be null or come from `stochflow_measure_new`, and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stochflow_measure_free(measure: *mut StochflowMeasure) {
    if !measure.is_null() {
        drop(Box::from_raw(measure));
    }
}

/// Builds a catalog field from JSON such as `{"name": "ou", "theta": 2.0}`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_field` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stochflow_field_from_json(json: *const c_char, out_field: *mut *mut StochflowField) -> StochflowStatus {
    guard(|| {
        let slot = out(out_field, "out_field")?;
        let fam: Family = serde_json::from_str(text(json, "json")?)
            .map_err(|e| fail(StochflowStatus::InvalidConfig, format!("family: {e}")))?;
        *slot = Box::into_raw(Box::new(StochflowField(fam.build().or_status()?)));
        Ok(())
    })
}

/// State and noise dimensions of a field.
///
/// # Safety
/// `field` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stochflow_field_dims(
    field: *const StochflowField,
    out_dim: *mut usize,
    out_noise_dim: *mut usize,
) -> StochflowStatus {
    guard(|| {
        let f = &deref(field, "field")?.0;
        *out(out_dim, "out_dim")? = f.dim();
        *out(out_noise_dim, "out_noise_dim")? = f.noise_dim();
        Ok(())
    })
}

/// Bump-kernel mollification at level `k`, as a new field.
///
/// # Safety
/// `field` must come from this library; `out_field` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stochflow_field_mollify(
    field: *const StochflowField,
    level: u32,
    out_field: *mut *mut StochflowField,
) -> StochflowStatus {
    guard(|| {
        let f = &deref(field, "field")?.0;
        let slot = out(out_field, "out_field")?;
        let g = mollify(f, &MollifierSpec::bump(level).or_status()?).or_status()?;
        *slot = Box::into_raw(Box::new(StochflowField(g)));
        Ok(())
    })
}

/// # Safety
/// `field` must be null or come from this library, and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stochflow_field_free(field: *mut StochflowField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Integrates `paths` trajectories from points drawn from `measure`, each with
/// its own Brownian path, tracking densities. Fully determined by `seed`.
///
/// # Safety
/// Handles must come from this library; `out_ensemble` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stochflow_simulate(
    field: *const StochflowField,
    measure: *const StochflowMeasure,
    dt: f64,
    horizon: f64,
    stride: usize,
    paths: usize,
    seed: u64,
    out_ensemble: *mut *mut StochflowEnsemble,
) -> StochflowStatus {
    guard(|| {
        let f = &deref(field, "field")?.0;
        let m = deref(measure, "measure")?.0;
        let slot = out(out_ensemble, "out_ensemble")?;
        let x0 = initial_points(&m, seed, "x0", paths).or_status()?;
        let driver = BrownianDriver::new(f.noise_dim(), dt, seed::derive_seed(seed, "driver", 0), paths).or_status()?;
        let (flow, density) = integrate_with_density(f, &m, &driver, &x0, Pairing::Diagonal, horizon, stride).or_status()?;
        *slot = Box::into_raw(Box::new(StochflowEnsemble { flow, density, measure: m }));
        Ok(())
    })
}

/// Number of trajectories, recorded times, and state dimension.
///
/// # Safety
/// `ensemble` must come from `stochflow_simulate`; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stochflow_ensemble_shape(
    ensemble: *const StochflowEnsemble,
    out_paths: *mut usize,
    out_records: *mut usize,
    out_dim: *mut usize,
) -> StochflowStatus {
    guard(|| {
        let e = &deref(ensemble, "ensemble")?.flow;
        *out(out_paths, "out_paths")? = e.len();
        *out(out_records, "out_records")? = e.grid.records();
        *out(out_dim, "out_dim")? = e.dim;
        Ok(())
    })
}

unsafe fn index(e: &StochflowEnsemble, path: usize, record: usize) -> Result<(), StochflowStatus> {
    if path >= e.flow.len() || record >= e.flow.grid.records() {
        return Err(fail(StochflowStatus::InvalidArgument, format!("({path}, {record}) is outside the ensemble")));
    }
    Ok(())
}

/// Copies the state of trajectory `path` at record `record` into `out_state`
/// (capacity `len`, at least the state dimension).
///
/// # Safety
/// `ensemble` must come from `stochflow_simulate`; `out_state` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn stochflow_ensemble_state(
    ensemble: *const StochflowEnsemble,
    path: usize,
    record: usize,
    out_state: *mut f64,
    len: usize,
) -> StochflowStatus {
    guard(|| {
        let e = deref(ensemble, "ensemble")?;
        index(e, path, record)?;
        if out_state.is_null() {
            return Err(fail(StochflowStatus::NullPointer, "out_state is null"));
        }
        if len < e.flow.dim {
            return Err(fail(StochflowStatus::InvalidArgument, format!("out_state needs {} slots", e.flow.dim)));
        }
        let s = e.flow.trajectories[path].state(record, e.flow.dim);
        ptr::copy_nonoverlapping(s.as_ptr(), out_state, s.len());
        Ok(())
    })
}

/// Pathwise density `rho~` of trajectory `path` at record `record`.
///
/// # Safety
/// `ensemble` must come from `stochflow_simulate`; `out_rho` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stochflow_ensemble_rho(
    ensemble: *const StochflowEnsemble,
    path: usize,
    record: usize,
    out_rho: *mut f64,
) -> StochflowStatus {
    guard(|| {
        let e = deref(ensemble, "ensemble")?;
        index(e, path, record)?;
        *out(out_rho, "out_rho")? = e.density.rho_tilde(path, record);
        Ok(())
    })
}

/// `||rho_t||_{L^p(P x mu)}` at a recorded time, with its standard error.
///
/// # Safety
/// `ensemble` must come from `stochflow_simulate`; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stochflow_density_lp(
    ensemble: *const StochflowEnsemble,
    p: f64,
    record: usize,
    out_norm: *mut f64,
    out_se: *mut f64,
) -> StochflowStatus {
    guard(|| {
        let e = deref(ensemble, "ensemble")?;
        let est = lp_density_norm(&e.density, &e.measure, p, record).or_status()?;
        *out(out_norm, "out_norm")? = est.norm.value;
        *out(out_se, "out_se")? = est.norm.se;
        Ok(())
    })
}

/// # Safety
/// `ensemble` must be null or come from `stochflow_simulate`, and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stochflow_ensemble_free(ensemble: *mut StochflowEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Runs a TOML experiment config, writing its CSV files and `summary.json`
/// into `out_dir`. `out_all_pass` receives 1 when every assertion passed.
///
/// # Safety
/// Strings must be NUL-terminated; `out_all_pass` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stochflow_run_config(
    config_toml: *const c_char,
    out_dir: *const c_char,
    out_all_pass: *mut i32,
) -> StochflowStatus {
    guard(|| {
        let config = ExperimentConfig::from_toml(text(config_toml, "config_toml")?).or_status()?;
        let dir = text(out_dir, "out_dir")?;
        let slot = out(out_all_pass, "out_all_pass")?;
        *slot = run(&config, Path::new(dir)).or_status()?.all_pass as i32;
        Ok(())
    })
}
