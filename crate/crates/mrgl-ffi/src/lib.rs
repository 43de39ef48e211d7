//! C ABI over the `mrgl` estimator.
//!
//! Models are opaque heap handles released with [`mrgl_model_free`]. Every
//! fallible call returns an [`MrglStatus`]; the message of the most recent
//! failure on the calling thread is available from [`mrgl_last_error`].
//! Matrices are passed row-major.

use mrgl::basis::{assemble_design, make_scheme, BasisFamily, ComponentKind, ResolutionScheme};
use mrgl::penalties::{penalty_levels, PenaltySchedule};
use mrgl::solver::{fit, predict, FitConfig, FitResult};
use mrgl::Error;
use nalgebra::{DMatrix, DVector};
use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result codes; the non-zero values match the command-line exit codes where
/// they overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrglStatus {
    Ok = 0,
    Config = 2,
    NonConvergence = 3,
    Certification = 4,
    Dimension = 5,
    Domain = 6,
    NullPointer = 7,
    Io = 8,
    Panic = 9,
}

/// Nonparametric basis family.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrglFamily {
    Fourier = 0,
    Haar = 1,
}

/// Fit settings. Negative `k_star` / `k_max` select the default levels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrglFitOptions {
    pub sigma: f64,
    pub eps: f64,
    pub a0: f64,
    pub family: MrglFamily,
    pub k_star: i32,
    pub k_max: i32,
    pub max_sweeps: u32,
}

/// A fitted model.
pub struct MrglModel {
    scheme: ResolutionScheme,
    family: BasisFamily,
    schedule: PenaltySchedule,
    fit: FitResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MrglStatus {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Csv(_) => MrglStatus::Config,
        Error::Domain(_) => MrglStatus::Domain,
        Error::Dimension(_) => MrglStatus::Dimension,
        Error::NonConvergence { .. } => MrglStatus::NonConvergence,
        Error::Certification(_) => MrglStatus::Certification,
        Error::Io(_) => MrglStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (MrglStatus, String)>) -> MrglStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MrglStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MrglStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MrglStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_err(name: &str) -> (MrglStatus, String) {
    (MrglStatus::NullPointer, format!("`{name}` is null"))
}

/// Copies a row-major `rows x cols` array into a matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles.
unsafe fn read_matrix(data: *const f64, rows: usize, cols: usize) -> DMatrix<f64> {
    let s = std::slice::from_raw_parts(data, rows * cols);
    DMatrix::from_row_slice(rows, cols, s)
}

/// Default options: unit noise scale, `eps = 1`, `A0 = 2`, Fourier basis.
#[no_mangle]
pub extern "C" fn mrgl_fit_options_default() -> MrglFitOptions {
    MrglFitOptions {
        sigma: 1.0,
        eps: 1.0,
        a0: 2.0,
        family: MrglFamily::Fourier,
        k_star: -1,
        k_max: -1,
        max_sweeps: 10_000,
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mrgl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fits an all-nonparametric additive model to `x` (`n x p`, row-major, in
/// [0, 1]) and `y` (length `n`). On success `*out` owns a new model. A fit
/// that stops at the sweep limit still yields a model and returns
/// `NonConvergence`.
///
/// # Safety
/// `x` must hold `n * p` doubles, `y` must hold `n`, `options` and `out` must
/// be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_fit(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    options: *const MrglFitOptions,
    out: *mut *mut MrglModel,
) -> MrglStatus {
    guard(|| {
        if x.is_null() {
            return Err(null_err("x"));
        }
        if y.is_null() {
            return Err(null_err("y"));
        }
        if options.is_null() {
            return Err(null_err("options"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        *out = ptr::null_mut();
        let o = *options;
        let xm = read_matrix(x, n, p);
        let yv = DVector::from_column_slice(std::slice::from_raw_parts(y, n));
        let family = match o.family {
            MrglFamily::Fourier => BasisFamily::Fourier,
            MrglFamily::Haar => BasisFamily::Haar,
        };
        let kinds = vec![ComponentKind::Nonparametric; p];
        let mut scheme = make_scheme(p, kinds.clone(), n, o.eps).map_err(lib_err)?;
        if o.k_star >= 0 || o.k_max >= 0 {
            let ks = if o.k_star >= 0 { o.k_star as u32 } else { scheme.k_star };
            let km = if o.k_max >= 0 { o.k_max as u32 } else { scheme.k_max };
            scheme = ResolutionScheme::with_levels(kinds, ks, km).map_err(lib_err)?;
        }
        let design = assemble_design(&xm, family, &scheme).map_err(lib_err)?;
        let schedule = penalty_levels(&scheme, n, o.sigma, o.eps, o.a0).map_err(lib_err)?;
        let config = FitConfig { max_sweeps: o.max_sweeps as usize, ..FitConfig::default() };
        let result = fit(&yv, &design, &schedule, &config).map_err(lib_err)?;
        let converged = result.converged;
        let sweeps = result.sweeps;
        *out = Box::into_raw(Box::new(MrglModel { scheme, family, schedule, fit: result }));
        if !converged {
            return Err((MrglStatus::NonConvergence, format!("solver did not converge after {sweeps} sweeps")));
        }
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a pointer returned by [`mrgl_model_fit`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_free(model: *mut MrglModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates the fitted function at `m` rows of `x_new` (`m x p`, row-major)
/// into `out` (length `m`).
///
/// # Safety
/// `model` must be live, `x_new` must hold `m * p` doubles and `out` must
/// have room for `m`.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_predict(
    model: *const MrglModel,
    x_new: *const f64,
    m: usize,
    p: usize,
    out: *mut f64,
) -> MrglStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null_err("model"))?;
        if x_new.is_null() {
            return Err(null_err("x_new"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let xm = read_matrix(x_new, m, p);
        let (f, _) = predict(&model.fit, model.family, &model.scheme, &xm).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, m).copy_from_slice(f.as_slice());
        Ok(())
    })
}

/// Copies the `n` in-sample fitted values into `out`.
///
/// # Safety
/// `model` must be live and `out` must have room for `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_fitted(model: *const MrglModel, out: *mut f64, n: usize) -> MrglStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null_err("model"))?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        let f = &model.fit.fitted;
        if f.len() != n {
            return Err((MrglStatus::Dimension, format!("model has {} fitted values, buffer has {n}", f.len())));
        }
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(f.as_slice());
        Ok(())
    })
}

/// Number of penalized groups, or 0 for a null model.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_num_groups(model: *const MrglModel) -> usize {
    model.as_ref().map_or(0, |m| m.scheme.num_groups())
}

/// Number of groups with a nonzero fitted component, or 0 for a null model.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_active_count(model: *const MrglModel) -> usize {
    model.as_ref().map_or(0, |m| m.fit.active_set.len())
}

/// Whether the fit met its convergence and optimality tolerances.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_converged(model: *const MrglModel) -> bool {
    model.as_ref().is_some_and(|m| m.fit.converged)
}

/// Baseline and top resolution levels.
///
/// # Safety
/// `model` must be live; `k_star` and `k_max` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_levels(model: *const MrglModel, k_star: *mut u32, k_max: *mut u32) -> MrglStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null_err("model"))?;
        if k_star.is_null() || k_max.is_null() {
            return Err(null_err("k_star/k_max"));
        }
        *k_star = model.scheme.k_star;
        *k_max = model.scheme.k_max;
        Ok(())
    })
}

/// Coefficients, penalty levels and optimality report as a JSON string owned
/// by the caller; release with [`mrgl_string_free`]. Null on failure.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mrgl_model_to_json(model: *const MrglModel) -> *mut c_char {
    let mut s = ptr::null_mut();
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null_err("model"))?;
        let v = serde_json::json!({
            "k_star": model.scheme.k_star,
            "k_max": model.scheme.k_max,
            "schedule": model.schedule.to_json(),
            "fit": model.fit.to_json(),
        });
        let text = serde_json::to_string(&v).map_err(|e| (MrglStatus::Config, e.to_string()))?;
        s = CString::new(text).map_err(|e| (MrglStatus::Config, e.to_string()))?.into_raw();
        Ok(())
    });
    s
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by [`mrgl_model_to_json`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn mrgl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
