//! C ABI over the `proxmmr` data generators and estimators.
//!
//! Every fallible function returns a [`ProxmmrStatus`]. On failure the
//! message is available from [`proxmmr_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.
//! Matrices cross the boundary as row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use proxmmr::estimators::{self, FittedEstimator, Method, TrainConfig};
use proxmmr::eval::{c_mse, TrainOverrides};
use proxmmr::scm::{demand_ground_truth, demand_sample, Dataset, DemandConfig, Experiment};
use proxmmr::tensor::Tensor;
use proxmmr::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxmmrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Domain = 4,
    Training = 5,
    Config = 6,
    Io = 7,
    Parse = 8,
    Internal = 9,
}

/// Opaque training dataset.
pub struct ProxmmrDataset {
    inner: Dataset,
}

/// Opaque fitted estimator.
pub struct ProxmmrEstimator {
    inner: FittedEstimator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ProxmmrStatus, msg: impl Into<String>) -> ProxmmrStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> ProxmmrStatus {
    match e {
        Error::Dimension(_) => ProxmmrStatus::Dimension,
        Error::Domain(_) => ProxmmrStatus::Domain,
        Error::Training(_) => ProxmmrStatus::Training,
        Error::Config(_) => ProxmmrStatus::Config,
        Error::Io(_) => ProxmmrStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => ProxmmrStatus::Parse,
        Error::Graph(_) | Error::Contract(_) => ProxmmrStatus::Internal,
    }
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), ProxmmrStatus>) -> ProxmmrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ProxmmrStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(ProxmmrStatus::Internal, "panic inside proxmmr"),
    }
}

fn lib<T>(r: proxmmr::Result<T>) -> Result<T, ProxmmrStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), ProxmmrStatus> {
    if p.is_null() {
        Err(fail(ProxmmrStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, ProxmmrStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            ProxmmrStatus::InvalidArgument,
            format!("{name} is not UTF-8"),
        )
    })
}

unsafe fn matrix(
    p: *const f64,
    rows: usize,
    cols: usize,
    name: &str,
) -> Result<Tensor, ProxmmrStatus> {
    if rows == 0 || cols == 0 {
        return Err(fail(
            ProxmmrStatus::InvalidArgument,
            format!("{name} must be non-empty"),
        ));
    }
    non_null(p, name)?;
    let len = rows.checked_mul(cols).ok_or_else(|| {
        fail(
            ProxmmrStatus::InvalidArgument,
            format!("{name} is too large"),
        )
    })?;
    lib(Tensor::from_vec(
        rows,
        cols,
        std::slice::from_raw_parts(p, len).to_vec(),
    ))
}

unsafe fn write_out(values: &Tensor, out: *mut f64, out_len: usize) -> Result<(), ProxmmrStatus> {
    non_null(out, "out")?;
    if out_len != values.len() {
        return Err(fail(
            ProxmmrStatus::Dimension,
            format!(
                "output buffer holds {out_len} values, need {}",
                values.len()
            ),
        ));
    }
    std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(values.data());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn proxmmr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn proxmmr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Samples `n` rows of the demand model with the given proxy noise variances.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_demand_sample(
    n: usize,
    seed: u64,
    var_z: f64,
    var_w: f64,
    out: *mut *mut ProxmmrDataset,
) -> ProxmmrStatus {
    guard(|| {
        non_null(out, "out")?;
        let data = lib(demand_sample(
            &DemandConfig::new(n, seed).with_noise(var_z, var_w),
        ))?;
        *out = Box::into_raw(Box::new(ProxmmrDataset { inner: data }));
        Ok(())
    })
}

/// Builds a dataset from caller arrays: `a` is `n × a_dim`, `w` is
/// `n × w_dim`, `z` is `n × z_dim`, `y` has `n` entries. All are copied.
///
/// # Safety
/// Each array must hold the stated number of doubles; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn proxmmr_dataset_from_arrays(
    n: usize,
    a: *const f64,
    a_dim: usize,
    w: *const f64,
    w_dim: usize,
    z: *const f64,
    z_dim: usize,
    y: *const f64,
    out: *mut *mut ProxmmrDataset,
) -> ProxmmrStatus {
    guard(|| {
        non_null(out, "out")?;
        let a = matrix(a, n, a_dim, "a")?;
        let w = matrix(w, n, w_dim, "w")?;
        let z = matrix(z, n, z_dim, "z")?;
        let y = matrix(y, n, 1, "y")?;
        let data = lib(Dataset::new(a, w, z, y, Tensor::full(n, 1, f64::NAN)))?;
        *out = Box::into_raw(Box::new(ProxmmrDataset { inner: data }));
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_dataset_len(data: *const ProxmmrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_dataset_free(data: *mut ProxmmrDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Fits `method` ("nmmr-u", "nmmr-v", "naive", "ls", "ls-qf", "2sls") with
/// the tuned defaults of `experiment` ("demand" or "sprite"). `overrides`
/// is NULL or a JSON object with any of lr, lambda, epochs, batch_size,
/// width, depth.
///
/// # Safety
/// Strings must be NUL-terminated; `data` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_fit(
    data: *const ProxmmrDataset,
    method: *const c_char,
    experiment: *const c_char,
    overrides: *const c_char,
    seed: u64,
    out: *mut *mut ProxmmrEstimator,
) -> ProxmmrStatus {
    guard(|| {
        non_null(data, "data")?;
        non_null(out, "out")?;
        let method: Method = lib(str_arg(method, "method")?.parse())?;
        let experiment: Experiment = lib(str_arg(experiment, "experiment")?.parse())?;
        let overrides: TrainOverrides = if overrides.is_null() {
            TrainOverrides::default()
        } else {
            let text = str_arg(overrides, "overrides")?;
            serde_json::from_str(text)
                .map_err(|e| fail(ProxmmrStatus::Config, format!("overrides: {e}")))?
        };
        let config: TrainConfig = overrides
            .apply(TrainConfig::defaults(method, experiment))
            .with_seed(seed);
        let fitted = lib(estimators::fit(
            method,
            &(*data).inner.observed(),
            experiment,
            &config,
        ))?;
        *out = Box::into_raw(Box::new(ProxmmrEstimator { inner: fitted }));
        Ok(())
    })
}

/// Bridge values `h(a_i, w_i)` for `n` paired rows into `out[n]`.
///
/// # Safety
/// `a` holds `n × a_dim`, `w` holds `n × w_dim` doubles; `out` holds `out_len`.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_estimator_predict(
    est: *const ProxmmrEstimator,
    a: *const f64,
    w: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> ProxmmrStatus {
    guard(|| {
        non_null(est, "estimator")?;
        let est = &(*est).inner;
        let a = matrix(a, n, est.a_dim, "a")?;
        let w = matrix(w, n, est.w_dim, "w")?;
        write_out(&lib(est.predict(&a, &w))?, out, out_len)
    })
}

/// Potential-outcome curve: for each of the `n_grid` treatment rows, the
/// mean bridge value over the `n_w` held-out outcome-proxy rows.
///
/// # Safety
/// `grid` holds `n_grid × a_dim`, `heldout_w` holds `n_w × w_dim` doubles;
/// `out` holds `out_len`.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_estimator_predict_curve(
    est: *const ProxmmrEstimator,
    grid: *const f64,
    n_grid: usize,
    heldout_w: *const f64,
    n_w: usize,
    out: *mut f64,
    out_len: usize,
) -> ProxmmrStatus {
    guard(|| {
        non_null(est, "estimator")?;
        let est = &(*est).inner;
        let grid = matrix(grid, n_grid, est.a_dim, "grid")?;
        let w = matrix(heldout_w, n_w, est.w_dim, "heldout_w")?;
        write_out(&lib(est.predict_curve(&grid, &w))?, out, out_len)
    })
}

/// Treatment and outcome-proxy widths of a fitted estimator.
///
/// # Safety
/// `est` must be live; `a_dim` and `w_dim` writable.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_estimator_dims(
    est: *const ProxmmrEstimator,
    a_dim: *mut usize,
    w_dim: *mut usize,
) -> ProxmmrStatus {
    guard(|| {
        non_null(est, "estimator")?;
        non_null(a_dim, "a_dim")?;
        non_null(w_dim, "w_dim")?;
        *a_dim = (*est).inner.a_dim;
        *w_dim = (*est).inner.w_dim;
        Ok(())
    })
}

/// Serializes an estimator to JSON. Release the string with
/// [`proxmmr_string_free`].
///
/// # Safety
/// `est` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_estimator_to_json(
    est: *const ProxmmrEstimator,
    out: *mut *mut c_char,
) -> ProxmmrStatus {
    guard(|| {
        non_null(est, "estimator")?;
        non_null(out, "out")?;
        let json = lib((*est).inner.to_json())?;
        *out = CString::new(json)
            .map_err(|_| fail(ProxmmrStatus::Internal, "JSON contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_estimator_from_json(
    json: *const c_char,
    out: *mut *mut ProxmmrEstimator,
) -> ProxmmrStatus {
    guard(|| {
        non_null(out, "out")?;
        let est = lib(FittedEstimator::from_json(str_arg(json, "json")?))?;
        *out = Box::into_raw(Box::new(ProxmmrEstimator { inner: est }));
        Ok(())
    })
}

/// # Safety
/// `est` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_estimator_free(est: *mut ProxmmrEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Monte Carlo `E[Y^a]` of the demand model at `n` prices, with `mc` draws
/// of the confounder and outcome-proxy noise variance `var_w`.
///
/// # Safety
/// `grid` holds `n` doubles; `out` holds `out_len`.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_demand_truth(
    grid: *const f64,
    n: usize,
    mc: usize,
    seed: u64,
    var_w: f64,
    out: *mut f64,
    out_len: usize,
) -> ProxmmrStatus {
    guard(|| {
        let grid = matrix(grid, n, 1, "grid")?;
        let truth = lib(demand_ground_truth(&grid, mc, seed, var_w))?;
        write_out(&truth.values, out, out_len)
    })
}

/// Causal mean squared error between two curves of length `n`.
///
/// # Safety
/// `predicted` and `truth` hold `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn proxmmr_c_mse(
    predicted: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
) -> ProxmmrStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = matrix(predicted, n, 1, "predicted")?;
        let t = matrix(truth, n, 1, "truth")?;
        *out = lib(c_mse(&p, &t))?;
        Ok(())
    })
}
