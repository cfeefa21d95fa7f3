//! C ABI over the rotocal library.
//!
//! Conventions:
//! - Every fallible function returns a [`RotocalStatus`]; outputs go through
//!   pointer arguments and are only written on success.
//! - Matrices cross the boundary as opaque [`RotocalMatrix`] handles owned by
//!   the caller and released with [`rotocal_matrix_free`].
//! - Strings returned by the library are released with [`rotocal_string_free`].
//! - After a non-OK status, [`rotocal_last_error_message`] describes the
//!   failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rotocal::calibrator::{calibrate, CalibrationConfig, OutlierThreshold};
use rotocal::distributions::{sample_laplace, LaplaceModel};
use rotocal::invariance::{invariance_suite_with, SuiteConfig};
use rotocal::io::{read_tensor, write_tensor, ReportFile};
use rotocal::quantizer::{fake_quantize, total_outliers};
use rotocal::tensor::{householder_qr, random_hadamard};
use rotocal::{Dtype, Error, FlopCounter, Matrix, ObjectiveKind, OptimizerKind, OptimizerVariant, QuantConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotocalStatus {
    Ok = 0,
    /// Bad argument, shape, or configuration.
    Validation = 1,
    /// Calibration diverged or produced non-finite values.
    Divergence = 2,
    /// The invariance suite exceeded its tolerance.
    InvarianceFailure = 3,
    NullPointer = 4,
    /// File could not be read, written, or parsed.
    Io = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotocalObjective {
    Whip = 0,
    Variance = 1,
    Kurtosis = 2,
    QuantLoss = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotocalOptimizer {
    QrSgd = 0,
    QrMomentumSgd = 1,
    QrAdam = 2,
    CayleySgd = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotocalDtype {
    F32 = 0,
    F64 = 1,
}

/// Calibration settings. Fill with [`rotocal_config_default`] and override.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotocalCalibrationConfig {
    pub objective: RotocalObjective,
    pub optimizer: RotocalOptimizer,
    pub lr: f64,
    /// Momentum coefficient; ignored by plain SGD.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub token_sample_ratio: f64,
    /// Step cap; 0 means no cap.
    pub max_iters: usize,
    /// Bits for the quantization metrics and the quant_loss objective.
    pub bits: u8,
    /// Outlier threshold; values ≤ 0 select the automatic 4·RMS threshold.
    pub tau_outlier: f64,
    pub seed: u64,
}

/// Opaque row-major `f64` matrix.
pub struct RotocalMatrix(Matrix);

struct Failure(RotocalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteState { .. } => {
                RotocalStatus::Divergence
            }
            Error::Io { .. } | Error::Format(_) | Error::Json(_) => RotocalStatus::Io,
            _ => RotocalStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RotocalStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RotocalStatus::Validation, msg.into())
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_last_error(msg: Option<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RotocalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            RotocalStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(Some(msg));
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(Some(format!("panic: {msg}")));
            RotocalStatus::Panic
        }
    }
}

unsafe fn matrix_ref<'a>(m: *const RotocalMatrix, what: &str) -> Result<&'a Matrix, Failure> {
    m.as_ref().map(|h| &h.0).ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn handle(m: Matrix) -> *mut RotocalMatrix {
    Box::into_raw(Box::new(RotocalMatrix(m)))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains an interior NUL"))
}

/// Message for the last failed call on this thread, or NULL if the last call
/// succeeded. Release with [`rotocal_string_free`].
#[no_mangle]
pub extern "C" fn rotocal_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_deref() {
        Some(msg) => CString::new(msg.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must come from this library and not have been freed already. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn rotocal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rotocal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a `rows × cols` matrix from row-major `data`, or zeros when `data` is NULL.
///
/// # Safety
/// `data`, when non-null, must point to `rows * cols` doubles. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut RotocalMatrix,
) -> RotocalStatus {
    guard(|| {
        let len = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        let m = if data.is_null() {
            Matrix::zeros(rows, cols)
        } else {
            Matrix::new(rows, cols, std::slice::from_raw_parts(data, len).to_vec())?
        };
        put(out, handle(m), "out")
    })
}

/// # Safety
/// `m` must come from this library and not have been freed already. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn rotocal_matrix_free(m: *mut RotocalMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Row count; 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rotocal_matrix_rows(m: *const RotocalMatrix) -> usize {
    m.as_ref().map_or(0, |h| h.0.rows())
}

/// Column count; 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rotocal_matrix_cols(m: *const RotocalMatrix) -> usize {
    m.as_ref().map_or(0, |h| h.0.cols())
}

/// Copies the row-major entries into `out`, which must hold exactly `len = rows * cols` doubles.
///
/// # Safety
/// `m` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rotocal_matrix_copy_data(m: *const RotocalMatrix, out: *mut f64, len: usize) -> RotocalStatus {
    guard(|| {
        let m = matrix_ref(m, "matrix")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != m.data().len() {
            return Err(invalid(format!("buffer holds {len} values, matrix has {}", m.data().len())));
        }
        ptr::copy_nonoverlapping(m.data().as_ptr(), out, len);
        Ok(())
    })
}

/// `‖MᵀM − I‖_F` of a square matrix.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_orthogonality_error(m: *const RotocalMatrix, out: *mut f64) -> RotocalStatus {
    guard(|| {
        let m = matrix_ref(m, "matrix")?;
        if !m.is_square() {
            return Err(invalid(format!("matrix is {}x{}, not square", m.rows(), m.cols())));
        }
        put(out, m.orthogonality_error(), "out")
    })
}

/// Random sign Hadamard rotation of size `n` (a power of two).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_random_hadamard(n: usize, seed: u64, out: *mut *mut RotocalMatrix) -> RotocalStatus {
    guard(|| put(out, handle(random_hadamard(n, seed)?), "out"))
}

/// Orthogonal factor of the Householder QR of a square matrix, with `diag(R) ≥ 0`.
///
/// # Safety
/// `a` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_householder_q(a: *const RotocalMatrix, out: *mut *mut RotocalMatrix) -> RotocalStatus {
    guard(|| {
        let a = matrix_ref(a, "a")?;
        let q = householder_qr(a, &FlopCounter::new())?.q;
        put(out, handle(q), "out")
    })
}

/// `t × c` Laplace(0, b) draws determined by `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_sample_laplace(
    b: f64,
    t: usize,
    c: usize,
    seed: u64,
    out: *mut *mut RotocalMatrix,
) -> RotocalStatus {
    guard(|| {
        let batch = sample_laplace(&LaplaceModel::new(b)?, t, c, seed)?;
        put(out, handle(batch.tokens), "out")
    })
}

/// Reads a tensor file. The stored dtype is written to `dtype_out` when it is non-null.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` writable, `dtype_out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_tensor_read(
    path: *const c_char,
    out: *mut *mut RotocalMatrix,
    dtype_out: *mut RotocalDtype,
) -> RotocalStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (m, dtype) = read_tensor(&path)?;
        if !dtype_out.is_null() {
            dtype_out.write(match dtype {
                Dtype::F32 => RotocalDtype::F32,
                Dtype::F64 => RotocalDtype::F64,
            });
        }
        put(out, handle(m), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `m` a live handle.
#[no_mangle]
pub unsafe extern "C" fn rotocal_tensor_write(
    path: *const c_char,
    m: *const RotocalMatrix,
    dtype: RotocalDtype,
) -> RotocalStatus {
    guard(|| {
        let path = path_arg(path)?;
        let m = matrix_ref(m, "matrix")?;
        let dtype = match dtype {
            RotocalDtype::F32 => Dtype::F32,
            RotocalDtype::F64 => Dtype::F64,
        };
        Ok(write_tensor(&path, m, dtype)?)
    })
}

/// Per-token asymmetric fake-quantization mse of `x·r` at `bits`; `r` may be NULL for the identity.
///
/// # Safety
/// `x` must be a live handle, `r` NULL or a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_quant_mse(
    x: *const RotocalMatrix,
    r: *const RotocalMatrix,
    bits: u8,
    out: *mut f64,
) -> RotocalStatus {
    guard(|| {
        let x = matrix_ref(x, "x")?;
        let cfg = QuantConfig::new(bits)?;
        let mse = match r.as_ref() {
            Some(r) => rotocal::quantizer::quant_error_of_rotation(x, &r.0, &cfg)?,
            None => fake_quantize(x, &cfg)?.mse,
        };
        put(out, mse, "out")
    })
}

/// Number of entries of `x` with magnitude above `tau`.
///
/// # Safety
/// `x` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_count_outliers(x: *const RotocalMatrix, tau: f64, out: *mut u64) -> RotocalStatus {
    guard(|| {
        let x = matrix_ref(x, "x")?;
        put(out, total_outliers(x, tau)?, "out")
    })
}

/// Writes the library defaults into `out`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_config_default(out: *mut RotocalCalibrationConfig) -> RotocalStatus {
    guard(|| {
        let d = CalibrationConfig::default();
        let cfg = RotocalCalibrationConfig {
            objective: RotocalObjective::Whip,
            optimizer: RotocalOptimizer::QrSgd,
            lr: d.optimizer.lr,
            momentum: OptimizerKind::new(OptimizerVariant::QrMomentumSgd, d.optimizer.lr).momentum_beta,
            epochs: d.epochs,
            batch_size: d.batch_size,
            token_sample_ratio: d.token_sample_ratio,
            max_iters: d.max_iters.unwrap_or(0),
            bits: d.eval_quant.bits,
            tau_outlier: 0.0,
            seed: d.seed,
        };
        put(out, cfg, "out")
    })
}

fn to_config(c: &RotocalCalibrationConfig) -> Result<CalibrationConfig, Failure> {
    let eval_quant = QuantConfig::new(c.bits)?;
    let objective = match c.objective {
        RotocalObjective::Whip => ObjectiveKind::Whip,
        RotocalObjective::Variance => ObjectiveKind::Variance,
        RotocalObjective::Kurtosis => ObjectiveKind::Kurtosis,
        RotocalObjective::QuantLoss => ObjectiveKind::QuantLoss { quant_cfg: eval_quant },
    };
    let variant = match c.optimizer {
        RotocalOptimizer::QrSgd => OptimizerVariant::QrSgd,
        RotocalOptimizer::QrMomentumSgd => OptimizerVariant::QrMomentumSgd,
        RotocalOptimizer::QrAdam => OptimizerVariant::QrAdam,
        RotocalOptimizer::CayleySgd => OptimizerVariant::CayleySgd,
    };
    let mut optimizer = OptimizerKind::new(variant, c.lr);
    if variant != OptimizerVariant::QrSgd {
        optimizer.momentum_beta = c.momentum;
    }
    let cfg = CalibrationConfig {
        objective,
        optimizer,
        max_iters: (c.max_iters > 0).then_some(c.max_iters),
        token_sample_ratio: c.token_sample_ratio,
        seed: c.seed,
        batch_size: c.batch_size,
        epochs: c.epochs,
        tau_outlier: if c.tau_outlier > 0.0 {
            OutlierThreshold::Fixed(c.tau_outlier)
        } else {
            OutlierThreshold::Auto
        },
        eval_quant,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Calibrates a rotation for the activation tokens in `x` (rows are tokens).
///
/// On success writes the rotation to `rotation_out` and, when
/// `report_json_out` is non-null, the JSON report. On
/// [`RotocalStatus::Divergence`] no rotation is returned, but the partial
/// report is still written to `report_json_out` when one is available.
///
/// # Safety
/// `x` and `cfg` must be valid; `rotation_out` writable; `report_json_out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_calibrate(
    x: *const RotocalMatrix,
    cfg: *const RotocalCalibrationConfig,
    rotation_out: *mut *mut RotocalMatrix,
    report_json_out: *mut *mut c_char,
) -> RotocalStatus {
    guard(|| {
        let x = matrix_ref(x, "x")?;
        let cfg = to_config(cfg.as_ref().ok_or_else(|| null("cfg"))?)?;
        if rotation_out.is_null() {
            return Err(null("rotation_out"));
        }
        let batch = rotocal::ActivationBatch::synthetic(x.clone())?;
        match calibrate(&batch, &cfg) {
            Ok((r, mut report)) => {
                report.wall_time_seconds = None;
                if !report_json_out.is_null() {
                    report_json_out.write(c_string(ReportFile::new(report).to_json()?)?);
                }
                rotation_out.write(handle(r));
                Ok(())
            }
            Err(Error::Divergence { step, loss, mut partial }) => {
                partial.wall_time_seconds = None;
                let msg = format!("calibration diverged at step {step}: loss {loss}");
                if !report_json_out.is_null() {
                    report_json_out.write(c_string(ReportFile::new(*partial).to_json()?)?);
                }
                Err(Failure(RotocalStatus::Divergence, msg))
            }
            Err(e) => Err(e.into()),
        }
    })
}

/// Runs the computational-invariance suite on a toy transformer block.
///
/// Writes the worst relative difference to `worst_out` and returns
/// [`RotocalStatus::InvarianceFailure`] if it exceeds the tolerance.
///
/// # Safety
/// `worst_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rotocal_invariance_suite(
    seed: u64,
    hidden: usize,
    heads: usize,
    seeds: usize,
    worst_out: *mut f64,
) -> RotocalStatus {
    guard(|| {
        if worst_out.is_null() {
            return Err(null("worst_out"));
        }
        let report = invariance_suite_with(&SuiteConfig {
            seeds,
            ..SuiteConfig::new(seed, hidden, heads)
        })?;
        worst_out.write(report.worst_rel_diff);
        if report.passed {
            Ok(())
        } else {
            Err(Failure(
                RotocalStatus::InvarianceFailure,
                format!(
                    "worst relative diff {:e} in {} exceeds {:e}",
                    report.worst_rel_diff, report.worst_check, report.tolerance
                ),
            ))
        }
    })
}
