//! C ABI over `bsefuse`.
//!
//! Models are opaque handles created by `bsefuse_model_*` constructors and
//! released with [`bsefuse_model_free`]. Every fallible call returns a
//! [`BsefuseStatus`]; on failure [`bsefuse_last_error`] describes the error
//! for the calling thread. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bsefuse::checkpoint::{checkpoint_load, checkpoint_save};
use bsefuse::dataio::stack::standardize;
use bsefuse::gradcam::{gradcam_ensemble, gradcam_single};
use bsefuse::metrics::{compute_metrics, patient_vote, ttest::welch_ttest, ConfusionMatrix};
use bsefuse::model::Model;
use bsefuse::nn::{load_backbone, InflationPolicy, WeightSource};
use bsefuse::{Error, ErrorKind, Label, Modality};
use candle_core::{Device, Tensor};
use ndarray::Array3;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsefuseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Runtime = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// Input plane layout.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsefuseModality {
    /// Grayscale B-mode replicated to 3 channels.
    B = 0,
    /// Elastography RGB.
    Se = 1,
    /// B-mode plus elastography RGB, 4 channels.
    Bse = 2,
}

/// Binary classification metrics; `has_*` is 0 when the denominator is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BsefuseMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub has_precision: u8,
    pub has_specificity: u8,
    pub has_sensitivity: u8,
    pub has_f1: u8,
}

/// Opaque model handle.
pub struct BsefuseModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> BsefuseStatus {
    match e {
        Error::CheckpointCorrupt(_) | Error::CheckpointMismatch(_) | Error::CheckpointVersion { .. } => {
            BsefuseStatus::Checkpoint
        }
        Error::Shape(_) | Error::ClassOutOfRange(_) | Error::InvalidChannels(_) => BsefuseStatus::InvalidArgument,
        _ => match e.kind() {
            ErrorKind::Config => BsefuseStatus::Config,
            ErrorKind::Data => BsefuseStatus::Data,
            ErrorKind::Runtime => BsefuseStatus::Runtime,
        },
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), BsefuseStatusError>>(f: F) -> BsefuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BsefuseStatus::Ok
        }
        Ok(Err(BsefuseStatusError(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside bsefuse");
            BsefuseStatus::Panic
        }
    }
}

struct BsefuseStatusError(BsefuseStatus, String);

impl From<Error> for BsefuseStatusError {
    fn from(e: Error) -> Self {
        BsefuseStatusError(status_of(&e), e.to_string())
    }
}

impl From<candle_core::Error> for BsefuseStatusError {
    fn from(e: candle_core::Error) -> Self {
        BsefuseStatusError(BsefuseStatus::Runtime, e.to_string())
    }
}

fn null(what: &str) -> BsefuseStatusError {
    BsefuseStatusError(BsefuseStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> BsefuseStatusError {
    BsefuseStatusError(BsefuseStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, BsefuseStatusError> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], BsefuseStatusError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn modality(m: BsefuseModality) -> Modality {
    match m {
        BsefuseModality::B => Modality::B,
        BsefuseModality::Se => Modality::Se,
        BsefuseModality::Bse => Modality::Bse,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bsefuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the calling thread's last failure; empty after a success.
/// Valid until the next bsefuse call on this thread.
#[no_mangle]
pub extern "C" fn bsefuse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint written by the `bsefuse` CLI or `bsefuse_model_save`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_model_load(path: *const c_char, out: *mut *mut BsefuseModel) -> BsefuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let (model, _) = checkpoint_load(&path)?;
        *out = Box::into_raw(Box::new(BsefuseModel { model }));
        Ok(())
    })
}

/// Build a single backbone (`"alexnet"` or `"resnet18"`) with deterministic
/// seeded weights and a 2-way head, inflated to `channels` inputs.
///
/// # Safety
/// `arch` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_model_new_seeded(
    arch: *const c_char,
    seed: u64,
    channels: u32,
    out: *mut *mut BsefuseModel,
) -> BsefuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let arch = str_arg(arch, "arch")?;
        let mut b = load_backbone(arch, &WeightSource::Seeded(seed))?;
        b.inflate_input_channels(channels as usize, InflationPolicy::ZeroInit)?;
        *out = Box::into_raw(Box::new(BsefuseModel { model: Model::Single(b) }));
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_model_free(model: *mut BsefuseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(m: *const BsefuseModel) -> Result<&'a BsefuseModel, BsefuseStatusError> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Number of input channels the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_model_input_channels(model: *const BsefuseModel, out: *mut u32) -> BsefuseStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.input_channels() as u32;
        Ok(())
    })
}

/// Save the model as a checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_model_save(model: *const BsefuseModel, path: *const c_char) -> BsefuseStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        checkpoint_save(&m.model, &path, Default::default())?;
        Ok(())
    })
}

/// Standardize `n` C×H×W samples of `[0,1]` planes into a batch tensor.
unsafe fn input_tensor(
    m: &BsefuseModel,
    data: *const f32,
    n: usize,
    h: usize,
    w: usize,
    plane: BsefuseModality,
) -> Result<Tensor, BsefuseStatusError> {
    let mode = modality(plane);
    let c = mode.channels();
    if c != m.model.input_channels() {
        return Err(invalid(format!(
            "modality has {c} channels, model expects {}",
            m.model.input_channels()
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(invalid("empty input"));
    }
    let len = n * c * h * w;
    let src = slice_arg(data, len, "data")?;
    let mut all = Vec::with_capacity(len);
    for chunk in src.chunks(c * h * w) {
        let mut a = Array3::from_shape_vec((c, h, w), chunk.to_vec()).expect("chunk length");
        standardize(&mut a, mode);
        all.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(all, (n, c, h, w), &Device::Cpu)?)
}

/// Class probabilities for `n` samples of `[0,1]` planes laid out as
/// N×C×H×W (row-major). Writes `n` rows of `[p_benign, p_malignant]` into
/// `probs`, which must hold `2 * n` doubles.
///
/// # Safety
/// `data` must hold `n*C*H*W` floats and `probs` `2*n` doubles.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_model_predict(
    model: *const BsefuseModel,
    data: *const f32,
    n: usize,
    height: usize,
    width: usize,
    plane: BsefuseModality,
    probs: *mut f64,
) -> BsefuseStatus {
    guard(|| {
        let m = model_ref(model)?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        let x = input_tensor(m, data, n, height, width, plane)?;
        let rows = m.model.probability_rows(&x)?;
        let out = std::slice::from_raw_parts_mut(probs, 2 * n);
        for (i, r) in rows.iter().enumerate() {
            out[2 * i] = r[0];
            out[2 * i + 1] = r[1];
        }
        Ok(())
    })
}

/// Grad-CAM heatmap for one sample. `target` is 0 (benign), 1 (malignant)
/// or -1 for the predicted class. Writes `height * width` normalized values
/// into `heatmap` and the explained class into `class_out`.
///
/// # Safety
/// `data` must hold `C*H*W` floats, `heatmap` `H*W` floats and `class_out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_model_gradcam(
    model: *const BsefuseModel,
    data: *const f32,
    height: usize,
    width: usize,
    plane: BsefuseModality,
    target: i32,
    heatmap: *mut f32,
    class_out: *mut u32,
) -> BsefuseStatus {
    guard(|| {
        let m = model_ref(model)?;
        if heatmap.is_null() {
            return Err(null("heatmap"));
        }
        let class_out = class_out.as_mut().ok_or_else(|| null("class_out"))?;
        let target = match target {
            -1 => None,
            0 | 1 => Some(target as usize),
            t => return Err(invalid(format!("target {t} must be -1, 0 or 1"))),
        };
        let x = input_tensor(m, data, 1, height, width, plane)?;
        let h = match &m.model {
            Model::Single(b) => gradcam_single(b, &x, target)?,
            Model::Ensemble(e) => gradcam_ensemble(e, &x, target)?,
        };
        let out = std::slice::from_raw_parts_mut(heatmap, height * width);
        for (o, v) in out.iter_mut().zip(h.grid.iter()) {
            *o = *v;
        }
        *class_out = h.target_class.index() as u32;
        Ok(())
    })
}

/// Patient-level vote over image labels (0 benign, 1 malignant); ties
/// resolve to malignant.
///
/// # Safety
/// `labels` must hold `n` bytes and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_patient_vote(labels: *const u8, n: usize, out: *mut u8) -> BsefuseStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let labels = slice_arg(labels, n, "labels")?
            .iter()
            .map(|&l| Label::from_index(l as usize))
            .collect::<Result<Vec<_>, _>>()?;
        *out = patient_vote(&labels)?.index() as u8;
        Ok(())
    })
}

/// Metrics of a confusion matrix with malignant as the positive class.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_compute_metrics(
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
    out: *mut BsefuseMetrics,
) -> BsefuseStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = compute_metrics(&ConfusionMatrix {
            tp: tp as usize,
            fp: fp as usize,
            tn: tn as usize,
            fn_: fn_ as usize,
        })?;
        let split = |v: Option<f64>| (v.unwrap_or(0.0), v.is_some() as u8);
        let (precision, has_precision) = split(m.precision);
        let (specificity, has_specificity) = split(m.specificity);
        let (sensitivity, has_sensitivity) = split(m.sensitivity);
        let (f1, has_f1) = split(m.f1);
        *out = BsefuseMetrics {
            accuracy: m.accuracy,
            precision,
            specificity,
            sensitivity,
            f1,
            has_precision,
            has_specificity,
            has_sensitivity,
            has_f1,
        };
        Ok(())
    })
}

/// Welch two-sample t-test; writes t, degrees of freedom and the two-sided
/// p-value.
///
/// # Safety
/// `a` and `b` must hold `na` and `nb` doubles; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_welch_ttest(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    t: *mut f64,
    df: *mut f64,
    p: *mut f64,
) -> BsefuseStatus {
    guard(|| {
        let (t, df, p) = (
            t.as_mut().ok_or_else(|| null("t"))?,
            df.as_mut().ok_or_else(|| null("df"))?,
            p.as_mut().ok_or_else(|| null("p"))?,
        );
        let r = welch_ttest(slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?)?;
        (*t, *df, *p) = (r.t, r.df, r.p);
        Ok(())
    })
}

/// Run the command-line interface with `argv[0..argc]` (including the
/// program name) and return its exit code.
///
/// # Safety
/// `argv` must hold `argc` valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn bsefuse_run_command(argc: c_int, argv: *const *const c_char) -> c_int {
    let args = match slice_arg(argv, argc.max(0) as usize, "argv") {
        Ok(a) => a,
        Err(e) => {
            set_error(&e.1);
            return bsefuse::cli::EXIT_USAGE;
        }
    };
    let mut owned = Vec::with_capacity(args.len());
    for &a in args {
        match str_arg(a, "argv entry") {
            Ok(s) => owned.push(s.to_string()),
            Err(e) => {
                set_error(&e.1);
                return bsefuse::cli::EXIT_USAGE;
            }
        }
    }
    catch_unwind(|| bsefuse::cli::run_command(owned)).unwrap_or(bsefuse::cli::EXIT_RUNTIME)
}
