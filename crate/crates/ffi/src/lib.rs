//! C ABI over the multicos segmentation library.
//!
//! Models are opaque handles. Every fallible call returns an [`McStatus`];
//! the message of the last failure on the calling thread is available from
//! [`mc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use multicos::autodiff::{resize_tensor, InterpMode};
use multicos::checkpoint::Checkpoint;
use multicos::config::{AuxSource, RunConfig};
use multicos::eval::predict_batch;
use multicos::metrics::{image_metrics, MetricReport, Pair};
use multicos::model::Model;
use multicos::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    MalformedFile = 5,
    Config = 6,
    MissingModality = 7,
    Internal = 8,
}

/// A segmentation model together with the run configuration it came from.
pub struct McModel {
    config: RunConfig,
    model: Model,
}

/// Dataset-style metrics of one prediction against a binary mask.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct McMetrics {
    pub mae: f64,
    pub f_max: f64,
    pub f_mean: f64,
    pub f_adaptive: f64,
    pub e_max: f64,
    pub e_mean: f64,
    pub s: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> McStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } | Error::InvalidDimensions(_) => {
            McStatus::ShapeMismatch
        }
        Error::Io(_) => McStatus::Io,
        Error::MalformedHeader(_) | Error::Json(_) => McStatus::MalformedFile,
        Error::Config(_) => McStatus::Config,
        Error::MissingModality(_) => McStatus::MissingModality,
        _ => McStatus::InvalidArgument,
    }
}

enum Fail {
    Status(McStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> McStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            McStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(&msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            McStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(McStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(McStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const McModel) -> Result<&'a McModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn publish(out: *mut *mut McModel, m: McModel) {
    unsafe { *out = Box::into_raw(Box::new(m)) };
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_model_load(path: *const c_char, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        let model = ckpt.model()?;
        publish(
            out,
            McModel {
                config: ckpt.config,
                model,
            },
        );
        Ok(())
    })
}

/// Builds a freshly initialized model from a named profile (`toy`,
/// `compact` or `paper`).
///
/// # Safety
/// `profile` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_model_new(profile: *const c_char, seed: u64, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if profile.is_null() {
            return Err(null("profile"));
        }
        let name = CStr::from_ptr(profile)
            .to_str()
            .map_err(|_| Fail::Status(McStatus::InvalidArgument, "profile is not UTF-8".into()))?;
        let mut config = RunConfig::profile(name)?;
        config.seed = seed;
        let model = Model::new(&config.model, seed)?;
        publish(out, McModel { config, model });
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mc_model_free(model: *mut McModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model's weights to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mc_model_save(model: *const McModel, path: *const c_char) -> McStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path)?;
        Checkpoint::capture(&m.config, &m.model, None, 0).save(&path)?;
        Ok(())
    })
}

/// Side length the model works at; inputs of other sizes are resampled.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_model_image_size(model: *const McModel, out: *mut usize) -> McStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.config.image_size;
        Ok(())
    })
}

/// Whether the model can run without an auxiliary image.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_model_accepts_missing_aux(model: *const McModel, out: *mut bool) -> McStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.ckler.is_some() || m.model.config.mode == multicos::config::Mode::RgbOnly;
        Ok(())
    })
}

/// Foreground probabilities for one image.
///
/// `rgb` holds `3 * height * width` values in `[0, 1]`, planar
/// channel-major. `aux` holds `height * width` values or is null to let the
/// knowledge learner synthesize it. `out` receives `height * width`
/// probabilities.
///
/// # Safety
/// All non-null buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mc_model_predict(
    model: *const McModel,
    rgb: *const f64,
    aux: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> McStatus {
    guard(|| {
        let m = model_ref(model)?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if height == 0 || width == 0 {
            return Err(Fail::Status(McStatus::ShapeMismatch, "image extent must be positive".into()));
        }
        let plane = height * width;
        let rgb = Tensor::new(&[1, 3, height, width], std::slice::from_raw_parts(rgb, 3 * plane).to_vec())?;
        let aux = (!aux.is_null())
            .then(|| Tensor::new(&[1, 1, height, width], std::slice::from_raw_parts(aux, plane).to_vec()))
            .transpose()?;
        let s = m.model.config.image_size;
        let resize = |t: &Tensor| resize_tensor(t, s, s, InterpMode::Bilinear);
        let source = match (&aux, m.config.train.aux_source) {
            (None, AuxSource::Real) if m.model.ckler.is_some() => AuxSource::Pseudo,
            (_, src) => src,
        };
        let probs = predict_batch(&m.model, &resize(&rgb)?, aux.as_ref().map(resize).transpose()?.as_ref(), source)?;
        let full = resize_tensor(&probs, height, width, InterpMode::Bilinear)?;
        let dst = std::slice::from_raw_parts_mut(out, plane);
        for (d, v) in dst.iter_mut().zip(full.data()) {
            *d = v.clamp(0.0, 1.0);
        }
        Ok(())
    })
}

/// Scores a prediction in `[0, 1]` against a binary mask, both
/// `height * width` row-major.
///
/// # Safety
/// Both buffers must hold `height * width` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mc_metrics(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    out: *mut McMetrics,
) -> McStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let n = height * width;
        let pair = Pair::new(
            std::slice::from_raw_parts(pred, n),
            std::slice::from_raw_parts(gt, n),
            height,
            width,
        )?;
        let r = MetricReport::aggregate("ffi", &[image_metrics(&pair)])?;
        *out = McMetrics {
            mae: r.m,
            f_max: r.f_max,
            f_mean: r.f_mean,
            f_adaptive: r.f_adp,
            e_max: r.e_max,
            e_mean: r.e_mean,
            s: r.s,
        };
        Ok(())
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code; unknown codes are reported as such.
#[no_mangle]
pub extern "C" fn mc_status_str(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null pointer",
        2 => c"invalid argument",
        3 => c"shape mismatch",
        4 => c"i/o error",
        5 => c"malformed file",
        6 => c"configuration error",
        7 => c"missing modality",
        8 => c"internal error",
        _ => c"unknown status",
    };
    s.as_ptr()
}
