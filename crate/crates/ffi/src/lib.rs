//! C ABI over the edter detector.
//!
//! Models and edge maps are opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call
//! returns an [`EdterStatus`]; on failure, [`edter_last_error`] describes
//! the most recent error on the calling thread. Images are channel-first
//! `3 x H x W` doubles in `[0, 1]`.

use edter::eval::{evaluate, EvalReport};
use edter::io::{checkpoint, dataset, epfm, netpbm, synth};
use edter::pipeline::{EdgeMap, Edter, ModelConfig};
use edter::{Error, Tensor};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdterStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Usage = 3,
    Config = 4,
    Input = 5,
    Shape = 6,
    Parse = 7,
    BadMagic = 8,
    Version = 9,
    DigestMismatch = 10,
    Truncated = 11,
    Numeric = 12,
    Io = 13,
    Panic = 14,
}

impl From<&Error> for EdterStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } | Error::Partition { .. } => EdterStatus::Shape,
            Error::Numeric(_) => EdterStatus::Numeric,
            Error::Config(_) => EdterStatus::Config,
            Error::Usage(_) => EdterStatus::Usage,
            Error::Input(_) => EdterStatus::Input,
            Error::Parse { .. } => EdterStatus::Parse,
            Error::BadMagic { .. } => EdterStatus::BadMagic,
            Error::Version { .. } => EdterStatus::Version,
            Error::DigestMismatch => EdterStatus::DigestMismatch,
            Error::Truncated { .. } => EdterStatus::Truncated,
            Error::Io { .. } => EdterStatus::Io,
        }
    }
}

/// Opaque model handle.
pub struct EdterModel(Edter);

/// Opaque edge-map handle.
pub struct EdterEdgeMap(EdgeMap);

/// Dataset-level benchmark scores.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EdterScores {
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
}

impl From<&EvalReport> for EdterScores {
    fn from(r: &EvalReport) -> Self {
        EdterScores {
            ods: r.ods,
            ods_threshold: r.ods_threshold,
            ois: r.ois,
            ap: r.ap,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Null(&'static str),
    Utf8,
    Err(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Err(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EdterStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdterStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null argument: {what}"));
            EdterStatus::NullArgument
        }
        Ok(Err(Fail::Utf8)) => {
            set_error("path is not valid UTF-8".into());
            EdterStatus::InvalidUtf8
        }
        Ok(Err(Fail::Err(e))) => {
            set_error(e.to_string());
            EdterStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            EdterStatus::Panic
        }
    }
}

unsafe fn to_path(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| Fail::Utf8)
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn edter_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn edter_status_string(status: EdterStatus) -> *const c_char {
    let s: &'static CStr = match status {
        EdterStatus::Ok => c"ok",
        EdterStatus::NullArgument => c"null argument",
        EdterStatus::InvalidUtf8 => c"invalid UTF-8",
        EdterStatus::Usage => c"usage error",
        EdterStatus::Config => c"configuration error",
        EdterStatus::Input => c"invalid input",
        EdterStatus::Shape => c"dimension mismatch",
        EdterStatus::Parse => c"parse error",
        EdterStatus::BadMagic => c"bad magic",
        EdterStatus::Version => c"unsupported version",
        EdterStatus::DigestMismatch => c"config digest mismatch",
        EdterStatus::Truncated => c"truncated file",
        EdterStatus::Numeric => c"numeric failure",
        EdterStatus::Io => c"I/O error",
        EdterStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Loads an "EDTR" checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edter_model_load(path: *const c_char, out: *mut *mut EdterModel) -> EdterStatus {
    guard(|| {
        let p = to_path(path, "path")?;
        out_ptr(out, EdterModel(checkpoint::load(&p, None)?))
    })
}

/// Randomly initialized desk-scale model on `size x size` inputs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edter_model_new_toy(size: u32, seed: u64, out: *mut *mut EdterModel) -> EdterStatus {
    guard(|| {
        let cfg = ModelConfig::toy(size as usize);
        cfg.validate()?;
        out_ptr(out, EdterModel(Edter::new(&cfg, seed)?))
    })
}

/// Writes the model as an "EDTR" checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn edter_model_save(model: *const EdterModel, path: *const c_char) -> EdterStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let p = to_path(path, "path")?;
        Ok(checkpoint::save(&p, &m.0)?)
    })
}

/// Configured input extent.
///
/// # Safety
/// `model` must come from this library; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn edter_model_image_size(
    model: *const EdterModel,
    height: *mut u32,
    width: *mut u32,
) -> EdterStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if height.is_null() || width.is_null() {
            return Err(Fail::Null("height/width"));
        }
        let (h, w) = m.0.cfg().image_size;
        *height = h as u32;
        *width = w as u32;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn edter_model_free(model: *mut EdterModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn image(pixels: *const f64, height: u32, width: u32) -> Result<Tensor, Fail> {
    if pixels.is_null() {
        return Err(Fail::Null("pixels"));
    }
    let (h, w) = (height as usize, width as usize);
    let data = std::slice::from_raw_parts(pixels, 3 * h * w).to_vec();
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Edge map of one image.
///
/// # Safety
/// `pixels` must hold `3 * height * width` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edter_infer(
    model: *const EdterModel,
    pixels: *const f64,
    height: u32,
    width: u32,
    out: *mut *mut EdterEdgeMap,
) -> EdterStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let img = image(pixels, height, width)?;
        out_ptr(out, EdterEdgeMap(m.0.infer(&img)?))
    })
}

/// Edge map averaged over `n_scales` rescaled copies of the image.
///
/// # Safety
/// As [`edter_infer`]; `scales` must hold `n_scales` doubles.
#[no_mangle]
pub unsafe extern "C" fn edter_infer_multiscale(
    model: *const EdterModel,
    pixels: *const f64,
    height: u32,
    width: u32,
    scales: *const f64,
    n_scales: usize,
    out: *mut *mut EdterEdgeMap,
) -> EdterStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let img = image(pixels, height, width)?;
        if scales.is_null() {
            return Err(Fail::Null("scales"));
        }
        let s = std::slice::from_raw_parts(scales, n_scales);
        out_ptr(out, EdterEdgeMap(m.0.infer_multiscale(&img, s)?))
    })
}

/// Reads a PPM/PGM image and runs [`edter_infer`] on it.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edter_infer_file(
    model: *const EdterModel,
    path: *const c_char,
    out: *mut *mut EdterEdgeMap,
) -> EdterStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let img = netpbm::load_image(&to_path(path, "path")?)?;
        out_ptr(out, EdterEdgeMap(m.0.infer(&img)?))
    })
}

/// # Safety
/// `map` must come from this library; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn edter_edge_map_size(map: *const EdterEdgeMap, height: *mut u32, width: *mut u32) -> EdterStatus {
    guard(|| {
        let m = handle(map, "map")?;
        if height.is_null() || width.is_null() {
            return Err(Fail::Null("height/width"));
        }
        *height = m.0.height as u32;
        *width = m.0.width as u32;
        Ok(())
    })
}

/// Row-major probabilities, valid while the map lives; null for a null map.
///
/// # Safety
/// `map` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn edter_edge_map_data(map: *const EdterEdgeMap) -> *const f64 {
    map.as_ref().map_or(ptr::null(), |m| m.0.data.as_ptr())
}

/// Saves as 8-bit PGM, or raw "EPFM" floats when the path ends in `.epfm`.
///
/// # Safety
/// `map` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn edter_edge_map_save(map: *const EdterEdgeMap, path: *const c_char) -> EdterStatus {
    guard(|| {
        let m = handle(map, "map")?;
        let p = to_path(path, "path")?;
        if p.extension().is_some_and(|e| e == "epfm") {
            epfm::save(&p, &m.0)?;
        } else {
            netpbm::save_edge_map(&p, &m.0)?;
        }
        Ok(())
    })
}

/// # Safety
/// `map` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn edter_edge_map_free(map: *mut EdterEdgeMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Benchmarks a directory of predictions against annotator maps.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edter_evaluate_dirs(
    pred_dir: *const c_char,
    gt_dir: *const c_char,
    tol: f64,
    out: *mut EdterScores,
) -> EdterStatus {
    guard(|| {
        let items = dataset::load_predictions(&to_path(pred_dir, "pred_dir")?, &to_path(gt_dir, "gt_dir")?)?;
        let report = evaluate(&items, tol)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = EdterScores::from(&report);
        Ok(())
    })
}

/// Writes `n` synthetic scenes under `dir`.
///
/// # Safety
/// `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn edter_synthesize(dir: *const c_char, n: u32, seed: u64, size: u32) -> EdterStatus {
    guard(|| Ok(synth::gen_synthetic(&to_path(dir, "dir")?, n as usize, seed, size as usize)?))
}
