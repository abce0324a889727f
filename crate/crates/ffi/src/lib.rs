//! C ABI over the inference and bookkeeping parts of `fossilnet`.
//!
//! Every fallible call returns an [`FnStatus`]. On failure the message is kept
//! per thread and can be copied out with [`fn_last_error`]. Output pointers are
//! written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fossilnet::data::{decode_image, read_image, split_counts};
use fossilnet::eval::{metrics_from_cm, ConfusionMatrix};
use fossilnet::optim::LrSchedule;
use fossilnet::tensor::Tensor;
use fossilnet::train::Classifier;
use fossilnet::transfer::load_checkpoint;
use fossilnet::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Format = 5,
    Decode = 6,
    Validation = 7,
    State = 8,
    Numerical = 9,
    BufferTooSmall = 10,
    Panic = 99,
}

/// Opaque handle to a loaded checkpoint ready for inference.
pub struct FnModel {
    clf: Classifier,
}

/// Per-class scores. Undefined values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FnClassMetrics {
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FnStatus {
    match e {
        Error::Dimension(_) | Error::Shape { .. } => FnStatus::Dimension,
        Error::Argument(_) | Error::Precondition(_) => FnStatus::InvalidArgument,
        Error::State(_) => FnStatus::State,
        Error::Validation(_) => FnStatus::Validation,
        Error::Decode { .. } => FnStatus::Decode,
        Error::Format { .. } | Error::Csv(_) | Error::Json(_) => FnStatus::Format,
        Error::Numerical(_) => FnStatus::Numerical,
        Error::Io { .. } => FnStatus::Io,
    }
}

struct Fail(FnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FnStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn model<'a>(m: *const FnModel) -> Result<&'a FnModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Copy `s` NUL-terminated into `buf`. `needed` receives the full size
/// including the terminator even when the buffer is too small.
unsafe fn copy_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Fail> {
    let bytes = s.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || len < bytes.len() + 1 {
        return Err(Fail(
            FnStatus::BufferTooSmall,
            format!("need {} bytes, have {len}", bytes.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` bytes and `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fn_last_error(
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FnStatus {
    let msg = LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    match copy_str(&msg, buf, len, needed) {
        Ok(()) => FnStatus::Ok,
        Err(Fail(s, _)) => s,
    }
}

/// Load a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fn_model_load(path: *const c_char, out: *mut *mut FnModel) -> FnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = load_checkpoint(path_arg(path)?)?;
        let clf = Classifier::from_checkpoint(&ckpt)?;
        *out = Box::into_raw(Box::new(FnModel { clf }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`fn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fn_model_free(model: *mut FnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fn_model_num_classes(model: *const FnModel, out: *mut usize) -> FnStatus {
    guard(|| {
        let m = self::model(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.clf.classes().len();
        Ok(())
    })
}

/// Side length of the square network input in pixels.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fn_model_input_side(model: *const FnModel, out: *mut usize) -> FnStatus {
    guard(|| {
        let m = self::model(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.clf.input_side();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle, `buf` valid for `len` bytes and `needed`
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn fn_model_class_name(
    model: *const FnModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FnStatus {
    guard(|| {
        let classes = self::model(model)?.clf.classes();
        let name = classes.get(index).ok_or_else(|| {
            Fail(
                FnStatus::InvalidArgument,
                format!("class index {index} outside 0..{}", classes.len()),
            )
        })?;
        copy_str(name, buf, len, needed)
    })
}

unsafe fn write_probs(m: &FnModel, img: &Tensor, probs: *mut f64, len: usize) -> Result<(), Fail> {
    if probs.is_null() {
        return Err(null("probs"));
    }
    let k = m.clf.classes().len();
    if len < k {
        return Err(Fail(
            FnStatus::BufferTooSmall,
            format!("{k} classes but room for {len} scores"),
        ));
    }
    let p = m.clf.probabilities(img)?;
    std::slice::from_raw_parts_mut(probs, k).copy_from_slice(&p);
    Ok(())
}

/// Class probabilities for an interleaved 8-bit RGB image of `width * height`
/// pixels. The image is resized to the network input as during evaluation.
///
/// # Safety
/// `pixels` must hold `width * height * 3` bytes and `probs` room for `len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn fn_model_predict_rgb(
    model: *const FnModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    probs: *mut f64,
    len: usize,
) -> FnStatus {
    guard(|| {
        let m = self::model(model)?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(3))
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Fail(
                    FnStatus::InvalidArgument,
                    format!("bad image size {width}x{height}"),
                )
            })?;
        let mut ppm = format!("P6\n{width} {height}\n255\n").into_bytes();
        ppm.extend_from_slice(std::slice::from_raw_parts(pixels, n));
        let img = decode_image(&ppm)?;
        write_probs(m, &img, probs, len)
    })
}

/// Class probabilities for a PPM or PGM file.
///
/// # Safety
/// `path` must be NUL-terminated and `probs` have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fn_model_predict_file(
    model: *const FnModel,
    path: *const c_char,
    probs: *mut f64,
    len: usize,
) -> FnStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = read_image(path_arg(path)?)?;
        write_probs(m, &img, probs, len)
    })
}

/// Per-class `(train, validation, test)` sizes for `n` records.
///
/// # Safety
/// The three output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fn_split_counts(
    n: usize,
    train: *mut usize,
    val: *mut usize,
    test: *mut usize,
) -> FnStatus {
    guard(|| {
        if train.is_null() || val.is_null() || test.is_null() {
            return Err(null("output"));
        }
        (*train, *val, *test) = split_counts(n);
        Ok(())
    })
}

/// Staircase learning rate at `iteration`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fn_lr_at(
    start_lr: f64,
    decay_step: u64,
    decay_rate: f64,
    iteration: u64,
    out: *mut f64,
) -> FnStatus {
    guard(|| {
        let s = LrSchedule::new(start_lr, decay_step, decay_rate)?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.lr_at(iteration);
        Ok(())
    })
}

/// Scores from a row-major `k * k` confusion matrix (rows are true classes).
///
/// # Safety
/// `counts` must hold `k * k` values, `per_class` room for `k` entries and
/// `accuracy` be writable.
#[no_mangle]
pub unsafe extern "C" fn fn_metrics_from_cm(
    counts: *const u64,
    k: usize,
    per_class: *mut FnClassMetrics,
    accuracy: *mut f64,
) -> FnStatus {
    guard(|| {
        if counts.is_null() || per_class.is_null() || accuracy.is_null() {
            return Err(null("argument"));
        }
        if k == 0 {
            return Err(Fail(FnStatus::InvalidArgument, "k must be positive".into()));
        }
        let flat = std::slice::from_raw_parts(counts, k * k);
        let cm = ConfusionMatrix {
            counts: flat.chunks(k).map(|r| r.to_vec()).collect(),
            classes: (0..k).map(|i| i.to_string()).collect(),
        };
        let report = metrics_from_cm(&cm)?;
        let out = std::slice::from_raw_parts_mut(per_class, k);
        for (o, c) in out.iter_mut().zip(&report.per_class) {
            *o = FnClassMetrics {
                support: c.support,
                precision: c.precision.unwrap_or(f64::NAN),
                recall: c.recall.unwrap_or(f64::NAN),
                f1: c.f1.unwrap_or(f64::NAN),
            };
        }
        *accuracy = report.accuracy;
        Ok(())
    })
}
