//! C interface to the toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_load` and
//! released by the matching `*_free`. Every fallible call returns a
//! [`DadStatus`]; on failure the message is available from
//! [`dad_last_error_message`] on the same thread. Images are passed as
//! `f32` pixels in `[N, C, H, W]` order with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dad_core::adversary::{verify_cache, CacheFile};
use dad_core::diagnostics::{generalization_term, transport};
use dad_core::discretizer::Discretizer;
use dad_core::model::{predict, Classifier, Model};
use dad_core::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Unsupported = 6,
    Panic = 7,
    Other = 8,
}

/// A trained classifier.
pub struct DadModel(Model);

/// A trained discretizer.
pub struct DadDiscretizer(Discretizer);

/// A loaded adversarial-example cache.
pub struct DadCache(CacheFile);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DadStatus {
    match e {
        Error::MissingPath(_) | Error::Io(_) => DadStatus::Io,
        Error::Format(_) | Error::MalformedRecord { .. } => DadStatus::Format,
        Error::Shape { .. } => DadStatus::Shape,
        Error::Unsupported(_) => DadStatus::Unsupported,
        Error::InvalidArgument(_) | Error::Config(_) | Error::Empty(_) | Error::LabelOutOfRange { .. } => {
            DadStatus::InvalidArgument
        }
        _ => DadStatus::Other,
    }
}

struct Fail(DadStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DadStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DadStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DadStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DadStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(DadStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn images(pixels: *const f32, n: usize, shape: [usize; 3]) -> Result<Tensor, Fail> {
    let len = n * shape.iter().product::<usize>();
    if pixels.is_null() && len > 0 {
        return Err(null("pixels"));
    }
    let data: Vec<f64> =
        if len == 0 { vec![] } else { std::slice::from_raw_parts(pixels, len).iter().map(|&v| v as f64).collect() };
    Ok(Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?)
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 when there is none.
#[no_mangle]
pub unsafe extern "C" fn dad_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

#[no_mangle]
pub unsafe extern "C" fn dad_model_load(path: *const c_char, out: *mut *mut DadModel) -> DadStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let mut m = Model::load(path_arg(path)?)?;
        m.freeze();
        *out = Box::into_raw(Box::new(DadModel(m)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dad_model_free(model: *mut DadModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[channels, height, width]` into `shape`.
#[no_mangle]
pub unsafe extern "C" fn dad_model_input_shape(model: *const DadModel, shape: *mut usize) -> DadStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&m.0.input_shape);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dad_model_num_classes(model: *const DadModel, out: *mut usize) -> DadStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = m.0.num_classes;
        Ok(())
    })
}

/// Top-1 labels for `n` images; `labels` holds `n` entries.
#[no_mangle]
pub unsafe extern "C" fn dad_model_predict(
    model: *const DadModel,
    pixels: *const f32,
    n: usize,
    labels: *mut usize,
) -> DadStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if labels.is_null() && n > 0 {
            return Err(null("labels"));
        }
        let x = images(pixels, n, m.0.input_shape)?;
        let pred = predict(&m.0, &x)?;
        if n > 0 {
            std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&pred);
        }
        Ok(())
    })
}

/// Logits for `n` images into `logits`, which holds `n * num_classes` values.
#[no_mangle]
pub unsafe extern "C" fn dad_model_logits(
    model: *const DadModel,
    pixels: *const f32,
    n: usize,
    logits: *mut f64,
    len: usize,
) -> DadStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let need = n * m.0.num_classes;
        if len != need {
            return Err(Fail(DadStatus::Shape, format!("logits buffer holds {len} values, need {need}")));
        }
        if logits.is_null() && need > 0 {
            return Err(null("logits"));
        }
        let out = m.0.logits(&images(pixels, n, m.0.input_shape)?)?;
        if need > 0 {
            std::slice::from_raw_parts_mut(logits, need).copy_from_slice(out.data());
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dad_discretizer_load(path: *const c_char, out: *mut *mut DadDiscretizer) -> DadStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let d = Discretizer::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DadDiscretizer(d)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dad_discretizer_free(disc: *mut DadDiscretizer) {
    if !disc.is_null() {
        drop(Box::from_raw(disc));
    }
}

/// Replaces `n` images of shape `[channels, height, width]` by their
/// reconstructions; `out` has the same size as the input.
#[no_mangle]
pub unsafe extern "C" fn dad_discretize(
    disc: *const DadDiscretizer,
    pixels: *const f32,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f32,
) -> DadStatus {
    guard(|| {
        let d = disc.as_ref().ok_or_else(|| null("discretizer"))?;
        let x = images(pixels, n, [channels, height, width])?;
        if out.is_null() && !x.is_empty() {
            return Err(null("out"));
        }
        let y = d.0.discretize(&x)?;
        if !y.is_empty() {
            let dst = std::slice::from_raw_parts_mut(out, y.len());
            for (o, v) in dst.iter_mut().zip(y.data()) {
                *o = *v as f32;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dad_cache_load(path: *const c_char, out: *mut *mut DadCache) -> DadStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let c = CacheFile::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DadCache(c)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dad_cache_free(cache: *mut DadCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Total and accepted record counts.
#[no_mangle]
pub unsafe extern "C" fn dad_cache_counts(cache: *const DadCache, records: *mut usize, accepted: *mut usize) -> DadStatus {
    guard(|| {
        let c = cache.as_ref().ok_or_else(|| null("cache"))?;
        *out_arg(records, "records")? = c.0.records.len();
        *out_arg(accepted, "accepted")? = c.0.accepted();
        Ok(())
    })
}

/// Re-classifies every accepted record with `teacher`; `mismatches` receives
/// the number that no longer match their label.
#[no_mangle]
pub unsafe extern "C" fn dad_cache_verify(
    cache: *const DadCache,
    teacher: *const DadModel,
    mismatches: *mut usize,
) -> DadStatus {
    guard(|| {
        let c = cache.as_ref().ok_or_else(|| null("cache"))?;
        let t = teacher.as_ref().ok_or_else(|| null("teacher"))?;
        *out_arg(mismatches, "mismatches")? = verify_cache(&c.0, &t.0)?;
        Ok(())
    })
}

/// Optimal transport cost between masses `a` (length `n`) and `b` (length
/// `m`) under the row-major `n * m` cost matrix.
#[no_mangle]
pub unsafe extern "C" fn dad_transport_cost(
    a: *const f64,
    n: usize,
    b: *const f64,
    m: usize,
    cost: *const f64,
    out: *mut f64,
) -> DadStatus {
    guard(|| {
        if a.is_null() || b.is_null() || cost.is_null() {
            return Err(null("input"));
        }
        let out = out_arg(out, "out")?;
        let a = std::slice::from_raw_parts(a, n);
        let b = std::slice::from_raw_parts(b, m);
        let c: Vec<Vec<f64>> = std::slice::from_raw_parts(cost, n * m).chunks(m.max(1)).map(<[f64]>::to_vec).collect();
        *out = transport(a, b, &c)?.cost;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dad_generalization_term(hypotheses: u64, n: u64, beta: f64, out: *mut f64) -> DadStatus {
    guard(|| {
        *out_arg(out, "out")? = generalization_term(hypotheses, n, beta)?;
        Ok(())
    })
}
