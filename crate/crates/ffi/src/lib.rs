//! C ABI for the `mmal` crate.
//!
//! Every fallible function returns an [`MmalStatus`]. On failure the message
//! is kept per thread and can be read with [`mmal_last_error`]. Strings
//! handed out by the library must be released with [`mmal_string_free`],
//! worlds with [`mmal_world_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mmal::acquisition::{greedy_kcenter, margin_score};
use mmal::embedding::{EmbeddingBatch, EvalCounter};
use mmal::engine::{run_experiment, ExperimentConfig};
use mmal::world::{generate_world, load_world, write_world, GeneratedWorld, WorldSpec};
use mmal::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    Io = 5,
    Failed = 6,
    Panic = 7,
}

/// Opaque handle to a generated or loaded world.
pub struct MmalWorld {
    inner: GeneratedWorld,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MmalStatus {
    match err {
        Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Json(_) => MmalStatus::InvalidConfig,
        Error::Io { .. } | Error::Csv(_) | Error::OracleAccess(_) => MmalStatus::Io,
        Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::NonFinite(_)
        | Error::ZeroNorm
        | Error::DuplicateId(_)
        | Error::Empty(_) => MmalStatus::InvalidArgument,
        _ => MmalStatus::Failed,
    }
}

struct Fail(MmalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MmalStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mmal".into());
            MmalStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MmalStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MmalStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn json_err(e: serde_json::Error) -> Fail {
    Fail(MmalStatus::InvalidConfig, e.to_string())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mmal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mmal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a world from a JSON world spec.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmal_world_generate(spec_json: *const c_char, out: *mut *mut MmalWorld) -> MmalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: WorldSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?).map_err(json_err)?;
        let inner = generate_world(&spec)?;
        *out = Box::into_raw(Box::new(MmalWorld { inner }));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmal_world_load(dir: *const c_char, out: *mut *mut MmalWorld) -> MmalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_world(Path::new(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(MmalWorld { inner }));
        Ok(())
    })
}

/// # Safety
/// `world` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mmal_world_save(world: *const MmalWorld, dir: *const c_char) -> MmalStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        write_world(Path::new(str_arg(dir, "dir")?), &w.inner)?;
        Ok(())
    })
}

/// Pool records per modality, number of modalities and test pairs.
///
/// # Safety
/// `world` must be a live handle; each out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn mmal_world_shape(
    world: *const MmalWorld,
    pool_size: *mut usize,
    num_modalities: *mut usize,
    test_size: *mut usize,
) -> MmalStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        if let Some(p) = pool_size.as_mut() {
            *p = w.inner.pool.len();
        }
        if let Some(p) = num_modalities.as_mut() {
            *p = w.inner.pool.num_modalities();
        }
        if let Some(p) = test_size.as_mut() {
            *p = w.inner.test.len();
        }
        Ok(())
    })
}

/// Borrows the row-major raw features of one pool modality. The data stays
/// valid until the world is freed.
///
/// # Safety
/// `world` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmal_world_features(
    world: *const MmalWorld,
    modality: usize,
    data: *mut *const f64,
    rows: *mut usize,
    dim: *mut usize,
) -> MmalStatus {
    guard(|| {
        let w = world.as_ref().ok_or_else(|| null("world"))?;
        if data.is_null() || rows.is_null() || dim.is_null() {
            return Err(null("out"));
        }
        let pool = &w.inner.pool;
        if modality >= pool.num_modalities() {
            return Err(Fail(
                MmalStatus::InvalidArgument,
                format!("modality {modality} out of range ({} modalities)", pool.num_modalities()),
            ));
        }
        let f = pool.modality(modality);
        *data = f.as_flat().as_ptr();
        *rows = f.len();
        *dim = f.raw_dim();
        Ok(())
    })
}

/// # Safety
/// `world` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmal_world_free(world: *mut MmalWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Runs an experiment config and returns the result as JSON in `out_json`,
/// to be released with `mmal_string_free`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmal_run_experiment(config_json: *const c_char, out_json: *mut *mut c_char) -> MmalStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let cfg: ExperimentConfig = serde_json::from_str(str_arg(config_json, "config_json")?).map_err(json_err)?;
        let result = run_experiment(&cfg)?;
        let text = serde_json::to_string(&result).map_err(|e| Fail(MmalStatus::Failed, e.to_string()))?;
        *out_json = CString::new(text).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// Greedy k-center over `n` candidate rows given `s` annotated rows, both
/// row-major with `dim` columns. Writes up to `size` candidate row indices
/// to `out_ids` in pick order and their count to `out_len`.
///
/// # Safety
/// `candidates` must hold `n * dim` values, `annotated` `s * dim` values
/// (may be null when `s == 0`), `out_ids` room for `size` indices.
#[no_mangle]
pub unsafe extern "C" fn mmal_greedy_kcenter(
    candidates: *const f64,
    n: usize,
    annotated: *const f64,
    s: usize,
    dim: usize,
    size: usize,
    out_ids: *mut usize,
    out_len: *mut usize,
) -> MmalStatus {
    guard(|| {
        if out_ids.is_null() || out_len.is_null() {
            return Err(null("out"));
        }
        let cand = slice_arg(candidates, n * dim, "candidates")?;
        let ann = slice_arg(annotated, s * dim, "annotated")?;
        let cand = EmbeddingBatch::from_flat((0..n).collect(), dim, cand.to_vec())?;
        let ann = EmbeddingBatch::from_flat((0..s).collect(), dim, ann.to_vec())?;
        let coreset = greedy_kcenter(&cand, &ann, size, true, &EvalCounter::new())?;
        let out = std::slice::from_raw_parts_mut(out_ids, size);
        out[..coreset.ids.len()].copy_from_slice(&coreset.ids);
        *out_len = coreset.ids.len();
        Ok(())
    })
}

/// Gap between the two largest of `len` similarities.
///
/// # Safety
/// `similarities` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmal_margin_score(similarities: *const f64, len: usize, out: *mut f64) -> MmalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = margin_score(slice_arg(similarities, len, "similarities")?)?;
        Ok(())
    })
}
