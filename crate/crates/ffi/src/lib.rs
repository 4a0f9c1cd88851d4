//! C ABI over the newscnn library: load embeddings and checkpoints, run head
//! predictions, and call a few standalone utilities.
//!
//! Every fallible function returns a [`NewscnnStatus`]. On failure the
//! message is available from [`newscnn_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use newscnn::cli::gradsuite::{run_suite, SuiteOptions};
use newscnn::corpus::ArticleRecord;
use newscnn::losses::{gcd_km, GeoPair};
use newscnn::ndkit::Checkpoint;
use newscnn::netcore::Model;
use newscnn::textrepr::{article_matrix, load_embeddings, EmbeddingTable};
use newscnn::{Error, ErrorClass};

/// Result codes. Config, data and numerical failures share their values with
/// the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewscnnStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    InvalidUtf8 = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Word embedding table.
pub struct NewscnnEmbeddings {
    table: EmbeddingTable,
}

/// Trained text CNN with its heads.
pub struct NewscnnModel {
    model: Model,
    max_len: usize,
}

const DEFAULT_MAX_LEN: usize = 64;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(NewscnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.class() {
            ErrorClass::Config => NewscnnStatus::Config,
            ErrorClass::Data => NewscnnStatus::Data,
            ErrorClass::Numerical => NewscnnStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard<F>(f: F) -> NewscnnStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NewscnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            NewscnnStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(NewscnnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(NewscnnStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn newscnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn newscnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a text-format embedding table.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn newscnn_embeddings_load(path: *const c_char, out: *mut *mut NewscnnEmbeddings) -> NewscnnStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let table = load_embeddings(path)?;
        out.write(Box::into_raw(Box::new(NewscnnEmbeddings { table })));
        Ok(())
    })
}

/// Embedding dimension of a table.
///
/// # Safety
/// `emb` must come from [`newscnn_embeddings_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn newscnn_embeddings_dim(emb: *const NewscnnEmbeddings, out: *mut usize) -> NewscnnStatus {
    guard(|| write_out(out, deref(emb, "embeddings")?.table.dim(), "out"))
}

/// Releases a table; null is ignored.
///
/// # Safety
/// `emb` must come from [`newscnn_embeddings_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn newscnn_embeddings_free(emb: *mut NewscnnEmbeddings) {
    if !emb.is_null() {
        drop(Box::from_raw(emb));
    }
}

/// Loads a text CNN checkpoint written by `newscnn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_load(path: *const c_char, out: *mut *mut NewscnnModel) -> NewscnnStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::read(path)?;
        let model = Model::from_checkpoint(&ck)?;
        let max_len = ck.meta["extra"]["max_len"].as_u64().map_or(DEFAULT_MAX_LEN, |v| v as usize);
        out.write(Box::into_raw(Box::new(NewscnnModel { model, max_len })));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`newscnn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_free(model: *mut NewscnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of task heads.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_num_heads(model: *const NewscnnModel, out: *mut usize) -> NewscnnStatus {
    guard(|| write_out(out, deref(model, "model")?.model.heads.len(), "out"))
}

/// Index of the head for a task name (source, popularity, geolocation,
/// illustration).
///
/// # Safety
/// `model` must be a live handle, `task` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_head_index(
    model: *const NewscnnModel,
    task: *const c_char,
    out: *mut usize,
) -> NewscnnStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let task = read_str(task, "task")?;
        let i = m
            .model
            .head_index(task)
            .ok_or_else(|| Failure(NewscnnStatus::Config, format!("model has no {task} head")))?;
        write_out(out, i, "out")
    })
}

/// Output dimension of one head.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_head_dim(model: *const NewscnnModel, head: usize, out: *mut usize) -> NewscnnStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let h = m
            .model
            .heads
            .get(head)
            .ok_or_else(|| Failure(NewscnnStatus::Config, format!("model has no head {head}")))?;
        write_out(out, h.kind().output_dim(), "out")
    })
}

/// Total number of trainable values.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_param_count(model: *const NewscnnModel, out: *mut usize) -> NewscnnStatus {
    guard(|| write_out(out, deref(model, "model")?.model.param_count(), "out"))
}

/// Writes the 64-character hex trunk hash plus NUL into `buf`, which must
/// hold at least 65 bytes.
///
/// # Safety
/// `model` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_trunk_hash(model: *const NewscnnModel, buf: *mut c_char, len: usize) -> NewscnnStatus {
    guard(|| {
        let h = deref(model, "model")?.model.trunk.hash();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < h.len() + 1 {
            return Err(Failure(NewscnnStatus::BufferTooSmall, format!("trunk hash needs {} bytes", h.len() + 1)));
        }
        ptr::copy_nonoverlapping(h.as_ptr().cast::<c_char>(), buf, h.len());
        buf.add(h.len()).write(0);
        Ok(())
    })
}

/// Runs one head on an article given as `n_tokens` NUL-terminated tokens and
/// writes the head output (logits, popularity, (lat, lon) or image-space
/// vector) into `out`, which must hold the head dimension.
///
/// # Safety
/// Handles must be live, `tokens` must point to `n_tokens` NUL-terminated
/// strings (it may be null when `n_tokens` is 0), and `out` must be writable
/// for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn newscnn_model_predict(
    model: *const NewscnnModel,
    emb: *const NewscnnEmbeddings,
    tokens: *const *const c_char,
    n_tokens: usize,
    head: usize,
    out: *mut f64,
    out_len: usize,
) -> NewscnnStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let e = deref(emb, "embeddings")?;
        if tokens.is_null() && n_tokens > 0 {
            return Err(null("tokens"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dim = m
            .model
            .heads
            .get(head)
            .ok_or_else(|| Failure(NewscnnStatus::Config, format!("model has no head {head}")))?
            .kind()
            .output_dim();
        if out_len < dim {
            return Err(Failure(NewscnnStatus::BufferTooSmall, format!("head {head} emits {dim} values")));
        }
        let expected = m.model.trunk.config().embed_dim;
        if e.table.dim() != expected {
            return Err(Failure(
                NewscnnStatus::Config,
                format!("model expects {expected}-dimensional embeddings, table has {}", e.table.dim()),
            ));
        }
        let toks = (0..n_tokens)
            .map(|i| read_str(*tokens.add(i), "token").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let record = ArticleRecord {
            id: String::new(),
            source: 0,
            tokens: toks,
            geo: vec![],
            popularity: 0,
            image_feature: None,
            captions: vec![],
        };
        let x = article_matrix(&record, &e.table, m.max_len)?;
        let outputs = m.model.predict(&x)?;
        ptr::copy_nonoverlapping(outputs[head].as_ptr(), out, dim);
        Ok(())
    })
}

/// Great-circle distance in km between two (lat, lon) points in radians.
#[no_mangle]
pub extern "C" fn newscnn_gcd_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64, radius_km: f64) -> f64 {
    gcd_km(&GeoPair::new((lat1, lon1), (lat2, lon2)), radius_km)
}

/// Runs the finite-difference gradient suite. `only` is a comma-separated
/// component list or null for all. Writes the largest relative error seen and
/// whether every component passed the 1e-4 threshold.
///
/// # Safety
/// `only` must be null or NUL-terminated; `max_rel_error` and `passed` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn newscnn_gradcheck(
    only: *const c_char,
    seeds: usize,
    max_rel_error: *mut f64,
    passed: *mut bool,
) -> NewscnnStatus {
    guard(|| {
        let only = if only.is_null() {
            vec![]
        } else {
            read_str(only, "only")?.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        };
        if max_rel_error.is_null() || passed.is_null() {
            return Err(null("output pointer"));
        }
        let rows = run_suite(&SuiteOptions { seeds, only, ..Default::default() })?;
        max_rel_error.write(rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max));
        passed.write(rows.iter().all(|r| r.passed));
        Ok(())
    })
}
