//! C ABI over `puma`: opaque model handles, embedding, retrieval metrics and
//! parameter counts. Every fallible call returns a `PumaStatus`; the message
//! of the last failure on the calling thread is available from
//! `puma_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use puma::encoder::EncoderConfig;
use puma::eval::{retrieval_metrics, EmbeddingSet};
use puma::model::{load_model, Model};
use puma::peft::{count_trainable, PeftConfig, PeftMode, PeftSpec};
use puma::{Error, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PumaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Io = 4,
    Format = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model.
pub struct PumaModel {
    model: Model,
}

/// Retrieval metrics at one cutoff k.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PumaMetrics {
    pub recall_at_k: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
    /// Queries without any same-class gallery item.
    pub skipped: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PumaStatus {
    match e {
        Error::Io(_) => PumaStatus::Io,
        Error::Format(_) | Error::Json(_) => PumaStatus::Format,
        e if e.is_numeric() => PumaStatus::Numeric,
        _ => PumaStatus::InvalidArgument,
    }
}

fn fail(status: PumaStatus, msg: &str) -> PumaStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), (PumaStatus, String)>) -> PumaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PumaStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, &m),
        Err(_) => fail(PumaStatus::Panic, "internal panic"),
    }
}

fn lift(e: Error) -> (PumaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PumaStatus, String) {
    (PumaStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn puma_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn puma_model_load(path: *const c_char, out: *mut *mut PumaModel) -> PumaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| (PumaStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (_, model) = load_model(Path::new(p)).map_err(lift)?;
        *out = Box::into_raw(Box::new(PumaModel { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from `puma_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn puma_model_free(model: *mut PumaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn puma_model_embed_dim(model: *const PumaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.encoder.embed_dim)
}

/// Values per input record (patches times patch width), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn puma_model_input_len(model: *const PumaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.encoder.num_patches() * m.model.encoder.patch_dim)
}

/// Embeds `n` row-major records of `puma_model_input_len` values each into
/// `out`, which must hold `n * puma_model_embed_dim` values.
///
/// # Safety
/// `input` must point to `n * input_len` values and `out` to `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn puma_model_embed(
    model: *const PumaModel,
    input: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> PumaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if n == 0 {
            return Err((PumaStatus::InvalidArgument, "no records".into()));
        }
        if input.is_null() {
            return Err(null("input"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, w, d) = (m.encoder.num_patches(), m.encoder.patch_dim, m.encoder.embed_dim);
        if out_len < n * d {
            return Err((PumaStatus::BufferTooSmall, format!("output needs {} values, got {out_len}", n * d)));
        }
        let x = Tensor::new(vec![n, p, w], std::slice::from_raw_parts(input, n * p * w).to_vec()).map_err(lift)?;
        let e = m.embed_all(&x, 128).map_err(lift)?;
        std::slice::from_raw_parts_mut(out, n * d).copy_from_slice(e.data());
        Ok(())
    })
}

/// Same-set retrieval metrics with self-exclusion by id.
///
/// # Safety
/// `embeddings` must hold `n * dim` values, `ids` and `classes` `n` values
/// each, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn puma_retrieval_metrics(
    embeddings: *const f64,
    ids: *const u64,
    classes: *const usize,
    n: usize,
    dim: usize,
    k: usize,
    out: *mut PumaMetrics,
) -> PumaStatus {
    guard(|| {
        if embeddings.is_null() || ids.is_null() || classes.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        if n == 0 || dim == 0 || k == 0 {
            return Err((PumaStatus::InvalidArgument, "n, dim and k must be positive".into()));
        }
        let set = EmbeddingSet::same_set(
            std::slice::from_raw_parts(ids, n).to_vec(),
            std::slice::from_raw_parts(classes, n).to_vec(),
            vec![0; n],
            dim,
            std::slice::from_raw_parts(embeddings, n * dim).to_vec(),
        )
        .map_err(lift)?;
        let m = retrieval_metrics(&set, &[k], true).map_err(lift)?;
        *out = PumaMetrics {
            recall_at_k: m.recall.get(&k).copied().unwrap_or(0.0),
            r_precision: m.r_precision,
            map_at_r: m.map_at_r,
            skipped: m.skipped,
        };
        Ok(())
    })
}

/// Trainable parameter count of `mode` (for example "puma"), head included.
/// `vit_small` selects ViT-S/16 sizes instead of the desk ones.
///
/// # Safety
/// `mode` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn puma_count_trainable(mode: *const c_char, vit_small: bool, out: *mut usize) -> PumaStatus {
    guard(|| {
        if mode.is_null() {
            return Err(null("mode"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let tag = CStr::from_ptr(mode).to_str().map_err(|_| (PumaStatus::InvalidArgument, "mode is not UTF-8".to_string()))?;
        let mode = PeftMode::from_tag(tag).map_err(lift)?;
        let (enc, pc) = if vit_small {
            (EncoderConfig::vit_small(), PeftConfig::vit_small())
        } else {
            (EncoderConfig::desk(), PeftConfig::default())
        };
        let spec = PeftSpec::from_config(&pc.with_mode(mode)).map_err(lift)?;
        *out = count_trainable(&spec, &enc);
        Ok(())
    })
}
