//! C ABI over the tagger: load a checkpoint into an opaque handle, tag
//! utterances passed as JSON, and fetch error details per thread.
//!
//! Conventions: every fallible call returns a `ProsotagStatus`; on any
//! non-OK status, `prosotag_last_error_message` describes the failure.
//! Strings returned through out-parameters are owned by the caller and
//! must be released with `prosotag_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use prosotag::autodiff::Tensor;
use prosotag::corpus::{featurize, UtteranceSample};
use prosotag::embed::EmbeddingSource;
use prosotag::model::{load_checkpoint, CheckpointMeta, Tagger};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ProsotagStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The checkpoint could not be read or parsed.
    LoadFailed = 3,
    /// The utterance JSON was malformed or inconsistent with the model.
    InvalidInput = 4,
    /// Inference failed.
    InferenceFailed = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: ProsotagStatus, message: &str) -> ProsotagStatus {
    set_error(message);
    status
}

/// Loaded tagger plus everything needed to featurize its inputs.
pub struct ProsotagTagger {
    tagger: Tagger,
    meta: CheckpointMeta,
    source: EmbeddingSource,
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn prosotag_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, ProsotagStatus> {
    if ptr.is_null() {
        return Err(fail(ProsotagStatus::NullArgument, &format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(ProsotagStatus::InvalidUtf8, &format!("{name} is not UTF-8")))
}

fn guard<F: FnOnce() -> ProsotagStatus>(body: F) -> ProsotagStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(ProsotagStatus::Panic, "internal panic caught at the C boundary"),
    }
}

/// Load a checkpoint file and return an opaque tagger handle through `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prosotag_tagger_load(
    path: *const c_char,
    out: *mut *mut ProsotagTagger,
) -> ProsotagStatus {
    guard(|| {
        if out.is_null() {
            return fail(ProsotagStatus::NullArgument, "out is null");
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(Path::new(path)) {
            Ok((tagger, meta)) => {
                let source = EmbeddingSource::pseudo(meta.d_embed, meta.embed_seed);
                let handle = Box::new(ProsotagTagger { tagger, meta, source });
                *out = Box::into_raw(handle);
                ProsotagStatus::Ok
            }
            Err(e) => fail(ProsotagStatus::LoadFailed, &e.to_string()),
        }
    })
}

/// Release a handle from `prosotag_tagger_load`. Null is ignored.
///
/// # Safety
/// `tagger` must be a pointer previously returned by `prosotag_tagger_load`
/// that has not already been freed.
#[no_mangle]
pub unsafe extern "C" fn prosotag_tagger_free(tagger: *mut ProsotagTagger) {
    if !tagger.is_null() {
        drop(Box::from_raw(tagger));
    }
}

/// Tag one utterance. `sample_json` is a serialized utterance sample with
/// the feature fields the checkpoint was trained on; on success `out_json`
/// receives a JSON array of per-word tags ("O", "GOAL", "DETAIL").
///
/// # Safety
/// `tagger` must be a live handle; `sample_json` a valid NUL-terminated
/// string; `out_json` a valid pointer. Free the result with
/// `prosotag_string_free`.
#[no_mangle]
pub unsafe extern "C" fn prosotag_tagger_tag_json(
    tagger: *const ProsotagTagger,
    sample_json: *const c_char,
    out_json: *mut *mut c_char,
) -> ProsotagStatus {
    guard(|| {
        if tagger.is_null() || out_json.is_null() {
            return fail(ProsotagStatus::NullArgument, "tagger or out_json is null");
        }
        let text = match utf8_arg(sample_json, "sample_json") {
            Ok(t) => t,
            Err(status) => return status,
        };
        let handle = &*tagger;
        let sample: UtteranceSample = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(ProsotagStatus::InvalidInput, &format!("sample_json: {e}")),
        };
        let rows = match featurize(
            &sample,
            handle.meta.feature_mode,
            &handle.source,
            Some(&handle.meta.normalizer),
        ) {
            Ok(r) => r,
            Err(e) => return fail(ProsotagStatus::InvalidInput, &e.to_string()),
        };
        if rows.is_empty() {
            return fail(ProsotagStatus::InvalidInput, "utterance has no words");
        }
        let x = match Tensor::from_rows(&rows) {
            Ok(x) => x,
            Err(e) => return fail(ProsotagStatus::InvalidInput, &e.to_string()),
        };
        let tags = match handle.tagger.predict(&x, &vec![true; rows.len()]) {
            Ok(t) => t,
            Err(e) => return fail(ProsotagStatus::InferenceFailed, &e.to_string()),
        };
        let json = serde_json::to_string(&tags).expect("labels serialize");
        match CString::new(json) {
            Ok(c) => {
                *out_json = c.into_raw();
                ProsotagStatus::Ok
            }
            Err(_) => fail(ProsotagStatus::InferenceFailed, "output contained NUL"),
        }
    })
}

/// Release a string returned through an out-parameter. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn prosotag_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
