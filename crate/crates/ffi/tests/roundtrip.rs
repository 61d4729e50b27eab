//! Exercises the C surface from Rust: load, tag, error paths, cleanup.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

use prosotag::corpus::{fit_normalizer, generate_corpus, RenderMode};
use prosotag::embed::EmbeddingSource;
use prosotag::model::{save_checkpoint, BiLstmConfig, BiLstmTagger, CheckpointMeta, Tagger};
use prosotag::speech::FeatureMode;

use prosotag_ffi::{
    prosotag_last_error_message, prosotag_string_free, prosotag_tagger_free, prosotag_tagger_load,
    prosotag_tagger_tag_json, ProsotagStatus, ProsotagTagger,
};

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(prosotag_last_error_message())
            .to_string_lossy()
            .into_owned()
    }
}

/// Untrained tiny checkpoint plus one sample from the same corpus.
fn fixture(dir: &std::path::Path) -> (std::path::PathBuf, String) {
    let samples = generate_corpus(3, 1, 13, &RenderMode::Features).unwrap();
    let source = EmbeddingSource::pseudo(8, 13);
    let mode = FeatureMode::Prosody;
    let normalizer = fit_normalizer(&samples, mode, &source).unwrap();
    let input_dim = mode.feature_dim(8);
    let config = BiLstmConfig {
        hidden_dim: 8,
        num_heads: 2,
        proj_dim: 4,
        fusion_dim: 4,
        ..BiLstmConfig::new(input_dim)
    };
    let tagger = Tagger::BiLstm(BiLstmTagger::new(config, 13).unwrap());
    let meta = CheckpointMeta {
        feature_mode: mode,
        d_embed: 8,
        embed_seed: 13,
        normalizer,
        seed: 13,
    };
    let path = dir.join("tiny.json");
    save_checkpoint(&tagger, &meta, &path).unwrap();
    (path, serde_json::to_string(&samples[0]).unwrap())
}

fn load(path: &std::path::Path) -> *mut ProsotagTagger {
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut ProsotagTagger = ptr::null_mut();
    let status = unsafe { prosotag_tagger_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, ProsotagStatus::Ok, "load failed: {}", last_error());
    assert!(!handle.is_null());
    handle
}

#[test]
fn load_tag_and_free_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (path, sample_json) = fixture(dir.path());
    let handle = load(&path);

    let c_sample = CString::new(sample_json.clone()).unwrap();
    let mut out: *mut c_char = ptr::null_mut();
    let status = unsafe { prosotag_tagger_tag_json(handle, c_sample.as_ptr(), &mut out) };
    assert_eq!(status, ProsotagStatus::Ok, "tagging failed: {}", last_error());
    let tags = unsafe { CStr::from_ptr(out).to_str().unwrap().to_owned() };
    let parsed: Vec<String> = serde_json::from_str(&tags).unwrap();
    let sample: prosotag::corpus::UtteranceSample = serde_json::from_str(&sample_json).unwrap();
    assert_eq!(parsed.len(), sample.labels.len());
    assert!(parsed.iter().all(|t| ["O", "GOAL", "DETAIL"].contains(&t.as_str())));

    // Same input, same output: the handle is deterministic.
    let mut again: *mut c_char = ptr::null_mut();
    let status = unsafe { prosotag_tagger_tag_json(handle, c_sample.as_ptr(), &mut again) };
    assert_eq!(status, ProsotagStatus::Ok);
    assert_eq!(tags, unsafe { CStr::from_ptr(again).to_str().unwrap() });

    unsafe {
        prosotag_string_free(out);
        prosotag_string_free(again);
        prosotag_tagger_free(handle);
    }
}

#[test]
fn error_paths_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = fixture(dir.path());

    // Null arguments.
    let mut handle: *mut ProsotagTagger = ptr::null_mut();
    let status = unsafe { prosotag_tagger_load(ptr::null(), &mut handle) };
    assert_eq!(status, ProsotagStatus::NullArgument);
    assert!(last_error().contains("path"));

    // Missing file.
    let missing = CString::new(dir.path().join("absent.json").to_str().unwrap().to_owned()).unwrap();
    let status = unsafe { prosotag_tagger_load(missing.as_ptr(), &mut handle) };
    assert_eq!(status, ProsotagStatus::LoadFailed);
    assert!(!last_error().is_empty());

    // Malformed sample JSON.
    let handle = load(&path);
    let garbage = CString::new("{not json").unwrap();
    let mut out: *mut c_char = ptr::null_mut();
    let status = unsafe { prosotag_tagger_tag_json(handle, garbage.as_ptr(), &mut out) };
    assert_eq!(status, ProsotagStatus::InvalidInput);
    assert!(last_error().contains("sample_json"));
    assert!(out.is_null());

    unsafe { prosotag_tagger_free(handle) };
    // Freeing null is a no-op.
    unsafe {
        prosotag_tagger_free(ptr::null_mut());
        prosotag_string_free(ptr::null_mut());
    }
}

#[test]
fn header_is_generated_with_the_full_surface() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("prosotag.h");
    let text = std::fs::read_to_string(&header).expect("header generated by build.rs");
    for symbol in [
        "prosotag_tagger_load",
        "prosotag_tagger_free",
        "prosotag_tagger_tag_json",
        "prosotag_string_free",
        "prosotag_last_error_message",
        "ProsotagStatus",
        "ProsotagTagger",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}
