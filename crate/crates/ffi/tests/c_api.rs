use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use m2d::checkpoint::Checkpoint;
use m2d::config::RunConfig;
use m2d::networks::{OnlineState, TargetState};
use m2d::nn::optim::AdamW;
use m2d::rng::{fork, Stream};
use m2d_ffi::*;

fn checkpoint_file(name: &str) -> PathBuf {
    let cfg = RunConfig::default();
    let online = OnlineState::init(cfg.encoder, cfg.predictor, &mut fork(3, Stream::Init, 0)).unwrap();
    let ck = Checkpoint {
        config_snapshot: cfg.snapshot(),
        step: 0,
        target: TargetState::from_online(&online),
        online,
        mapper: None,
        optimizer: AdamW::new(&cfg.optimizer),
    };
    let dir = std::env::temp_dir().join(format!("m2d-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    ck.save(&p).unwrap();
    p
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe {
        m2d_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn tone(seconds: f64) -> Vec<f64> {
    let n = (seconds * 16000.0) as usize;
    (0..n).map(|i| 0.3 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect()
}

fn load(name: &str) -> *mut M2dModel {
    let path = CString::new(checkpoint_file(name).to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { m2d_model_load(path.as_ptr(), &mut model) }, M2dStatus::Ok);
    assert!(!model.is_null());
    model
}

#[test]
fn extract_frames_and_clip() {
    let model = load("a.m2d");
    let (mut dim, mut frames_in, mut sr) = (0usize, 0usize, 0u32);
    unsafe {
        assert_eq!(m2d_model_info(model, &mut dim, &mut frames_in, &mut sr), M2dStatus::Ok);
    }
    assert_eq!(sr, 16000);
    assert!(dim > 0);

    let wave = tone(1.0);
    let (mut t, mut needed) = (0usize, 0usize);
    // size query with an empty buffer
    let s = unsafe { m2d_extract_frames(model, wave.as_ptr(), wave.len(), ptr::null_mut(), 0, &mut t, &mut needed) };
    assert_eq!(s, M2dStatus::BufferTooSmall);
    assert_eq!(needed, t * dim);
    assert!(last_error().contains("needed"));

    let mut out = vec![0.0; needed];
    let s = unsafe { m2d_extract_frames(model, wave.as_ptr(), wave.len(), out.as_mut_ptr(), out.len(), &mut t, &mut needed) };
    assert_eq!(s, M2dStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));

    let mut clip = vec![0.0; dim];
    let s = unsafe { m2d_extract_clip(model, wave.as_ptr(), wave.len(), clip.as_mut_ptr(), clip.len(), &mut needed) };
    assert_eq!(s, M2dStatus::Ok);
    for k in 0..dim {
        let mean = (0..t).map(|i| out[i * dim + k]).sum::<f64>() / t as f64;
        assert!((mean - clip[k]).abs() < 1e-9);
    }
    unsafe { m2d_model_free(model) };
}

#[test]
fn errors_are_reported() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.m2d").unwrap();
    assert_eq!(unsafe { m2d_model_load(missing.as_ptr(), &mut model) }, M2dStatus::IoError);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { m2d_model_load(ptr::null(), &mut model) }, M2dStatus::NullPointer);

    let p = checkpoint_file("bad.m2d");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 40);
    std::fs::write(&p, bytes).unwrap();
    let c = CString::new(p.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { m2d_model_load(c.as_ptr(), &mut model) }, M2dStatus::CorruptCheckpoint);

    let model = load("b.m2d");
    let short = vec![0.0; 100];
    let (mut t, mut needed) = (0usize, 0usize);
    let s = unsafe { m2d_extract_frames(model, short.as_ptr(), short.len(), ptr::null_mut(), 0, &mut t, &mut needed) };
    assert_eq!(s, M2dStatus::InvalidArgument);
    assert_eq!(unsafe { m2d_model_set_stats(model, 0.0, -1.0) }, M2dStatus::InvalidArgument);
    assert_eq!(unsafe { m2d_model_set_stats(model, -5.0, 3.0) }, M2dStatus::Ok);
    unsafe { m2d_model_free(model) };
    unsafe { m2d_model_free(ptr::null_mut()) };
}

#[test]
fn logmel_and_loss() {
    let wave = tone(0.5);
    let (mut t, mut needed) = (0usize, 0usize);
    unsafe { m2d_logmel(wave.as_ptr(), wave.len(), ptr::null_mut(), 0, &mut t, &mut needed) };
    assert_eq!(needed, 80 * t);
    let mut out = vec![0.0; needed];
    let s = unsafe { m2d_logmel(wave.as_ptr(), wave.len(), out.as_mut_ptr(), out.len(), &mut t, &mut needed) };
    assert_eq!(s, M2dStatus::Ok);
    assert_eq!(t, 50);

    let a = [1.0, 0.0, 0.0, 1.0];
    let b = [1.0, 0.0, 0.0, -1.0];
    let mut loss = f64::NAN;
    assert_eq!(unsafe { m2d_loss_value(a.as_ptr(), b.as_ptr(), 2, 2, &mut loss) }, M2dStatus::Ok);
    assert!((loss - 2.0).abs() < 1e-12);
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(m2d_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/m2d.h")).unwrap();
    for f in ["m2d_model_load", "m2d_model_free", "m2d_extract_frames", "m2d_extract_clip", "m2d_logmel", "M2D_STATUS_BUFFER_TOO_SMALL"] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
