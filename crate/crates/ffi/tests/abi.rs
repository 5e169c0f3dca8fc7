use std::ffi::{CStr, CString};
use std::ptr;

use severif::model::{save_checkpoint, ModelSpec, SpeakerNet};
use severif::se::SeConfig;
use severif::Tensor;
use severif_ffi::*;

fn last_error() -> String {
    let p = sv_last_error();
    assert!(!p.is_null(), "no error message recorded");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sevx");
    let mut net = SpeakerNet::<f32>::build(&ModelSpec::toy(3), &SeConfig::default(), 2).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let feats = Tensor::from_fn(&[60, 20], |i| ((i * 7919) % 113) as f32 / 113.0 - 0.5);
    let direct = net.extract_embedding(&feats).unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(sv_model_load(c_path.as_ptr(), &mut model), SvStatus::Ok);
        assert!(sv_last_error().is_null());
        let dim = sv_model_embedding_dim(model);
        assert_eq!(dim, 256);
        let mut out = vec![0f32; dim];
        let s = sv_model_extract(model, feats.data().as_ptr(), 60, 20, out.as_mut_ptr(), dim);
        assert_eq!(s, SvStatus::Ok);
        assert_eq!(out, direct.data());

        let s = sv_model_extract(model, feats.data().as_ptr(), 60, 20, out.as_mut_ptr(), 10);
        assert_eq!(s, SvStatus::BufferTooSmall);
        assert!(last_error().contains("need 256"));

        let s = sv_model_extract(model, feats.data().as_ptr(), 60, 4, out.as_mut_ptr(), dim);
        assert_ne!(s, SvStatus::Ok);

        let s = sv_model_extract(model, feats.data().as_ptr(), 40, 30, out.as_mut_ptr(), dim);
        assert_ne!(s, SvStatus::Ok);
        sv_model_free(model);
        sv_model_free(ptr::null_mut());
        assert_eq!(sv_model_embedding_dim(ptr::null()), 0);
    }
}

#[test]
fn load_errors_carry_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("absent.sevx").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(sv_model_load(missing.as_ptr(), &mut model), SvStatus::Missing);
        assert!(model.is_null());
        assert!(last_error().contains("absent.sevx"));

        let junk = dir.path().join("junk.sevx");
        std::fs::write(&junk, b"NOPE").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(sv_model_load(junk.as_ptr(), &mut model), SvStatus::Format);
        assert!(last_error().contains("offset 0"));

        assert_eq!(sv_model_load(ptr::null(), &mut model), SvStatus::NullPointer);
        assert_eq!(sv_model_load(missing.as_ptr(), ptr::null_mut()), SvStatus::NullPointer);
    }
}

#[test]
fn logmel_matches_library() {
    let samples: Vec<f32> = (0..16000).map(|i| (i as f32 * 0.3).sin() * 0.2).collect();
    let frames = sv_logmel_frames(samples.len());
    assert_eq!(frames, 98);
    assert_eq!(sv_logmel_frames(399), 0);
    let bins = sv_logmel_bins();
    let mut out = vec![0f32; bins * frames];
    let mut got = 0usize;
    unsafe {
        let s = sv_logmel(samples.as_ptr(), samples.len(), out.as_mut_ptr(), out.len(), &mut got);
        assert_eq!(s, SvStatus::Ok);
        assert_eq!(got, frames);
        let s = sv_logmel(samples.as_ptr(), 100, out.as_mut_ptr(), out.len(), &mut got);
        assert_eq!(s, SvStatus::InvalidArgument);
        let s = sv_logmel(samples.as_ptr(), samples.len(), out.as_mut_ptr(), 5, &mut got);
        assert_eq!(s, SvStatus::BufferTooSmall);
    }
    let audio = severif::features::AudioSegment::new(samples, "s", "u").unwrap();
    let lib = severif::features::logmel(&audio).unwrap();
    assert_eq!(out, lib.data());
}

#[test]
fn scoring_functions() {
    let a = [1f32, 0.0, 0.0];
    let b = [1f32, 1.0, 0.0];
    let mut v = 0.0;
    unsafe {
        assert_eq!(sv_cosine(a.as_ptr(), b.as_ptr(), 3, &mut v), SvStatus::Ok);
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(sv_cosine(a.as_ptr(), [0f32; 3].as_ptr(), 3, &mut v), SvStatus::Numeric);

        let (t, n) = ([0.8, 0.4], [0.6, 0.2]);
        assert_eq!(sv_eer(t.as_ptr(), 2, n.as_ptr(), 2, &mut v), SvStatus::Ok);
        assert_eq!(v, 0.5);
        assert_eq!(sv_eer(t.as_ptr(), 2, ptr::null(), 0, &mut v), SvStatus::InvalidArgument);

        assert_eq!(sv_min_dcf([0.5].as_ptr(), 1, [0.6].as_ptr(), 1, 0.01, 1.0, 1.0, &mut v), SvStatus::Ok);
        assert_eq!(v, 1.0);
        assert_ne!(sv_min_dcf(t.as_ptr(), 2, n.as_ptr(), 2, 1.5, 1.0, 1.0, &mut v), SvStatus::Ok);
        assert_eq!(sv_eer(ptr::null(), 2, n.as_ptr(), 2, &mut v), SvStatus::NullPointer);
    }
}

#[test]
fn header_declares_the_api() {
    let header = include_str!("../include/severif.h");
    for name in [
        "sv_last_error",
        "sv_model_load",
        "sv_model_free",
        "sv_model_extract",
        "sv_model_embedding_dim",
        "sv_logmel",
        "sv_cosine",
        "sv_eer",
        "sv_min_dcf",
        "typedef struct SvModel SvModel",
        "SV_STATUS_BUFFER_TOO_SMALL = 9",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
