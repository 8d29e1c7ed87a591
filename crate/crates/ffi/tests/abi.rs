use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use bsefuse_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bsefuse_last_error()) }.to_string_lossy().into_owned()
}

fn seeded(arch: &str, channels: u32) -> *mut BsefuseModel {
    let arch = CString::new(arch).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { bsefuse_model_new_seeded(arch.as_ptr(), 3, channels, &mut m) };
    assert_eq!(s, BsefuseStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn ramp(len: usize) -> Vec<f32> {
    (0..len).map(|i| (i % 97) as f32 / 96.0).collect()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(bsefuse_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut out = 0u8;
    let s = unsafe { bsefuse_patient_vote(ptr::null(), 3, &mut out) };
    assert_eq!(s, BsefuseStatus::NullPointer);
    assert!(last_error().contains("labels"));
    let s = unsafe { bsefuse_model_input_channels(ptr::null(), ptr::null_mut()) };
    assert_eq!(s, BsefuseStatus::NullPointer);
    unsafe { bsefuse_model_free(ptr::null_mut()) };
}

#[test]
fn success_clears_last_error() {
    let mut out = 0u8;
    unsafe { bsefuse_patient_vote(ptr::null(), 1, &mut out) };
    assert!(!last_error().is_empty());
    let labels = [0u8, 1];
    let s = unsafe { bsefuse_patient_vote(labels.as_ptr(), 2, &mut out) };
    assert_eq!(s, BsefuseStatus::Ok);
    assert_eq!(out, 1);
    assert!(last_error().is_empty());
}

#[test]
fn vote_rejects_bad_labels_and_empty_input() {
    let mut out = 0u8;
    let labels = [0u8, 2];
    assert_eq!(unsafe { bsefuse_patient_vote(labels.as_ptr(), 2, &mut out) }, BsefuseStatus::InvalidArgument);
    assert_ne!(unsafe { bsefuse_patient_vote(labels.as_ptr(), 0, &mut out) }, BsefuseStatus::Ok);
    let labels = [0u8, 0, 1];
    assert_eq!(unsafe { bsefuse_patient_vote(labels.as_ptr(), 3, &mut out) }, BsefuseStatus::Ok);
    assert_eq!(out, 0);
}

#[test]
fn metrics_flags_undefined_ratios() {
    let mut m = BsefuseMetrics::default();
    assert_eq!(unsafe { bsefuse_compute_metrics(3, 1, 4, 2, &mut m) }, BsefuseStatus::Ok);
    assert!((m.accuracy - 0.7).abs() < 1e-12);
    assert!((m.precision - 0.75).abs() < 1e-12);
    assert!((m.sensitivity - 0.6).abs() < 1e-12);
    assert!((m.specificity - 0.8).abs() < 1e-12);
    assert_eq!((m.has_precision, m.has_f1), (1, 1));
    assert_eq!(unsafe { bsefuse_compute_metrics(0, 0, 5, 0, &mut m) }, BsefuseStatus::Ok);
    assert_eq!((m.has_precision, m.has_sensitivity, m.has_specificity), (0, 0, 1));
    assert_eq!(m.accuracy, 1.0);
}

#[test]
fn welch_ttest_through_abi() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [2.0, 4.0, 6.0, 8.0, 10.0];
    let (mut t, mut df, mut p) = (0.0, 0.0, 0.0);
    let s = unsafe { bsefuse_welch_ttest(a.as_ptr(), 4, b.as_ptr(), 5, &mut t, &mut df, &mut p) };
    assert_eq!(s, BsefuseStatus::Ok);
    // scipy.stats.ttest_ind(a, b, equal_var=False)
    assert!((t - -2.2514363232).abs() < 1e-8, "{t}");
    assert!((df - 5.5207877462).abs() < 1e-8, "{df}");
    assert!((p - 0.0691335932).abs() < 1e-8, "{p}");
    let c = [1.0, 1.0];
    let s = unsafe { bsefuse_welch_ttest(c.as_ptr(), 2, c.as_ptr(), 2, &mut t, &mut df, &mut p) };
    assert_ne!(s, BsefuseStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn unknown_architecture_is_rejected() {
    let arch = CString::new("vgg16").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { bsefuse_model_new_seeded(arch.as_ptr(), 0, 3, &mut m) };
    assert_ne!(s, BsefuseStatus::Ok);
    assert!(m.is_null());
}

#[test]
fn predict_gradcam_and_checkpoint_round_trip() {
    let m = seeded("resnet18", 4);
    let mut c = 0u32;
    assert_eq!(unsafe { bsefuse_model_input_channels(m, &mut c) }, BsefuseStatus::Ok);
    assert_eq!(c, 4);

    let (n, h, w) = (2usize, 64usize, 64usize);
    let x = ramp(n * 4 * h * w);
    let mut probs = vec![0.0f64; 2 * n];
    let s = unsafe { bsefuse_model_predict(m, x.as_ptr(), n, h, w, BsefuseModality::Bse, probs.as_mut_ptr()) };
    assert_eq!(s, BsefuseStatus::Ok, "{}", last_error());
    for r in probs.chunks(2) {
        assert!((r[0] + r[1] - 1.0).abs() < 1e-5);
    }

    let s = unsafe { bsefuse_model_predict(m, x.as_ptr(), n, h, w, BsefuseModality::B, probs.as_mut_ptr()) };
    assert_eq!(s, BsefuseStatus::InvalidArgument);

    let mut heat = vec![0.0f32; h * w];
    let mut class = 9u32;
    let s = unsafe {
        bsefuse_model_gradcam(m, x.as_ptr(), h, w, BsefuseModality::Bse, -1, heat.as_mut_ptr(), &mut class)
    };
    assert_eq!(s, BsefuseStatus::Ok, "{}", last_error());
    assert!(class < 2);
    assert!(heat.iter().all(|v| (0.0..=1.0).contains(v)));
    let s = unsafe {
        bsefuse_model_gradcam(m, x.as_ptr(), h, w, BsefuseModality::Bse, 2, heat.as_mut_ptr(), &mut class)
    };
    assert_eq!(s, BsefuseStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bsefuse_model_save(m, path.as_ptr()) }, BsefuseStatus::Ok, "{}", last_error());
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { bsefuse_model_load(path.as_ptr(), &mut loaded) }, BsefuseStatus::Ok, "{}", last_error());
    let mut again = vec![0.0f64; 2 * n];
    let s = unsafe { bsefuse_model_predict(loaded, x.as_ptr(), n, h, w, BsefuseModality::Bse, again.as_mut_ptr()) };
    assert_eq!(s, BsefuseStatus::Ok);
    for (a, b) in probs.iter().zip(&again) {
        assert!((a - b).abs() < 1e-6);
    }
    unsafe {
        bsefuse_model_free(m);
        bsefuse_model_free(loaded);
    }
}

#[test]
fn loading_garbage_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { bsefuse_model_load(path.as_ptr(), &mut m) };
    assert_eq!(s, BsefuseStatus::Checkpoint, "{}", last_error());
    assert!(m.is_null());
}

#[test]
fn run_command_returns_exit_codes() {
    let args: Vec<CString> = ["bsefuse", "--help"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { bsefuse_run_command(2, ptrs.as_ptr()) }, 0);
    let args: Vec<CString> = ["bsefuse", "frobnicate"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { bsefuse_run_command(2, ptrs.as_ptr()) }, 2);
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/bsefuse.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "bsefuse_last_error",
        "bsefuse_model_load",
        "bsefuse_model_predict",
        "bsefuse_model_gradcam",
        "bsefuse_model_free",
        "bsefuse_welch_ttest",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc).args(["-fsyntax-only", "-x", "c", "-std=c99", header]).output() {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("{cc} not available; skipped compile check"),
    }
}
