use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rml_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rml_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn small_dataset() -> *mut RmlDataset {
    let mut cfg = rml_dataset_config_default();
    cfg.num_identities = 12;
    cfg.images_per_identity = 2;
    cfg.captions_per_image = 2;
    cfg.raw_dim = 16;
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { rml_dataset_generate(&cfg, &mut ds) }, RmlStatus::Ok);
    ds
}

#[test]
fn dataset_lifecycle_and_noise() {
    let ds = small_dataset();
    unsafe {
        assert_eq!(rml_dataset_len(ds), 48);
        assert_eq!(rml_dataset_num_noisy(ds), 0);
        let mut noisy = ptr::null_mut();
        assert_eq!(rml_dataset_inject_noise(ds, 0.5, 3, &mut noisy), RmlStatus::Ok);
        assert_eq!(rml_dataset_num_noisy(noisy), 24);
        assert_eq!(rml_dataset_num_noisy(ds), 0);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("d.txt").to_str().unwrap()).unwrap();
        assert_eq!(rml_dataset_save(noisy, path.as_ptr()), RmlStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(rml_dataset_load(path.as_ptr(), &mut back), RmlStatus::Ok);
        assert_eq!(rml_dataset_num_noisy(back), 24);

        rml_dataset_free(back);
        rml_dataset_free(noisy);
        rml_dataset_free(ds);
        rml_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(rml_dataset_generate(ptr::null(), &mut ds), RmlStatus::NullPointer);
        assert!(last_error().contains("config"));

        let mut cfg = rml_dataset_config_default();
        cfg.num_identities = 0;
        assert_eq!(rml_dataset_generate(&cfg, &mut ds), RmlStatus::Config);
        assert!(!last_error().is_empty());

        let missing = CString::new("/nonexistent/rml/data.txt").unwrap();
        assert_eq!(rml_dataset_load(missing.as_ptr(), &mut ds), RmlStatus::Io);

        let base = small_dataset();
        let mut out = ptr::null_mut();
        assert_eq!(rml_dataset_inject_noise(base, 1.5, 0, &mut out), RmlStatus::Config);
        rml_dataset_free(base);
    }
}

#[test]
fn batch_loss_matches_hand_values() {
    // Flat 3x3 batch: every direction pays exactly the margin.
    let sims = [0.5; 9];
    let labels = [1u8, 0, 0, 0, 1, 0, 0, 0, 1];
    let mut total = 0.0;
    let mut per = [0.0; 3];
    let st = unsafe {
        rml_batch_loss(sims.as_ptr(), labels.as_ptr(), 3, RmlLossVariant::Trl, 0.1, 0.015, &mut total, per.as_mut_ptr())
    };
    assert_eq!(st, RmlStatus::Ok);
    for p in per {
        assert!((p - 0.2).abs() < 1e-12);
    }
    assert!((total - 0.6).abs() < 1e-12);

    let bad = [0.5, f64::NAN, 0.5, 0.5];
    let st = unsafe {
        rml_batch_loss(bad.as_ptr(), labels.as_ptr(), 2, RmlLossVariant::Tal, 0.1, 0.015, &mut total, ptr::null_mut())
    };
    assert_ne!(st, RmlStatus::Ok);
}

#[test]
fn train_evaluate_and_checkpoint_roundtrip() {
    let ds = small_dataset();
    let mut cfg = rml_train_config_default();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.embed_dim = 8;
    cfg.num_tokens = 4;
    cfg.warmup_epochs = 1;
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(rml_train(ds, &cfg, &mut model), RmlStatus::Ok);
        let mut m = RmlMetrics::default();
        assert_eq!(rml_evaluate(model, ds, &mut m), RmlStatus::Ok);
        assert_eq!(m.num_queries, 48);
        assert_eq!(m.num_gallery, 24);
        assert!((0.0..=1.0).contains(&m.rank1) && m.rank1 <= m.rank5 && m.rank5 <= m.rank10);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(rml_model_save(model, path.as_ptr()), RmlStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(rml_model_load(path.as_ptr(), &mut back), RmlStatus::Ok);
        let mut m2 = RmlMetrics::default();
        assert_eq!(rml_evaluate(back, ds, &mut m2), RmlStatus::Ok);
        assert_eq!(m.map.to_bits(), m2.map.to_bits());

        rml_model_free(back);
        rml_model_free(model);
        rml_dataset_free(ds);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(rml_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rml.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "rml_dataset_generate",
        "rml_dataset_free",
        "rml_train",
        "rml_evaluate",
        "rml_batch_loss",
        "rml_last_error_message",
        "RML_STATUS_OK",
        "typedef struct RmlModel RmlModel",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    // Syntax check when a C compiler is around.
    if let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-std=c99", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
