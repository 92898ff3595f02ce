use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use himat_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(himat_last_error()) }.to_string_lossy().into_owned()
}

fn tensor(shape: &[usize], data: &[f64]) -> *mut HimatTensor {
    let mut out = ptr::null_mut();
    let s = unsafe { himat_tensor_new(shape.as_ptr(), shape.len(), data.as_ptr(), data.len(), &mut out) };
    assert_eq!(s, HimatStatus::Ok, "{}", last_error());
    out
}

#[test]
fn version_matches_library() {
    let v = unsafe { CStr::from_ptr(himat_version()) }.to_str().unwrap();
    assert_eq!(v, himat::VERSION);
}

#[test]
fn tensor_roundtrip_through_handles_and_files() {
    let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 1.0).collect();
    let t = tensor(&[2, 3, 4], &data);
    unsafe {
        assert_eq!(himat_tensor_rank(t), 3);
        assert_eq!(himat_tensor_numel(t), 24);
        let mut dims = [0usize; 3];
        assert_eq!(himat_tensor_shape(t, dims.as_mut_ptr(), 3), HimatStatus::Ok);
        assert_eq!(dims, [2, 3, 4]);
        assert_eq!(himat_tensor_shape(t, dims.as_mut_ptr(), 2), HimatStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("t.himt").to_str().unwrap()).unwrap();
        assert_eq!(himat_tensor_write_himt(t, path.as_ptr(), 1), HimatStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(himat_tensor_read_himt(path.as_ptr(), &mut back), HimatStatus::Ok);
        let mut values = vec![0.0; 24];
        assert_eq!(himat_tensor_copy_data(back, values.as_mut_ptr(), 24), HimatStatus::Ok);
        assert_eq!(values, data);
        assert_eq!(himat_tensor_copy_data(back, values.as_mut_ptr(), 23), HimatStatus::InvalidArgument);
        himat_tensor_free(back);
        himat_tensor_free(t);
        himat_tensor_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut out = ptr::null_mut();
        let shape = [2usize, 2];
        let data = [1.0; 3];
        assert_eq!(himat_tensor_new(shape.as_ptr(), 2, data.as_ptr(), 3, &mut out), HimatStatus::ShapeMismatch);
        assert!(out.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(himat_tensor_read_himt(ptr::null(), &mut out), HimatStatus::NullPointer);
        let missing = CString::new("/nonexistent/x.himt").unwrap();
        assert_eq!(himat_tensor_read_himt(missing.as_ptr(), &mut out), HimatStatus::Io);

        let a = tensor(&[1, 4, 4, 1], &[0.0; 16]);
        let mut v = 0.0;
        let bad = CString::new("db2").unwrap();
        assert_eq!(himat_swt_loss(a, a, bad.as_ptr(), 1, &mut v), HimatStatus::InvalidConfig);
        assert!(last_error().contains("db2"));
        assert_eq!(himat_psnr(a, ptr::null(), 1.0, &mut v), HimatStatus::NullPointer);
        himat_tensor_free(a);

        let none = CString::new("/nonexistent-run").unwrap();
        let mut run = ptr::null_mut();
        assert_ne!(himat_run_load(none.as_ptr(), &mut run), HimatStatus::Ok);
        assert!(run.is_null());
    }
}

#[test]
fn metrics_agree_with_the_library() {
    let zero = tensor(&[4, 4], &[0.0; 16]);
    let tenth = tensor(&[4, 4], &[0.1; 16]);
    let board: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
    let b = tensor(&[4, 4], &board);
    unsafe {
        let mut v = 0.0;
        assert_eq!(himat_psnr(zero, tenth, 1.0, &mut v), HimatStatus::Ok);
        assert!((v - 20.0).abs() < 1e-9);
        assert_eq!(himat_glcm_score(b, 8, &mut v), HimatStatus::Ok);
        assert_eq!(v, 49.0);
        assert_eq!(himat_glcm_score(b, 1, &mut v), HimatStatus::InvalidConfig);

        let pred = tensor(&[1, 4, 4, 1], &[0.5; 16]);
        let target = tensor(&[1, 4, 4, 1], &[0.0; 16]);
        let haar = CString::new("haar").unwrap();
        assert_eq!(himat_swt_loss(pred, target, haar.as_ptr(), 1, &mut v), HimatStatus::Ok);
        assert!((v - 8.0).abs() < 1e-12, "{v}");
        for t in [zero, tenth, b, pred, target] {
            himat_tensor_free(t);
        }
    }
}

#[test]
fn generate_from_a_trained_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
      "model": {"n_blocks": 1, "channels": 8, "latent_channels": 12},
      "codec": {"mode": "lossless", "factor": 2},
      "dataset": {"size": 4, "validation": 0},
      "stages": [{"latent": 4, "steps": 2}],
      "batch_size": 2,
      "sampler": {"steps": 2}
    }"#;
    // Same layout `himat train` writes.
    let run_dir = dir.path().join("run");
    let parsed = himat::config::RunConfig::from_json(cfg).unwrap();
    let out = himat::pipeline::train_run(&parsed, 0).unwrap();
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join("config.json"), cfg).unwrap();
    himat::diffusion::save_checkpoint(run_dir.join("checkpoint"), &out.model, 2, 0, Default::default()).unwrap();
    out.codec.save(run_dir.join("codec")).unwrap();

    let path = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    unsafe {
        let mut run = ptr::null_mut();
        assert_eq!(himat_run_load(path.as_ptr(), &mut run), HimatStatus::Ok, "{}", last_error());
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(himat_run_generate(run, 1, 0, 7, 1, &mut a), HimatStatus::Ok, "{}", last_error());
        assert_eq!(himat_run_generate(run, 1, 0, 7, 1, &mut b), HimatStatus::Ok);
        let mut dims = [0usize; 4];
        himat_tensor_shape(a, dims.as_mut_ptr(), 4);
        assert_eq!(dims, [3, 8, 8, 3]);
        let (mut va, mut vb) = (vec![0.0; 576], vec![0.0; 576]);
        himat_tensor_copy_data(a, va.as_mut_ptr(), 576);
        himat_tensor_copy_data(b, vb.as_mut_ptr(), 576);
        assert_eq!(va, vb);
        assert!(va.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut c = ptr::null_mut();
        assert_eq!(himat_run_generate(run, 99, 0, 7, 0, &mut c), HimatStatus::InvalidConfig);
        for t in [a, b] {
            himat_tensor_free(t);
        }
        himat_run_free(run);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = std::fs::read_to_string(format!("{include}/himat.h")).unwrap();
    for name in ["himat_tensor_new", "himat_run_generate", "himat_last_error", "HIMAT_STATUS_PANIC"] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"himat.h\"\nint main(void) { HimatTensor *t = NULL; return himat_tensor_rank(t) == 0 ? (int)HIMAT_STATUS_OK : 1; }\n").unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        match Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I", include]).arg(&src).output() {
            Ok(out) => assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr)),
            Err(_) => eprintln!("{compiler} not found; skipping"),
        }
    }
}
