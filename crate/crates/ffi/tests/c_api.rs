use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use paws_ffi::*;

fn small_config() -> *mut PawsConfig {
    let cfg = paws_config_new();
    for (k, v) in [
        ("data.per_class", "40"),
        ("data.dim", "6"),
        ("data.label_budget", "16"),
        ("model.hidden_dim", "12"),
        ("model.proj_hidden", "12"),
        ("model.embed_dim", "8"),
        ("support.per_class", "2"),
        ("views.local", "2"),
        ("train.batch_size", "16"),
        ("train.epochs", "2"),
    ] {
        let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
        assert_eq!(unsafe { paws_config_set(cfg, k.as_ptr(), v.as_ptr()) }, PawsStatus::Ok);
    }
    cfg
}

fn last_error() -> String {
    let p = paws_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn train_save_load_embed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let out_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { paws_train(cfg, out_dir.as_ptr(), &mut model) }, PawsStatus::Ok);
    assert!(paws_last_error().is_null());
    for f in ["metrics.csv", "checkpoint.paws", "config.resolved"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    unsafe {
        assert_eq!(paws_model_input_dim(model), 6);
        assert_eq!(paws_model_embed_dim(model), 8);
    }

    let mut acc = -1.0;
    assert_eq!(unsafe { paws_eval_nn(model, cfg, &mut acc) }, PawsStatus::Ok);
    assert!((0.0..=1.0).contains(&acc));

    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut z1 = vec![0.0; 16];
    assert_eq!(unsafe { paws_model_embed(model, x.as_ptr(), 2, 6, z1.as_mut_ptr(), z1.len()) }, PawsStatus::Ok);

    let path = CString::new(dir.path().join("checkpoint.paws").to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { paws_model_load(path.as_ptr(), &mut loaded) }, PawsStatus::Ok);
    let mut z2 = vec![0.0; 16];
    assert_eq!(unsafe { paws_model_embed(loaded, x.as_ptr(), 2, 6, z2.as_mut_ptr(), z2.len()) }, PawsStatus::Ok);
    assert_eq!(z1, z2);

    let resaved = CString::new(dir.path().join("again.paws").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { paws_model_save(loaded, resaved.as_ptr()) }, PawsStatus::Ok);

    let mut small = vec![0.0; 15];
    assert_eq!(
        unsafe { paws_model_embed(loaded, x.as_ptr(), 2, 6, small.as_mut_ptr(), small.len()) },
        PawsStatus::BufferTooSmall
    );
    assert_eq!(unsafe { paws_model_embed(loaded, x.as_ptr(), 3, 4, z1.as_mut_ptr(), 24) }, PawsStatus::InvalidArgument);
    assert!(last_error().contains("input columns"));

    unsafe {
        paws_model_free(model);
        paws_model_free(loaded);
        paws_config_free(cfg);
    }
}

#[test]
fn errors_set_status_and_message() {
    let cfg = paws_config_new();
    let k = CString::new("no.such.key").unwrap();
    let v = CString::new("1").unwrap();
    assert_eq!(unsafe { paws_config_set(cfg, k.as_ptr(), v.as_ptr()) }, PawsStatus::InvalidArgument);
    assert!(last_error().contains("no.such.key"));
    assert_eq!(unsafe { paws_config_set(ptr::null_mut(), k.as_ptr(), v.as_ptr()) }, PawsStatus::NullPointer);

    let missing = CString::new("/nonexistent/model.paws").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { paws_model_load(missing.as_ptr(), &mut m) }, PawsStatus::Io);
    assert!(m.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.paws");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { paws_model_load(junk.as_ptr(), &mut m) }, PawsStatus::Format);

    let bad = CString::new("0").unwrap();
    let key = CString::new("paws.tau").unwrap();
    assert_eq!(unsafe { paws_config_set(cfg, key.as_ptr(), bad.as_ptr()) }, PawsStatus::Ok);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { paws_train(cfg, ptr::null(), &mut model) }, PawsStatus::InvalidArgument);
    assert!(model.is_null());

    unsafe {
        paws_config_free(cfg);
        paws_config_free(ptr::null_mut());
        paws_model_free(ptr::null_mut());
    }
}

#[test]
fn config_file_loading() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.txt");
    std::fs::write(&p, "# test\npaws.T = 0.5\n").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { paws_config_load(path.as_ptr(), &mut cfg) }, PawsStatus::Ok);
    assert!(!cfg.is_null());
    unsafe { paws_config_free(cfg) };
    std::fs::write(&p, "paws.T = nope\n").unwrap();
    assert_eq!(unsafe { paws_config_load(path.as_ptr(), &mut cfg) }, PawsStatus::InvalidArgument);
}

#[test]
fn header_is_generated_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/paws.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["paws_train", "paws_model_embed", "paws_verify", "paws_last_error", "PawsStatus_Ok"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"paws.h\"\nint main(void) { PawsConfig *c = paws_config_new(); paws_config_free(c); return 0; }\n",
    )
    .unwrap();
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    {
        Ok(s) => assert!(s.success(), "header does not compile as C"),
        Err(_) => eprintln!("no C compiler found; skipped compile check"),
    }
}
