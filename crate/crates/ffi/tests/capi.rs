use std::ffi::{CStr, CString};
use std::ptr;

use gicl_ffi::*;

fn last_error() -> String {
    let p = gicl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synth() -> *mut GiclGraph {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { gicl_graph_synth(120, 3, 0.1, 0.01, 8, 0.3, 5, &mut g) }, GICL_OK);
    g
}

const SMALL: &str = r#"{"train": {"epochs": 5, "hidden_dim": 8, "n_layers": 2, "k_feedback": 5, "seed": 2}, "label_fraction": 0.2}"#;

#[test]
fn train_retrieve_save_load() {
    let g = synth();
    let (mut n, mut c) = (0usize, 0usize);
    assert_eq!(unsafe { gicl_graph_info(g, &mut n, &mut c) }, GICL_OK);
    assert_eq!((n, c), (120, 3));

    let cfg = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gicl_train(g, cfg.as_ptr(), ptr::null(), &mut m) }, GICL_OK, "{}", last_error());

    let mut ids = [0i64; 4];
    let mut scores = [0f64; 4];
    let mut len = 0usize;
    let rc = unsafe { gicl_retrieve(m, g, 7, 4, ids.as_mut_ptr(), scores.as_mut_ptr(), 4, &mut len) };
    assert_eq!(rc, GICL_OK, "{}", last_error());
    assert_eq!(len, 4);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(!ids.contains(&7));

    let rc = unsafe { gicl_retrieve(m, g, 7, 4, ids.as_mut_ptr(), ptr::null_mut(), 2, &mut len) };
    assert_eq!(rc, GICL_ERR_BUFFER);
    assert_eq!(len, 4);
    let rc = unsafe { gicl_retrieve(m, g, 9999, 4, ids.as_mut_ptr(), ptr::null_mut(), 4, &mut len) };
    assert_eq!(rc, GICL_ERR_INVALID);
    assert!(last_error().contains("9999"));

    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gicl_model_save(m, d.as_ptr()) }, GICL_OK, "{}", last_error());
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { gicl_model_load(d.as_ptr(), g, &mut m2) }, GICL_OK, "{}", last_error());
    let mut len2 = 0usize;
    let mut ids2 = [0i64; 1];
    assert_eq!(unsafe { gicl_retrieve(m2, g, 7, 1, ids2.as_mut_ptr(), ptr::null_mut(), 1, &mut len2) }, GICL_OK);
    assert_eq!(len2, 1);

    unsafe {
        gicl_model_free(m);
        gicl_model_free(m2);
        gicl_graph_free(g);
        gicl_graph_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes() {
    let mut g = ptr::null_mut();
    let missing = CString::new("/nonexistent/bundle").unwrap();
    assert_ne!(unsafe { gicl_graph_load(missing.as_ptr(), false, &mut g) }, GICL_OK);
    assert!(g.is_null());
    assert_eq!(unsafe { gicl_graph_load(ptr::null(), false, &mut g) }, GICL_ERR_NULL);
    assert!(last_error().contains("dir"));
    assert_eq!(unsafe { gicl_graph_synth(10, 0, 0.1, 0.01, 4, 0.1, 0, &mut g) }, GICL_ERR_INVALID);

    let gr = synth();
    let bad = CString::new("{\"train\": {\"beta\": 7}}").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gicl_train(gr, bad.as_ptr(), ptr::null(), &mut m) }, GICL_ERR_INVALID);
    let junk = CString::new("not json").unwrap();
    assert_eq!(unsafe { gicl_train(gr, junk.as_ptr(), ptr::null(), &mut m) }, GICL_ERR_FORMAT);
    assert!(m.is_null());
    unsafe { gicl_graph_free(gr) };
}

#[test]
fn numeric_helpers() {
    let lp = [-(2f64.ln()), -(8f64.ln())];
    let mut out = 0.0;
    assert_eq!(unsafe { gicl_perplexity(lp.as_ptr(), 2, &mut out) }, GICL_OK);
    assert!((out - 4.0).abs() < 1e-12);
    let ppl = [2.0, 4.0];
    assert_eq!(unsafe { gicl_utility(ppl.as_ptr(), 2, 0, &mut out) }, GICL_OK);
    assert!((out - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(unsafe { gicl_utility(ppl.as_ptr(), 2, 5, &mut out) }, GICL_ERR_INVALID);
    assert_eq!(unsafe { gicl_perplexity(ptr::null(), 0, &mut out) }, GICL_ERR_INVALID);
    let v = unsafe { CStr::from_ptr(gicl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gicl.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["gicl_graph_load", "gicl_train", "gicl_retrieve", "gicl_model_free", "gicl_last_error", "GICL_ERR_BUFFER"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ return gicl_version() == 0; }}\n")).unwrap();
    match std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(s) => assert!(s.success(), "header does not compile as C99"),
        Err(e) => eprintln!("no C compiler available ({e}); syntax check skipped"),
    }
}
