use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use newscnn::corpus::{synth_corpus, synth_embeddings, SynthSpec};
use newscnn::losses::GeoLoss;
use newscnn::netcore::{Model, TaskKind, TrunkConfig};
use newscnn::textrepr::article_matrix;
use newscnn_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(newscnn_last_error()).to_string_lossy().into_owned() }
}

struct Setup {
    _dir: tempfile::TempDir,
    model: Model,
    ckpt: CString,
    emb: CString,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    let table = synth_embeddings(&spec, 12).unwrap();
    let emb = dir.path().join("emb.txt");
    table.write(&emb).unwrap();
    let trunk = TrunkConfig { embed_dim: 12, kernels: 8, width: 5, hidden: 6, dropout: 0.1 };
    let tasks = [TaskKind::Source { classes: 3 }, TaskKind::Geolocation { loss: GeoLoss::Gcd }];
    let model = Model::new(trunk, &tasks, 11).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.to_checkpoint(serde_json::json!({ "max_len": 16 })).write(&ckpt).unwrap();
    Setup { model, ckpt: cstr(&ckpt), emb: cstr(&emb), _dir: dir }
}

#[test]
fn predictions_match_the_library() {
    let s = setup();
    unsafe {
        let mut m = ptr::null_mut();
        let mut e = ptr::null_mut();
        assert_eq!(newscnn_model_load(s.ckpt.as_ptr(), &mut m), NewscnnStatus::Ok);
        assert_eq!(newscnn_embeddings_load(s.emb.as_ptr(), &mut e), NewscnnStatus::Ok);

        let mut n = 0usize;
        assert_eq!(newscnn_model_num_heads(m, &mut n), NewscnnStatus::Ok);
        assert_eq!(n, 2);
        let geo = CString::new("geolocation").unwrap();
        let mut h = 9usize;
        assert_eq!(newscnn_model_head_index(m, geo.as_ptr(), &mut h), NewscnnStatus::Ok);
        assert_eq!(h, 1);
        let mut d = 0usize;
        assert_eq!(newscnn_model_head_dim(m, 1, &mut d), NewscnnStatus::Ok);
        assert_eq!(d, 2);
        let mut pc = 0usize;
        assert_eq!(newscnn_model_param_count(m, &mut pc), NewscnnStatus::Ok);
        assert_eq!(pc, s.model.param_count());

        let record = &synth_corpus(&SynthSpec::default()).unwrap()[0];
        let toks: Vec<CString> = record.tokens.iter().map(|t| CString::new(t.as_str()).unwrap()).collect();
        let ptrs: Vec<*const c_char> = toks.iter().map(|t| t.as_ptr()).collect();
        let mut out = [0.0f64; 3];
        assert_eq!(newscnn_model_predict(m, e, ptrs.as_ptr(), ptrs.len(), 0, out.as_mut_ptr(), 3), NewscnnStatus::Ok);
        let table = synth_embeddings(&SynthSpec::default(), 12).unwrap();
        let expect = s.model.predict(&article_matrix(record, &table, 16).unwrap()).unwrap();
        assert_eq!(out.to_vec(), expect[0]);

        let mut small = [0.0f64; 1];
        assert_eq!(
            newscnn_model_predict(m, e, ptrs.as_ptr(), ptrs.len(), 0, small.as_mut_ptr(), 1),
            NewscnnStatus::BufferTooSmall
        );
        assert!(last_error().contains("3 values"));

        let mut buf = [0 as c_char; 65];
        assert_eq!(newscnn_model_trunk_hash(m, buf.as_mut_ptr(), 65), NewscnnStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), s.model.trunk.hash());
        assert_eq!(newscnn_model_trunk_hash(m, buf.as_mut_ptr(), 64), NewscnnStatus::BufferTooSmall);

        newscnn_model_free(m);
        newscnn_embeddings_free(e);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let s = setup();
    unsafe {
        let mut m = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(newscnn_model_load(missing.as_ptr(), &mut m), NewscnnStatus::Data);
        assert!(last_error().contains("nonexistent"));
        assert!(m.is_null());

        assert_eq!(newscnn_model_load(ptr::null(), &mut m), NewscnnStatus::NullPointer);
        assert_eq!(newscnn_model_load(s.ckpt.as_ptr(), ptr::null_mut()), NewscnnStatus::NullPointer);
        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(newscnn_model_load(bad.as_ptr().cast(), &mut m), NewscnnStatus::InvalidUtf8);

        assert_eq!(newscnn_model_load(s.ckpt.as_ptr(), &mut m), NewscnnStatus::Ok);
        assert_eq!(last_error(), "");
        let pop = CString::new("popularity").unwrap();
        let mut h = 0usize;
        assert_eq!(newscnn_model_head_index(m, pop.as_ptr(), &mut h), NewscnnStatus::Config);
        let mut d = 0usize;
        assert_eq!(newscnn_model_head_dim(m, 7, &mut d), NewscnnStatus::Config);

        // table of the wrong width
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e4.txt");
        synth_embeddings(&SynthSpec::default(), 4).unwrap().write(&p).unwrap();
        let mut e = ptr::null_mut();
        assert_eq!(newscnn_embeddings_load(cstr(&p).as_ptr(), &mut e), NewscnnStatus::Ok);
        let mut dim = 0usize;
        assert_eq!(newscnn_embeddings_dim(e, &mut dim), NewscnnStatus::Ok);
        assert_eq!(dim, 4);
        let mut out = [0.0; 3];
        assert_eq!(newscnn_model_predict(m, e, ptr::null(), 0, 0, out.as_mut_ptr(), 3), NewscnnStatus::Config);

        newscnn_model_free(m);
        newscnn_embeddings_free(e);
        newscnn_model_free(ptr::null_mut());
        newscnn_embeddings_free(ptr::null_mut());
    }
}

#[test]
fn utilities() {
    let v = unsafe { CStr::from_ptr(newscnn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let q = newscnn_gcd_km(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2, 6371.0);
    assert!((q - std::f64::consts::FRAC_PI_2 * 6371.0).abs() < 1e-9);

    let only = CString::new("cca_loss,l1_loss").unwrap();
    let (mut worst, mut passed) = (f64::NAN, false);
    unsafe {
        assert_eq!(newscnn_gradcheck(only.as_ptr(), 5, &mut worst, &mut passed), NewscnnStatus::Ok);
        assert!(passed && worst < 1e-4);
        let bogus = CString::new("nope").unwrap();
        assert_eq!(newscnn_gradcheck(bogus.as_ptr(), 5, &mut worst, &mut passed), NewscnnStatus::Config);
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/newscnn.h")).unwrap();
    for f in [
        "newscnn_model_load",
        "newscnn_model_predict",
        "newscnn_model_free",
        "newscnn_embeddings_load",
        "newscnn_last_error",
        "NEWSCNN_STATUS_NUMERICAL = 4",
    ] {
        assert!(header.contains(f), "{f}");
    }
    assert!(!header.contains("NewscnnModel {"), "handles must stay opaque");
    // syntax-check with the system C compiler when one is installed
    if let Ok(o) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(root.join("include/newscnn.h"))
        .output()
    {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}
