use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use prfcl_ffi::*;

const CONFIG: &str = "[stream]\nclasses = 6\ntasks = 2\ntrain_per_class = 6\ntest_per_class = 3\n\
[pretrain]\nclasses = 6\ntrain_per_class = 6\nepochs = 1\n[train]\nepochs = 1\n";

fn last_error() -> String {
    let p = prfcl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn config(text: &str) -> *mut PrfclConfig {
    let text = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { prfcl_config_parse(text.as_ptr(), &mut cfg) }, PrfclStatus::Ok);
    cfg
}

#[test]
fn config_errors_carry_status_and_message() {
    let text = CString::new("[stream]\nclasses = 6\nbogus = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    let st = unsafe { prfcl_config_parse(text.as_ptr(), &mut cfg) };
    assert_eq!(st, PrfclStatus::Config);
    assert!(cfg.is_null());
    let msg = last_error();
    assert!(msg.contains("line 3") && msg.contains("bogus"), "{msg}");
}

#[test]
fn null_pointers_are_rejected() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { prfcl_config_parse(ptr::null(), &mut cfg) }, PrfclStatus::NullPointer);
    let mut n = 0usize;
    assert_eq!(unsafe { prfcl_dataset_len(ptr::null(), &mut n) }, PrfclStatus::NullPointer);
    unsafe { prfcl_config_free(ptr::null_mut()) };
}

#[test]
fn missing_weights_file_is_a_format_error() {
    let cfg = config(CONFIG);
    let path = CString::new("/nonexistent/w.ptw").unwrap();
    let mut bb = ptr::null_mut();
    assert_eq!(unsafe { prfcl_backbone_load(cfg, path.as_ptr(), &mut bb) }, PrfclStatus::Format);
    unsafe { prfcl_config_free(cfg) };
}

#[test]
fn prompt_similarity_matches_examples() {
    let mut v = 0.0;
    let same = [1.0, 0.0, 1.0, 0.0];
    assert_eq!(unsafe { prfcl_prompt_similarity(same.as_ptr(), 2, 2, &mut v) }, PrfclStatus::Ok);
    assert!((v - 100.0).abs() < 1e-9);
    let orth = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { prfcl_prompt_similarity(orth.as_ptr(), 2, 2, &mut v) }, PrfclStatus::Ok);
    assert!((v - 70.71).abs() < 0.01, "{v}");
}

#[test]
fn run_round_trip_matches_library() {
    let cfg = config(CONFIG);
    unsafe {
        assert_eq!(prfcl_config_set_seed(cfg, 2), PrfclStatus::Ok);
        let mut ds = ptr::null_mut();
        assert_eq!(prfcl_dataset_generate(cfg, &mut ds), PrfclStatus::Ok);
        let mut n = 0usize;
        assert_eq!(prfcl_dataset_len(ds, &mut n), PrfclStatus::Ok);
        assert_eq!(n, 6 * 9);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("w.ptw").to_str().unwrap()).unwrap();
        let mut bb = ptr::null_mut();
        assert_eq!(prfcl_backbone_pretrain(cfg, &mut bb), PrfclStatus::Ok);
        assert_eq!(prfcl_backbone_save(bb, path.as_ptr()), PrfclStatus::Ok);
        let mut bb2 = ptr::null_mut();
        assert_eq!(prfcl_backbone_load(cfg, path.as_ptr(), &mut bb2), PrfclStatus::Ok);

        let mut rec = ptr::null_mut();
        assert_eq!(prfcl_run(cfg, ds, bb2, &mut rec), PrfclStatus::Ok);
        let mut tasks = 0usize;
        assert_eq!(prfcl_record_num_tasks(rec, &mut tasks), PrfclStatus::Ok);
        assert_eq!(tasks, 2);
        let (mut fin, mut a11, mut forg, mut psim) = (0.0, 0.0, 0.0, 0.0);
        assert_eq!(prfcl_record_final_accuracy(rec, &mut fin), PrfclStatus::Ok);
        assert_eq!(prfcl_record_accuracy(rec, 1, 1, &mut a11), PrfclStatus::Ok);
        assert_eq!(prfcl_record_accuracy(rec, 0, 1, &mut a11), PrfclStatus::InvalidArgument);
        assert_eq!(prfcl_record_forgetting(rec, &mut forg), PrfclStatus::Ok);
        assert_eq!(prfcl_record_p_sim(rec, &mut psim), PrfclStatus::Ok);
        assert!((0.0..=1.0).contains(&fin));
        assert!(psim.is_finite());

        let mut json = ptr::null_mut();
        assert_eq!(prfcl_record_to_json(rec, &mut json), PrfclStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        prfcl_string_free(json);

        // same run through the library directly
        let mut c = prfcl::config::Config::parse(CONFIG).unwrap();
        c = prfcl::analysis::sweep::seeded(&c, 2);
        let d = prfcl::data::generate_synthetic(&c.synthetic_spec()).unwrap();
        let b = prfcl::engine::pretrain::pretrain_backbone(&c).unwrap();
        let r = prfcl::analysis::sweep::run_config(&c, &d, &b).unwrap();
        assert_eq!(text, serde_json::to_string(&r).unwrap());
        assert_eq!(fin, r.final_accuracy().unwrap());

        prfcl_record_free(rec);
        prfcl_backbone_free(bb);
        prfcl_backbone_free(bb2);
        prfcl_dataset_free(ds);
        prfcl_config_free(cfg);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = target_dir().join("libprfcl_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("examples/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("tasks 2 final "));
}
