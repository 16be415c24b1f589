use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use agrl_ffi::*;

fn last_error() -> String {
    let p = agrl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn derive_matches_the_table() {
    let mut out = 0u8;
    for c in 1..=4u8 {
        for a in 1..=4u8 {
            assert_eq!(unsafe { agrl_derive_relevance(c, a, &mut out) }, AgrlStatus::Ok);
            assert_eq!(out, c.min(a));
        }
    }
    assert_eq!(unsafe { agrl_derive_relevance(0, 1, &mut out) }, AgrlStatus::InvalidArgument);
    assert!(last_error().contains("category"));
    assert_eq!(unsafe { agrl_derive_relevance(1, 1, ptr::null_mut()) }, AgrlStatus::NullArgument);
}

#[test]
fn config_handles() {
    let text = CString::new("seed = 7\ngrpo.max_steps = 3\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { agrl_config_parse(text.as_ptr(), &mut cfg) }, AgrlStatus::Ok);
    let key = CString::new("grpo.group_size").unwrap();
    let bad = CString::new("one").unwrap();
    assert_eq!(unsafe { agrl_config_set(cfg, key.as_ptr(), bad.as_ptr()) }, AgrlStatus::InvalidConfig);
    assert!(last_error().contains("grpo.group_size"));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { agrl_config_to_text(cfg, &mut out) }, AgrlStatus::Ok);
    let s = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { agrl_string_free(out) };
    assert!(s.contains("grpo.max_steps = 3") && s.contains("grpo.seed = 7") && s.contains("grpo.group_size = 16"));
    unsafe { agrl_config_free(cfg) };

    let broken = CString::new("grpo.max_steps = 3\ngrpo.max_steps = 4\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { agrl_config_parse(broken.as_ptr(), &mut cfg) }, AgrlStatus::InvalidConfig);
    assert!(cfg.is_null());
    assert!(last_error().contains("line 2"));
    unsafe { agrl_config_free(ptr::null_mut()) };
}

#[test]
fn score_and_metrics() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { agrl_config_new(&mut cfg) }, AgrlStatus::Ok);
    let mut r = AgrlReward::default();
    // well-formed, right label, right category, wrong attribute, rule-consistent
    let toks: [usize; 5] = [1, 1, 3, 1, 0];
    assert_eq!(unsafe { agrl_score(cfg, toks.as_ptr(), 5, 2, 3, 2, &mut r) }, AgrlStatus::Ok);
    assert_eq!((r.r_rele, r.r_cate, r.r_attr, r.r_reason), (1.0, 1.0, 0.0, 1.0));
    assert!((r.total - 0.6).abs() < 1e-12);
    let short: [usize; 3] = [1, 1, 3];
    assert_eq!(unsafe { agrl_score(cfg, short.as_ptr(), 3, 2, 3, 2, &mut r) }, AgrlStatus::InvalidArgument);
    unsafe { agrl_config_free(cfg) };

    let mut counts = [0u64; 16];
    for g in 0..4 {
        counts[g * 4 + g] = 5;
    }
    let malformed = [0u64; 4];
    let mut m = AgrlClassMetrics::default();
    assert_eq!(unsafe { agrl_classification_metrics(counts.as_ptr(), malformed.as_ptr(), &mut m) }, AgrlStatus::Ok);
    assert_eq!((m.macro_f1, m.good_f1, m.accuracy), (1.0, 1.0, 1.0));
    let empty = [0u64; 16];
    assert_eq!(unsafe { agrl_classification_metrics(empty.as_ptr(), malformed.as_ptr(), &mut m) }, AgrlStatus::InvalidArgument);
}

#[test]
fn train_then_decode() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CString::new("seed = 1\nworld.n_instances = 64\ngrpo.max_steps = 3\ngrpo.batch_size = 8\neval_instances = 40\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { agrl_config_parse(text.as_ptr(), &mut cfg) }, AgrlStatus::Ok);
    let dir = CString::new(tmp.path().join("run").to_str().unwrap()).unwrap();
    let mut summary = AgrlRunSummary::default();
    assert_eq!(unsafe { agrl_train(cfg, dir.as_ptr(), &mut summary) }, AgrlStatus::Ok, "{}", last_error());
    assert!((0.0..=1.0).contains(&summary.accuracy) && summary.final_entropy > 0.0);
    unsafe { agrl_config_free(cfg) };

    let ck = CString::new(tmp.path().join("run/checkpoint.json").to_str().unwrap()).unwrap();
    let mut policy = ptr::null_mut();
    assert_eq!(unsafe { agrl_policy_load(ck.as_ptr(), &mut policy) }, AgrlStatus::Ok);
    let x = vec![0.5; agrl_feature_dim()];
    let mut toks = vec![9usize; agrl_slot_count()];
    assert_eq!(unsafe { agrl_policy_decode(policy, x.as_ptr(), x.len(), toks.as_mut_ptr()) }, AgrlStatus::Ok);
    assert!(toks.iter().all(|&t| t < 4));
    assert_eq!(unsafe { agrl_policy_decode(policy, x.as_ptr(), 3, toks.as_mut_ptr()) }, AgrlStatus::InvalidArgument);
    unsafe { agrl_policy_free(policy) };

    let missing = CString::new(tmp.path().join("nope.json").to_str().unwrap()).unwrap();
    let mut policy = ptr::null_mut();
    assert_eq!(unsafe { agrl_policy_load(missing.as_ptr(), &mut policy) }, AgrlStatus::Io);
}

#[test]
fn rules_check() {
    let bad = CString::new("Excellent Excellent\n").unwrap();
    assert_eq!(unsafe { agrl_rules_check(bad.as_ptr()) }, AgrlStatus::InvalidConfig);
    assert_eq!(unsafe { agrl_rules_check(ptr::null()) }, AgrlStatus::NullArgument);
}

/// The static library built in the same pass as this test binary, which
/// lands next to it in `deps/`.
fn static_lib() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().join("libagrl_ffi.a")
}

#[test]
fn c_program_links_against_the_header() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = static_lib();
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
