use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lfprompt_ffi::*;

const TASK: &str = r#"{"synthetic": {"seed": 3, "n_test": 40}}"#;

fn config(method: &str) -> CString {
    CString::new(format!(r#"{{"task": {TASK}, "method": "{method}", "seed": 5, "samples": 4, "es": {{"max_generations": 20}}}}"#)).unwrap()
}

fn last_error() -> String {
    let p = lfp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn run_inspect_predict_and_score() {
    unsafe {
        let mut report = ptr::null_mut();
        assert_eq!(lfp_experiment_run(config("ensembles").as_ptr(), &mut report), LfpStatus::Ok);
        let summary = CStr::from_ptr(lfp_report_summary(report)).to_str().unwrap();
        let v: serde_json::Value = serde_json::from_str(summary).unwrap();
        assert_eq!(v["method"], "ensembles");

        let mut ens = ptr::null_mut();
        assert_eq!(lfp_report_ensemble(report, &mut ens), LfpStatus::Ok);
        let (mut len, mut dim) = (0, 0);
        assert_eq!(lfp_ensemble_shape(ens, &mut len, &mut dim), LfpStatus::Ok);
        assert_eq!(len, 4);
        let mut w = vec![0.0; len];
        assert_eq!(lfp_ensemble_weights(ens, w.as_mut_ptr(), w.len()), LfpStatus::Ok);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut z = vec![0.0; dim];
        assert_eq!(lfp_ensemble_sample(ens, 0, z.as_mut_ptr(), 1), LfpStatus::BufferTooSmall);
        assert_eq!(lfp_ensemble_sample(ens, 0, z.as_mut_ptr(), z.len()), LfpStatus::Ok);
        assert_eq!(lfp_ensemble_sample(ens, 99, z.as_mut_ptr(), z.len()), LfpStatus::InvalidInput);

        let mut task = ptr::null_mut();
        let spec = CString::new(TASK).unwrap();
        assert_eq!(lfp_task_new(spec.as_ptr(), &mut task), LfpStatus::Ok);
        let (mut d, mut c, mut n) = (0, 0, 0);
        assert_eq!(lfp_task_shape(task, LfpSplit::Test, &mut d, &mut c, &mut n), LfpStatus::Ok);
        assert_eq!((d, n), (dim, 40));
        let mut probs = vec![0.0; n * c];
        assert_eq!(lfp_predict(task, ens, LfpSplit::Test, false, 0, probs.as_mut_ptr(), probs.len()), LfpStatus::Ok);
        let mut labels = vec![0u32; n];
        assert_eq!(lfp_task_labels(task, LfpSplit::Test, labels.as_mut_ptr(), n), LfpStatus::Ok);
        assert_eq!(lfp_task_labels(task, LfpSplit::FarOod, labels.as_mut_ptr(), n), LfpStatus::InvalidInput);

        // The report's own test metrics come from the same logits predictive.
        let (mut ours, mut theirs) = (LfpMetrics::default(), LfpMetrics::default());
        assert_eq!(lfp_metrics(probs.as_ptr(), n, c, labels.as_ptr(), &mut ours), LfpStatus::Ok);
        assert_eq!(lfp_report_metrics(report, &mut theirs), LfpStatus::Ok);
        assert_eq!(ours, theirs);
        assert!(ours.lower_bound <= ours.aurrrc_entropy + 1e-12);

        let mut labelled = vec![0.0; n * c];
        assert_eq!(lfp_predict(task, ens, LfpSplit::Test, true, 0, labelled.as_mut_ptr(), labelled.len()), LfpStatus::Ok);
        assert!(labelled.iter().all(|p| (p * 4.0).fract() == 0.0));

        lfp_ensemble_free(ens);
        lfp_task_free(task);
        lfp_report_free(report);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut report = ptr::null_mut();
        assert_eq!(lfp_experiment_run(ptr::null(), &mut report), LfpStatus::NullPointer);
        let bad = CString::new(format!(r#"{{"task": {TASK}, "method": "abc_smc", "seed": 1, "predictive": "logits"}}"#)).unwrap();
        assert_eq!(lfp_experiment_run(bad.as_ptr(), &mut report), LfpStatus::Config);
        assert!(report.is_null());
        assert!(last_error().contains("predictive"), "{}", last_error());

        let tight = CString::new(format!(r#"{{"task": {TASK}, "method": "point_cmaes", "seed": 1, "budget_limit": 10}}"#)).unwrap();
        assert_eq!(lfp_experiment_run(tight.as_ptr(), &mut report), LfpStatus::Budget);

        let invalid = [0xffu8, 0];
        let mut task = ptr::null_mut();
        assert_eq!(lfp_task_new(invalid.as_ptr().cast(), &mut task), LfpStatus::InvalidUtf8);
        assert_eq!(lfp_task_shape(ptr::null(), LfpSplit::Test, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), LfpStatus::NullPointer);

        // A successful call clears the previous message.
        let mut lb = 0.0;
        assert_eq!(lfp_oracle_lower_bound([0u8, 0, 1, 1].as_ptr(), 4, &mut lb), LfpStatus::Ok);
        assert!(lfp_last_error().is_null());
        assert_eq!(lfp_oracle_lower_bound(ptr::null(), 0, &mut lb), LfpStatus::NullPointer);

        lfp_task_free(ptr::null_mut());
        lfp_report_free(ptr::null_mut());
        lfp_ensemble_free(ptr::null_mut());
    }
}

#[test]
fn oracle_bound_matches_core() {
    let flags = [0u8, 1, 0, 0, 1, 1, 0, 0];
    let mut lb = 0.0;
    assert_eq!(unsafe { lfp_oracle_lower_bound(flags.as_ptr(), flags.len(), &mut lb) }, LfpStatus::Ok);
    let core = lfprompt::uqeval::oracle_lower_bound(&lfprompt::uqeval::RiskFlags::new(flags.iter().map(|&b| b == 1).collect()).unwrap());
    assert_eq!(lb, core);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lfprompt.h")
}

/// Directory holding the static library built alongside this test binary.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_exposes_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for sym in ["lfp_experiment_run", "lfp_predict", "lfp_metrics", "LFP_STATUS_BUDGET", "typedef struct LfpTask LfpTask"] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = lib_dir().join("liblfprompt_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "lfprompt.h"

int main(void) {
    LfpReport *report = NULL;
    const char *cfg = "{\"task\": {\"synthetic\": {\"seed\": 2}}, \"method\": \"point_cmaes\", \"seed\": 9, \"es\": {\"max_generations\": 10}}";
    if (lfp_experiment_run(cfg, &report) != LFP_STATUS_OK) { fprintf(stderr, "%s\n", lfp_last_error()); return 1; }
    LfpMetrics m;
    if (lfp_report_metrics(report, &m) != LFP_STATUS_OK) return 2;
    if (!(m.accuracy >= 0.0 && m.accuracy <= 1.0)) return 3;
    if (strstr(lfp_report_summary(report), "point_cmaes") == NULL) return 4;
    lfp_report_free(report);
    if (lfp_experiment_run("{", &report) != LFP_STATUS_CONFIG || lfp_last_error() == NULL) return 5;
    printf("ok %s\n", lfp_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
