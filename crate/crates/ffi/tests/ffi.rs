//! The C ABI called from Rust, plus a C program compiled against the header.

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use strlora_ffi::*;

fn last_error() -> String {
    let p = sl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn forgetting_and_masked_softmax() {
    let mut f = 0.0;
    let hist = [0.5, 0.7, 0.4];
    assert_eq!(
        unsafe { sl_forgetting(hist.as_ptr(), 3, 0.56, &mut f) },
        SlStatus::Ok
    );
    assert!((f - 0.2).abs() < 1e-15);
    assert!(sl_last_error().is_null());

    let logits = [1.0, 5.0, 2.0];
    let mask = [1u8, 0, 1];
    let mut out = [9.0; 3];
    assert_eq!(
        unsafe { sl_masked_softmax(logits.as_ptr(), mask.as_ptr(), 3, out.as_mut_ptr()) },
        SlStatus::Ok
    );
    assert_eq!(out[1], 0.0);
    assert!((out[0] + out[2] - 1.0).abs() < 1e-15);

    let mut idx = [0usize; 2];
    let p = [0.2, 0.5, 0.2, 0.1];
    assert_eq!(
        unsafe { sl_top_k(p.as_ptr(), 4, 2, idx.as_mut_ptr()) },
        SlStatus::Ok
    );
    assert_eq!(idx, [1, 0]);
}

#[test]
fn errors_carry_status_and_message() {
    let mut out = 0.0;
    assert_eq!(
        unsafe { sl_forgetting(ptr::null(), 2, 0.1, &mut out) },
        SlStatus::NullPointer
    );
    assert!(last_error().contains("history"));

    let x = [1.0, 1.0, 1.0];
    let y = [1.0, 2.0, 3.0];
    assert_eq!(
        unsafe { sl_cka(x.as_ptr(), y.as_ptr(), 3, 1, 1, &mut out) },
        SlStatus::Degenerate
    );

    let text = CString::new("n_layers = 1\nbogus = 2\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { sl_config_parse(text.as_ptr(), &mut cfg) },
        SlStatus::Parse
    );
    assert!(last_error().contains("line 2"));
    assert!(cfg.is_null());
}

#[test]
fn ledger_round_trip() {
    let mut l = ptr::null_mut();
    unsafe {
        assert_eq!(sl_ledger_new(2, &mut l), SlStatus::Ok);
        let seen = [1u8, 0];
        assert_eq!(
            sl_ledger_push(l, [0.8, 0.0].as_ptr(), seen.as_ptr(), 2),
            SlStatus::Ok
        );
        assert_eq!(
            sl_ledger_push(l, [0.6, 0.5].as_ptr(), ptr::null(), 2),
            SlStatus::Ok
        );
        let mut n = 0;
        assert_eq!(sl_ledger_len(l, &mut n), SlStatus::Ok);
        assert_eq!(n, 2);
        let mut m = SlTaskMetrics::default();
        assert_eq!(sl_ledger_task(l, 1, 1, &mut m), SlStatus::Ok);
        assert!(!m.seen);
        assert_eq!(sl_ledger_task(l, 2, 0, &mut m), SlStatus::Ok);
        assert!(m.seen);
        assert_eq!(m.f, (0.8 - 0.6) / 0.8);
        let (mut map, mut maf) = (0.0, 0.0);
        assert_eq!(sl_ledger_summary(l, 2, &mut map, &mut maf), SlStatus::Ok);
        assert!((map - (0.7 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(
            sl_ledger_summary(l, 3, &mut map, &mut maf),
            SlStatus::InvalidArgument
        );
        assert_eq!(
            sl_ledger_push(l, [0.1].as_ptr(), ptr::null(), 1),
            SlStatus::InvalidArgument
        );
        sl_ledger_free(l);
    }
}

#[test]
fn config_and_training() {
    let text = CString::new(
        "n_layers = 1\nd_hidden = 16\nd_ff = 32\nrouting_dim = 8\nrank = 4\nn_tasks = 3\nn_chunks = 3\n\
         chunk_size = 48\ntest_size = 24\ndisappear_after = 2\nbatch_size = 16\n",
    )
    .unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(sl_config_parse(text.as_ptr(), &mut cfg), SlStatus::Ok);
        let (k, v) = (CString::new("seed").unwrap(), CString::new("5").unwrap());
        assert_eq!(sl_config_set(cfg, k.as_ptr(), v.as_ptr()), SlStatus::Ok);

        let mut needed = 0;
        assert_eq!(
            sl_config_to_text(cfg, ptr::null_mut(), 0, &mut needed),
            SlStatus::InvalidArgument
        );
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(
            sl_config_to_text(cfg, buf.as_mut_ptr(), needed, &mut needed),
            SlStatus::Ok
        );
        let s = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert!(s.contains("seed = 5"), "{s}");

        let mut run = ptr::null_mut();
        assert_eq!(sl_train(cfg, &mut run), SlStatus::Ok);
        let (mut map, mut maf) = (0.0, 0.0);
        assert_eq!(sl_run_map_maf(run, &mut map, &mut maf), SlStatus::Ok);
        assert!((0.0..=1.0).contains(&map) && (0.0..=1.0).contains(&maf));
        let mut ledger = ptr::null_mut();
        assert_eq!(sl_run_ledger(run, &mut ledger), SlStatus::Ok);
        let mut n = 0;
        sl_ledger_len(ledger, &mut n);
        assert_eq!(n, 3);
        let (mut lmap, mut lmaf) = (0.0, 0.0);
        sl_ledger_summary(ledger, 3, &mut lmap, &mut lmaf);
        assert_eq!((lmap, lmaf), (map, maf));
        let mut c = 0.0;
        let st = sl_run_mean_cka(run, &mut c);
        assert!(st == SlStatus::Ok || st == SlStatus::Degenerate);
        sl_ledger_free(ledger);
        sl_run_free(run);
        sl_config_free(cfg);
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(crate_dir.join("include/strlora.h")).unwrap();
    for f in [
        "sl_last_error",
        "sl_ledger_new",
        "sl_cka",
        "sl_train",
        "SL_STATUS_DEGENERATE",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libstrlora_ffi.a");
    assert!(
        lib.exists(),
        "static library not built at {}",
        lib.display()
    );

    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "strlora.h"
int main(void) {
    SlLedger *l = NULL;
    if (sl_ledger_new(1, &l) != SL_STATUS_OK) return 1;
    double a1 = 0.8, a2 = 0.6;
    sl_ledger_push(l, &a1, NULL, 1);
    sl_ledger_push(l, &a2, NULL, 1);
    SlTaskMetrics m;
    if (sl_ledger_task(l, 2, 0, &m) != SL_STATUS_OK) return 2;
    sl_ledger_free(l);
    if (sl_ledger_new(0, &l) != SL_STATUS_INVALID_ARGUMENT) return 3;
    printf("%.17g %s\n", m.f, sl_last_error());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("0.25"), "{text}");
    assert!(text.contains("at least one task"), "{text}");
}
