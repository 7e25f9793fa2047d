mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::oracle_accepts;
use srpl_core::cli::read_dump;
use srpl_core::tasks::{TaskKind, TaskParams, TaskSpec};

fn srpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srpl")).args(args).output().expect("spawn srpl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(&path, "# tiny model for fast runs\nhidden_dim = 32\nnum_heads = 4\nbatch_size = 4\nsnapshot_every = 2\neval_samples = 8\n").unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_oracle_valid_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dyck.tsv");
    let o = srpl(&["gen", "dyck3", "--max-depth", "12", "--len", "64", "--count", "100", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("100/100"));
    let task = TaskSpec::new(TaskKind::Dyck3, TaskParams { dyck_max_depth: 12, dyck_len: 64, ..TaskParams::default() }).unwrap();
    let samples = read_dump(&task, std::io::BufReader::new(std::fs::File::open(&out).unwrap())).unwrap();
    assert_eq!(samples.len(), 100);
    assert!(samples.iter().all(|s| oracle_accepts(&task, s)));

    let again = dir.path().join("again.tsv");
    srpl(&["gen", "dyck3", "--count", "100", "--seed", "7", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn gen_count_zero_writes_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.tsv");
    let o = srpl(&["gen", "bio", "--count", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&out).unwrap().len(), 0);
}

#[test]
fn usage_errors_exit_two() {
    let o = srpl(&["gen", "sudoku"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dyck3") && err.contains("bio") && err.contains("modulo"), "{err}");
    assert_eq!(code(&srpl(&["gen", "dyck3", "--max-depth", "40", "--len", "10"])), 2);
    assert_eq!(code(&srpl(&["frobnicate"])), 2);
}

#[test]
fn frozen_spectral_and_standard_write_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let std_dir = dir.path().join("std");
    let frz_dir = dir.path().join("frozen");
    let base = ["train", "--task", "modulo", "--steps", "6", "--seed", "3", "--config", &cfg];
    let o = srpl(&[&base[..], &["--engine", "standard", "--out", std_dir.to_str().unwrap()]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = srpl(&[&base[..], &["--engine", "spectral", "--freeze-basis", "--out", frz_dir.to_str().unwrap()]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read_to_string(std_dir.join("history.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(frz_dir.join("history.csv")).unwrap());
    assert_eq!(a.lines().count(), 7, "header plus one row per step");
    assert!(std_dir.join("model.srpl").exists() && std_dir.join("summary.json").exists());
}

#[test]
fn swap_eval_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = srpl(&["train", "--task", "dyck3", "--engine", "standard", "--steps", "3", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("model.srpl");
    let before = std::fs::read(&ckpt).unwrap();

    let swapped = dir.path().join("swapped.srpl");
    let o = srpl(&["swap", ckpt.to_str().unwrap(), swapped.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("64 probe sequences: 0.0"));
    assert_eq!(std::fs::read(&ckpt).unwrap(), before, "input must not be modified");

    let o = srpl(&["eval", swapped.to_str().unwrap(), "--samples", "8"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["engine"], "spectral");
    assert_eq!(report["task"], "dyck3");

    let again = dir.path().join("twice.srpl");
    assert_eq!(code(&srpl(&["swap", swapped.to_str().unwrap(), again.to_str().unwrap()])), 4);

    let corrupt = dir.path().join("corrupt.srpl");
    let mut bytes = before.clone();
    bytes[..4].copy_from_slice(b"JUNK");
    std::fs::write(&corrupt, bytes).unwrap();
    assert_eq!(code(&srpl(&["swap", corrupt.to_str().unwrap(), again.to_str().unwrap()])), 5);

    let missing = dir.path().join("nope.srpl");
    assert_eq!(code(&srpl(&["eval", missing.to_str().unwrap()])), 6);
}

#[test]
fn diagnose_reports_and_missing_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = srpl(&["train", "--task", "dyck3", "--engine", "spectral", "--freeze-basis", "--steps", "4", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let out = dir.path().join("diag");
    let o = srpl(&["diagnose", "--run", run.to_str().unwrap(), "--distance", "60", "--samples", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let zz: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("zigzag_layer0.json")).unwrap()).unwrap();
    assert_eq!(zz["mean_abs_shift"], 0.0);
    assert_eq!(zz["alternation_rate"], 0.0);
    assert!(out.join("depth_gram.csv").exists() && out.join("depth_projection.csv").exists());
    let res = std::fs::read_to_string(out.join("resonance.csv")).unwrap();
    let bests: std::collections::HashSet<&str> = res.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(bests.len(), 1, "frozen run gives a flat trajectory:\n{res}");

    for l in 0..2 {
        std::fs::remove_file(run.join(format!("basis_layer{l}.csv"))).unwrap();
    }
    let o = srpl(&["diagnose", "--run", run.to_str().unwrap(), "--report", "resonance", "--distance", "60"]);
    assert_eq!(code(&o), 6);
    assert!(String::from_utf8_lossy(&o.stderr).contains("basis_layer0.csv"));
}

#[test]
fn compare_writes_a_table_for_one_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("cmp");
    let o = Command::new(env!("CARGO_BIN_EXE_srpl"))
        .args(["compare", "--task", "modulo", "--seeds", "1,2", "--steps", "3", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("SRPL_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 4 * 3);
    assert!(out.join("modulo_spectral_seed2").join("history.csv").exists());
}
