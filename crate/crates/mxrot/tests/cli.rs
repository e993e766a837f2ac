use std::path::Path;
use std::process::{Command, Output};

use mxrot::io::read_tensor;
use mxrot_core::formats::{fake_quantize, qsnr};
use mxrot_core::pipeline::{run_matrix, Method, QuantScheme};
use mxrot_core::QuantConfig;
use serde_json::Value;

fn mxrot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mxrot"))
        .args(args)
        .env("MXROT_THREADS", "2")
        .output()
        .expect("spawn mxrot")
}

fn ok_json(args: &[&str]) -> Value {
    let out = mxrot(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn gen(dir: &Path, name: &str, rows: &str, cols: &str, seed: &str) -> String {
    let p = dir.join(name).display().to_string();
    ok_json(&[
        "gen", "--rows", rows, "--cols", cols, "--seed", seed, "-o", &p,
    ]);
    p
}

#[test]
fn quantize_report_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let x = gen(dir.path(), "x.mxtb", "16", "64", "7");
    let report = dir.path().join("q.json");
    let deq = dir.path().join("deq.mxtb");
    let out = mxrot(&[
        "quantize",
        "-i",
        &x,
        "--format",
        "mxfp4",
        "--report",
        report.to_str().unwrap(),
        "-o",
        deq.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["report_type"], "quantize");

    let t = read_tensor(Path::new(&x)).unwrap();
    let fq = fake_quantize(&t, &QuantConfig::MXFP4).unwrap();
    assert_eq!(v["qsnr_db"].as_f64().unwrap(), qsnr(&t, &fq).unwrap());
    assert_eq!(read_tensor(&deq).unwrap(), fq);
}

#[test]
fn matrix_emits_one_record_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let x = gen(dir.path(), "x.mxtb", "32", "64", "1");
    let w = gen(dir.path(), "w.mxtb", "64", "16", "2");
    let csv = dir.path().join("m.csv");
    let v = ok_json(&[
        "matrix",
        "-x",
        &x,
        "-w",
        &w,
        "--methods",
        "rtn,quarot,brq",
        "--seed",
        "5",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    let names: Vec<_> = records
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["rtn", "quarot", "brq"]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);

    let xt = read_tensor(Path::new(&x)).unwrap();
    let wt = read_tensor(Path::new(&w)).unwrap();
    let lib = run_matrix(
        &xt,
        &wt,
        &[Method::Rtn, Method::QuaRot, Method::Brq],
        &[QuantScheme::Block(QuantConfig::MXFP4)],
        5,
    )
    .unwrap();
    for (r, l) in records.iter().zip(&lib) {
        assert_eq!(r["mse"].as_f64().unwrap(), l.mse);
        assert_eq!(r["flops"]["rotation"].as_u64().unwrap(), l.flops.rotation);
    }
}

#[test]
fn every_subcommand_documents_its_defaults() {
    for (cmd, default) in [
        ("gen", "[default: 0.01]"),
        ("quantize", "[default: mxfp4]"),
        ("analyze", "[default: 0.001]"),
        ("sweep", "[default: mxfp4]"),
        ("gptq", "[default: 128]"),
        ("optimize", "[default: 200]"),
        ("matrix", "[default: mxfp4]"),
        ("flops", "[default: 32]"),
    ] {
        let out = mxrot(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(
            text.contains(default),
            "{cmd} --help lacks {default}:\n{text}"
        );
    }
}

#[test]
fn usage_errors_exit_2_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let x = gen(dir.path(), "x.mxtb", "4", "64", "1");
    for (args, needle) in [
        (vec!["quantize", "-i", &x, "--format", "fp8"], "--format"),
        (vec!["quantize", "-i", &x, "--rot", "block"], "--seed"),
        (
            vec![
                "quantize",
                "-i",
                &x,
                "--rot",
                "block",
                "--rot-dim",
                "24",
                "--seed",
                "1",
            ],
            "--rot-dim",
        ),
        (
            vec![
                "matrix",
                "-x",
                &x,
                "-w",
                &x,
                "--methods",
                "awq",
                "--seed",
                "1",
            ],
            "--methods",
        ),
        (vec!["gen", "-o", "y.mxtb"], "--seed"),
    ] {
        let out = mxrot(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn file_errors_exit_1_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mxtb");
    std::fs::write(&bad, b"").unwrap();
    let out = mxrot(&["quantize", "-i", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.mxtb") && err.contains("magic"), "{err}");
}

#[test]
fn analysis_modes_produce_reports() {
    let dir = tempfile::tempdir().unwrap();
    let x = gen(dir.path(), "x.mxtb", "8", "128", "3");
    let v = ok_json(&["analyze", "--mode", "pot", "--points", "16"]);
    assert_eq!(v["arrays"]["x"].as_array().unwrap().len(), 16);
    let v = ok_json(&["sweep", "-i", &x, "--dims", "16,32", "--seed", "1"]);
    assert_eq!(v["arrays"]["mse"].as_array().unwrap().len(), 2);
    let v = ok_json(&[
        "analyze",
        "--mode",
        "thresholds",
        "-i",
        &x,
        "--thresholds",
        "0,1,2",
        "--rot",
        "global",
        "--seed",
        "1",
    ]);
    assert_eq!(v["arrays"]["fractions"][0], 1.0);
    assert_eq!(v["arrays"]["fractions_after"].as_array().unwrap().len(), 3);
    let v = ok_json(&[
        "analyze",
        "--mode",
        "loss-delta",
        "-i",
        &x,
        "--rot",
        "block",
        "--seed",
        "1",
    ]);
    assert_eq!(v["report_type"], "loss_delta");
    let v = ok_json(&["flops", "--width", "4096", "--rot-dim", "32"]);
    assert_eq!(v["ratio"], 32.0 / 4096.0);
}
