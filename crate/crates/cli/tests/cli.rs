use std::path::Path;
use std::process::{Command, Output};

use cinefix::detect::DetectConfig;
use cinefix::io::CktTensor;
use cinefix::recon::ReconConfig;
use cinefix::train::TrainConfig;

fn cinefix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cinefix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let o = cinefix(args);
    assert_eq!(
        code(&o),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ckt_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckt"))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(code(&cinefix(&["--help"])), 0);
    assert_eq!(code(&cinefix(&["phantom", "--help"])), 0);
    let o = cinefix(&["phantom", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&cinefix(&[])), 2);
    assert_eq!(code(&cinefix(&["corrupt", "--lines", "2"])), 2);
    assert_eq!(code(&cinefix(&["--workers", "0", "gradcheck"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = cinefix(&[
        "phantom",
        "--subjects",
        "5",
        "--split",
        "2,2,2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not match"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = cinefix(&["corrupt", "--in", s(&missing), "--lines", "2"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(code(&cinefix(&["report", "--in", s(&bad)])), 1);
}

#[test]
fn phantom_writes_subjects_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&[
        "phantom",
        "--subjects",
        "12",
        "--split",
        "8,2,2",
        "--seed",
        "7",
        "--out",
        s(&d),
    ]);
    assert_eq!(ckt_files(&d).len(), 12);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subjects"].as_array().unwrap().len(), 12);
    assert_eq!(manifest["spec"]["seed"], 7);
    assert_eq!(manifest["spec"]["test"], 2);
    let clean = CktTensor::read(&d.join("subject_0000.ckt"))
        .unwrap()
        .to_cine()
        .unwrap();
    assert_eq!(clean.dims(), (20, 32, 32));
}

#[test]
fn workers_do_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "--workers",
        "1",
        "phantom",
        "--split",
        "3,1,1",
        "--frames",
        "6",
        "--size",
        "16",
        "--seed",
        "2",
        "--out",
        s(&a),
    ]);
    ok(&[
        "phantom",
        "--split",
        "3,1,1",
        "--frames",
        "6",
        "--size",
        "16",
        "--seed",
        "2",
        "--out",
        s(&b),
        "--workers",
        "3",
    ]);
    for f in ckt_files(&a) {
        assert_eq!(
            std::fs::read(a.join(&f)).unwrap(),
            std::fs::read(b.join(&f)).unwrap(),
            "{f}"
        );
    }
    ok(&[
        "--workers",
        "1",
        "corrupt",
        "--in",
        s(&a),
        "--lines",
        "4",
        "--seed",
        "1",
    ]);
    ok(&[
        "--workers",
        "2",
        "corrupt",
        "--in",
        s(&b),
        "--lines",
        "4",
        "--seed",
        "1",
    ]);
    let (ca, cb) = (a.join("corrupted_n4"), b.join("corrupted_n4"));
    assert_eq!(ckt_files(&ca), ckt_files(&cb));
    for f in ckt_files(&ca) {
        assert_eq!(
            std::fs::read(ca.join(&f)).unwrap(),
            std::fs::read(cb.join(&f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn corrupt_writes_kspace_image_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&[
        "phantom",
        "--split",
        "2,1,1",
        "--frames",
        "8",
        "--size",
        "16",
        "--out",
        s(&d),
    ]);
    ok(&["corrupt", "--in", s(&d), "--lines", "8", "--seed", "3"]);
    let c = d.join("corrupted_n8");
    assert_eq!(ckt_files(&c).len(), 12);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(c.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_lines"], 8);
    assert_eq!(manifest["subjects"].as_array().unwrap().len(), 4);
    let mask = CktTensor::read(&c.join("subject_0001_mask.ckt"))
        .unwrap()
        .to_mask()
        .unwrap();
    for t in 0..8 {
        assert_eq!((0..16).filter(|&y| !mask.get(t, y)).count(), 8);
    }
    let ks = CktTensor::read(&c.join("subject_0001_kspace.ckt"))
        .unwrap()
        .to_kspace()
        .unwrap();
    assert_eq!(ks.dims(), (8, 16, 16));
    CktTensor::read(&c.join("subject_0001_image.ckt"))
        .unwrap()
        .to_cine()
        .unwrap();
    assert_eq!(
        code(&cinefix(&["corrupt", "--in", s(&d), "--lines", "17"])),
        2
    );
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk(seed);
    c.detect = DetectConfig::desk(6, 16, 16);
    c.detect.channels = vec![2, 2, 2, 2];
    c.recon = ReconConfig::desk(6, 16, 16);
    c.recon.channels = vec![4];
    c.batch_size = 2;
    c.pretrain_epochs = 1;
    c.detect_pretrain_epochs = 1;
    c.max_epochs = 1;
    c.patience_epochs = 1;
    c.severities = vec![0, 2, 4];
    c.eval_severity = 2;
    c
}

#[test]
fn train_eval_report_and_recon() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let d = p.join("d");
    ok(&[
        "phantom",
        "--split",
        "4,2,2",
        "--frames",
        "6",
        "--size",
        "16",
        "--seed",
        "5",
        "--out",
        s(&d),
    ]);
    let cfg = p.join("config.json");
    std::fs::write(&cfg, serde_json::to_string_pretty(&tiny_config(5)).unwrap()).unwrap();

    let run = p.join("run");
    let text = ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&d),
        "--out",
        s(&run),
    ]);
    assert!(text.contains("end2end") && text.contains("known_mask"));
    for f in [
        "config.json",
        "history.jsonl",
        "report.json",
        "report.csv",
        "report.txt",
        "manifest.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    for v in ["separate", "end2end", "known_mask"] {
        assert!(
            run.join("checkpoints").join(format!("{v}.ckt")).is_file(),
            "{v}"
        );
    }

    let run2 = p.join("run2");
    ok(&[
        "--workers",
        "2",
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&d),
        "--out",
        s(&run2),
    ]);
    assert_eq!(
        std::fs::read(run.join("report.json")).unwrap(),
        std::fs::read(run2.join("report.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(run.join("checkpoints/end2end.ckt")).unwrap(),
        std::fs::read(run2.join("checkpoints/end2end.ckt")).unwrap()
    );

    let eval_dir = p.join("eval");
    let dump = p.join("panels");
    ok(&[
        "eval",
        "--run",
        s(&run),
        "--data",
        s(&d),
        "--out",
        s(&eval_dir),
        "--dump",
        s(&dump),
    ]);
    assert_eq!(
        std::fs::read(run.join("report.json")).unwrap(),
        std::fs::read(eval_dir.join("report.json")).unwrap(),
        "evaluating saved checkpoints reproduces the training report"
    );
    assert!(eval_dir.join("manifest.json").is_file());
    assert!(dump.join("subject_0006_end2end_corrected.pgm").is_file());
    let other = p.join("eval4");
    ok(&[
        "eval",
        "--run",
        s(&run),
        "--severity",
        "4",
        "--out",
        s(&other),
    ]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(other.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["eval_severity"], 4);

    let csv = ok(&["report", "--in", s(&run), "--format", "csv"]);
    assert!(csv.starts_with("method,corrupted_psnr"));
    assert_eq!(csv.lines().count(), 5);
    let txt = ok(&[
        "report",
        "--in",
        s(&run.join("report.json")),
        "--out",
        s(&p.join("r.txt")),
    ]);
    assert!(txt.contains("oracle"));
    assert_eq!(std::fs::read_to_string(p.join("r.txt")).unwrap(), txt);

    ok(&["corrupt", "--in", s(&d), "--lines", "2", "--seed", "9"]);
    let c = d.join("corrupted_n2");
    let out = p.join("recon");
    let msg = ok(&[
        "recon",
        "--model",
        s(&run),
        "--in",
        s(&c.join("subject_0006_kspace.ckt")),
        "--dc",
        "hard",
        "--truth",
        s(&d.join("subject_0006.ckt")),
        "--out",
        s(&out),
    ]);
    assert!(msg.contains("psnr"));
    let img = CktTensor::read(&out.join("corrected.ckt"))
        .unwrap()
        .to_cine()
        .unwrap();
    assert_eq!(img.dims(), (6, 16, 16));
    let mask = CktTensor::read(&out.join("mask.ckt"))
        .unwrap()
        .to_mask()
        .unwrap();
    assert_eq!((mask.frames(), mask.lines()), (6, 16));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("recon_manifest.json")).unwrap())
            .unwrap();
    assert!(m["psnr"].is_number() || m["psnr"] == "inf");
    ok(&[
        "recon",
        "--model",
        s(&run.join("checkpoints")),
        "--variant",
        "separate",
        "--in",
        s(&d.join("subject_0007.ckt")),
        "--dc",
        "soft",
        "--out",
        s(&p.join("soft")),
    ]);
    assert_eq!(
        code(&cinefix(&[
            "recon",
            "--model",
            s(&run),
            "--variant",
            "nope",
            "--in",
            s(&d.join("subject_0007.ckt"))
        ])),
        1
    );
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck"]);
    assert!(text.contains("gradient checks passed"));
    assert!(!text.contains("FAIL"));
}
