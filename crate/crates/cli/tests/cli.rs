use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use tcemnet::checkpoint::Checkpoint;
use tcemnet::data::{generate_synthetic, load_long_csv, write_long_csv, SyntheticConfig};
use tcemnet::model::TcemParams;
use tcemnet::training::TrainConfig;
use tcemnet_cli::{run, CliError};

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("tcemnet")
        .chain(list.iter().copied())
        .map(String::from)
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

const TOY_DATA: &str = "patients = 40\nvisits = 6\n";
const TOY_TRAIN: &str =
    "hidden = 16\nlatent = 8\nmem_width = 8\nmem_slots = 4\nepochs = 3\nbatch_size = 8\n";

fn toy_cohort(dir: &Path) -> PathBuf {
    let cfg = write(&dir.join("data.cfg"), TOY_DATA);
    let csv = dir.join("toy.csv");
    run(args(&[
        "generate",
        "--config",
        p(&cfg),
        "--seed",
        "5",
        "--out",
        p(&csv),
    ]))
    .unwrap();
    csv
}

#[test]
fn generate_default_is_sep3_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    run(args(&["generate", "--seed", "1", "--out", p(&a)])).unwrap();
    run(args(&["generate", "--seed", "1", "--out", p(&b)])).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let cohort = load_long_csv(&a).unwrap();
    assert_eq!(cohort.len(), 200);
    assert!(cohort.patients.iter().all(|s| s.visits() == 10));
    let rows = String::from_utf8(bytes).unwrap().lines().count();
    assert_eq!(rows, cohort.total_visits() + 1);
    assert!(dir.path().join("a.csv.manifest.txt").exists());
}

#[test]
fn generate_manifest_reproduces_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    run(args(&["generate", "--seed", "9", "--out", p(&a)])).unwrap();
    let manifest = dir.path().join("a.csv.manifest.txt");
    let b = dir.path().join("b.csv");
    run(args(&[
        "generate",
        "--config",
        p(&manifest),
        "--out",
        p(&b),
    ]))
    .unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn zero_learning_rate_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_cohort(dir.path());
    let cfg = write(&dir.path().join("t.cfg"), &format!("{TOY_TRAIN}lr = 0\n"));
    let out = dir.path().join("run");
    run(args(&[
        "train",
        "--data",
        p(&csv),
        "--config",
        p(&cfg),
        "--seed",
        "2",
        "--out",
        p(&out),
    ]))
    .unwrap();
    let ck = Checkpoint::load(&out.join("model.ckpt")).unwrap();
    let init = TcemParams::init(&ck.params.config, 2).unwrap();
    assert_eq!(ck.params, init);
    let log = std::fs::read_to_string(out.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log
        .lines()
        .all(|l| l.starts_with("epoch=") && l.contains(" val=")));
}

#[test]
fn supervised_without_labels_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cohort = generate_synthetic(&SyntheticConfig {
        patients: 10,
        ..SyntheticConfig::sep3(0)
    })
    .unwrap();
    cohort.label_vocab.clear();
    for s in &mut cohort.patients {
        s.labels.iter_mut().for_each(|l| *l = None);
    }
    let csv = dir.path().join("nolabel.csv");
    write_long_csv(&cohort, &csv).unwrap();
    let out = dir.path().join("run");
    let err = run(args(&[
        "train",
        "--data",
        p(&csv),
        "--mode",
        "supervised",
        "--out",
        p(&out),
    ]))
    .unwrap_err();
    assert_eq!(err.code(), "config");
    assert!(!out.exists());
}

#[test]
fn eval_outputs_are_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_cohort(dir.path());
    let cfg = write(&dir.path().join("t.cfg"), TOY_TRAIN);
    let out = dir.path().join("run");
    run(args(&[
        "train",
        "--data",
        p(&csv),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]))
    .unwrap();
    let ck = out.join("model.ckpt");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    run(args(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&csv),
        "--k",
        "3",
        "--out",
        p(&e1),
    ]))
    .unwrap();
    run(args(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&csv),
        "--k",
        "3",
        "--out",
        p(&e2),
    ]))
    .unwrap();
    for f in [
        "metrics.txt",
        "assignments.csv",
        "projection.csv",
        "scatter.svg",
    ] {
        assert_eq!(
            std::fs::read(e1.join(f)).unwrap(),
            std::fs::read(e2.join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = std::fs::read_to_string(e1.join("metrics.txt")).unwrap();
    for m in [
        "purity",
        "nmi",
        "ari",
        "baseline_purity",
        "baseline_nmi",
        "baseline_ari",
    ] {
        assert!(metrics.contains(&format!("metric={m} ")), "{m}");
    }
    let proj = std::fs::read_to_string(e1.join("projection.csv")).unwrap();
    assert_eq!(
        proj.lines().next(),
        Some("patient_id,visit_index,cluster,pc1,pc2")
    );
    // 40 patients split 3/1/1 leaves 8 test patients with 6 visits each.
    assert_eq!(proj.lines().count(), 8 * 6 + 1);
}

#[test]
fn eval_rejects_incompatible_data() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_cohort(dir.path());
    let cfg = write(
        &dir.path().join("t.cfg"),
        &format!("{TOY_TRAIN}epochs = 1\n").replace("epochs = 3\n", ""),
    );
    let out = dir.path().join("run");
    run(args(&[
        "train",
        "--data",
        p(&csv),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]))
    .unwrap();
    let wide = generate_synthetic(&SyntheticConfig {
        patients: 10,
        ..SyntheticConfig::from_kv(&tcemnet::kv::KvMap::parse("features = 12").unwrap(), 0).unwrap()
    })
    .unwrap();
    let wide_csv = dir.path().join("wide.csv");
    write_long_csv(&wide, &wide_csv).unwrap();
    let err = run(args(&[
        "eval",
        "--checkpoint",
        p(&out.join("model.ckpt")),
        "--data",
        p(&wide_csv),
        "--out",
        p(&dir.path().join("e")),
    ]))
    .unwrap_err();
    assert_eq!(err.code(), "compatibility");
}

#[test]
fn gradcheck_passes_and_fault_injection_names_the_tensor() {
    let report = run(args(&["gradcheck"])).unwrap();
    assert!(report
        .trim_end()
        .ends_with(&format!("result=pass tolerance={:e} step={:e}", 1e-4, 1e-5)));
    for mode in ["supervised", "unsupervised"] {
        assert!(report.contains(&format!("mode={mode} tensor=encoder.w_hidden ")));
    }
    assert!(report
        .lines()
        .filter(|l| l.starts_with("mode="))
        .all(|l| l.contains("max_rel_error=")));
    match run(args(&[
        "gradcheck",
        "--mode",
        "supervised",
        "--corrupt",
        "patient.calibration.w",
    ])) {
        Err(CliError::GradcheckFailed(which)) => {
            assert_eq!(which, "supervised:patient.calibration.w")
        }
        other => panic!("expected a gradcheck failure, got {other:?}"),
    }
}

#[test]
fn gradcheck_refuses_large_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("big.cfg"),
        "hidden = 128\nlatent = 128\nmem_width = 128\n",
    );
    let err = run(args(&["gradcheck", "--config", p(&cfg)])).unwrap_err();
    assert_eq!(err.code(), "config");
    assert!(err.to_string().contains("50000"));
}

#[test]
fn train_manifest_reproduces_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_cohort(dir.path());
    let cfg = write(&dir.path().join("t.cfg"), TOY_TRAIN);
    let a = dir.path().join("a");
    run(args(&[
        "train",
        "--data",
        p(&csv),
        "--config",
        p(&cfg),
        "--seed",
        "4",
        "--workers",
        "2",
        "--out",
        p(&a),
    ]))
    .unwrap();
    let manifest = tcemnet::kv::KvMap::load(&a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.get("run.command"), Some("train"));
    assert!(TrainConfig::from_kv(&manifest).is_ok());
    let b = dir.path().join("b");
    run(args(&[
        "train",
        "--data",
        p(&csv),
        "--config",
        p(&a.join("manifest.txt")),
        "--workers",
        "1",
        "--out",
        p(&b),
    ]))
    .unwrap();
    // Identical apart from the recorded worker count.
    let ckpt = |dir: &Path| {
        std::fs::read_to_string(dir.join("model.ckpt"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("train.workers ="))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    };
    assert_eq!(ckpt(&a), ckpt(&b));
    assert_eq!(
        std::fs::read(a.join("train_log.txt")).unwrap(),
        std::fs::read(b.join("train_log.txt")).unwrap()
    );
}

#[test]
fn toy_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let csv = toy_cohort(dir.path());
    let cfg = write(&dir.path().join("t.cfg"), "hidden = 16\nepochs = 70\n");
    let t = Instant::now();
    run(args(&[
        "train",
        "--data",
        p(&csv),
        "--config",
        p(&cfg),
        "--workers",
        "1",
        "--out",
        p(&dir.path().join("r")),
    ]))
    .unwrap();
    assert!(t.elapsed().as_secs() < 300);
}

#[test]
fn binary_reports_error_codes_and_exit_status() {
    let bin = env!("CARGO_BIN_EXE_tcemnet");
    let out = Command::new(bin)
        .args(["train", "--nope"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error_code=usage"));

    let out = Command::new(bin)
        .args([
            "train",
            "--data",
            "/nonexistent/x.csv",
            "--out",
            "/tmp/never",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error_code=io"));

    let out = Command::new(bin)
        .args(["gradcheck", "--corrupt", "head.b"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tensor=head.b ") && err.contains("status=FAIL"));
    assert!(err
        .lines()
        .last()
        .unwrap()
        .starts_with("error_code=gradcheck_failed"));

    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
