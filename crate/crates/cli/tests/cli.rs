use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use itcfn::config::RunConfig;
use itcfn::tensor::read_checkpoint;
use itcfn::trainer::MetricsReport;

fn itcfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itcfn")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.cohort.n_subjects = 30;
    cfg.cohort.volume_shape = [8, 8, 8];
    cfg.cohort.missing_pet_rate = 0.3;
    cfg.mmg.codebook_size = 8;
    cfg.mmg.code_dim = 8;
    cfg.train.epochs_stage1 = 2;
    cfg.train.epochs_stage2 = 2;
    cfg.train.k_folds = 3;
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_cohort_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("cohort");
    let run = itcfn(&["gen", "--config", s(&cfg), "--seed", "7", "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(out.join("manifest.csv").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("cohort.json")).unwrap()).unwrap();
    let written = RunConfig::load(out.join("config.toml")).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["config_hash"], written.hash());
    assert_eq!(summary["n_subjects"], 30);
    assert_eq!(summary["n_missing_pet"], 9);
}

#[test]
fn gen_rejects_out_of_range_rate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[cohort]\nmissing_pet_rate = 1.5\n").unwrap();
    let run = itcfn(&["gen", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("missing_pet_rate"), "{}", stderr(&run));
}

#[test]
fn gen_reports_unwritable_output_as_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    // a regular file where a directory is needed fails even for root
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    let run = itcfn(&["gen", "--config", s(&cfg), "--out", s(&blocker.join("cohort"))]);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
}

#[test]
fn missing_config_file_is_io_failure() {
    let run = itcfn(&["gen", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&run), 3);
}

#[test]
fn print_defaults_is_the_default_config() {
    let run = itcfn(&["gen", "--print-defaults"]);
    assert_eq!(code(&run), 0);
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::default());
}

#[test]
fn unknown_ablation_is_a_config_error() {
    let run = itcfn(&["cv", "--ablation", "everything"]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("everything"));
}

const MODES: [&str; 4] = ["none", "mmg_only", "tcaf_only", "mmg_tcaf"];

fn read_all(dir: &Path) -> Vec<Vec<u8>> {
    MODES
        .iter()
        .map(|m| fs::read(dir.join(format!("{m}.json"))).unwrap())
        .collect()
}

#[test]
fn cv_all_modes_is_deterministic_and_parallel_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        let run = itcfn(&["cv", "--config", s(&cfg), "--ablation", "all", "--out", s(out)]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
    }
    let run = itcfn(&["cv", "--config", s(&cfg), "--ablation", "all", "--parallel-folds", "2", "--out", s(&c)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));

    let first = read_all(&a);
    assert_eq!(first, read_all(&b));
    assert_eq!(first, read_all(&c));

    let hash = RunConfig::load(&cfg).unwrap().hash();
    for m in MODES {
        let report = MetricsReport::read(a.join(format!("{m}.json"))).unwrap();
        assert_eq!(report.mode.name(), m);
        assert_eq!(report.folds.len(), 3);
        assert_eq!(report.config_hash, hash);
    }
    for fold in 0..3 {
        let fd = a.join(format!("fold_{fold}"));
        for name in ["fold.json", "mmg.itck", "mmg_loss.csv", "fusion_loss_none.csv", "fusion_loss_mmg_tcaf.csv"] {
            assert!(fd.join(name).exists(), "{name}");
        }
        let csv = fs::read_to_string(fd.join("fusion_loss_tcaf_only.csv")).unwrap();
        assert!(csv.starts_with("# seed="), "{csv}");
        assert!(csv.lines().next().unwrap().ends_with(&hash));
        let meta = read_checkpoint(fd.join("mmg.itck")).unwrap().metadata.unwrap();
        assert!(meta.contains(&hash));
        assert_eq!(fs::read(fd.join("mmg.itck")).unwrap(), fs::read(c.join(format!("fold_{fold}/mmg.itck"))).unwrap());
    }
}

#[test]
fn cv_defaults_to_configured_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let run = itcfn(&["cv", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(out.join("mmg_tcaf.json").exists());
    assert!(!out.join("none.json").exists());
}

#[test]
fn stages_run_separately() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cohort = dir.path().join("cohort");
    let stage1 = dir.path().join("s1");
    let stage2 = dir.path().join("s2");
    assert_eq!(code(&itcfn(&["gen", "--config", s(&cfg), "--out", s(&cohort)])), 0);
    let run = itcfn(&["train-mmg", "--config", s(&cfg), "--cohort", s(&cohort), "--fold", "0", "--out", s(&stage1)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let mmg = stage1.join("mmg.itck");
    let run = itcfn(&[
        "train-fusion",
        "--config",
        s(&cfg),
        "--cohort",
        s(&cohort),
        "--fold",
        "0",
        "--mmg",
        s(&mmg),
        "--out",
        s(&stage2),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(stage2.join("fusion.itck").exists());
    assert!(!stage2.join("mmg.itck").exists());
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(stage2.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["mode"], "mmg_tcaf");
    assert_eq!(metrics["n_test"], 10);
    let auc = metrics["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn verify_passes_and_catches_the_mutation() {
    let run = itcfn(&["verify"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let table = String::from_utf8(run.stdout).unwrap();
    assert!(table.lines().filter(|l| l.starts_with("PASS")).count() >= 20);

    let run = itcfn(&["verify", "--mutate", "focal-sign"]);
    assert_eq!(code(&run), 1);
    let table = String::from_utf8(run.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("FAIL") && l.contains("focal_gamma0_cross_entropy")), "{table}");

    assert_eq!(code(&itcfn(&["verify", "--mutate", "nothing"])), 2);
}
