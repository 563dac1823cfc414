use std::path::Path;
use std::process::{Command, Output};

fn smae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smae"))
        .args(args)
        .env_remove("SMAE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = smae(args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn geom_check_prints_counts() {
    assert!(ok(&["geom-check", "--level", "6"]).contains("40962 vertices, 81920 faces, 1280 patches × 45"));
    assert!(ok(&["geom-check", "--level", "4", "--patch-level", "1"]).contains("2562 vertices, 5120 faces, 80 patches × 45"));
}

#[test]
fn geom_check_rejects_level_zero() {
    let o = smae(&["geom-check", "--level", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("level 0"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(smae(&["geom-check"]).status.code(), Some(1));
    assert_eq!(smae(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ssrf");
    let b = dir.path().join("b.ssrf");
    for out in [&a, &b] {
        ok(&["gen-data", "--n", "20", "--level", "2", "--patch-level", "1", "--seed", "7", "--out", p(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let o = Command::new(env!("CARGO_BIN_EXE_smae"))
        .args(["gen-data", "--n", "20", "--level", "2", "--patch-level", "1", "--out", p(&b)])
        .env("SMAE_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_data_rejects_tiny_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let o = smae(&["gen-data", "--n", "5", "--out", p(&dir.path().join("x.ssrf"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

fn small_setup(dir: &Path) -> (String, String) {
    let data = dir.join("data.ssrf");
    ok(&["gen-data", "--n", "30", "--level", "2", "--patch-level", "1", "--channels", "2", "--seed", "1", "--out", p(&data)]);
    let config = dir.join("config.json");
    std::fs::write(
        &config,
        r#"{"model": {"patchLevel": 1, "dataLevel": 2, "channels": 2, "hiddenDim": 8, "layers": 1, "heads": 2, "ffnMult": 2},
            "pretrain": {"batch": 8, "learningRate": 0.02},
            "train": {"batch": 8, "learningRate": 0.001}}"#,
    )
    .unwrap();
    (p(&data).to_string(), p(&config).to_string())
}

#[test]
fn pretrain_rejects_full_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = small_setup(dir.path());
    let out = dir.path().join("pre");
    let o = smae(&["pretrain", "--ratio", "1.0", "--config", &config, "--data", &data, "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_setup(dir.path());
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"modle": {}}"#).unwrap();
    let o = smae(&["pretrain", "--config", p(&config), "--data", &data, "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn empty_report_says_no_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = smae(&["report", "--runs", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no runs found"), "{}", stderr(&o));
}

#[test]
fn pretrain_finetune_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = small_setup(dir.path());
    let d = dir.path();
    let pre = d.join("pre");
    ok(&["pretrain", "--method", "smae", "--ratio", "0.5", "--epochs", "2", "--config", &config, "--data", &data, "--out", p(&pre), "--seed", "3"]);
    for f in ["checkpoint.smck", "metrics.csv", "config.json", "recon_epoch_002.ssrf"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let echoed: serde_json::Value = serde_json::from_slice(&std::fs::read(pre.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["pretrain"]["seed"], 3);

    let mpp = smae(&["pretrain", "--method", "mpp", "--ratio", "0.3", "--epochs", "1", "--config", &config, "--data", &data, "--out", p(&d.join("mpp"))]);
    assert!(mpp.status.success());
    assert!(stderr(&mpp).contains("ignored"));

    let ck = pre.join("checkpoint.smck");
    for seed in ["1", "2"] {
        ok(&["finetune", "--init", p(&ck), "--epochs", "2", "--config", &config, "--data", &data, "--out", p(&d.join("runs/smae").join(seed)), "--seed", seed]);
        ok(&["finetune", "--init", "none", "--epochs", "2", "--config", &config, "--data", &data, "--out", p(&d.join("runs/scratch").join(seed)), "--seed", seed]);
    }
    ok(&["finetune", "--init", "none", "--mode", "probe", "--epochs", "1", "--config", &config, "--data", &data, "--out", p(&d.join("probe"))]);
    ok(&["finetune", "--init", "none", "--fraction", "0.5", "--epochs", "1", "--config", &config, "--data", &data, "--out", p(&d.join("half"))]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("half/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["dataFraction"], 0.5);

    let text = ok(&["report", "--runs", p(&d.join("runs"))]);
    assert!(text.contains("scratch") && text.contains("smae"), "{text}");
    let csv = std::fs::read_to_string(d.join("runs/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn sweep_writes_ranked_table_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = small_setup(dir.path());
    let out = dir.path().join("sweep");
    let args = ["sweep", "--ratios", "0.25,0.75", "--epochs", "1", "--finetune-epochs", "1", "--jobs", "2", "--config", &config, "--data", &data, "--out", p(&out)];
    let text = ok(&args);
    assert_eq!(text.lines().count(), 3);
    for r in ["ratio_0.25", "ratio_0.75"] {
        assert!(out.join(r).join("summary.json").exists());
    }
    let again = smae(&args);
    assert!(stderr(&again).matches("reusing").count() == 2);
    assert_eq!(stdout(&again), text);
}
