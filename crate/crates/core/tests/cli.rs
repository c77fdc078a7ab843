use std::path::Path;
use std::process::{Command, Output};

use mia_audit::dataset::load_csv;
use mia_audit::eval::SweepResult;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mia-audit"))
        .args(args)
        .env("MIA_AUDIT_PARALLELISM", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"
seed = 4
hidden_layers = [8]
num_reference_models = 2
game_rounds = 100

[data]
source = "csv"
path = "data.csv"

[query]
num_queries = 2

[target]
epochs = 4

[shadow]
epochs = 4

[reference]
epochs = 4

[scoring]
hidden_layers = [4, 4, 4]
epochs = 2
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_run_report_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&bin(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--num-samples",
        "240",
        "--feature-dim",
        "3",
        "--seed",
        "2",
    ]));
    let ds = load_csv(&data).unwrap();
    assert_eq!(ds.len(), 240);
    assert_eq!(ds.feature_dim(), 3);

    let config = write_config(dir.path());
    let out = dir.path().join("run");
    ok(&bin(&["run", "--config", &config, "--out", out.to_str().unwrap()]));
    assert!(!out.join("RUN_INCOMPLETE").exists());
    for name in ["config.json", "score_table_target.csv", "metrics_rapid.json", "roc_loss.csv", "loss_buckets.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }

    let text = ok(&bin(&["report", out.to_str().unwrap()]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["attack", "TPR@0.001", "TPR@0.01", "TPR@0.1", "AUC", "BalancedAcc"]);
    assert!(lines[1].starts_with("loss "));
    assert!(lines[6].starts_with("config_digest: "));

    let sweep_dir = dir.path().join("sweep");
    let printed = ok(&bin(&[
        "sweep",
        "--config",
        &config,
        "--axis",
        "num_reference_models",
        "--values",
        "1,2",
        "--seeds",
        "4,5",
        "--out",
        sweep_dir.to_str().unwrap(),
    ]));
    let path = sweep_dir.join("sweep_num_reference_models.csv");
    assert_eq!(printed.trim(), path.to_str().unwrap());
    let rows = SweepResult::read_rows(&path).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 5 * 5);
    assert!(rows.iter().all(|r| r.axis == "num_reference_models"));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["report", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    // the config points at a missing CSV: the marker keeps the error
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = bin(&["run", "--config", &config, "--out", run_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let marker = std::fs::read_to_string(run_dir.join("RUN_INCOMPLETE")).unwrap();
    assert!(marker.contains("data.csv"), "{marker}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "num_reference_models = 0\n").unwrap();
    let out = bin(&["run", "--config", bad.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_reference_models"));

    let out = Command::new(env!("CARGO_BIN_EXE_mia-audit"))
        .args(["report", "x"])
        .env("MIA_AUDIT_PARALLELISM", "zero")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("MIA_AUDIT_PARALLELISM"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["benchmark.toml", "dp.toml"] {
        let c = mia_audit::config::ExperimentConfig::load(&dir.join(name)).unwrap();
        c.validate().unwrap();
    }
}
