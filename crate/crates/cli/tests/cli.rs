use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedfta(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedfta"));
    cmd.args(args).env_remove("FEDFTA_SEED");
    if let Some(s) = seed {
        cmd.env("FEDFTA_SEED", s);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
    "master-seed": 3,
    "data": {"source": "synthetic", "class-counts": [30, 25, 35], "separation": 3.0},
    "input-dim": 4, "feature-dim": 8, "hidden": [6],
    "clients": 3, "participants": 2, "rounds": 4, "eta": 0.2,
    "seeds": 2, "distributions": [{"kind": "iid"}]
}"#;

#[test]
fn version_flag() {
    let out = fedfta(&["--version"], None);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = fedfta(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let history = fs::read_to_string(out_dir.join("history.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["t"], 1);
    assert_eq!(lines[0]["participants"].as_array().unwrap().len(), 2);
    assert!(lines[0]["elapsed_ms"].is_number());

    let metrics = fs::read_to_string(out_dir.join("final_metrics.csv")).unwrap();
    assert!(metrics.starts_with("scope,accuracy,precision,recall,specificity,f1"));
    assert_eq!(metrics.lines().count(), 5);
    let confusion = fs::read_to_string(out_dir.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().next(), Some("actual,predicted_0,predicted_1,predicted_2"));
    // 90 samples at 20% test → 6 + 5 + 7
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 18);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config_echo.json")).unwrap()).unwrap();
    assert_eq!(echo["master-seed"], 3);
    assert_eq!(echo["rounds"], 4);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = fedfta(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()], Some("99"));
    assert!(out.status.success());
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config_echo.json")).unwrap()).unwrap();
    assert_eq!(echo["master-seed"], 99);

    let bad = fedfta(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()], Some("abc"));
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FEDFTA_SEED"));
}

#[test]
fn config_error_is_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"clients": 10, "participants": 20}"#);
    let out = fedfta(&["run", "--config", &cfg], None);
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["kind"], "config");
    assert_eq!(record["key"], "participants");

    let cfg = write_config(dir.path(), r#"{"lr": 0.1}"#);
    let out = fedfta(&["run", "--config", &cfg], None);
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(record["message"].as_str().unwrap().contains("eta"));
}

#[test]
fn ingestion_error_writes_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    fs::write(&data, "f0,f1,label\n0.1,0.2,0\n0.3,0.4,2.5\n").unwrap();
    let out_dir = dir.path().join("out");
    let body = format!(
        r#"{{"data": {{"source": "csv", "path": {:?}}}, "output-dir": {:?}}}"#,
        data.to_str().unwrap(),
        out_dir.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), &body);
    let out = fedfta(&["run", "--config", &cfg], None);
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["kind"], "ingestion");
    assert!(record["message"].as_str().unwrap().contains("row 3"));
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("error.json")).unwrap()).unwrap();
    assert_eq!(saved, record);
}

#[test]
fn gen_data_then_run_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("blobs.csv");
    let body = SMALL.replacen('{', &format!("{{\"dataset-path\": {:?},", csv_path.to_str().unwrap()), 1);
    let cfg = write_config(dir.path(), &body);
    let out = fedfta(&["gen-data", "--config", &cfg], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(csv_path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["samples"], 90);
    assert_eq!(sidecar["class_counts"], serde_json::json!([30, 25, 35]));

    // Training on the exported CSV matches training on the generated data.
    let synthetic = dir.path().join("synthetic");
    let from_csv = dir.path().join("csv");
    assert!(fedfta(&["run", "--config", &cfg, "--out", synthetic.to_str().unwrap()], None).status.success());
    let csv_body = body.replacen(
        r#""data": {"source": "synthetic", "class-counts": [30, 25, 35], "separation": 3.0},"#,
        &format!(r#""data": {{"source": "csv", "path": {:?}}},"#, csv_path.to_str().unwrap()),
        1,
    );
    let csv_cfg = dir.path().join("csv.json");
    fs::write(&csv_cfg, csv_body).unwrap();
    let out = fedfta(&["run", "--config", csv_cfg.to_str().unwrap(), "--out", from_csv.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["final_metrics.csv", "confusion.csv"] {
        assert_eq!(
            fs::read_to_string(synthetic.join(f)).unwrap(),
            fs::read_to_string(from_csv.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn compare_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("cmp");
    let out = fedfta(
        &["compare", "--config", &cfg, "--aggregators", "fedavg,fta", "--out", out_dir.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("aggregator,distribution,seed,final_accuracy,final_macro_f1,rounds_to_target")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("fedavg,iid,3,"));
    assert!(rows[3].starts_with("fta,iid,4,"));
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out_dir.join("cells/fta-iid-seed4/history.jsonl").is_file());

    let one = fedfta(&["compare", "--config", &cfg, "--aggregators", "fta"], None);
    assert!(!one.status.success());
    let unknown = fedfta(&["compare", "--config", &cfg, "--aggregators", "fedavg,median"], None);
    assert!(!unknown.status.success());
}

fn without_timing(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(",\"elapsed_ms\":").unwrap().0.to_string())
        .collect()
}

#[test]
fn config_echo_reproduces_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    assert!(fedfta(&["run", "--config", &cfg, "--out", first.to_str().unwrap()], Some("11")).status.success());
    let echo = first.join("config_echo.json");
    let out = fedfta(&["run", "--config", echo.to_str().unwrap(), "--out", second.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(without_timing(&first.join("history.jsonl")), without_timing(&second.join("history.jsonl")));
}
