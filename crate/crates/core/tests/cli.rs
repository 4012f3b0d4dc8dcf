use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedcause::fedsim::{audit_messages, MessageLog};
use fedcause::harness::SWEEP_HEADER;

fn fedcause(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcause")).args(args).output().expect("spawn fedcause")
}

fn ok(args: &[&str]) -> String {
    let out = fedcause(args);
    assert!(out.status.success(), "fedcause {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, r#"{"site_sizes": [300, 400], "n_target": 600, "d_kl": 0.2}"#).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn generate_then_estimate_every_estimator() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", &cfg, "--seed", "42", "--out", data.to_str().unwrap()]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["site_means"].as_array().unwrap().len(), 2);

    for est in ["meta-ipw", "clb-ipw", "meta-aipw", "clb-aipw"] {
        for ratio in ["tilting", "knn"] {
            let stdout = ok(&["estimate", "--data", data.to_str().unwrap(), "--estimator", est, "--ratio", ratio, "--ci", "0.9"]);
            let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
            assert_eq!(report["estimator"], est);
            assert_eq!(report["ci_level"], 0.9);
            let (lo, hi, tau) = (report["ci_lo"].as_f64().unwrap(), report["ci_hi"].as_f64().unwrap(), report["tau_hat"].as_f64().unwrap());
            assert!(lo <= tau && tau <= hi);
        }
    }
}

#[test]
fn federated_estimate_matches_pooled_and_logs_clean_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap();
    ok(&["generate", "--config", &cfg, "--seed", "7", "--out", data_s]);

    let pooled: serde_json::Value = serde_json::from_str(&ok(&["estimate", "--data", data_s, "--estimator", "clb-ipw"])).unwrap();
    let log = tmp.path().join("run.msgs.jsonl");
    let fed: serde_json::Value = serde_json::from_str(&ok(&[
        "estimate", "--data", data_s, "--estimator", "clb-ipw", "--federated", "--log", log.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(pooled["tau_hat"], fed["tau_hat"]);
    assert_eq!(pooled["var_hat"], fed["var_hat"]);

    let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 2);
    assert!(audit_messages(&lines).ok);

    let log2 = tmp.path().join("aipw.msgs.jsonl");
    ok(&["estimate", "--data", data_s, "--estimator", "clb-aipw", "--ratio", "knn", "--federated", "--log", log2.to_str().unwrap()]);
    let parsed = MessageLog::read_jsonl(&log2).unwrap();
    assert!(parsed.count("corrections") > 0 && parsed.count("publish_ratio_model") > 0);
}

#[test]
fn federated_meta_ipw_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    let out = fedcause(&["estimate", "--data", data.to_str().unwrap(), "--estimator", "meta-ipw", "--federated"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("meta-ipw"));
}

#[test]
fn sweep_csv_is_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"design": {"site_sizes": [200, 300], "n_target": 400}, "d_kl": [0, 1], "replications": 6, "mean_redraws": 2}"#,
    )
    .unwrap();
    let spec = spec.to_str().unwrap();
    let mut csvs = Vec::new();
    for jobs in ["1", "3"] {
        let out = tmp.path().join(format!("sweep{jobs}.csv"));
        ok(&["--jobs", jobs, "sweep-kl", "--config", spec, "--seed", "11", "--out", out.to_str().unwrap()]);
        csvs.push(fs::read(&out).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs.remove(0)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), SWEEP_HEADER.join(","));
    assert_eq!(lines.count(), 2 * 4);
}

#[test]
fn ci_grid_writes_one_row_per_estimator_and_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("grid.json");
    fs::write(
        &spec,
        r#"{"design": {"site_sizes": [300, 300], "n_target": 500}, "d_kl": [0.5], "replications": 4,
            "estimators": ["clb-ipw", "clb-aipw"],
            "spec_grid": [{"ps": "correct", "om": "correct"}, {"ps": "correct", "om": "wrong"}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("grid.csv");
    let json = tmp.path().join("grid.json.out");
    ok(&["ci-grid", "--config", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("estimator,ps_spec,om_spec,"));
    assert_eq!(text.lines().count(), 1 + 4);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(summary["cells"].as_array().unwrap().len(), 4);
}

#[test]
fn ci_grid_rejects_several_d_kl_values() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("grid.json");
    fs::write(&spec, r#"{"d_kl": [0, 1], "replications": 2}"#).unwrap();
    let out = fedcause(&["ci-grid", "--config", spec.to_str().unwrap(), "--out", tmp.path().join("x.csv").to_str().unwrap()]);
    assert!(!out.status.success());
}
