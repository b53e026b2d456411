use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wdro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wdro"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn small_data_json(extra: &str) -> String {
    format!(r#"{{"generator": "cmnist_like", "n_train": 400, "n_val": 100, "n_test": 100, "seed": 1{extra}}}"#)
}

#[test]
fn gen_data_writes_files_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.json");
    write(&cfg, &small_data_json(""));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = wdro(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let table = String::from_utf8(o.stdout).unwrap();
        assert!(table.contains("# Labeled") && table.contains("# UnLabeled") && table.contains("Total samples"));
    }
    for name in ["train.csv", "train.csv.truth", "val.csv", "test.csv", "test.csv.truth"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let train = fs::read_to_string(a.join("train.csv")).unwrap();
    assert!(train.lines().skip(1).any(|l| l.ends_with(",-1")));
    for split in ["val.csv", "test.csv"] {
        let text = fs::read_to_string(a.join(split)).unwrap();
        assert!(!text.lines().any(|l| l.ends_with(",-1")));
    }
}

#[test]
fn labeled_count_tracks_fraction_at_table_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.json");
    write(&cfg, r#"{"generator": "cmnist_like", "n_train": 39640, "n_val": 10, "n_test": 10, "dim": 2}"#);
    let o = wdro(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let labeled: f64 = out.lines().nth(1).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    // 3 binomial standard deviations around 3964.
    assert!((labeled - 3964.0).abs() < 3.0 * (39640.0f64 * 0.09).sqrt(), "{labeled}");
}

#[test]
fn train_from_files_emits_deterministic_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data_cfg = dir.path().join("data.json");
    write(&data_cfg, &small_data_json(""));
    let data_dir = dir.path().join("data");
    assert!(wdro(&["gen-data", "--config", data_cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]).status.success());
    let cfg = dir.path().join("train.json");
    write(
        &cfg,
        &format!(
            r#"{{"data": {{"dir": "{}"}}, "train": {{"algorithm": "worstoff_dro", "epochs": 4, "eta_q": 0.1}}}}"#,
            data_dir.display()
        ),
    );
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    for out in [&a, &b] {
        let o = wdro(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics = fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("params.json")).unwrap(), fs::read(b.join("params.json")).unwrap());
    let lines: Vec<serde_json::Value> = String::from_utf8(metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for l in &lines[..4] {
        assert_eq!(l["split"], "train");
        assert_eq!(l["q"].as_array().unwrap().len(), 3);
        assert!(l["eps_relaxations"].is_u64());
    }
    assert_eq!(lines[4]["split"], "val");
    assert_eq!(lines[5]["split"], "test");
    assert!(a.join("run.log").exists());
}

#[test]
fn erm_on_easy_data_reaches_high_train_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    write(
        &cfg,
        r#"{"data": {"generator": "cmnist_like", "flip_probs": [0.0, 0.0, 0.0], "n_train": 300, "n_val": 50, "n_test": 50, "dim": 3},
            "train": {"algorithm": "erm", "epochs": 100, "eta_w": 0.5}}"#,
    );
    let o = wdro(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let last_train: serde_json::Value = serde_json::from_str(text.lines().nth(99).unwrap()).unwrap();
    assert!(last_train["acc_overall"].as_f64().unwrap() >= 0.99);
}

#[test]
fn sweep_writes_rows_and_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    write(
        &cfg,
        &format!(
            r#"{{"data": {}, "base": {{"algorithm": "group_dro_partial", "epochs": 3}},
                "grid": {{"eta_w": [0.1, 0.01], "eta_q": [0.1, 0.01]}}}}"#,
            small_data_json("")
        ),
    );
    let o = wdro(&["sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("config_id,algorithm,eta_w,eta_q,"));
    let sel: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("selection.json")).unwrap()).unwrap();
    assert!(sel["index"].as_u64().unwrap() < 4);
    assert!(dir.path().join("runs/3/metrics.jsonl").exists());

    let one = dir.path().join("one.json");
    write(&one, &format!(r#"{{"data": {}, "base": {{"algorithm": "erm", "epochs": 2}}}}"#, small_data_json("")));
    let out1 = dir.path().join("one");
    assert!(wdro(&["sweep", "--config", one.to_str().unwrap(), "--out", out1.to_str().unwrap()]).status.success());
    let sel: serde_json::Value = serde_json::from_slice(&fs::read(out1.join("selection.json")).unwrap()).unwrap();
    assert_eq!(sel["index"], 0);
    assert_eq!(sel["config"]["algorithm"], "erm");
}

#[test]
fn assign_prints_the_three_sample_example() {
    let dir = tempfile::tempdir().unwrap();
    let losses = dir.path().join("losses.txt");
    write(&losses, "3\n2\n1\n");
    let args = |eps: &str| {
        wdro(&["assign", "--losses", losses.to_str().unwrap(), "--marginals", "0.6,0.4", "--q", "0.7,0.3", "--eps", eps])
    };
    let o = args("0");
    assert!(o.status.success());
    let rows: Vec<Vec<f64>> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let want = [[1.0, 0.0], [0.8, 0.2], [0.0, 1.0]];
    for (r, w) in rows.iter().zip(want) {
        assert!((r[0] - w[0]).abs() < 1e-6 && (r[1] - w[1]).abs() < 1e-6, "{rows:?}");
    }
    assert!(String::from_utf8(o.stderr).unwrap().contains("objective"));
    let o = args("1");
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().skip(1).all(|l| l == "1,0"), "{text}");
}

#[test]
fn infeasible_pins_name_min_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let losses = dir.path().join("losses.txt");
    write(&losses, "1,2,3,4");
    let o = wdro(&[
        "assign", "--losses", losses.to_str().unwrap(), "--marginals", "0.9,0.1", "--eps", "0",
        "--pins", "0:1,1:1,2:1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("0.65"), "{err}");
}

#[test]
fn verify_commands_pass_and_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = wdro(&["verify", "--solver", "--upper-bound", "--instances", "40", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bound: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("verify_upper_bound.json")).unwrap()).unwrap();
    assert_eq!(bound["passed"], true);
    let o = wdro(&["verify", "--bounds", "--trials", "200"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    assert_eq!(wdro(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(wdro(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, r#"{"data": {"generator": "cmnist_like"}, "train": {"algorithm": "erm", "eta_w": -1}}"#);
    assert_eq!(wdro(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).status.code(), Some(1));
    write(&cfg, r#"{"data": {"dir": "/nonexistent/dir"}, "train": {"algorithm": "erm"}}"#);
    assert_eq!(wdro(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn ablation_csv_echoes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("abl.json");
    write(
        &cfg,
        &format!(r#"{{"data": {}, "train": {{"algorithm": "worstoff_dro", "epochs": 2}}, "seeds": [0, 1]}}"#, small_data_json("")),
    );
    let o = wdro(&["ablate-eps", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("ablate_eps.csv")).unwrap();
    let eps: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(eps, ["0", "0.001", "0.01", "0.1", "1"]);
    let o = wdro(&["ablate-fraction", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("ablate_fraction.csv")).unwrap().lines().count(), 6);
}
