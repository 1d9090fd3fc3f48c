use std::path::{Path, PathBuf};
use std::process::Command;

fn case39() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cases/case39.m")
}

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_gridflow")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "gridflow {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn parse_and_solve() {
    let dir = tempfile::tempdir().unwrap();
    let case_json = dir.path().join("case39.json");
    run(&["parse", "--case", s(&case39()), "--out", s(&case_json)]);
    assert_eq!(json(&case_json)["schema"], "gridcase/1");
    let solved: serde_json::Value = serde_json::from_str(&run(&["solve", "--case", s(&case_json)])).unwrap();
    assert_eq!(solved["converged"], true);
    assert_eq!(solved["vm"].as_array().unwrap().len(), 39);
}

#[test]
fn rejects_unknown_subcommand() {
    let out = Command::new(env!("CARGO_BIN_EXE_gridflow")).arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    run(&["generate", "--case", s(&case39()), "--n", "30", "--seed", "3", "--out", s(&data)]);
    assert_eq!(json(&data.join("manifest.json"))["schema"], "dataset/1");

    let config = root.join("train.json");
    let mut cfg: serde_json::Value = serde_json::json!({
        "schema": "seiter/1",
        "loops": 2,
        "lambda_equ": 0.1,
        "alpha_ema": 0.9,
        "epochs": 1,
        "batch_size": 8,
        "lr_max": 1e-3,
        "lr_min": 1e-5,
        "q_dropout": 0.1,
        "mask_group": "pq",
        "seed": 1,
    });
    let model: serde_json::Value = serde_json::json!({
        "schema": "flownet/1",
        "d": 8,
        "d_k": 16,
        "k_blocks": 1,
        "gcn_layers_per_block": 1,
        "fusion": true,
        "vna": true,
        "sgf": true,
        "scale": {"pq": vec![1.0; 7], "pv": vec![1.0; 7], "slack": vec![1.0; 7], "edge": vec![1.0; 5]},
    });
    cfg["model"] = model;
    std::fs::write(&config, cfg.to_string()).unwrap();

    let run_dir = root.join("run");
    run(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&run_dir)]);
    let teacher = run_dir.join("teacher.ckpt");
    assert!(teacher.exists() && run_dir.join("student.ckpt").exists());
    assert_eq!(std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().count(), 1);

    let inferred: serde_json::Value =
        serde_json::from_str(&run(&["infer", "--ckpt", s(&teacher), "--case", s(&case39()), "--loops", "3"])).unwrap();
    assert_eq!(inferred["mismatch_trajectory"].as_array().unwrap().len(), 4);

    let report = root.join("eval.json");
    run(&[
        "eval", "--ckpt", s(&teacher), "--data", s(&data), "--loops", "2", "--mask", "0,0.1", "--sweep", "1,2",
        "--out", s(&report),
    ]);
    let report = json(&report);
    assert_eq!(report["missing_q"].as_array().unwrap().len(), 2);
    assert_eq!(report["loop_sweep"].as_array().unwrap().len(), 2);
    assert_eq!(report["report"]["rmse_pq_vm"], report["missing_q"][0]["rmse_pq_vm"]);

    let cont = root.join("n2.json");
    run(&["contingency", "--case", s(&case39()), "--ckpt", s(&teacher), "--loops", "1", "--out", s(&cont)]);
    assert_eq!(json(&cont)["summary"]["n_cases"], 562);

    let grid = root.join("grid.json");
    std::fs::write(
        &grid,
        r#"[{"name":"plain","fusion":false,"vna":false,"sgf":false,"seiter":false},
            {"name":"full","fusion":true,"vna":true,"sgf":true,"seiter":true}]"#,
    )
    .unwrap();
    let abl = root.join("ablation");
    run(&["ablate", "--data", s(&data), "--grid", s(&grid), "--config", s(&config), "--out", s(&abl)]);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(abl.join("full/teacher.ckpt").exists());
}
