//! Command-line behaviour: exit codes, file outputs and manifests.

use std::path::Path;
use std::process::{Command, Output};

fn canopy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canopy"))
        .args(args)
        .output()
        .expect("run canopy")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_bad_arguments() {
    assert_eq!(code(&canopy(&["--help"])), 0);
    assert_eq!(code(&canopy(&["frobnicate"])), 1);
    assert_eq!(code(&canopy(&["footprint"])), 1);
    assert_eq!(code(&canopy(&["footprint", "--sigma", "5", "--disc", "1,2"])), 1);
}

#[test]
fn pseudolabel_worked_example_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    std::fs::write(&input, "y1,y2,y3,y4,y5,y6,y7\n20,21,22,5,6,7,8\n").unwrap();
    let out = dir.path().join("out/labels.csv");
    let run = canopy(&["pseudolabel", "--input", p(&input), "--out", p(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().nth(1), Some("20,21,22,5,6,7,8,3"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/labels.csv.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "pseudolabel");
    assert_eq!(manifest["inputs"][0], p(&input));
}

#[test]
fn pseudolabel_empty_and_ragged_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("empty_out.csv");
    assert_eq!(code(&canopy(&["pseudolabel", "--input", p(&empty), "--out", p(&out)])), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");

    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "y1,y2,y3\n1,2,3\n4,5\n").unwrap();
    let run = canopy(&["pseudolabel", "--input", p(&ragged), "--out", p(&dir.path().join("r.csv"))]);
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("row 2"));

    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&canopy(&["pseudolabel", "--input", p(&missing), "--out", p(&out)])), 2);
}

#[test]
fn invalid_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("growth.json");
    std::fs::write(&cfg, r#"{"s_min": 3, "s_max": 1}"#).unwrap();
    let input = dir.path().join("in.csv");
    std::fs::write(&input, "y1,y2\n1,2\n").unwrap();
    let out = dir.path().join("o.csv");
    assert_eq!(code(&canopy(&["pseudolabel", "--input", p(&input), "--config", p(&cfg), "--out", p(&out)])), 1);

    std::fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(code(&canopy(&["pseudolabel", "--input", p(&input), "--config", p(&cfg), "--out", p(&out)])), 1);
}

#[test]
fn finetune_requires_the_freeze_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ft.json");
    std::fs::write(&cfg, r#"{"training": {"phase": "finetune", "max_lr": 0.001, "total_steps": 2, "batch_size": 1}}"#)
        .unwrap();
    let run = canopy(&[
        "finetune", "--config", p(&cfg), "--data", p(dir.path()), "--checkpoint", p(&dir.path().join("x.ckpt")),
        "--out", p(&dir.path().join("ft")), "--seed", "1",
    ]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("--freeze-backbone"));
}

#[test]
fn gradcheck_negative_control_is_a_numerical_failure() {
    let ok = canopy(&["gradcheck", "--linear", "--seed", "3"]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let bad = canopy(&["gradcheck", "--linear", "--seed", "3", "--inject-bug"]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn synth_then_disturbance_map() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.json");
    std::fs::write(&world, r#"{"rows": 12, "cols": 12, "years": 4}"#).unwrap();
    let data = dir.path().join("data");
    let run = canopy(&["synth", "--config", p(&world), "--out", p(&data), "--patches", "2", "--seed", "5"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(data.join("patch_0001.cnpy").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);

    let out = dir.path().join("dist");
    let grid = data.join("patch_0000.cnpy");
    assert_eq!(code(&canopy(&["disturbance", "--grid", p(&grid), "--out", p(&out)])), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["years"], 4);
    let counts: u64 = summary["counts_per_year"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counts, 144);
}

#[test]
fn evaluate_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&canopy(&["synth", "--out", p(&data), "--patches", "1", "--seed", "9"])), 0);
    let patch = data.join("patch_0000.cnpy");
    let out = dir.path().join("eval");
    let run = canopy(&["evaluate", "--pred", p(&patch), "--labels", p(&patch), "--out", p(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mae = csv
        .lines()
        .find_map(|l| l.strip_prefix("mae,"))
        .and_then(|v| v.split(',').next())
        .and_then(|v| v.parse::<f64>().ok())
        .expect("mae row");
    assert!(mae < 1e-5, "truth vs itself has MAE {mae}");
    for f in ["height_bins.csv", "change_scatter.csv", "growth_curves.csv", "autocorrelation.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}
