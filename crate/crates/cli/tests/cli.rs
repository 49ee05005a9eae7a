use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use zo_forge::checkpoint;
use zo_forge::train::{read_steps_csv, CSV_HEADER};

fn zo_forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zo-forge"))
        .args(args)
        .env("ZO_FORGE_THREADS", "2")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const QUADRATIC: &str = r#"
eval_every = 10
[model]
kind = "quadratic"
d = 32
layers = 4
condition_number = 4.0
[optimizer]
learning_rate = 1e-3
steps = 40
drop_count = 2
"#;

#[test]
fn train_writes_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "q.toml", QUADRATIC);
    let out = tmp.path().join("run");
    let res = zo_forge(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );

    let text = fs::read_to_string(out.join("steps.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let rows = read_steps_csv(&out.join("steps.csv")).unwrap();
    assert_eq!(rows.len(), 40);
    assert_eq!(rows.iter().filter(|r| r.eval_metric.is_some()).count(), 4);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["config"]["optimizer"]["steps"], 40);
    assert!(summary["result"]["final_metric"].is_number());

    let (values, partition) = checkpoint::read(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(values.len(), 32);
    assert_eq!(partition.num_layers(), 4);
}

#[test]
fn flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "q.toml", QUADRATIC);
    let out = tmp.path().join("run");
    let res = zo_forge(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--output",
        out.to_str().unwrap(),
        "--steps",
        "7",
    ]);
    assert!(res.status.success());
    assert_eq!(read_steps_csv(&out.join("steps.csv")).unwrap().len(), 7);
}

#[test]
fn unknown_key_exits_with_status_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        &QUADRATIC.replace("learning_rate", "learning_rat"),
    );
    let res = zo_forge(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--output",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rat"));
}

#[test]
fn missing_config_file_is_an_io_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let res = zo_forge(&[
        "train",
        "--config",
        "/nonexistent.toml",
        "--seed",
        "1",
        "--output",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn mandatory_flags_are_enforced() {
    let res = zo_forge(&["train", "--config", "x.toml"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn grid_marks_diverged_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let text = QUADRATIC.replace(
        "[optimizer]",
        "[grid]\nlearning_rates = [1e-3, 1e300]\nmus = [1e-3]\n[optimizer]",
    );
    let cfg = write_config(tmp.path(), "grid.toml", &text);
    let out = tmp.path().join("grid");
    let res = zo_forge(&[
        "grid-search",
        "--config",
        &cfg,
        "--seed",
        "2",
        "--output",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("best.json")).unwrap()).unwrap();
    assert_eq!(best["best"]["learning_rate"], 1e-3);
    let table = fs::read_to_string(out.join("grid_results.csv")).unwrap();
    let diverged: Vec<&str> = table.lines().filter(|l| l.contains(",true,")).collect();
    assert_eq!(diverged.len(), 1, "{table}");
    assert!(diverged[0].contains(",NaN,"));
    assert_eq!(fs::read_dir(out.join("cells")).unwrap().count(), 2);
}

#[test]
fn speedup_self_comparison_is_unity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "q.toml", QUADRATIC);
    let out = tmp.path().join("run");
    assert!(zo_forge(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--output",
        out.to_str().unwrap()
    ])
    .status
    .success());
    let csv = out.join("steps.csv");
    let first = read_steps_csv(&csv).unwrap()[9].eval_metric.unwrap();
    let report = tmp.path().join("speedup.json");
    let res = zo_forge(&[
        "report-speedup",
        "--dense",
        csv.to_str().unwrap(),
        "--sparse",
        csv.to_str().unwrap(),
        "--target",
        &first.to_string(),
        "--metric",
        "loss",
        "--output",
        report.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["compute_speedup"], 1.0);
    assert_eq!(json["convergence_speedup"], 1.0);

    let res = zo_forge(&[
        "report-speedup",
        "--dense",
        csv.to_str().unwrap(),
        "--sparse",
        csv.to_str().unwrap(),
        "--target=-1",
        "--metric",
        "loss",
        "--output",
        report.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["convergence_speedup"].is_null());
}

#[test]
fn sweep_writes_rows_per_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
repeats = 2
[model]
kind = "quadratic"
d = 64
[sweep]
d_list = [32, 64]
keep_fractions = [0.5, 1.0]
threshold = 0.05
layers = 4
"#;
    let cfg = write_config(tmp.path(), "s.toml", text);
    let out = tmp.path().join("sweep");
    let res = zo_forge(&[
        "sweep-convergence",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let rows = fs::read_to_string(out.join("sweep.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + 2 * 2 * 2);
}
