use std::path::Path;
use std::process::{Command, Output};

const GPT3: &str = r#"
[model]
name = "gpt3-96b"
num_heads = 104
hidden = 9984
layers = 80
seq_len = 2048

[parallel]
global_batch = 128
tensor = 4
pipeline = 8
attention = "recompute"
"#;

fn pipesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipesim")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// `(label, first value)` pairs of one section of a TSV report.
fn tsv_rows(text: &str, section: &str) -> Vec<(String, String)> {
    text.lines()
        .map(|l| l.split('\t').collect::<Vec<_>>())
        .filter(|f| f[0] == section)
        .map(|f| (f[1].to_string(), f[2].to_string()))
        .collect()
}

fn tsv_value(text: &str, section: &str, label: &str) -> String {
    tsv_rows(text, section)
        .into_iter()
        .find(|(l, _)| l == label)
        .unwrap_or_else(|| panic!("no {section}/{label} in\n{text}"))
        .1
}

#[test]
fn validate_presets() {
    for preset in ["gpt3-96b", "llama-65b"] {
        let out = pipesim(&["--preset", preset, "validate"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(stdout(&out).contains("valid"));
    }
}

#[test]
fn validate_reports_divisibility_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "b3.toml", &GPT3.replace("pipeline = 8", "pipeline = 8\nmicro_batch = 3"));
    let out = pipesim(&["--config", &path, "validate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("B mod b != 0 (B=128, b=3)"), "{}", stderr(&out));
}

#[test]
fn validate_lists_every_violation_on_its_own_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = GPT3.replace("layers = 80", "layers = 81").replace("pipeline = 8", "pipeline = 8\nmicro_batch = 3");
    let path = write(dir.path(), "bad.toml", &text);
    let out = pipesim(&["--config", &path, "validate"]);
    assert_eq!(out.status.code(), Some(2));
    let lines: Vec<_> = stderr(&out).lines().filter(|l| l.starts_with("violation: ")).map(str::to_string).collect();
    assert_eq!(lines.len(), 2, "{lines:?}");
}

#[test]
fn empty_and_missing_files_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "empty.toml", "");
    let out = pipesim(&["--config", &path, "validate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("byte 0"), "{}", stderr(&out));

    let missing = dir.path().join("missing.toml");
    let out = pipesim(&["--config", missing.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_shows_one_f_one_b_memory_shape() {
    let out = pipesim(&["--preset", "gpt3-96b", "--format", "tsv", "simulate", "--bpipe", "off"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(tsv_value(&text, "memory", "stage 0"), "8");
    assert_eq!(tsv_value(&text, "memory", "stage 7"), "1");
    assert_eq!(tsv_value(&text, "timing", "total time"), tsv_value(&text, "timing", "1F1B closed form (m+p-1)T(b)"));
}

#[test]
fn simulate_bpipe_bounds_every_stage() {
    let out = pipesim(&["--preset", "gpt3-96b", "--format", "tsv", "simulate", "--bpipe", "on"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let peaks: Vec<u64> = tsv_rows(&text, "memory").iter().map(|(_, v)| v.parse().unwrap()).collect();
    assert_eq!(peaks.len(), 8);
    assert!(peaks.iter().all(|&n| n <= 5), "{peaks:?}");
    assert_eq!(tsv_value(&text, "bpipe", "overhead vs 1F1B"), "0");
}

#[test]
fn infeasible_memory_is_a_row_not_an_error() {
    let out = pipesim(&["--preset", "gpt3-96b", "--format", "tsv", "simulate", "--micro-batch", "8"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(tsv_value(&stdout(&out), "feasibility", "FEASIBILITY:"), "FAIL");
}

#[test]
fn simulate_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.json");
    let mem = dir.path().join("mem.txt");
    let out = pipesim(&[
        "--preset",
        "llama-65b",
        "simulate",
        "--bpipe",
        "on",
        "--trace",
        trace.to_str().unwrap(),
        "--mem-dump",
        mem.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    let events = doc.as_array().unwrap();
    let forwards = events.iter().filter(|e| e["ph"] == "X" && e["name"].as_str().unwrap().starts_with('F')).count();
    assert_eq!(forwards, 8 * 128);
    assert!(std::fs::read_to_string(&mem).unwrap().lines().count() > 8);

    let bad = dir.path().join("nope/t.json");
    let out = pipesim(&["--preset", "llama-65b", "simulate", "--trace", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn estimate_identical_points_is_unity() {
    let out = pipesim(&[
        "--format", "tsv", "estimate", "--b-from", "2", "--mfu-stage-from", "0.5", "--b-to", "2", "--mfu-stage-to", "0.5",
        "--B", "128", "--p", "8",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(tsv_value(&stdout(&out), "prediction", "predicted speedup"), "1.000");
}

#[test]
fn estimate_flags_upper_bound_violation_for_llama_flash() {
    let out = pipesim(&[
        "--format", "tsv", "estimate", "--b-from", "1", "--mfu-stage-from", "53.6%", "--b-to", "4", "--mfu-stage-to",
        "61.9%", "--B", "128", "--p", "8", "--observed-from", "47.8%", "--observed-to", "44.0%",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let predicted: f64 = tsv_value(&text, "comparison", "predicted speedup").parse().unwrap();
    let observed: f64 = tsv_value(&text, "comparison", "observed speedup").parse().unwrap();
    let oracle = (135.0 / 156.0) * (0.619 / 0.536);
    assert!((predicted - oracle).abs() < 5e-4, "{predicted} vs {oracle}");
    // The bubble penalty of b=4 almost exactly cancels the single-stage gain.
    assert!(predicted > 0.999 && predicted < 1.0);
    assert!(observed < 0.93);
    assert!(predicted > observed);
    assert_eq!(tsv_value(&text, "comparison", "prediction exceeds observation"), "yes");
}

#[test]
fn estimate_reads_measurement_file_and_config_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "m.txt", "# b mfu_stage\n1 0.378\n2 0.552\n");
    let out = pipesim(&[
        "--preset", "gpt3-96b", "--format", "tsv", "estimate", "--b-from", "1", "--b-to", "2", "--measurements", &path,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(tsv_value(&stdout(&out), "prediction", "predicted speedup"), "1.388");
}

#[test]
fn estimate_rejects_bad_inputs() {
    let base = ["estimate", "--b-from", "1", "--b-to", "2", "--B", "128", "--p", "8"];
    let with = |extra: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        pipesim(&args)
    };
    assert_eq!(with(&["--mfu-stage-from", "1.2", "--mfu-stage-to", "0.5"]).status.code(), Some(2));
    assert_eq!(with(&["--mfu-stage-from", "0", "--mfu-stage-to", "0.5"]).status.code(), Some(2));
    assert_eq!(with(&["--mfu-stage-from", "abc", "--mfu-stage-to", "0.5"]).status.code(), Some(2));
    assert_eq!(with(&["--mfu-stage-from", "0.4"]).status.code(), Some(2));
    let no_p = pipesim(&["estimate", "--b-from", "1", "--b-to", "2", "--mfu-stage-from", "0.4", "--mfu-stage-to", "0.5"]);
    assert_eq!(no_p.status.code(), Some(2));
}

#[test]
fn sweep_rows_sorted_with_linearity_and_bpipe_savings() {
    let out = pipesim(&["--preset", "gpt3-96b", "--format", "tsv", "sweep", "--b-list", "4,1,2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).filter(|f: &Vec<&str>| f[0] == "sweep").collect();
    let labels: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(labels, ["b=1", "b=2", "b=4"]);
    for r in &rows {
        // label, then (value, unit) pairs: mfu_stage, predicted, flops/sample, 1F1B peak, fits, BPipe peak, fits
        let plain: u64 = r[8].parse().unwrap();
        let bpipe: u64 = r[12].parse().unwrap();
        assert!(bpipe < plain, "{r:?}");
        assert_eq!(r[6], rows[0][6], "per-sample stage FLOPs differ");
    }
    assert_eq!(tsv_value(&text, "checks", "stage FLOPs linear in b"), "PASS");
}

#[test]
fn sweep_non_divisor_is_a_warning_row() {
    let out = pipesim(&["--preset", "gpt3-96b", "--format", "tsv", "sweep", "--b-list", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = tsv_rows(&stdout(&out), "sweep");
    assert_eq!(rows.len(), 1);
    assert!(rows[0].1.starts_with("warning"), "{rows:?}");
}

#[test]
fn output_is_deterministic() {
    let a = pipesim(&["--preset", "llama-65b", "sweep", "--b-list", "1,2,4,8"]);
    let b = pipesim(&["--preset", "llama-65b", "sweep", "--b-list", "1,2,4,8"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn preset_and_config_conflict() {
    let out = pipesim(&["--preset", "gpt3-96b", "--config", "x.toml", "validate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pipesim(&["validate"]);
    assert_eq!(out.status.code(), Some(2));
}
