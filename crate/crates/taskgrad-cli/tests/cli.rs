//! End-to-end tests of the `taskgrad` binary: exit codes, artifact layout,
//! determinism, round-trip exactness, sweeps, comparisons, and demos.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taskgrad_cli::record::{read_jsonl, to_json, write_jsonl, RunResult};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taskgrad"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn convex_config(name: &str, extra: &str) -> String {
    format!(
        r#"[experiment]
name = "{name}"
seeds = [0]

[task]
kind = "avocado"
shifts = [0.0, 1.0]

[model]
hidden = [10]
feature_dim = 2

[train]
epochs = 5
rotations = true

[train.network]
lr = 0.01
decay = 0.99999

[train.rotation]
lr = 0.005
decay = 0.99999

[combiner]
kind = "scale_only"
{extra}"#
    )
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary starts");
    assert!(
        out.status.success(),
        "expected success\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn missing_config_exits_2() {
    let out = bin()
        .args(["run", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not found"), "stderr: {stderr}");
}

#[test]
fn invalid_config_is_rejected_with_a_line_anchor() {
    let dir = tempfile::tempdir().unwrap();
    // zero learning rate: semantically invalid
    let config = convex_config("bad", "").replace("lr = 0.01", "lr = 0.0");
    let path = write_config(dir.path(), &config);
    let out = bin()
        .args(["run", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    // "config.toml:<line>:" anchor
    let anchored = stderr.lines().any(|l| {
        l.split_once("config.toml:")
            .and_then(|(_, rest)| rest.split(':').next())
            .is_some_and(|f| f.trim().parse::<usize>().is_ok())
    });
    assert!(anchored, "no line anchor in: {stderr}");

    // malformed TOML: the parser's own line/column report
    let path = write_config(dir.path(), "[experiment\nname = 3");
    let out = bin()
        .args(["run", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line"), "no line info in: {stderr}");
}

#[test]
fn run_writes_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let config = convex_config(
        "convex",
        "\n[baselines]\nvalues = [0.5, 0.5]\nlower_is_better = true\n",
    );
    let path = write_config(dir.path(), &config);
    let out_dir = dir.path().join("out");
    run_ok(bin().args([
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));

    let records = read_jsonl(&out_dir.join("convex_s0.metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 5, "one record per step (5 epochs x 1 step)");
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.step, i as u64);
        assert_eq!(r.run_id, "convex_s0");
        assert_eq!(r.raw_losses.len(), 2);
        assert!(r.update_task_cos.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert!(r.pairwise_cos.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert!(r.alphas.is_some(), "magnitude equalization reports alphas");
        assert!(r.rotation_losses.is_some(), "rotations report alignment losses");
    }
    for suffix in ["summary.csv", "final.json", "best.json", "result.json", "report.json", "timing.csv"] {
        let p = out_dir.join(format!("convex_s0.{suffix}"));
        assert!(p.exists(), "missing artifact {}", p.display());
    }
    let summary = std::fs::read_to_string(out_dir.join("convex_s0.summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6, "header + one row per epoch");
}

#[test]
fn equal_seeds_give_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &convex_config("det", ""));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(bin().args([
            "run",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    for name in ["det_s7.metrics.jsonl", "det_s7.summary.csv", "det_s7.final.json", "det_s7.best.json", "det_s7.result.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between equal-seed runs");
    }
}

#[test]
fn metrics_export_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &convex_config("rt", ""));
    let out_dir = dir.path().join("out");
    run_ok(bin().args([
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let metrics = out_dir.join("rt_s0.metrics.jsonl");
    let original = std::fs::read(&metrics).unwrap();
    let parsed = read_jsonl(&metrics).unwrap();
    let rewritten = out_dir.join("rewritten.jsonl");
    write_jsonl(&rewritten, &parsed).unwrap();
    assert_eq!(original, std::fs::read(&rewritten).unwrap());
}

#[test]
fn divergence_exits_1_and_names_the_task() {
    let dir = tempfile::tempdir().unwrap();
    let config = convex_config("boom", "")
        .replace("lr = 0.01", "lr = 1000.0")
        .replace("epochs = 5", "epochs = 60")
        .replace("[train]", "[train]\nnormalize_losses = true");
    let path = write_config(dir.path(), &config);
    let out = bin()
        .args(["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("task ") && stderr.contains("diverged"), "stderr: {stderr}");
}

fn sweep_config(seeds: &str, axes: &str) -> String {
    format!(
        "{}\n[sweep]\nseeds = {seeds}\n{axes}",
        convex_config("grid", "").replace("epochs = 5", "epochs = 3")
    )
}

#[test]
fn sweep_grid_counts_rows_and_ranks_cells() {
    let dir = tempfile::tempdir().unwrap();
    let axes = r#"[[sweep.axes]]
param = "network_lr"
values = [0.01, 0.005]

[[sweep.axes]]
param = "rotation_lr"
values = [0.005, 0.0025]
"#;
    let path = write_config(dir.path(), &sweep_config("[0, 1, 2]", axes));
    let out_dir = dir.path().join("out");
    run_ok(bin().args([
        "sweep",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--jobs",
        "3",
    ]));

    let table = std::fs::read_to_string(out_dir.join("grid.sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 12, "2 axes x 2 values x 3 seeds");

    // recompute the best cell straight from the summary file
    let mut by_cell: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        let cell: usize = fields[0].parse().unwrap();
        let best: f64 = fields[5].parse().unwrap();
        by_cell.entry(cell).or_default().push(best);
    }
    let recomputed_best = by_cell
        .iter()
        .map(|(cell, v)| (*cell, v.iter().sum::<f64>() / v.len() as f64))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0;

    let ranking = std::fs::read_to_string(out_dir.join("grid.sweep_ranking.csv")).unwrap();
    let first = ranking.lines().nth(1).unwrap();
    let ranked_best: usize = first.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(ranked_best, recomputed_best, "ranking header must match the recomputed argmin");
}

#[test]
fn single_cell_sweep_behaves_like_run() {
    let dir = tempfile::tempdir().unwrap();
    let axes = "[[sweep.axes]]\nparam = \"network_lr\"\nvalues = [0.01]\n";
    let path = write_config(dir.path(), &sweep_config("[0]", axes));
    let out_dir = dir.path().join("out");
    run_ok(bin().args([
        "sweep",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(out_dir.join("grid.sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "header + exactly one row");
    assert!(out_dir.join("grid_c0_s0.metrics.jsonl").exists());
}

#[test]
fn empty_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &sweep_config("[0]", "axes = []\n"));
    let out = bin()
        .args(["sweep", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("empty"), "stderr: {stderr}");
}

fn fake_result(dir: &Path, name: &str, seed: u64, best: f64) -> PathBuf {
    let result = RunResult {
        run_id: name.to_string(),
        seed,
        best_epoch: 0,
        best_validation: best,
        final_validation: best,
        per_task_best: vec![best],
        per_task_final: vec![best],
        accuracies_final: vec![None],
    };
    let path = dir.join(format!("{name}.result.json"));
    std::fs::write(&path, to_json(&result).unwrap()).unwrap();
    path
}

#[test]
fn compare_flags_the_significantly_lower_set() {
    let dir = tempfile::tempdir().unwrap();
    let a_losses = [2.0, 2.1, 1.9, 2.05, 1.95];
    let jitter = [0.01, -0.01, 0.005, -0.005, 0.0];
    let mut args: Vec<String> = vec!["compare".into()];
    for (i, &v) in a_losses.iter().enumerate() {
        let p = fake_result(dir.path(), &format!("a{i}"), i as u64, v);
        args.push("--a".into());
        args.push(p.to_str().unwrap().into());
    }
    for (i, &v) in a_losses.iter().enumerate() {
        let p = fake_result(dir.path(), &format!("b{i}"), i as u64, v - 1.0 + jitter[i]);
        args.push("--b".into());
        args.push(p.to_str().unwrap().into());
    }
    let out_dir = dir.path().join("out");
    args.extend(["--out".into(), out_dir.to_str().unwrap().into()]);
    let out = run_ok(bin().args(&args));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("set B is significantly lower"), "stdout: {stdout}");
    assert!(out_dir.join("compare.json").exists());

    // identical sets: degenerate, never significant
    let mut args: Vec<String> = vec!["compare".into()];
    for (i, &v) in a_losses.iter().enumerate() {
        let p = dir.path().join(format!("a{i}.result.json"));
        args.push("--a".into());
        args.push(p.to_str().unwrap().into());
        let _ = v;
        let q = dir.path().join(format!("a{i}.result.json"));
        args.push("--b".into());
        args.push(q.to_str().unwrap().into());
    }
    args.extend(["--out".into(), out_dir.to_str().unwrap().into()]);
    let out = run_ok(bin().args(&args));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("degenerate"), "stdout: {stdout}");
}

#[test]
fn prop1_sweep_tabulates_instances() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run_ok(bin().args([
        "prop1",
        "--instances",
        "40",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("/40 instances"), "stdout: {stdout}");
    let csv = std::fs::read_to_string(out_dir.join("prop1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41, "header + one row per instance");
    assert!(csv.lines().nth(1).unwrap().split(',').count() == 7);
}

#[test]
fn demo_emits_both_trajectory_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    run_ok(bin().args(["demo", "--seed", "1", "--out", out_dir.to_str().unwrap()]));
    for (name, steps) in [("demo_convex.csv", 100usize), ("demo_nonconvex.csv", 400)] {
        let text = std::fs::read_to_string(out_dir.join(name)).unwrap();
        // header + (steps + 1) rows per variant
        assert_eq!(text.lines().count(), 1 + 2 * (steps + 1), "{name}");
        assert!(text.contains("vanilla,"), "{name} lists the plain variant");
        assert!(text.contains("rotated,"), "{name} lists the rotated variant");
    }
}
