//! Acceptance criterion 12: repeating `run` with the same seed and config
//! yields byte-identical metrics artifacts. Criteria 1-11 live in the core
//! crate's acceptance suite.

use std::path::Path;

fn config_body() -> &'static str {
    r#"[experiment]
name = "accept"
seeds = [0]

[task]
kind = "avocado"
shifts = [0.0, 1.0]

[model]
hidden = [10]
feature_dim = 2

[train]
epochs = 40
rotations = true

[train.network]
lr = 0.01
decay = 0.99999

[train.rotation]
lr = 0.1
decay = 0.99999

[train.rotation.optimizer]
kind = "adaptive"
beta1 = 0.5
beta2 = 0.99
eps = 1e-4

[combiner]
kind = "scale_only"
"#
}

fn run(config: &Path, seed: &str, out: &Path) {
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_taskgrad"))
        .args([
            "run",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .expect("binary starts");
    assert!(
        output.status.success(),
        "run failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn criterion_12_equal_seed_runs_write_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, config_body()).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&config, "7", &out_a);
    run(&config, "7", &out_b);

    // every run artifact except the wall-clock timing sidecar must match
    // byte for byte
    let mut identical = true;
    let mut detail = Vec::new();
    for name in [
        "accept_s7.metrics.jsonl",
        "accept_s7.summary.csv",
        "accept_s7.final.json",
        "accept_s7.best.json",
        "accept_s7.result.json",
    ] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        let same = a == b;
        identical &= same;
        detail.push(format!("{name}: {}", if same { "identical" } else { "DIFFERS" }));
    }
    println!(
        "ACCEPTANCE 12 (byte-identical reruns): {}",
        if identical { "pass" } else { "fail" }
    );
    assert!(identical, "criterion 12 failed:\n{}", detail.join("\n"));
}
