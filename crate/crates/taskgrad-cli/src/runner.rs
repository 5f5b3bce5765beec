//! Subcommand implementations: single runs, grid sweeps, run-set
//! comparisons, descent-certificate sweeps, and the two illustrative
//! demo experiments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taskgrad::combine::prop1_certificate;
use taskgrad::metrics::{delta_k, paired_ttest_one_sided, ImprovementReport, TTestOutcome};
use taskgrad::train::{FitOutcome, TrainError, TrainState};
use taskgrad::DenseMatrix;

use crate::config::{build_state, RunPlan};
use crate::record::{
    fmt_float, to_json, write_jsonl, write_summary_csv, MetricsRecord, RunResult,
};

/// Runtime failures after configuration was accepted. `Diverged` maps to
/// exit code 1 and names the offending task.
#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("task {task} diverged at step {step}: loss {loss:e}")]
    Diverged { task: usize, loss: f64, step: u64 },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl From<TrainError> for RunnerError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { task, loss, step } => RunnerError::Diverged { task, loss, step },
            other => RunnerError::Other(other.into()),
        }
    }
}

/// Everything a finished run left on disk, plus its headline numbers.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_id: String,
    pub seed: u64,
    pub best_validation: f64,
    pub final_validation: f64,
    pub best_epoch: usize,
    pub metrics_path: PathBuf,
}

fn stamp(timings: &mut Vec<(String, f64)>, label: &str, since: Instant) -> Instant {
    timings.push((label.to_string(), since.elapsed().as_secs_f64() * 1e3));
    Instant::now()
}

/// Execute one seed of the plan and write its artifact set into `out`.
pub fn run_one(plan: &RunPlan, seed: u64, out: &Path, run_id: &str) -> Result<RunArtifacts, RunnerError> {
    std::fs::create_dir_all(out).map_err(|e| RunnerError::Other(e.into()))?;
    let mut timings = Vec::new();
    let t = Instant::now();

    let (mut state, data) = build_state(plan, seed)?;
    for w in state.warnings() {
        eprintln!("warning: {w}");
    }
    let t = stamp(&mut timings, "build", t);

    let outcome = state.fit(&data.train, data.holdout.as_ref())?;
    let t = stamp(&mut timings, "fit", t);

    write_run_artifacts(&mut state, &outcome, out, run_id, seed, plan)?;
    stamp(&mut timings, "write", t);

    // wall-clock sidecar: the only run output allowed to differ between
    // equal-seed invocations
    let mut timing_csv = String::from("phase,milliseconds\n");
    for (label, ms) in &timings {
        let _ = writeln!(timing_csv, "{label},{ms:.3}");
    }
    std::fs::write(out.join(format!("{run_id}.timing.csv")), timing_csv)
        .map_err(|e| RunnerError::Other(e.into()))?;

    let num_tasks = state.heads().len();
    let final_eval = finalize_eval(&outcome, num_tasks);
    Ok(RunArtifacts {
        run_id: run_id.to_string(),
        seed,
        best_validation: outcome.best_validation,
        final_validation: final_eval,
        best_epoch: outcome.best_epoch,
        metrics_path: out.join(format!("{run_id}.metrics.jsonl")),
    })
}

fn finalize_eval(outcome: &FitOutcome, _num_tasks: usize) -> f64 {
    outcome
        .log
        .epochs
        .last()
        .map(|e| e.validation_sum)
        .unwrap_or(outcome.best_validation)
}

fn write_run_artifacts(
    state: &mut TrainState,
    outcome: &FitOutcome,
    out: &Path,
    run_id: &str,
    seed: u64,
    plan: &RunPlan,
) -> Result<(), RunnerError> {
    let num_tasks = state.heads().len();
    let records: Vec<MetricsRecord> = outcome
        .log
        .steps
        .iter()
        .map(|s| MetricsRecord::from_step(run_id, s))
        .collect();
    write_jsonl(&out.join(format!("{run_id}.metrics.jsonl")), &records)?;
    write_summary_csv(&out.join(format!("{run_id}.summary.csv")), &outcome.log.epochs, num_tasks)?;

    std::fs::write(
        out.join(format!("{run_id}.final.json")),
        to_json(&outcome.final_snapshot)?,
    )
    .map_err(anyhow::Error::from)?;
    std::fs::write(
        out.join(format!("{run_id}.best.json")),
        to_json(&outcome.best_snapshot)?,
    )
    .map_err(anyhow::Error::from)?;

    let last = outcome.log.epochs.last();
    let best = outcome.log.epochs.iter().find(|e| e.epoch == outcome.best_epoch);
    let result = RunResult {
        run_id: run_id.to_string(),
        seed,
        best_epoch: outcome.best_epoch,
        best_validation: outcome.best_validation,
        final_validation: last.map(|e| e.validation_sum).unwrap_or(outcome.best_validation),
        per_task_best: best.map(|e| e.validation_losses.clone()).unwrap_or_default(),
        per_task_final: last.map(|e| e.validation_losses.clone()).unwrap_or_default(),
        accuracies_final: last.map(|e| e.accuracies.clone()).unwrap_or_default(),
    };
    std::fs::write(out.join(format!("{run_id}.result.json")), to_json(&result)?)
        .map_err(anyhow::Error::from)?;

    if let Some((baseline_values, lower_is_better)) = &plan.baselines {
        let measured = if result.per_task_best.is_empty() {
            &result.per_task_final
        } else {
            &result.per_task_best
        };
        let deltas: Result<Vec<f64>, _> = measured
            .iter()
            .zip(baseline_values)
            .map(|(&m, &s)| delta_k(m, s, *lower_is_better))
            .collect();
        let report =
            ImprovementReport::from_deltas(deltas.map_err(anyhow::Error::from)?).map_err(anyhow::Error::from)?;
        std::fs::write(out.join(format!("{run_id}.report.json")), to_json(&report)?)
            .map_err(anyhow::Error::from)?;
    }
    Ok(())
}

/// `run`: execute every planned seed (or the override) sequentially.
pub fn run(plan: &RunPlan, seed_override: Option<u64>, out: &Path) -> Result<Vec<RunArtifacts>, RunnerError> {
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => plan.seeds.clone(),
    };
    let mut artifacts = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let run_id = format!("{}_s{seed}", plan.name);
        let art = run_one(plan, seed, out, &run_id)?;
        println!(
            "{}: best validation {} at epoch {}, final {}",
            art.run_id,
            fmt_float(art.best_validation),
            art.best_epoch,
            fmt_float(art.final_validation)
        );
        artifacts.push(art);
    }
    Ok(artifacts)
}

#[derive(Debug, Clone)]
struct SweepRow {
    cell: usize,
    values: Vec<f64>,
    seed: u64,
    best_epoch: usize,
    best_validation: f64,
    final_validation: f64,
}

/// `sweep`: run the Cartesian grid × seeds on a worker pool, then write the
/// per-run table and the per-cell ranking (the single summary writer).
pub fn sweep(plan: &RunPlan, seed_override: Option<u64>, out: &Path, jobs: usize) -> Result<PathBuf, RunnerError> {
    let section = plan
        .sweep
        .clone()
        .ok_or_else(|| anyhow::anyhow!("config has no [sweep] section"))?;
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None if !section.seeds.is_empty() => section.seeds.clone(),
        None => plan.seeds.clone(),
    };
    let axes = &section.axes;
    let cell_count: usize = axes.iter().map(|a| a.values.len()).product();
    assert!(cell_count > 0, "validated at load time");

    // enumerate cells in row-major axis order
    let cell_values = |cell: usize| -> Vec<f64> {
        let mut rest = cell;
        let mut values = vec![0.0; axes.len()];
        for (i, axis) in axes.iter().enumerate().rev() {
            values[i] = axis.values[rest % axis.values.len()];
            rest /= axis.values.len();
        }
        values
    };

    let total = cell_count * seeds.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SweepRow, String>>>> = Mutex::new(vec![None; total]);
    let workers = jobs.max(1).min(total);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= total {
                    break;
                }
                let cell = idx / seeds.len();
                let seed = seeds[idx % seeds.len()];
                let values = cell_values(cell);
                let mut cell_plan = plan.clone();
                for (axis, &value) in axes.iter().zip(&values) {
                    axis.param.apply(&mut cell_plan.train, value);
                }
                let run_id = format!("{}_c{cell}_s{seed}", plan.name);
                let outcome = run_one(&cell_plan, seed, out, &run_id).map(|art| SweepRow {
                    cell,
                    values,
                    seed,
                    best_epoch: art.best_epoch,
                    best_validation: art.best_validation,
                    final_validation: art.final_validation,
                });
                slots.lock().expect("no poisoned workers")[idx] = Some(outcome.map_err(|e| e.to_string()));
            });
        }
    });

    let rows: Vec<SweepRow> = slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|slot| slot.expect("every index visited"))
        .collect::<Result<_, _>>()
        .map_err(|e| RunnerError::Other(anyhow::anyhow!(e)))?;

    // per-run table
    let mut table = String::from("cell");
    for axis in axes {
        let _ = write!(table, ",{}", axis.param.name());
    }
    table.push_str(",seed,best_epoch,best_validation,final_validation\n");
    for row in &rows {
        let _ = write!(table, "{}", row.cell);
        for v in &row.values {
            let _ = write!(table, ",{}", fmt_float(*v));
        }
        let _ = writeln!(
            table,
            ",{},{},{},{}",
            row.seed,
            row.best_epoch,
            fmt_float(row.best_validation),
            fmt_float(row.final_validation)
        );
    }
    let table_path = out.join(format!("{}.sweep.csv", plan.name));
    std::fs::write(&table_path, table).map_err(anyhow::Error::from)?;

    // per-cell ranking by mean best validation loss
    let mut cells: Vec<(usize, Vec<f64>, f64)> = (0..cell_count)
        .map(|cell| {
            let scores: Vec<f64> = rows
                .iter()
                .filter(|r| r.cell == cell)
                .map(|r| r.best_validation)
                .collect();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            (cell, cell_values(cell), mean)
        })
        .collect();
    cells.sort_by(|a, b| a.2.partial_cmp(&b.2).expect("finite scores").then(a.0.cmp(&b.0)));

    let mut ranking = String::from("rank,cell");
    for axis in axes {
        let _ = write!(ranking, ",{}", axis.param.name());
    }
    ranking.push_str(",mean_best_validation\n");
    for (rank, (cell, values, mean)) in cells.iter().enumerate() {
        let _ = write!(ranking, "{rank},{cell}");
        for v in values {
            let _ = write!(ranking, ",{}", fmt_float(*v));
        }
        let _ = writeln!(ranking, ",{}", fmt_float(*mean));
    }
    let ranking_path = out.join(format!("{}.sweep_ranking.csv", plan.name));
    std::fs::write(&ranking_path, ranking).map_err(anyhow::Error::from)?;

    let (best_cell, best_values, best_mean) = &cells[0];
    print!("best cell {best_cell} (");
    let described: Vec<String> = axes
        .iter()
        .zip(best_values)
        .map(|(a, v)| format!("{}={v}", a.param.name()))
        .collect();
    println!("{}) with mean best validation {}", described.join(", "), fmt_float(*best_mean));
    println!("{} rows -> {}", rows.len(), table_path.display());
    Ok(table_path)
}

/// Both directions of the paired comparison between two run sets.
#[derive(Debug, serde::Serialize)]
pub struct Comparison {
    pub metric: String,
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    /// Test of "a exceeds b".
    pub a_greater: TTestOutcome,
    /// Test of "b exceeds a".
    pub b_greater: TTestOutcome,
    pub alpha: f64,
}

/// `compare`: paired one-sided t-tests between two sets of run results,
/// paired by position (seed order).
pub fn compare(
    a_paths: &[PathBuf],
    b_paths: &[PathBuf],
    metric: &str,
    alpha: f64,
    out: &Path,
) -> Result<Comparison, RunnerError> {
    let read_set = |paths: &[PathBuf]| -> anyhow::Result<Vec<f64>> {
        paths
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", p.display()))?;
                let result: RunResult = serde_json::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("{} is not a run result: {e}", p.display()))?;
                Ok(match metric {
                    "final" => result.final_validation,
                    _ => result.best_validation,
                })
            })
            .collect()
    };
    let a_values = read_set(a_paths)?;
    let b_values = read_set(b_paths)?;
    let a_greater = paired_ttest_one_sided(&a_values, &b_values, alpha).map_err(anyhow::Error::from)?;
    let b_greater = paired_ttest_one_sided(&b_values, &a_values, alpha).map_err(anyhow::Error::from)?;
    let comparison = Comparison {
        metric: metric.to_string(),
        a_values,
        b_values,
        a_greater,
        b_greater,
        alpha,
    };

    std::fs::create_dir_all(out).map_err(anyhow::Error::from)?;
    std::fs::write(out.join("compare.json"), to_json(&comparison)?).map_err(anyhow::Error::from)?;
    if comparison.a_greater.degenerate {
        println!("degenerate comparison: zero variance of paired differences");
    } else if comparison.b_greater.significant {
        println!(
            "set A is significantly lower (t={:.4}, p={:.6}, alpha={alpha})",
            comparison.b_greater.t, comparison.b_greater.p
        );
    } else if comparison.a_greater.significant {
        println!(
            "set B is significantly lower (t={:.4}, p={:.6}, alpha={alpha})",
            comparison.a_greater.t, comparison.a_greater.p
        );
    } else {
        println!(
            "no significant difference (a>b: p={:.6}, b>a: p={:.6}, alpha={alpha})",
            comparison.a_greater.p, comparison.b_greater.p
        );
    }
    Ok(comparison)
}

/// `prop1`: sweep random gradient sets through the sufficient-descent
/// certificate and tabulate the outcomes.
pub fn prop1(instances: usize, seed: u64, out: &Path) -> Result<PathBuf, RunnerError> {
    std::fs::create_dir_all(out).map_err(anyhow::Error::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("instance,tasks,batch,dim,min_pairwise_cos,threshold,holds\n");
    let mut holds = 0usize;
    for i in 0..instances {
        let k = rng.random_range(2..=6usize);
        let b = rng.random_range(1..=8usize);
        let d = rng.random_range(2..=16usize);
        let grads: Vec<DenseMatrix> = (0..k)
            .map(|_| DenseMatrix::from_fn(b, d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let cert = prop1_certificate(&grads).map_err(anyhow::Error::from)?;
        holds += cert.holds as usize;
        let _ = writeln!(
            csv,
            "{i},{k},{b},{d},{},{},{}",
            fmt_float(cert.min_pairwise_cos),
            fmt_float(cert.threshold),
            cert.holds
        );
    }
    let path = out.join("prop1.csv");
    std::fs::write(&path, csv).map_err(anyhow::Error::from)?;
    println!("{holds}/{instances} instances satisfy the descent certificate");
    Ok(path)
}

/// `demo`: emit trajectory data for the two illustrative experiments —
/// the convex bowls and the nonconvex plane — under plain summation and
/// under rotations with magnitude equalization.
pub fn demo(seed: u64, out: &Path) -> Result<(), RunnerError> {
    std::fs::create_dir_all(out).map_err(anyhow::Error::from)?;
    demo_family("convex", taskgrad::tasks::TaskSpec::avocado_pair(seed), 100, 0.01, 0.5, seed, out)?;
    demo_family(
        "nonconvex",
        taskgrad::tasks::TaskSpec::nonconvex_pair(seed),
        400,
        0.015,
        0.1,
        seed,
        out,
    )?;
    Ok(())
}

fn demo_family(
    label: &str,
    spec: taskgrad::tasks::TaskSpec,
    epochs: usize,
    net_lr: f64,
    rot_lr: f64,
    seed: u64,
    out: &Path,
) -> Result<(), RunnerError> {
    use taskgrad::train::CombinerKindConfig;

    let mut csv = String::from("variant,seed,step,z0,z1,loss_0,loss_1\n");
    for (variant, rotations) in [("vanilla", false), ("rotated", true)] {
        let plan = demo_plan(label, &spec, epochs, net_lr, rot_lr, rotations);
        let (mut state, data) = build_state(&plan, seed)?;
        debug_assert!(matches!(
            plan.train.combiner,
            CombinerKindConfig::Vanilla | CombinerKindConfig::ScaleOnly
        ));
        for step in 0..=epochs as u64 {
            let tape = state.backbone().forward(&data.train.x).map_err(anyhow::Error::from)?;
            let z = tape.output();
            let eval = state.evaluate(&data.train)?;
            let _ = writeln!(
                csv,
                "{variant},{seed},{step},{},{},{},{}",
                fmt_float(z.get(0, 0)),
                fmt_float(z.get(0, 1)),
                fmt_float(eval.raw_losses[0]),
                fmt_float(eval.raw_losses[1])
            );
            if step < epochs as u64 {
                state.train_step(&data.train)?;
            }
        }
        let final_eval = state.evaluate(&data.train)?;
        println!(
            "demo {label}/{variant}: final losses {} and {}",
            fmt_float(final_eval.raw_losses[0]),
            fmt_float(final_eval.raw_losses[1])
        );
    }
    std::fs::write(out.join(format!("demo_{label}.csv")), csv).map_err(anyhow::Error::from)?;
    Ok(())
}

fn demo_plan(
    label: &str,
    spec: &taskgrad::tasks::TaskSpec,
    epochs: usize,
    net_lr: f64,
    rot_lr: f64,
    rotations: bool,
) -> RunPlan {
    use taskgrad::train::{CombinerKindConfig, GroupConfig, OptimizerKind, TrainConfig};

    let train = TrainConfig {
        epochs,
        batch_size: usize::MAX,
        network: GroupConfig { lr: net_lr, decay: 1.0, optimizer: OptimizerKind::sgd() },
        rotation: GroupConfig {
            lr: rot_lr,
            decay: 0.99999,
            // short-memory moment constants and a fat epsilon keep the
            // rotation game from orbiting or amplifying vanishing gradients
            optimizer: OptimizerKind::Adaptive { beta1: 0.5, beta2: 0.99, eps: 1e-4 },
        },
        combiner: if rotations { CombinerKindConfig::ScaleOnly } else { CombinerKindConfig::Vanilla },
        rotations_enabled: rotations,
        subspace: None,
        normalize_losses: false,
        seed: spec.seed,
    };
    RunPlan {
        name: format!("demo_{label}"),
        spec: spec.clone(),
        train,
        model: crate::config::ModelSection {
            hidden: vec![10],
            feature_dim: 2,
            head_hidden: vec![],
        },
        baselines: None,
        sweep: None,
        seeds: vec![spec.seed],
    }
}
