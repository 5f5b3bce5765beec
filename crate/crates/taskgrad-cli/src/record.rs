//! Machine-readable result records: line-delimited JSON metrics with
//! 17-significant-digit floats (lossless f64 round-trip), plus CSV helpers
//! that use the same float rendering.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use taskgrad::train::{EpochRecord, StepRecord};

/// One step's metrics, as exported. Wall-clock timing deliberately lives in
/// a sidecar file, not here: metrics files must be byte-identical across
/// equal-seed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub step: u64,
    pub epoch: usize,
    pub raw_losses: Vec<f64>,
    pub losses: Vec<f64>,
    pub task_norms: Vec<f64>,
    pub weights: Vec<f64>,
    pub scale: f64,
    pub alphas: Option<Vec<f64>>,
    pub pairwise_cos: Vec<f64>,
    pub update_task_cos: Vec<f64>,
    pub rotation_losses: Option<Vec<f64>>,
    pub lr_network: f64,
    pub lr_rotation: f64,
    pub notes: Vec<String>,
}

impl MetricsRecord {
    pub fn from_step(run_id: &str, record: &StepRecord) -> Self {
        Self {
            run_id: run_id.to_string(),
            step: record.step,
            epoch: record.epoch,
            raw_losses: record.raw_losses.clone(),
            losses: record.losses.clone(),
            task_norms: record.task_norms.clone(),
            weights: record.weights.clone(),
            scale: record.scale,
            alphas: record.alphas.clone(),
            pairwise_cos: record.pairwise_cos.clone(),
            update_task_cos: record.update_task_cos.clone(),
            rotation_losses: record.rotation_losses.clone(),
            lr_network: record.lr_network,
            lr_rotation: record.lr_rotation,
            notes: record.notes.clone(),
        }
    }
}

/// JSON formatter printing every float with 17 significant digits
/// (`{:.16e}`), enough for exact f64 round-trips.
pub struct SigFigFormatter;

impl serde_json::ser::Formatter for SigFigFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{value:.8e}")
    }
}

/// Serialize any value to JSON with 17-significant-digit floats.
pub fn to_json(value: &impl Serialize) -> anyhow::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFigFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf)?)
}

/// Render one float the way every exported file does.
pub fn fmt_float(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.16e}")
    } else {
        "null".to_string()
    }
}

/// Write records as line-delimited JSON.
pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> anyhow::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_json(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read back a line-delimited metrics file.
pub fn read_jsonl(path: &Path) -> anyhow::Result<Vec<MetricsRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Write the per-epoch summary table: one row per epoch with validation
/// losses and accuracies per task (empty cells where no accuracy applies).
pub fn write_summary_csv(path: &Path, epochs: &[EpochRecord], num_tasks: usize) -> anyhow::Result<()> {
    let mut out = String::new();
    out.push_str("epoch,mean_step_loss,validation_sum");
    for k in 0..num_tasks {
        out.push_str(&format!(",validation_loss_{k}"));
    }
    for k in 0..num_tasks {
        out.push_str(&format!(",accuracy_{k}"));
    }
    out.push_str(",is_best\n");
    for e in epochs {
        out.push_str(&format!(
            "{},{},{}",
            e.epoch,
            fmt_float(e.mean_step_loss),
            fmt_float(e.validation_sum)
        ));
        for k in 0..num_tasks {
            out.push(',');
            out.push_str(&fmt_float(e.validation_losses[k]));
        }
        for k in 0..num_tasks {
            out.push(',');
            if let Some(acc) = e.accuracies[k] {
                out.push_str(&fmt_float(acc));
            }
        }
        out.push_str(&format!(",{}\n", e.is_best));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Final scores of one run, consumed by `compare`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub final_validation: f64,
    pub per_task_best: Vec<f64>,
    pub per_task_final: Vec<f64>,
    pub accuracies_final: Vec<Option<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MetricsRecord {
        MetricsRecord {
            run_id: "demo_s0".into(),
            step: 3,
            epoch: 1,
            raw_losses: vec![0.5, 1.0 / 3.0],
            losses: vec![1.0, 2.0f64.sqrt()],
            task_norms: vec![1e-300, 12345.6789],
            weights: vec![1.0, 0.0],
            scale: 5.0 / 3.0,
            alphas: Some(vec![2.0 / 3.0, 1.0 / 3.0]),
            pairwise_cos: vec![-0.25],
            update_task_cos: vec![0.7, 0.7],
            rotation_losses: None,
            lr_network: 0.01,
            lr_rotation: 0.005,
            notes: vec!["note".into()],
        }
    }

    #[test]
    fn floats_round_trip_exactly_through_the_formatter() {
        for v in [
            0.0,
            -0.0,
            1.0,
            1.0 / 3.0,
            2.0f64.sqrt(),
            f64::MIN_POSITIVE,
            1e-300,
            -9.87654321e250,
            f64::MAX,
        ] {
            let s = fmt_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s}");
        }
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![record(), MetricsRecord { step: 4, ..record() }];
        write_jsonl(&path, &records).unwrap();
        let bytes_first = std::fs::read(&path).unwrap();
        let parsed = read_jsonl(&path).unwrap();
        assert_eq!(parsed, records);
        write_jsonl(&path, &parsed).unwrap();
        let bytes_second = std::fs::read(&path).unwrap();
        assert_eq!(bytes_first, bytes_second);
    }

    #[test]
    fn summary_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let epochs = vec![EpochRecord {
            epoch: 0,
            mean_step_loss: 1.5,
            validation_losses: vec![1.0, 0.5],
            validation_sum: 1.5,
            accuracies: vec![Some(0.75), None],
            is_best: true,
        }];
        write_summary_csv(&path, &epochs, 2).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,mean_step_loss,validation_sum,validation_loss_0,validation_loss_1,accuracy_0,accuracy_1,is_best"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,"));
        assert!(row.contains(",,"), "missing accuracy must leave an empty cell");
        assert!(row.ends_with(",true"));
    }
}
