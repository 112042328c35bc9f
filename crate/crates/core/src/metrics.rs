//! Accuracy over class partitions, H-Mean, and the per-task metrics log.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::model::TransformerClassifier;

pub const CSV_HEADER: [&str; 8] = [
    "task",
    "acc_r",
    "acc_f",
    "acc_o",
    "drop",
    "h_mean",
    "zero_group_ratio",
    "tunable_ratio",
];

/// Snapshot after one forgetting task. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: u32,
    pub acc_r: f64,
    pub acc_f: f64,
    /// Accuracy on classes forgotten by earlier tasks; absent for the first task.
    pub acc_o: Option<f64>,
    pub drop: f64,
    pub h_mean: f64,
    pub zero_group_ratio: f64,
    pub tunable_ratio: f64,
}

impl MetricsRecord {
    /// Fills in `drop` and `h_mean` from the forget-class accuracy before and after the task.
    pub fn new(
        task: u32,
        acc_r: f64,
        acc_f_before: f64,
        acc_f: f64,
        acc_o: Option<f64>,
        zero_group_ratio: f64,
        tunable_ratio: f64,
    ) -> Self {
        let drop = acc_f_before - acc_f;
        Self {
            task,
            acc_r,
            acc_f,
            acc_o,
            drop,
            h_mean: h_mean(acc_r, drop),
            zero_group_ratio,
            tunable_ratio,
        }
    }
}

/// Appends `record`, requiring task indices to run 1, 2, 3, ...
pub fn push_record(log: &mut Vec<MetricsRecord>, record: MetricsRecord) -> Result<()> {
    let expected = log.len() as u32 + 1;
    if record.task != expected {
        return Err(Error::validation(format!(
            "metrics for task {} recorded out of order (expected task {expected})",
            record.task
        )));
    }
    log.push(record);
    Ok(())
}

/// Harmonic mean of retained accuracy and forgetting drop. A negative drop
/// is treated as 0.
pub fn h_mean(acc_r: f64, drop: f64) -> f64 {
    let drop = if drop < 0.0 {
        log::warn!("forget-class accuracy rose by {:.3} points; drop clamped to 0", -drop);
        0.0
    } else {
        drop
    };
    let sum = acc_r + drop;
    if sum <= 0.0 {
        return 0.0;
    }
    2.0 * acc_r * drop / sum
}

/// Percentage of samples with a label in `classes` that the model classifies correctly.
pub fn accuracy(
    model: &TransformerClassifier,
    lora: Option<&LoraSet>,
    data: &Dataset,
    classes: &[usize],
) -> Result<f64> {
    let idx = data.indices_of(classes);
    if idx.is_empty() {
        return Err(Error::validation(format!("no samples for classes {classes:?}")));
    }
    let preds = model.predict(data, &idx, lora)?;
    Ok(percent_correct(&preds, idx.iter().map(|&i| data.labels()[i])))
}

pub fn percent_correct(preds: &[usize], labels: impl IntoIterator<Item = usize>) -> f64 {
    let correct = preds.iter().zip(labels).filter(|(p, y)| **p == *y).count();
    100.0 * correct as f64 / preds.len() as f64
}

/// Adapter parameters as a fraction of all parameters (base plus adapters).
pub fn tunable_ratio(model: &TransformerClassifier, lora: &LoraSet) -> f64 {
    let l = lora.num_params() as f64;
    l / (model.num_params() as f64 + l)
}

pub fn write_csv<W: Write>(w: W, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::validation(format!(
            "metrics header {header:?} does not match {CSV_HEADER:?}"
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn save_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, records)?;
    crate::checkpoint::write_atomic(path, &buf)
}

pub fn load_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(f)
}
