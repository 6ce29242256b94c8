use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `metrics.jsonl`. Wall time is kept out of this file so that
/// identical runs produce byte-identical traces; it goes to `timing.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Serialize)]
struct TimingRecord {
    step: usize,
    seconds: f64,
}

pub struct MetricsWriter {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    timing: BufWriter<File>,
    timing_path: PathBuf,
    start: Instant,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (metrics_path, timing_path) = (dir.join("metrics.jsonl"), dir.join("timing.jsonl"));
        Ok(Self {
            metrics: create(&metrics_path)?,
            timing: create(&timing_path)?,
            metrics_path,
            timing_path,
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&self.metrics_path, e))?;
        let t = TimingRecord {
            step: rec.step,
            seconds: self.start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&t).expect("record serializes");
        writeln!(self.timing, "{line}").map_err(|e| Error::io(&self.timing_path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        self.timing.flush().map_err(|e| Error::io(&self.timing_path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_owned(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// `metric,value` rows.
pub fn write_summary_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut text = String::from("metric,value\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// IoU of each listed part; a part absent from both prediction and truth
/// scores 1.
pub fn part_ious(pred: &[usize], truth: &[usize], parts: &[usize]) -> Vec<f64> {
    parts
        .iter()
        .map(|&p| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in pred.iter().zip(truth) {
                let (x, y) = (a == p, b == p);
                inter += usize::from(x && y);
                union += usize::from(x || y);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// Mean over shapes of each shape's mean part IoU.
    pub instance: f64,
    /// Mean over categories of the instance mIoU within that category.
    pub class: f64,
}

/// `shapes`: per shape its category, predicted and true part per point.
/// `parts_of(category)` lists the category's part ids.
pub fn miou(shapes: &[(usize, Vec<usize>, Vec<usize>)], parts_of: impl Fn(usize) -> Vec<usize>) -> MiouReport {
    let mut per_cat: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut all = Vec::with_capacity(shapes.len());
    for (cat, pred, truth) in shapes {
        let ious = part_ious(pred, truth, &parts_of(*cat));
        let m = ious.iter().sum::<f64>() / ious.len() as f64;
        all.push(m);
        per_cat.entry(*cat).or_default().push(m);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let cat_means: Vec<f64> = per_cat.values().map(|v| mean(v)).collect();
    MiouReport {
        instance: mean(&all),
        class: mean(&cat_means),
    }
}
