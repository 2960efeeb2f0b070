//! Training and experiment metrics: JSONL logs written during runs, and the
//! CSV emitter the experiment harness uses for figure-analog tables.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{NumericsError, Result};

fn io_err(context: &str, e: impl std::fmt::Display) -> NumericsError {
    NumericsError::InvalidArgument { context: context.to_string(), detail: e.to_string() }
}

/// One evaluation record from a training run. Loss fields are always
/// present; image metrics appear at eval steps only.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_flow: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_perc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checker: Option<f64>,
    /// held-out flow loss (conditional-prediction stages)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_fm_eval: Option<f64>,
}

impl TrainRecord {
    pub fn at(step: usize) -> Self {
        TrainRecord {
            step,
            l_flow: None,
            l_perc: None,
            l_ce: None,
            psnr: None,
            mse: None,
            checker: None,
            l_fm_eval: None,
        }
    }
}

/// Append-only JSONL writer; one JSON object per line, flushed per record.
pub struct JsonlLogger {
    w: BufWriter<File>,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err("JsonlLogger::create", e))?;
        }
        let f = File::create(path).map_err(|e| io_err("JsonlLogger::create", e))?;
        Ok(JsonlLogger { w: BufWriter::new(f) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_err("JsonlLogger::append", e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err("JsonlLogger::append", e))?;
        Ok(JsonlLogger { w: BufWriter::new(f) })
    }

    pub fn log<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| io_err("JsonlLogger::log", e))?;
        self.w.write_all(line.as_bytes()).map_err(|e| io_err("JsonlLogger::log", e))?;
        self.w.write_all(b"\n").map_err(|e| io_err("JsonlLogger::log", e))?;
        self.w.flush().map_err(|e| io_err("JsonlLogger::log", e))
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| io_err(&format!("read_jsonl {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err("read_jsonl", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| io_err("read_jsonl", format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// One scalar observation in the experiment harness.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HarnessRecord {
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// Writes harness records as CSV with the documented column order. Output
/// is a pure function of the input slice (byte-identical across calls).
pub fn write_csv(records: &[HarnessRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err("write_csv", e))?;
    }
    let f = File::create(path).map_err(|e| io_err("write_csv", e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "experiment,variant,seed,step,metric,value").map_err(|e| io_err("write_csv", e))?;
    for r in records {
        writeln!(w, "{},{},{},{},{},{}", r.experiment, r.variant, r.seed, r.step, r.metric, r.value)
            .map_err(|e| io_err("write_csv", e))?;
    }
    w.flush().map_err(|e| io_err("write_csv", e))
}

/// Median of a value list; the harness evaluates every directional claim on
/// medians over seeds.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
