//! JSON and CSV formats used by the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use entmax_core::analysis::MetricReport;
use entmax_core::transforms::entmax;
use entmax_core::{AttentionTensor, ScoreVector, ShapeParam};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Pretty-printed with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json("serialize", e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value)?)
}

/// Input of the `transform` command: one score vector or a batch.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum TransformInput {
    Single(Vec<f64>),
    Batch(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformOutput {
    pub probs: Vec<f64>,
    pub tau: f64,
    pub support: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransformResult {
    Single(TransformOutput),
    Batch(Vec<TransformOutput>),
}

pub fn parse_transform_input(text: &str) -> Result<TransformInput> {
    serde_json::from_str(text).map_err(|e| {
        Error::InvalidInput(format!("expected a JSON array of numbers or of arrays: {e}"))
    })
}

/// Applies α-entmax to every vector of the input.
pub fn run_transform(input: &TransformInput, alpha: f64, tol: f64) -> Result<TransformResult> {
    let shape = ShapeParam::fixed(alpha)?;
    let one = |z: &[f64]| -> Result<TransformOutput> {
        let (p, t) = entmax(&ScoreVector::from_slice(z)?, &shape, tol)?;
        Ok(TransformOutput { support: p.support().to_vec(), probs: p.into_probs(), tau: t.tau })
    };
    Ok(match input {
        TransformInput::Single(z) => TransformResult::Single(one(z)?),
        TransformInput::Batch(zs) => {
            TransformResult::Batch(zs.iter().map(|z| one(z)).collect::<Result<_>>()?)
        }
    })
}

/// Reads every `*.json` file of `dir` as an attention tensor, in file-name
/// order.
pub fn read_tensor_dir(dir: &Path) -> Result<Vec<(PathBuf, AttentionTensor)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no .json tensors in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let t = read_json(&p)?;
            Ok((p, t))
        })
        .collect()
}

pub const METRIC_CSV_HEADER: &str = "layer,head,metric,value";

/// Long-format rows of the report; per-layer metrics leave `head` empty.
pub fn metrics_csv(report: &MetricReport) -> String {
    render_rows(report.long_rows().iter())
}

/// One CSV per metric name, keyed by a file-system friendly stem.
pub fn metrics_csv_by_metric(report: &MetricReport) -> Vec<(String, String)> {
    let rows = report.long_rows();
    let mut names: Vec<&str> = Vec::new();
    for (_, _, m, _) in &rows {
        if !names.contains(&m.as_str()) {
            names.push(m);
        }
    }
    names
        .iter()
        .map(|name| {
            let stem: String = name
                .chars()
                .filter_map(|c| match c {
                    '[' | ']' => None,
                    '+' => Some('p'),
                    '-' => Some('m'),
                    c => Some(c),
                })
                .collect();
            (stem, render_rows(rows.iter().filter(|r| r.2 == *name)))
        })
        .collect()
}

fn render_rows<'a>(rows: impl Iterator<Item = &'a (usize, Option<usize>, String, f64)>) -> String {
    let mut out = String::from(METRIC_CSV_HEADER);
    out.push('\n');
    for (layer, head, metric, value) in rows {
        let head = head.map(|h| h.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{layer},{head},{metric},{value}");
    }
    out
}
