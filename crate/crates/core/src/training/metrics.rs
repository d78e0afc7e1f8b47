//! Per-epoch metric records and their JSON-lines encoding.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training epoch. Accuracies are `None` for empty splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_task: f64,
    pub loss_re: f64,
    pub loss_lb: f64,
    pub loss_total: f64,
    pub acc_train: Option<f64>,
    pub acc_val: Option<f64>,
    pub acc_test: Option<f64>,
    pub mean_active_experts: f64,
    pub per_expert_load: Vec<f64>,
}

/// Fraction of `nodes` whose prediction matches the label.
pub fn accuracy(predictions: &[usize], labels: &[usize], nodes: &[usize]) -> Option<f64> {
    if nodes.is_empty() {
        return None;
    }
    let hits = nodes.iter().filter(|&&v| predictions[v] == labels[v]).count();
    Some(hits as f64 / nodes.len() as f64)
}

pub fn to_jsonl(reports: &[EpochReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::invalid(format!("metrics encoding: {e}")))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, reports: &[EpochReport]) -> Result<()> {
    w.write_all(to_jsonl(reports)?.as_bytes())?;
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<EpochReport>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: "<metrics>".into(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
