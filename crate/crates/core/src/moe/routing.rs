//! Difficulty estimation, budget mapping and top-p expert selection.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};
use crate::scalar::Scalar;

const LOG_EPS: f64 = 1e-12;
/// Absorbs float summation error when comparing a cumulative mass with `p`.
pub const CUMULATIVE_SLACK: f64 = 1e-9;

/// Normalized Shannon entropy `-(1/ln C) Σ_c P ln P` of each row, in `[0, 1]`.
pub fn predictive_entropy<T: Scalar>(probs: &Matrix<T>) -> Result<Vec<f64>> {
    let c = probs.cols();
    if c < 2 {
        return Err(Error::invalid(format!(
            "predictive entropy needs at least 2 classes, got {c}"
        )));
    }
    let norm = (c as f64).ln();
    Ok(probs
        .row_iter()
        .map(|row| {
            let h: f64 = row
                .iter()
                .map(|v| v.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.max(LOG_EPS).ln())
                .sum();
            (h / norm).clamp(0.0, 1.0)
        })
        .collect())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-node cumulative-probability thresholds.
///
/// At epoch 0 every threshold is 1 (full activation). Afterwards
/// `p_v = sigmoid(γ (U_v − Ū))` with `Ū` the mean of `entropy`.
pub fn map_budget(entropy: &[f64], gamma: f64, epoch: usize) -> Result<Vec<f64>> {
    if entropy.is_empty() {
        return Err(Error::invalid("budget mapping over an empty entropy vector"));
    }
    if epoch == 0 {
        return Ok(vec![1.0; entropy.len()]);
    }
    Ok(map_budget_around(entropy, mean(entropy), gamma))
}

/// `sigmoid(γ (U_v − centre))` for an explicit centre.
pub fn map_budget_around(entropy: &[f64], centre: f64, gamma: f64) -> Vec<f64> {
    entropy
        .iter()
        .map(|&u| sigmoid(gamma * (u - centre)))
        .collect()
}

/// Expert indices ordered by descending score; ties keep the lower index
/// first.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Minimal descending prefix of experts whose cumulative mass reaches
/// `threshold` (up to [`CUMULATIVE_SLACK`]). Never empty; returns every
/// expert when the full mass falls short or `threshold >= 1`, so a unit
/// threshold activates experts with vanishing scores too.
pub fn select_top_p(scores: &[f64], threshold: f64) -> Vec<usize> {
    if threshold >= 1.0 {
        return descending(scores);
    }
    let mut chosen = Vec::with_capacity(scores.len());
    let mut cumulative = 0.0;
    for i in descending(scores) {
        chosen.push(i);
        cumulative += scores[i];
        if cumulative >= threshold - CUMULATIVE_SLACK {
            break;
        }
    }
    chosen
}

/// The `k` highest-scoring experts (clamped to `[1, K]`).
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.clamp(1, scores.len().max(1));
    descending(scores).into_iter().take(k).collect()
}

/// `π_i / Σ_{j∈S} π_j` on the selected set, zero elsewhere.
pub fn renormalize(scores: &[f64], selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::invalid("renormalizing over an empty expert set"));
    }
    if let Some(&i) = selected.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::invalid(format!("expert {i} outside {} experts", scores.len())));
    }
    let mass: f64 = selected.iter().map(|&i| scores[i]).sum();
    if mass <= 0.0 {
        return Err(Error::invalid("selected experts carry zero routing mass"));
    }
    let mut out = vec![0.0; scores.len()];
    for &i in selected {
        out[i] = scores[i] / mass;
    }
    Ok(out)
}

/// Arg-max per row, lowest class on ties.
pub fn predict<T: Scalar>(probs: &Matrix<T>) -> Vec<usize> {
    probs.argmax_rows()
}

/// Bootstrap memory carried between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    /// Normalized predictive entropy per node from the latest predictions.
    pub entropy: Vec<f64>,
    /// Thresholds to apply at `epoch`.
    pub thresholds: Vec<f64>,
    pub mean_entropy: f64,
    /// Epoch the thresholds are meant for.
    pub epoch: usize,
    /// Epoch whose predictions produced `entropy`; `None` at cold start.
    pub source_epoch: Option<usize>,
}

impl RoutingState {
    /// Epoch-0 state: every node activates all experts.
    pub fn cold_start(n: usize) -> Self {
        RoutingState {
            entropy: vec![1.0; n],
            thresholds: vec![1.0; n],
            mean_entropy: 1.0,
            epoch: 0,
            source_epoch: None,
        }
    }

    /// Records predictions made at the current epoch and derives the
    /// thresholds for the next one.
    pub fn advance<T: Scalar>(&mut self, probs: &Matrix<T>, gamma: f64) -> Result<()> {
        if probs.rows() != self.thresholds.len() {
            return Err(Error::shape(
                "RoutingState::advance",
                format!("{} prediction rows for {} nodes", probs.rows(), self.thresholds.len()),
            ));
        }
        let entropy = predictive_entropy(probs)?;
        let next = self.epoch + 1;
        self.thresholds = map_budget(&entropy, gamma, next)?;
        self.mean_entropy = mean(&entropy);
        self.entropy = entropy;
        self.source_epoch = Some(self.epoch);
        self.epoch = next;
        Ok(())
    }
}
