//! Node-level metrics and voxel-level Dice reconstructed from node predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("node id {0} is outside the label grid")]
    UnknownId(u32),
}

fn check(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::Length(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Binary F1 with positive class 1; zero when precision + recall is zero.
pub fn f1(pred: &[u8], truth: &[u8]) -> Result<f64, MetricError> {
    check(pred.len(), truth.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p > 0, t > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mann–Whitney AUC with average ranks for ties. NaN when only one class
/// is present.
pub fn roc_auc(scores: &[f64], truth: &[u8]) -> Result<f64, MetricError> {
    check(scores.len(), truth.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..j shares their average
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    let n_pos = truth.iter().filter(|&&t| t > 0).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(f64::NAN);
    }
    let rank_sum: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t > 0).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `1 − SS_res / SS_tot`. With constant targets: 1 for a perfect fit, else 0.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred.len(), truth.len())?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Paint every voxel with its supervoxel's prediction (pruned supervoxels
/// get 0), threshold at `> tau` and score against `mask > 0`. Both sets
/// empty counts as a perfect 1.0.
pub fn dice_from_regression(
    node_ids: &[u32],
    pred: &[f64],
    labels: &[u32],
    mask: &[u8],
    tau: f64,
) -> Result<f64, MetricError> {
    check(node_ids.len(), pred.len())?;
    if labels.len() != mask.len() {
        return Err(MetricError::Length(labels.len(), mask.len()));
    }
    let n_sv = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut positive = vec![false; n_sv];
    for (&id, &p) in node_ids.iter().zip(pred) {
        let slot = positive.get_mut(id as usize).ok_or(MetricError::UnknownId(id))?;
        *slot = p > tau;
    }
    let (mut inter, mut predicted, mut actual) = (0usize, 0usize, 0usize);
    for (&l, &m) in labels.iter().zip(mask) {
        let x = positive[l as usize];
        let y = m > 0;
        inter += (x && y) as usize;
        predicted += x as usize;
        actual += y as usize;
    }
    if predicted + actual == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (predicted + actual) as f64)
}

/// Pooled node-level report for one evaluation split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_graphs: usize,
    pub n_nodes: usize,
    pub mae: f64,
    pub r2: f64,
    pub f1: f64,
    pub roc_auc: f64,
    /// Mean over graphs of the per-graph value.
    pub per_graph_mae: f64,
    pub per_graph_f1: f64,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
}
