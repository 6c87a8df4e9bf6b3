//! Largest-gap background pruning and per-supervoxel targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slic::SupervoxelPartition;

pub const DEFAULT_TAU_CLS: f64 = 0.15;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("need at least 2 supervoxels to prune, got {0}")]
    TooFew(usize),
    #[error("no gap: all supervoxel means are equal")]
    NoGap,
    #[error("non-finite mean for supervoxel {0}")]
    NonFinite(usize),
    #[error("retained id {0} is not in the partition")]
    UnknownId(u32),
    #[error("mask length {mask} does not match partition of {voxels} voxels")]
    MaskMismatch { mask: usize, voxels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetainedSet {
    /// Retained supervoxel ids, ascending.
    pub indices: Vec<u32>,
    pub theta: f64,
    /// Position of the largest gap in the ascending order: it lies between
    /// the `gap_index`-th and `gap_index + 1`-th smallest means.
    pub gap_index: usize,
}

/// Sort the means ascending, find the widest gap between neighbours (the
/// first one on ties), cut halfway across it and keep everything above.
///
/// Background (low means) sits below the gap; this is the same split as
/// scanning the negated means in descending order.
pub fn prune_background(means: &[f64]) -> Result<RetainedSet, PruneError> {
    if means.len() < 2 {
        return Err(PruneError::TooFew(means.len()));
    }
    if let Some(i) = means.iter().position(|m| !m.is_finite()) {
        return Err(PruneError::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut gap_index = 0;
    let mut widest = f64::NEG_INFINITY;
    for g in 0..order.len() - 1 {
        let gap = means[order[g + 1]] - means[order[g]];
        if gap > widest {
            widest = gap;
            gap_index = g;
        }
    }
    if widest <= 0.0 {
        return Err(PruneError::NoGap);
    }
    let theta = 0.5 * (means[order[gap_index]] + means[order[gap_index + 1]]);
    let indices = (0..means.len())
        .filter(|&l| means[l] > theta)
        .map(|l| l as u32)
        .collect();
    Ok(RetainedSet {
        indices,
        theta,
        gap_index,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTargets {
    pub ids: Vec<u32>,
    /// Tumour fraction per node.
    pub y_reg: Vec<f64>,
    pub y_cls: Vec<u8>,
    /// Tumour voxel count per node; `y_reg = tumor_voxels / voxel_count`.
    pub tumor_voxels: Vec<usize>,
    pub voxel_count: Vec<usize>,
    pub tau_cls: f64,
}

/// Tumour fraction (`mask > 0`) of each retained supervoxel, and its strict
/// `> tau_cls` binarization.
pub fn compute_targets(
    partition: &SupervoxelPartition,
    mask: &[u8],
    retained: &[u32],
    tau_cls: f64,
) -> Result<NodeTargets, PruneError> {
    if mask.len() != partition.labels().len() {
        return Err(PruneError::MaskMismatch {
            mask: mask.len(),
            voxels: partition.labels().len(),
        });
    }
    if let Some(&bad) = retained.iter().find(|&&l| l as usize >= partition.n_sv()) {
        return Err(PruneError::UnknownId(bad));
    }
    let mut tumor = vec![0usize; partition.n_sv()];
    let mut total = vec![0usize; partition.n_sv()];
    for (&l, &m) in partition.labels().iter().zip(mask) {
        total[l as usize] += 1;
        if m > 0 {
            tumor[l as usize] += 1;
        }
    }
    let tumor_voxels: Vec<usize> = retained.iter().map(|&l| tumor[l as usize]).collect();
    let voxel_count: Vec<usize> = retained.iter().map(|&l| total[l as usize]).collect();
    let y_reg: Vec<f64> = tumor_voxels
        .iter()
        .zip(&voxel_count)
        .map(|(&t, &c)| t as f64 / c as f64)
        .collect();
    let y_cls = y_reg.iter().map(|&y| u8::from(y > tau_cls)).collect();
    Ok(NodeTargets {
        ids: retained.to_vec(),
        y_reg,
        y_cls,
        tumor_voxels,
        voxel_count,
        tau_cls,
    })
}
