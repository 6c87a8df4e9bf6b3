//! Volume to graph: normalize, SLIC, prune, targets, patches, kNN, PE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    laplacian_pe, mutual_knn, node_centroids, GraphError, GraphMeta, GraphNode, KnnRule, LabelGrid,
    SupervoxelGraph,
};
use crate::patch::{patchify_supervoxel, supervoxel_seed, PatchError, PatchParams};
use crate::prune::{compute_targets, prune_background, NodeTargets, PruneError, RetainedSet, DEFAULT_TAU_CLS};
use crate::slic::{partition_stats, slic, SlicError, SlicParams, SupervoxelPartition};
use crate::volume::{normalize, MultiModalVolume, VolumeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Slic(#[from] SlicError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub slic: SlicParams,
    pub patch: PatchParams,
    pub k_nn: usize,
    pub rule: KnnRule,
    pub k_pe: usize,
    pub tau_cls: f64,
    pub seed: u64,
    /// Embed the supervoxel label grid so Dice can be computed later.
    pub keep_labels: bool,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            slic: SlicParams::default(),
            patch: PatchParams::default(),
            k_nn: 8,
            rule: KnnRule::Mutual,
            k_pe: 8,
            tau_cls: DEFAULT_TAU_CLS,
            seed: 42,
            keep_labels: true,
        }
    }
}

pub struct Preprocessed {
    pub graph: SupervoxelGraph,
    pub partition: SupervoxelPartition,
    pub retained: RetainedSet,
    pub targets: NodeTargets,
}

/// Run the full preprocessing chain on one raw volume.
///
/// SLIC and patches see the z-scored volume. Pruning uses the raw means of
/// the reference modality, where background is exactly zero; after
/// z-scoring, background would sit inside the tissue range.
pub fn preprocess_volume(
    vol: &MultiModalVolume,
    params: &PreprocessParams,
    source: &str,
) -> Result<Preprocessed, PipelineError> {
    let normalized = normalize(vol)?;
    let partition = slic(&normalized, &params.slic)?;
    let reference = vol
        .modality_index(&params.slic.reference_modality)
        .ok_or_else(|| SlicError::UnknownModality(params.slic.reference_modality.clone()))?;
    let raw_means: Vec<f64> = partition_stats(&partition, vol)?
        .iter()
        .map(|s| s.mean_intensity[reference])
        .collect();
    let retained = prune_background(&raw_means)?;
    let zeros;
    let mask = match vol.mask() {
        Some(m) => m,
        None => {
            zeros = vec![0u8; vol.n_voxels()];
            &zeros
        }
    };
    let targets = compute_targets(&partition, mask, &retained.indices, params.tau_cls)?;

    let members = partition.members();
    let patches = retained
        .indices
        .iter()
        .map(|&id| {
            patchify_supervoxel(
                &normalized,
                &members[id as usize],
                &params.patch,
                supervoxel_seed(params.seed, id),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let centroids: Vec<[f32; 3]> = node_centroids(&patches)
        .into_iter()
        .map(|c| c.map(|x| x as f32))
        .collect();
    // neighbours come from the stored (f32) centroids so a saved graph is
    // self-consistent
    let centroids_f64: Vec<[f64; 3]> = centroids.iter().map(|c| c.map(|x| x as f64)).collect();
    let adjacency = mutual_knn(&centroids_f64, params.k_nn, params.rule)?;
    let pe = laplacian_pe(&adjacency, params.k_pe);

    let nodes = patches
        .into_iter()
        .enumerate()
        .map(|(i, p)| GraphNode {
            id: retained.indices[i],
            patches: p,
            centroid_world: centroids[i],
            y_reg: targets.y_reg[i] as f32,
            y_cls: targets.y_cls[i],
        })
        .collect();
    let graph = SupervoxelGraph {
        nodes,
        adjacency,
        lap_pe: pe.values.iter().map(|&v| v as f32).collect(),
        meta: GraphMeta {
            n_sv_requested: params.slic.n_sv,
            k_nn: params.k_nn,
            rule: params.rule,
            k_pe: params.k_pe,
            tau_cls: params.tau_cls,
            modalities: vol.modalities().to_vec(),
            source: source.to_string(),
        },
        label_grid: params.keep_labels.then(|| LabelGrid {
            dims: partition.dims(),
            labels: partition.labels().to_vec(),
        }),
    };
    Ok(Preprocessed {
        graph,
        partition,
        retained,
        targets,
    })
}
