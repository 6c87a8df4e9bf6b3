//! Supervoxel graphs from multi-modal 3D volumes: volume I/O and phantoms,
//! SLIC supervoxels, background pruning, patch sampling, graph building and
//! the node encoder / trainer built on `voxgraph-autodiff`.

pub mod encoder;
pub mod graph;
pub mod metrics;
pub mod patch;
pub mod pipeline;
pub mod prune;
pub mod slic;
pub mod trainer;
pub mod volume;

pub use encoder::{Model, ModelConfig, Task};
pub use graph::{mutual_knn, laplacian_pe, Adjacency, KnnRule, SupervoxelGraph};
pub use patch::{patchify_supervoxel, PatchParams, PatchTensor};
pub use pipeline::{preprocess_volume, PipelineError, PreprocessParams, Preprocessed};
pub use prune::{compute_targets, prune_background, NodeTargets, RetainedSet};
pub use trainer::{evaluate, train, TrainConfig};
pub use slic::{slic, SlicParams, SupervoxelPartition};
pub use volume::{generate_phantom, normalize, MultiModalVolume, PhantomSpec};
