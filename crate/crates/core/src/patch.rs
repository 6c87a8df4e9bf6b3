//! Patch sampling inside one supervoxel: k-means++ centroids, then the `s`
//! nearest member voxels of each centroid, read across all modalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::MultiModalVolume;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("supervoxel has no voxels")]
    EmptySupervoxel,
    #[error("no centroids given")]
    NoCentroids,
    #[error("n_patch and patch size must be at least 1")]
    ZeroSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchParams {
    pub n_patch: usize,
    /// Voxels per patch (`s`).
    pub patch_size: usize,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self {
            n_patch: 16,
            patch_size: 24,
        }
    }
}

/// Node feature tensor of shape `(n_patch · n_modalities, s + 3)`.
///
/// Rows are patch-major, modality-minor. Each row holds the `s` intensities
/// of one modality, nearest voxel first, followed by the patch centroid
/// normalized to `[0, 1]` by the volume bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTensor {
    pub values: Vec<f32>,
    pub n_patch: usize,
    pub patch_size: usize,
    pub n_modalities: usize,
    pub centroids_world: Vec<[f32; 3]>,
}

impl PatchTensor {
    pub fn rows(&self) -> usize {
        self.n_patch * self.n_modalities
    }

    pub fn cols(&self) -> usize {
        self.patch_size + 3
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols()..(r + 1) * self.cols()]
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// k-means++ (D² sampling) followed by three Lloyd steps. With fewer points
/// than `n_patch`, centroids are drawn with replacement from the points.
pub fn kmeanspp_centroids(
    coords: &[[f64; 3]],
    n_patch: usize,
    seed: u64,
) -> Result<Vec<[f64; 3]>, PatchError> {
    if coords.is_empty() {
        return Err(PatchError::EmptySupervoxel);
    }
    if n_patch == 0 {
        return Err(PatchError::ZeroSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = coords.len();
    if n < n_patch {
        return Ok((0..n_patch).map(|_| coords[rng.random_range(0..n)]).collect());
    }

    let mut centers = Vec::with_capacity(n_patch);
    centers.push(coords[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = coords.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < n_patch {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // round-off can leave `acc` just short of `target`
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        let c = coords[pick];
        centers.push(c);
        for (d, &p) in d2.iter_mut().zip(coords) {
            *d = d.min(dist2(p, c));
        }
    }

    for _ in 0..3 {
        let mut sums = vec![[0.0f64; 3]; n_patch];
        let mut counts = vec![0usize; n_patch];
        for &p in coords {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &c) in centers.iter().enumerate() {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            counts[best] += 1;
            for a in 0..3 {
                sums[best][a] += p[a];
            }
        }
        for k in 0..n_patch {
            if counts[k] > 0 {
                centers[k] = sums[k].map(|s| s / counts[k] as f64);
            }
        }
    }
    Ok(centers)
}

/// Indices into `members` of the `s` voxels nearest to `centroid`, ordered
/// by (distance, voxel index) and cycled when `members` is shorter than `s`.
pub fn nearest_voxels(
    vol: &MultiModalVolume,
    members: &[usize],
    centroid: [f64; 3],
    s: usize,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = members
        .iter()
        .map(|&v| (dist2(vol.world(v), centroid), v))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if keyed.len() > s {
        keyed.select_nth_unstable_by(s - 1, by_key);
        keyed.truncate(s);
    }
    keyed.sort_by(by_key);
    keyed.iter().map(|&(_, v)| v).cycle().take(s).collect()
}

/// Assemble the patch tensor of one supervoxel from precomputed centroids.
pub fn extract_patches(
    vol: &MultiModalVolume,
    members: &[usize],
    centroids: &[[f64; 3]],
    patch_size: usize,
) -> Result<PatchTensor, PatchError> {
    if centroids.is_empty() {
        return Err(PatchError::NoCentroids);
    }
    if members.is_empty() {
        return Err(PatchError::EmptySupervoxel);
    }
    if patch_size == 0 {
        return Err(PatchError::ZeroSize);
    }
    let n_mod = vol.modalities().len();
    let extent = vol.extent();
    let cols = patch_size + 3;
    let mut values = Vec::with_capacity(centroids.len() * n_mod * cols);
    let mut centroids_world = Vec::with_capacity(centroids.len());
    for &c in centroids {
        let nearest = nearest_voxels(vol, members, c, patch_size);
        let norm = [0, 1, 2].map(|a| {
            if extent[a] > 0.0 {
                (c[a] / extent[a]).clamp(0.0, 1.0) as f32
            } else {
                0.0
            }
        });
        for m in 0..n_mod {
            let grid = vol.channel(m);
            values.extend(nearest.iter().map(|&v| grid[v]));
            values.extend_from_slice(&norm);
        }
        centroids_world.push(c.map(|x| x as f32));
    }
    Ok(PatchTensor {
        values,
        n_patch: centroids.len(),
        patch_size,
        n_modalities: n_mod,
        centroids_world,
    })
}

/// Seed for supervoxel `id` derived from a run seed (splitmix64 mix).
pub fn supervoxel_seed(seed: u64, id: u32) -> u64 {
    let mut z = seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Centroids and patches for one supervoxel. `members` may come in any
/// order; it is canonicalized first so the result only depends on the set.
pub fn patchify_supervoxel(
    vol: &MultiModalVolume,
    members: &[usize],
    params: &PatchParams,
    seed: u64,
) -> Result<PatchTensor, PatchError> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let coords: Vec<[f64; 3]> = sorted.iter().map(|&v| vol.world(v)).collect();
    let centroids = kmeanspp_centroids(&coords, params.n_patch, seed)?;
    extract_patches(vol, &sorted, &centroids, params.patch_size)
}
