//! 3D SLIC over-segmentation on a single reference modality.
//!
//! Clusters live in joint (intensity, voxel position) space with distance
//! `D² = dI² + (m / S)² · ds²`, where `S` is the cube root of the expected
//! supervoxel size and `m` the compactness. Each cluster only scans a
//! window of half-width `S` (or its lattice step, if larger) around its
//! centre. After the Lloyd iterations, fragments smaller than a quarter of
//! the expected size are merged into their largest 26-adjacent neighbour.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{grid_coords, linear_index, Dims, MultiModalVolume};

#[derive(Debug, Error)]
pub enum SlicError {
    #[error("requested {requested} supervoxels but the volume has {voxels} voxels")]
    TooManySupervoxels { requested: usize, voxels: usize },
    #[error("n_sv must be at least 1")]
    ZeroSupervoxels,
    #[error("unknown reference modality {0:?}")]
    UnknownModality(String),
    #[error("partition dims {partition:?} do not match volume dims {volume:?}")]
    DimsMismatch { partition: Dims, volume: Dims },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub reference_modality: String,
    pub n_sv: usize,
    pub compactness: f64,
    pub max_iters: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            reference_modality: "T1".into(),
            n_sv: 1000,
            compactness: 0.1,
            max_iters: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelStats {
    /// Mean intensity per modality, in volume modality order.
    pub mean_intensity: Vec<f64>,
    pub voxel_count: usize,
    pub centroid_world: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelPartition {
    dims: Dims,
    labels: Vec<u32>,
    n_sv: usize,
    stats: Vec<SupervoxelStats>,
}

impl SupervoxelPartition {
    /// Build from an explicit label grid (labels must be dense `0..n`).
    pub fn from_labels(vol: &MultiModalVolume, labels: Vec<u32>) -> Result<Self, SlicError> {
        if labels.len() != vol.n_voxels() {
            return Err(SlicError::DimsMismatch {
                partition: [labels.len(), 1, 1],
                volume: vol.dims(),
            });
        }
        let n_sv = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut p = Self {
            dims: vol.dims(),
            labels,
            n_sv,
            stats: Vec::new(),
        };
        p.stats = partition_stats(&p, vol)?;
        Ok(p)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_sv(&self) -> usize {
        self.n_sv
    }

    pub fn stats(&self) -> &[SupervoxelStats] {
        &self.stats
    }

    /// Voxel indices of every supervoxel, each list in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_sv];
        for (idx, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(idx);
        }
        out
    }
}

/// Exact per-supervoxel means, counts and world centroids.
pub fn partition_stats(
    partition: &SupervoxelPartition,
    vol: &MultiModalVolume,
) -> Result<Vec<SupervoxelStats>, SlicError> {
    if partition.dims != vol.dims() {
        return Err(SlicError::DimsMismatch {
            partition: partition.dims,
            volume: vol.dims(),
        });
    }
    let n_mod = vol.modalities().len();
    let k = partition.n_sv;
    let mut sums = vec![0.0f64; k * n_mod];
    let mut pos = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for (idx, &l) in partition.labels.iter().enumerate() {
        let l = l as usize;
        counts[l] += 1;
        for m in 0..n_mod {
            sums[l * n_mod + m] += vol.channel(m)[idx] as f64;
        }
        let w = vol.world(idx);
        for a in 0..3 {
            pos[l][a] += w[a];
        }
    }
    Ok((0..k)
        .map(|l| {
            let c = counts[l].max(1) as f64;
            SupervoxelStats {
                mean_intensity: (0..n_mod).map(|m| sums[l * n_mod + m] / c).collect(),
                voxel_count: counts[l],
                centroid_world: pos[l].map(|p| p / c),
            }
        })
        .collect())
}

/// Seeds per axis: grow the axis with the coarsest spacing until the lattice
/// reaches `n_sv`, then keep whichever of the last two lattices is closer.
fn lattice_counts(dims: Dims, n_sv: usize) -> [usize; 3] {
    let mut g = [1usize; 3];
    let mut prev = g;
    while g.iter().product::<usize>() < n_sv {
        let axis = (0..3)
            .filter(|&a| g[a] < dims[a])
            .max_by(|&a, &b| {
                let ra = dims[a] as f64 / g[a] as f64;
                let rb = dims[b] as f64 / g[b] as f64;
                ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
            })
            .expect("n_sv <= voxel count");
        prev = g;
        g[axis] += 1;
    }
    let over = g.iter().product::<usize>() - n_sv;
    let under = n_sv.saturating_sub(prev.iter().product::<usize>());
    if prev != g && under < over {
        prev
    } else {
        g
    }
}

const NEIGHBORS_26: [[isize; 3]; 26] = {
    let mut out = [[0isize; 3]; 26];
    let mut i = 0;
    let mut dx = -1;
    while dx <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dz = -1;
            while dz <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[i] = [dx, dy, dz];
                    i += 1;
                }
                dz += 1;
            }
            dy += 1;
        }
        dx += 1;
    }
    out
};

fn offset(dims: Dims, c: [usize; 3], d: [isize; 3]) -> Option<usize> {
    let mut p = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + d[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        p[a] = v as usize;
    }
    Some(linear_index(dims, p))
}

fn gradient_magnitude(intensity: &[f64], dims: Dims, c: [usize; 3]) -> f64 {
    (0..3)
        .map(|a| {
            let mut lo = c;
            let mut hi = c;
            lo[a] = c[a].saturating_sub(1);
            hi[a] = (c[a] + 1).min(dims[a] - 1);
            let d = intensity[linear_index(dims, hi)] - intensity[linear_index(dims, lo)];
            d * d
        })
        .sum()
}

pub fn slic(vol: &MultiModalVolume, params: &SlicParams) -> Result<SupervoxelPartition, SlicError> {
    let dims = vol.dims();
    let n = vol.n_voxels();
    if params.n_sv == 0 {
        return Err(SlicError::ZeroSupervoxels);
    }
    if params.n_sv > n {
        return Err(SlicError::TooManySupervoxels {
            requested: params.n_sv,
            voxels: n,
        });
    }
    let m = vol
        .modality_index(&params.reference_modality)
        .ok_or_else(|| SlicError::UnknownModality(params.reference_modality.clone()))?;
    let intensity: Vec<f64> = vol.channel(m).iter().map(|&v| v as f64).collect();

    let expected = n as f64 / params.n_sv as f64;
    let s = expected.cbrt();
    let g = lattice_counts(dims, params.n_sv);
    let step = [0, 1, 2].map(|a| dims[a] as f64 / g[a] as f64);
    let perturb = step.iter().all(|&st| st >= 3.0);

    // Cluster centres: (intensity, x, y, z) in voxel units.
    let mut centers: Vec<[f64; 4]> = Vec::with_capacity(g.iter().product());
    for i in 0..g[0] {
        for j in 0..g[1] {
            for k in 0..g[2] {
                // cell centre in voxel coordinates; voxel x covers [x-0.5, x+0.5]
                let pos = [i, j, k].map(|v| v as f64);
                let mut pos = [0, 1, 2].map(|a| (pos[a] + 0.5) * step[a] - 0.5);
                let mut c = pos.map(|p| p.round() as usize);
                if perturb {
                    let mut best = gradient_magnitude(&intensity, dims, c);
                    for d in NEIGHBORS_26 {
                        if let Some(idx) = offset(dims, c, d) {
                            let cc = grid_coords(dims, idx);
                            let gm = gradient_magnitude(&intensity, dims, cc);
                            if gm < best {
                                best = gm;
                                c = cc;
                                pos = cc.map(|v| v as f64);
                            }
                        }
                    }
                }
                let idx = linear_index(dims, c);
                centers.push([intensity[idx], pos[0], pos[1], pos[2]]);
            }
        }
    }

    let half = step.map(|st| st.max(s));
    let spatial_weight = (params.compactness / s).powi(2);
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.max_iters.max(1) {
        labels.fill(u32::MAX);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let lo = [0, 1, 2].map(|a| (c[a + 1] - half[a]).ceil().max(0.0) as usize);
            let hi = [0, 1, 2].map(|a| ((c[a + 1] + half[a]).floor() as usize).min(dims[a] - 1));
            for x in lo[0]..=hi[0] {
                let dx = x as f64 - c[1];
                for y in lo[1]..=hi[1] {
                    let dy = y as f64 - c[2];
                    let row = (x * dims[1] + y) * dims[2];
                    for z in lo[2]..=hi[2] {
                        let dz = z as f64 - c[3];
                        let idx = row + z;
                        let di = intensity[idx] - c[0];
                        let d = di * di + spatial_weight * (dx * dx + dy * dy + dz * dz);
                        if d < dist[idx] {
                            dist[idx] = d;
                            labels[idx] = k as u32;
                        }
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 4]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let [x, y, z] = grid_coords(dims, idx);
            let acc = &mut sums[l as usize];
            acc[0] += intensity[idx];
            acc[1] += x as f64;
            acc[2] += y as f64;
            acc[3] += z as f64;
            counts[l as usize] += 1;
        }
        let mut movement = 0.0f64;
        for (c, (acc, &cnt)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if cnt == 0 {
                continue;
            }
            let next = acc.map(|v| v / cnt as f64);
            let shift = (1..4).map(|a| (next[a] - c[a]).powi(2)).sum::<f64>().sqrt();
            movement = movement.max(shift);
            *c = next;
        }
        if movement < 1e-4 * s {
            break;
        }
    }

    let labels = enforce_connectivity(&labels, dims, expected / 4.0);
    SupervoxelPartition::from_labels(vol, labels)
}

/// Relabel so every supervoxel is one 26-connected component. Components
/// smaller than `min_size` (and voxels no cluster reached) are merged into
/// the largest adjacent region; final ids follow raster order of each
/// region's first voxel.
fn enforce_connectivity(labels: &[u32], dims: Dims, min_size: f64) -> Vec<u32> {
    let n = labels.len();
    let mut comp = vec![u32::MAX; n];
    let mut comp_size: Vec<usize> = Vec::new();
    let mut comp_label: Vec<u32> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = comp_size.len() as u32;
        let l = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(v) = stack.pop() {
            size += 1;
            let c = grid_coords(dims, v);
            for d in NEIGHBORS_26 {
                if let Some(u) = offset(dims, c, d) {
                    if comp[u] == u32::MAX && labels[u] == l {
                        comp[u] = id;
                        stack.push(u);
                    }
                }
            }
        }
        comp_size.push(size);
        comp_label.push(l);
    }

    let n_comp = comp_size.len();
    let mut adjacency: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_comp];
    for v in 0..n {
        let c = grid_coords(dims, v);
        for d in NEIGHBORS_26 {
            if let Some(u) = offset(dims, c, d) {
                if comp[u] != comp[v] {
                    adjacency[comp[v] as usize].insert(comp[u]);
                }
            }
        }
    }

    let mut region: Vec<Option<u32>> = (0..n_comp)
        .map(|c| {
            let keep = comp_label[c] != u32::MAX && comp_size[c] as f64 >= min_size;
            keep.then_some(c as u32)
        })
        .collect();
    if region.iter().all(Option::is_none) {
        let largest = (0..n_comp).max_by_key(|&c| (comp_size[c], std::cmp::Reverse(c))).unwrap();
        region[largest] = Some(largest as u32);
    }
    let mut region_size = vec![0usize; n_comp];
    for c in 0..n_comp {
        if let Some(r) = region[c] {
            region_size[r as usize] += comp_size[c];
        }
    }
    loop {
        let mut progressed = false;
        let mut pending = false;
        for c in 0..n_comp {
            if region[c].is_some() {
                continue;
            }
            let target = adjacency[c]
                .iter()
                .filter_map(|&nb| region[nb as usize])
                .max_by_key(|&r| (region_size[r as usize], std::cmp::Reverse(r)));
            match target {
                Some(r) => {
                    region[c] = Some(r);
                    region_size[r as usize] += comp_size[c];
                    progressed = true;
                }
                None => pending = true,
            }
        }
        if !pending || !progressed {
            break;
        }
    }

    let mut dense = vec![u32::MAX; n_comp];
    let mut next = 0u32;
    for c in 0..n_comp {
        if let Some(r) = region[c] {
            if r as usize == c {
                dense[c] = next;
                next += 1;
            }
        }
    }
    comp.iter()
        .map(|&c| {
            let r = region[c as usize].expect("grid is connected") as usize;
            dense[r]
        })
        .collect()
}
