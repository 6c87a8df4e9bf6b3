//! Node centroids, mutual kNN adjacency, Laplacian positional encodings and
//! the `.svg2` graph container.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patch::PatchTensor;
use crate::volume::Dims;

pub const FORMAT_TAG: &str = "SVG2";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("empty graph")]
    Empty,
    #[error("version mismatch: expected {FORMAT_TAG} v{FORMAT_VERSION}, found {0}")]
    Version(String),
    #[error("payload size mismatch: {0}")]
    PayloadSize(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnRule {
    /// Edge iff each endpoint is among the other's nearest neighbours.
    #[default]
    Mutual,
    /// Edge iff either endpoint lists the other.
    Union,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub n_nodes: usize,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(u32, u32)>,
    /// Nodes left without neighbours; they attend to themselves only.
    pub self_loop: Vec<bool>,
    /// Neighbour count actually used after clamping.
    pub k_used: usize,
}

impl Adjacency {
    pub fn from_edges(n_nodes: usize, mut edges: Vec<(u32, u32)>) -> Result<Self, GraphError> {
        for e in &mut edges {
            if e.0 == e.1 || e.0 as usize >= n_nodes || e.1 as usize >= n_nodes {
                return Err(GraphError::Invalid(format!("bad edge {e:?}")));
            }
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut self_loop = vec![true; n_nodes];
        for &(i, j) in &edges {
            self_loop[i as usize] = false;
            self_loop[j as usize] = false;
        }
        Ok(Self {
            n_nodes,
            edges,
            self_loop,
            k_used: 0,
        })
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &(i, j) in &self.edges {
            d[i as usize] += 1;
            d[j as usize] += 1;
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut nb = vec![Vec::new(); self.n_nodes];
        for &(i, j) in &self.edges {
            nb[i as usize].push(j);
            nb[j as usize].push(i);
        }
        for l in &mut nb {
            l.sort_unstable();
        }
        nb
    }
}

/// Mean of each node's patch centroids.
pub fn node_centroids(patches: &[PatchTensor]) -> Vec<[f64; 3]> {
    patches
        .iter()
        .map(|p| {
            let n = p.centroids_world.len().max(1) as f64;
            let mut acc = [0.0f64; 3];
            for c in &p.centroids_world {
                for a in 0..3 {
                    acc[a] += c[a] as f64;
                }
            }
            acc.map(|v| v / n)
        })
        .collect()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// The `k` nearest other nodes of every node, ordered by (distance, id).
pub fn knn_lists(centroids: &[[f64; 3]], k: usize) -> Vec<Vec<u32>> {
    let n = centroids.len();
    let by_key = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    (0..n)
        .map(|i| {
            let mut cand: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(centroids[i], centroids[j]), j as u32))
                .collect();
            if k < cand.len() {
                cand.select_nth_unstable_by(k, by_key);
                cand.truncate(k);
            }
            cand.sort_by(by_key);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

pub fn mutual_knn(centroids: &[[f64; 3]], k_nn: usize, rule: KnnRule) -> Result<Adjacency, GraphError> {
    let n = centroids.len();
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    if k_nn == 0 {
        return Err(GraphError::Invalid("k_nn must be at least 1".into()));
    }
    let k = if k_nn >= n {
        log::warn!("k_nn={k_nn} >= node count {n}; clamping to {}", n - 1);
        n - 1
    } else {
        k_nn
    };
    let lists = knn_lists(centroids, k);
    let mut sorted = lists.clone();
    for l in &mut sorted {
        l.sort_unstable();
    }
    let mut edges = Vec::new();
    for (i, li) in lists.iter().enumerate() {
        for &j in li {
            let back = sorted[j as usize].binary_search(&(i as u32)).is_ok();
            let keep = match rule {
                KnnRule::Mutual => back && (i as u32) < j,
                KnnRule::Union => !back || (i as u32) < j,
            };
            if keep {
                edges.push((i.min(j as usize) as u32, i.max(j as usize) as u32));
            }
        }
    }
    let mut adj = Adjacency::from_edges(n, edges)?;
    adj.k_used = k;
    Ok(adj)
}

/// Number of connected components (isolated nodes count as their own).
pub fn connected_components(adj: &Adjacency) -> usize {
    let mut parent: Vec<usize> = (0..adj.n_nodes).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut count = adj.n_nodes;
    for &(i, j) in &adj.edges {
        let (a, b) = (find(&mut parent, i as usize), find(&mut parent, j as usize));
        if a != b {
            parent[a.max(b)] = a.min(b);
            count -= 1;
        }
    }
    count
}

/// `I − D^{-1/2} A D^{-1/2}`, with isolated nodes given a unit self-loop.
pub fn normalized_laplacian(adj: &Adjacency) -> DMatrix<f64> {
    let n = adj.n_nodes;
    let deg = adj.degrees();
    let mut l = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        if deg[i] == 0 {
            l[(i, i)] = 0.0;
        }
    }
    for &(i, j) in &adj.edges {
        let (i, j) = (i as usize, j as usize);
        let w = 1.0 / ((deg[i] * deg[j]) as f64).sqrt();
        l[(i, j)] = -w;
        l[(j, i)] = -w;
    }
    l
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPe {
    pub n_nodes: usize,
    pub k_pe: usize,
    /// Row-major `(n_nodes, k_pe)`; column `c` is one eigenvector.
    pub values: Vec<f64>,
    /// Eigenvalue of each column, `None` for zero padding.
    pub eigenvalues: Vec<Option<f64>>,
}

impl LaplacianPe {
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_nodes).map(|i| self.values[i * self.k_pe + c]).collect()
    }
}

fn sign_fix(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(&lead) = v.iter().find(|x| x.abs() >= max - 1e-12) {
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Low-frequency eigenvectors of the normalized Laplacian, skipping one
/// null vector per connected component. Missing columns are zero.
pub fn laplacian_pe(adj: &Adjacency, k_pe: usize) -> LaplacianPe {
    let n = adj.n_nodes;
    let mut values = vec![0.0; n * k_pe];
    let mut eigenvalues = vec![None; k_pe];
    if n == 0 || k_pe == 0 {
        return LaplacianPe {
            n_nodes: n,
            k_pe,
            values,
            eigenvalues,
        };
    }
    let skip = connected_components(adj);
    let eig = SymmetricEigen::new(normalized_laplacian(adj));
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            sign_fix(&mut v);
            (eig.eigenvalues[c], v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // within numerically repeated eigenvalues, order vectors lexicographically
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && pairs[end].0 - pairs[end - 1].0 < 1e-9 {
            end += 1;
        }
        pairs[start..end].sort_by(|a, b| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        start = end;
    }
    for (c, (lambda, v)) in pairs.into_iter().skip(skip).take(k_pe).enumerate() {
        eigenvalues[c] = Some(lambda);
        for i in 0..n {
            values[i * k_pe + c] = v[i];
        }
    }
    LaplacianPe {
        n_nodes: n,
        k_pe,
        values,
        eigenvalues,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    /// Supervoxel id in the source partition.
    pub id: u32,
    pub patches: PatchTensor,
    pub centroid_world: [f32; 3],
    pub y_reg: f32,
    pub y_cls: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub n_sv_requested: usize,
    pub k_nn: usize,
    pub rule: KnnRule,
    pub k_pe: usize,
    pub tau_cls: f64,
    pub modalities: Vec<String>,
    pub source: String,
}

/// Supervoxel label grid of the source volume, kept for voxel-level Dice.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub dims: Dims,
    pub labels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelGraph {
    pub nodes: Vec<GraphNode>,
    pub adjacency: Adjacency,
    /// Row-major `(nodes, k_pe)`.
    pub lap_pe: Vec<f32>,
    pub meta: GraphMeta,
    pub label_grid: Option<LabelGrid>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    nodes: usize,
    n_patch: usize,
    patch_size: usize,
    n_modalities: usize,
    edges: usize,
    label_dims: Option<Dims>,
    meta: GraphMeta,
}

fn put_f32(w: &mut Vec<u8>, xs: impl IntoIterator<Item = f32>) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_u32(w: &mut Vec<u8>, xs: impl IntoIterator<Item = u32>) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], GraphError> {
        if self.buf.len() < n {
            return Err(GraphError::PayloadSize(format!(
                "{what}: need {n} bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, GraphError> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>, GraphError> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl SupervoxelGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn k_pe(&self) -> usize {
        self.meta.k_pe
    }

    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.nodes.iter().map(|n| n.centroid_world.map(|c| c as f64)).collect()
    }

    fn validate(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let p0 = &self.nodes[0].patches;
        for node in &self.nodes {
            let p = &node.patches;
            if (p.n_patch, p.patch_size, p.n_modalities) != (p0.n_patch, p0.patch_size, p0.n_modalities)
                || p.values.len() != p.rows() * p.cols()
                || p.centroids_world.len() != p.n_patch
            {
                return Err(GraphError::Invalid(format!("node {} has a mismatched patch tensor", node.id)));
            }
        }
        if self.adjacency.n_nodes != n || self.adjacency.self_loop.len() != n {
            return Err(GraphError::Invalid("adjacency size differs from node count".into()));
        }
        if let Some(&(i, j)) = self.adjacency.edges.iter().find(|&&(i, j)| i >= j || j as usize >= n) {
            return Err(GraphError::Invalid(format!("edge ({i}, {j}) is not an ordered pair of node indices")));
        }
        if self.lap_pe.len() != n * self.meta.k_pe {
            return Err(GraphError::Invalid("positional encoding size mismatch".into()));
        }
        if let Some(g) = &self.label_grid {
            if g.labels.len() != g.dims.iter().product::<usize>() {
                return Err(GraphError::Invalid("label grid size mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), GraphError> {
        self.validate()?;
        let p0 = &self.nodes[0].patches;
        let header = Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            nodes: self.nodes.len(),
            n_patch: p0.n_patch,
            patch_size: p0.patch_size,
            n_modalities: p0.n_modalities,
            edges: self.adjacency.edges.len(),
            label_dims: self.label_grid.as_ref().map(|g| g.dims),
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;

        let mut buf = Vec::new();
        put_u32(&mut buf, self.nodes.iter().map(|n| n.id));
        put_f32(&mut buf, self.nodes.iter().flat_map(|n| n.centroid_world));
        for n in &self.nodes {
            put_f32(&mut buf, n.patches.values.iter().copied());
        }
        for n in &self.nodes {
            put_f32(&mut buf, n.patches.centroids_world.iter().flatten().copied());
        }
        put_f32(&mut buf, self.nodes.iter().map(|n| n.y_reg));
        put_f32(&mut buf, self.nodes.iter().map(|n| n.y_cls as f32));
        put_f32(&mut buf, self.lap_pe.iter().copied());
        buf.extend(self.adjacency.self_loop.iter().map(|&b| b as u8));
        put_u32(&mut buf, self.adjacency.edges.iter().flat_map(|&(i, j)| [i, j]));
        if let Some(g) = &self.label_grid {
            put_u32(&mut buf, g.labels.iter().copied());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, GraphError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(GraphError::Version(format!("{} v{}", header.format, header.version)));
        }
        let n = header.nodes;
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut cur = Cursor { buf: &rest };

        let (np, s, nm, k_pe) = (header.n_patch, header.patch_size, header.n_modalities, header.meta.k_pe);
        let ids = cur.u32s(n, "ids")?;
        let centroids = cur.f32s(3 * n, "node centroids")?;
        let per_node = np * nm * (s + 3);
        let patch_values = cur.f32s(n * per_node, "patches")?;
        let patch_centroids = cur.f32s(n * np * 3, "patch centroids")?;
        let y_reg = cur.f32s(n, "y_reg")?;
        let y_cls = cur.f32s(n, "y_cls")?;
        let lap_pe = cur.f32s(n * k_pe, "positional encodings")?;
        let self_loop: Vec<bool> = cur.take(n, "self-loop markers")?.iter().map(|&b| b != 0).collect();
        let flat_edges = cur.u32s(2 * header.edges, "edge list")?;
        let label_grid = match header.label_dims {
            Some(dims) => Some(LabelGrid {
                dims,
                labels: cur.u32s(dims.iter().product(), "label grid")?,
            }),
            None => None,
        };
        if !cur.buf.is_empty() {
            return Err(GraphError::PayloadSize(format!("{} trailing bytes", cur.buf.len())));
        }

        let nodes = (0..n)
            .map(|i| GraphNode {
                id: ids[i],
                patches: PatchTensor {
                    values: patch_values[i * per_node..(i + 1) * per_node].to_vec(),
                    n_patch: np,
                    patch_size: s,
                    n_modalities: nm,
                    centroids_world: (0..np)
                        .map(|p| {
                            let o = (i * np + p) * 3;
                            [patch_centroids[o], patch_centroids[o + 1], patch_centroids[o + 2]]
                        })
                        .collect(),
                },
                centroid_world: [centroids[3 * i], centroids[3 * i + 1], centroids[3 * i + 2]],
                y_reg: y_reg[i],
                y_cls: y_cls[i] as u8,
            })
            .collect();
        let edges = flat_edges.chunks_exact(2).map(|e| (e[0], e[1])).collect();
        let adjacency = Adjacency {
            n_nodes: n,
            edges,
            self_loop,
            k_used: header.meta.k_nn.min(n - 1),
        };
        let g = Self {
            nodes,
            adjacency,
            lap_pe,
            meta: header.meta,
            label_grid,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
