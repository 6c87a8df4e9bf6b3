//! Node embedder (patch Transformer), graph encoder (GATv2 + Laplacian PE +
//! multiscale fusion) and the prediction-head ensemble.
//!
//! Parameters live in a flat [`ParamStore`]; [`Layout`] maps every block to
//! its parameter ids so a forward pass can run on any tape binding.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use voxgraph_autodiff::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

use crate::graph::SupervoxelGraph;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not match model: {0}")]
    Input(String),
    #[error("parameters do not match model layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: Profile,
    pub task: Task,
    pub n_modalities: usize,
    pub patch_size: usize,
    pub k_pe: usize,
    pub d_model: usize,
    pub n_transformer_layers: usize,
    pub n_attn_heads: usize,
    pub mlp_ratio: usize,
    pub n_gat_layers: usize,
    pub n_gat_heads: usize,
    pub n_pred_heads: usize,
    pub head_hidden_dim: usize,
    pub dropout: f64,
    pub lambda_div: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn toy(task: Task, n_modalities: usize, patch_size: usize, k_pe: usize) -> Self {
        Self {
            profile: Profile::Toy,
            task,
            n_modalities,
            patch_size,
            k_pe,
            d_model: 32,
            n_transformer_layers: 2,
            n_attn_heads: 2,
            mlp_ratio: 4,
            n_gat_layers: 2,
            n_gat_heads: 4,
            n_pred_heads: 4,
            head_hidden_dim: 32,
            dropout: 0.1,
            lambda_div: 0.01,
            ln_eps: 1e-5,
        }
    }

    pub fn paper(task: Task, n_modalities: usize, patch_size: usize, k_pe: usize) -> Self {
        Self {
            profile: Profile::Paper,
            d_model: 256,
            n_transformer_layers: 5,
            n_attn_heads: 8,
            n_gat_layers: 5,
            n_gat_heads: 4,
            n_pred_heads: 8,
            head_hidden_dim: 512,
            ..Self::toy(task, n_modalities, patch_size, k_pe)
        }
    }

    pub fn for_profile(profile: Profile, task: Task, n_modalities: usize, patch_size: usize, k_pe: usize) -> Self {
        match profile {
            Profile::Toy => Self::toy(task, n_modalities, patch_size, k_pe),
            Profile::Paper => Self::paper(task, n_modalities, patch_size, k_pe),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_modalities", self.n_modalities),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_transformer_layers", self.n_transformer_layers),
            ("n_attn_heads", self.n_attn_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("n_gat_layers", self.n_gat_layers),
            ("n_gat_heads", self.n_gat_heads),
            ("n_pred_heads", self.n_pred_heads),
            ("head_hidden_dim", self.head_hidden_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_attn_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_attn_heads {}",
                self.d_model, self.n_attn_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over (fan_in, fan_out).
    Glorot(usize, usize),
    Normal(f64),
}

#[derive(Default)]
struct Registry {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.specs.push((name, shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Glorot(fan_in, fan_out)),
            b: self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.g"), &[d], Init::Ones),
            b: self.add(format!("{prefix}.b"), &[d], Init::Zeros),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct GatLayer {
    left: Linear,
    right: ParamId,
    attn: ParamId,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_proj: Linear,
    modality: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    emb_out: Linear,
    pe_proj: Linear,
    gat: Vec<GatLayer>,
    fuse: Linear,
    mlp1: Linear,
    mlp2: Linear,
    heads: Linear,
    head_attn: Linear,
}

impl Layout {
    fn build(c: &ModelConfig) -> (Self, Registry) {
        let mut r = Registry::default();
        let d = c.d_model;
        let patch_proj = r.linear("embedder.patch_proj", c.patch_size + 3, d);
        let modality = r.add("embedder.modality".into(), &[c.n_modalities, d], Init::Normal(0.02));
        let cls = r.add("embedder.cls".into(), &[1, 1, d], Init::Normal(0.02));
        let blocks = (0..c.n_transformer_layers)
            .map(|l| {
                let p = format!("embedder.block{l}");
                Block {
                    ln1: r.norm(&format!("{p}.ln1"), d),
                    q: r.linear(&format!("{p}.q"), d, d),
                    k: r.linear(&format!("{p}.k"), d, d),
                    v: r.linear(&format!("{p}.v"), d, d),
                    o: r.linear(&format!("{p}.o"), d, d),
                    ln2: r.norm(&format!("{p}.ln2"), d),
                    fc1: r.linear(&format!("{p}.fc1"), d, c.mlp_ratio * d),
                    fc2: r.linear(&format!("{p}.fc2"), c.mlp_ratio * d, d),
                }
            })
            .collect();
        let ln_f = r.norm("embedder.ln_f", d);
        let emb_out = r.linear("embedder.out", (2 + c.n_modalities) * d, d);
        let pe_proj = r.linear("graph.pe_proj", c.k_pe.max(1), d);
        let hd = c.n_gat_heads * d;
        let gat = (0..c.n_gat_layers)
            .map(|l| {
                let p = format!("graph.gat{l}");
                GatLayer {
                    left: r.linear(&format!("{p}.left"), d, hd),
                    right: r.add(format!("{p}.right.w"), &[d, hd], Init::Glorot(d, hd)),
                    attn: r.add(format!("{p}.attn"), &[c.n_gat_heads, d], Init::Glorot(d, 1)),
                    norm: r.norm(&format!("{p}.norm"), d),
                }
            })
            .collect();
        let fuse = r.linear("graph.fuse", c.n_gat_layers * d, d);
        let h = c.head_hidden_dim;
        let mlp1 = r.linear("predictor.mlp1", d, h);
        let mlp2 = r.linear("predictor.mlp2", h, h);
        let heads = r.linear("predictor.heads", h, c.n_pred_heads);
        let head_attn = r.linear("predictor.head_attn", h, c.n_pred_heads);
        (
            Self {
                patch_proj,
                modality,
                cls,
                blocks,
                ln_f,
                emb_out,
                pe_proj,
                gat,
                fuse,
                mlp1,
                mlp2,
                heads,
                head_attn,
            },
            r,
        )
    }
}

/// Parameter counts of the three components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub embedder: usize,
    pub graph_encoder: usize,
    pub predictor: usize,
    pub total: usize,
}

/// Counted from the layout, without allocating any weights.
pub fn param_counts(config: &ModelConfig) -> ParamCounts {
    let (_, reg) = Layout::build(config);
    let mut c = ParamCounts::default();
    for (name, shape, _) in &reg.specs {
        let n: usize = shape.iter().product();
        match name.split('.').next() {
            Some("embedder") => c.embedder += n,
            Some("graph") => c.graph_encoder += n,
            _ => c.predictor += n,
        }
        c.total += n;
    }
    c
}

/// One graph, converted to model inputs.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub n_nodes: usize,
    /// `(nodes, n_patch · n_modalities, patch_size + 3)`.
    pub patches: Tensor,
    /// `(nodes, k_pe)`.
    pub pe: Tensor,
    /// Message edges `src → dst`, both directions of every undirected edge
    /// plus one self edge per node.
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub y_reg: Vec<f64>,
    pub y_cls: Vec<u8>,
}

impl GraphInput {
    pub fn from_graph(g: &SupervoxelGraph) -> Self {
        let n = g.n_nodes();
        let p0 = &g.nodes[0].patches;
        let (rows, cols) = (p0.rows(), p0.cols());
        let data = g
            .nodes
            .iter()
            .flat_map(|node| node.patches.values.iter().map(|&v| v as f64))
            .collect();
        let pe = g.lap_pe.iter().map(|&v| v as f64).collect();
        let edges: Vec<(usize, usize)> = g
            .adjacency
            .edges
            .iter()
            .map(|&(i, j)| (i as usize, j as usize))
            .collect();
        Self::new(
            Tensor::new(&[n, rows, cols], data).expect("patch tensor shape"),
            Tensor::new(&[n, g.k_pe()], pe).expect("positional encoding shape"),
            &edges,
            g.nodes.iter().map(|x| x.y_reg as f64).collect(),
            g.nodes.iter().map(|x| x.y_cls).collect(),
        )
    }

    pub fn new(patches: Tensor, pe: Tensor, edges: &[(usize, usize)], y_reg: Vec<f64>, y_cls: Vec<u8>) -> Self {
        let n = patches.shape()[0];
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(2 * edges.len() + n);
        for &(i, j) in edges {
            pairs.push((i, j));
            pairs.push((j, i));
        }
        pairs.extend((0..n).map(|i| (i, i)));
        // group by destination so each softmax segment is contiguous
        pairs.sort_by_key(|&(s, d)| (d, s));
        Self {
            n_nodes: n,
            patches,
            pe,
            src: pairs.iter().map(|p| p.0).collect(),
            dst: pairs.iter().map(|p| p.1).collect(),
            y_reg,
            y_cls,
        }
    }
}

/// Dropout source for training passes; `None` means evaluation mode.
pub struct DropoutRng<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

/// Attention weights recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionCapture {
    /// Per transformer layer: `(nodes · heads, tokens, tokens)`.
    pub patch: Vec<Tensor>,
    /// Per GAT layer: `(messages, heads)` aligned with `GraphInput::src/dst`.
    pub graph: Vec<Tensor>,
    /// `(nodes, n_pred_heads)` head-ensemble weights.
    pub heads: Option<Tensor>,
}

pub struct Output<'t> {
    /// Final logit per node, `(nodes,)`.
    pub logit: Var<'t>,
    /// `sigmoid(logit)`.
    pub prob: Var<'t>,
    /// `(nodes, n_pred_heads)`.
    pub head_logits: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn linear<'t>(x: Var<'t>, l: Linear, v: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(x.matmul(v[l.w])?.add(v[l.b])?)
}

fn norm<'t>(x: Var<'t>, n: Norm, v: &[Var<'t>], eps: f64) -> Result<Var<'t>> {
    Ok(x.layer_norm(eps)?.mul(v[n.g])?.add(v[n.b])?)
}

fn maybe_dropout<'t>(x: Var<'t>, drop: &mut Option<DropoutRng<'_>>) -> Result<Var<'t>> {
    match drop {
        Some(d) if d.p > 0.0 => {
            let n: usize = x.shape().iter().product();
            let keep: Vec<bool> = (0..n).map(|_| d.rng.random::<f64>() >= d.p).collect();
            Ok(x.dropout(&keep, d.p)?)
        }
        _ => Ok(x),
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = Layout::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in reg.specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Glorot(fan_in, fan_out) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
                    (0..n).map(|_| u.sample(&mut rng)).collect()
                }
                Init::Normal(std) => {
                    let g = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| g.sample(&mut rng)).collect()
                }
            };
            params.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { config, params, layout })
    }

    /// Wrap existing parameters, checking names and shapes against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = Layout::build(&config);
        if reg.specs.len() != params.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, found {}",
                reg.specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in reg.specs.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {name} {shape:?}, found {pname} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params, layout })
    }

    fn check_input(&self, input: &GraphInput) -> Result<()> {
        let c = &self.config;
        let s = input.patches.shape();
        if s.len() != 3 || !s[1].is_multiple_of(c.n_modalities) || s[2] != c.patch_size + 3 || s[0] != input.n_nodes {
            return Err(ModelError::Input(format!(
                "patches {s:?} for {} modalities, patch size {}",
                c.n_modalities, c.patch_size
            )));
        }
        if input.pe.shape() != [input.n_nodes, c.k_pe] && !(c.k_pe == 0 && input.pe.is_empty()) {
            return Err(ModelError::Input(format!(
                "positional encodings {:?}, expected k_pe {}",
                input.pe.shape(),
                c.k_pe
            )));
        }
        Ok(())
    }

    /// Patch Transformer: `(nodes, rows, s + 3)` → `(nodes, d_model)`.
    pub fn embed<'t>(
        &self,
        v: &[Var<'t>],
        patches: Var<'t>,
        drop: &mut Option<DropoutRng<'_>>,
        capture: Option<&mut AttentionCapture>,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let ly = &self.layout;
        let (d, m, h) = (c.d_model, c.n_modalities, c.n_attn_heads);
        let shape = patches.shape();
        let (n, rows) = (shape[0], shape[1]);
        let t = rows + 1;
        let dh = d / h;

        let modality_of_row: Arc<[usize]> = (0..rows).map(|r| r % m).collect();
        let tokens = linear(patches, ly.patch_proj, v)?.add(v[ly.modality].index_select(modality_of_row)?)?;
        let cls = v[ly.cls].broadcast_to(&[n, 1, d])?;
        let mut x = Var::concat(&[cls, tokens], 1)?;

        let split = |y: Var<'t>| -> Result<Var<'t>> {
            Ok(y.reshape(&[n, t, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * h, t, dh])?)
        };
        let mut capture = capture;
        for b in &ly.blocks {
            let y = norm(x, b.ln1, v, c.ln_eps)?;
            let q = split(linear(y, b.q, v)?)?;
            let k = split(linear(y, b.k, v)?)?.permute(&[0, 2, 1])?;
            let val = split(linear(y, b.v, v)?)?;
            let attn = q.matmul(k)?.scale(1.0 / (dh as f64).sqrt())?.softmax()?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.patch.push(attn.value());
            }
            let ctx = attn
                .matmul(val)?
                .reshape(&[n, h, t, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[n, t, d])?;
            x = x.add(maybe_dropout(linear(ctx, b.o, v)?, drop)?)?;
            let y = norm(x, b.ln2, v, c.ln_eps)?;
            let y = linear(linear(y, b.fc1, v)?.gelu()?, b.fc2, v)?;
            x = x.add(maybe_dropout(y, drop)?)?;
        }
        let x = norm(x, ly.ln_f, v, c.ln_eps)?;

        let cls_out = x.slice(1, 0, 1)?.reshape(&[n, d])?;
        let body = x.slice(1, 1, t)?;
        let patch_mean = body.mean_axis(1)?;
        let per_modality = body
            .reshape(&[n, rows / m, m, d])?
            .mean_axis(1)?
            .reshape(&[n, m * d])?;
        let descriptor = Var::concat(&[cls_out, patch_mean, per_modality], 1)?;
        linear(descriptor, ly.emb_out, v)
    }

    /// GATv2 stack over `emb (nodes, d)` with additive PE and concat fusion.
    pub fn graph_encode<'t>(
        &self,
        v: &[Var<'t>],
        emb: Var<'t>,
        pe: Var<'t>,
        src: &Arc<[usize]>,
        dst: &Arc<[usize]>,
        capture: Option<&mut AttentionCapture>,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let ly = &self.layout;
        let (d, heads) = (c.d_model, c.n_gat_heads);
        let n = emb.shape()[0];
        let e = src.len();
        let mut h = if c.k_pe > 0 {
            emb.add(linear(pe, ly.pe_proj, v)?)?
        } else {
            emb
        };
        let mut capture = capture;
        let mut outputs = Vec::with_capacity(ly.gat.len());
        for g in &ly.gat {
            let left = linear(h, g.left, v)?;
            let right = h.matmul(v[g.right])?;
            let msg = right.index_select(src.clone())?;
            let score = left
                .index_select(dst.clone())?
                .add(msg)?
                .leaky_relu(0.2)?
                .reshape(&[e, heads, d])?
                .mul(v[g.attn])?
                .sum_axis(2)?;
            let alpha = score.segment_softmax(dst.clone())?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.graph.push(alpha.value());
            }
            let agg = msg
                .reshape(&[e, heads, d])?
                .mul(alpha.reshape(&[e, heads, 1])?)?
                .segment_sum(dst.clone(), n)?
                .mean_axis(1)?;
            h = norm(h.add(agg.gelu()?)?, g.norm, v, c.ln_eps)?;
            outputs.push(h);
        }
        linear(Var::concat(&outputs, 1)?, ly.fuse, v)
    }

    /// Head ensemble over context embeddings `(nodes, d)`.
    pub fn predict<'t>(
        &self,
        v: &[Var<'t>],
        ctx: Var<'t>,
        capture: Option<&mut AttentionCapture>,
    ) -> Result<Output<'t>> {
        let ly = &self.layout;
        let n = ctx.shape()[0];
        let r = linear(linear(ctx, ly.mlp1, v)?.gelu()?, ly.mlp2, v)?.gelu()?;
        let head_logits = linear(r, ly.heads, v)?;
        let weights = linear(r, ly.head_attn, v)?.softmax()?;
        if let Some(cap) = capture {
            cap.heads = Some(weights.value());
        }
        let logit = head_logits.mul(weights)?.sum_axis(1)?;
        debug_assert_eq!(logit.shape(), vec![n]);
        let prob = logit.sigmoid()?;
        Ok(Output {
            logit,
            prob,
            head_logits,
        })
    }

    pub fn forward<'t>(
        &self,
        v: &[Var<'t>],
        input: &GraphInput,
        mut drop: Option<DropoutRng<'_>>,
        mut capture: Option<&mut AttentionCapture>,
    ) -> Result<Output<'t>> {
        self.check_input(input)?;
        let tape = v[0].tape();
        let patches = tape.constant(input.patches.clone());
        let pe = tape.constant(input.pe.clone());
        let emb = self.embed(v, patches, &mut drop, capture.as_deref_mut())?;
        let ctx = self.graph_encode(v, emb, pe, &input.src, &input.dst, capture.as_deref_mut())?;
        self.predict(v, ctx, capture)
    }

    /// Task loss plus `lambda_div` times the head-decorrelation penalty.
    pub fn loss<'t>(&self, out: &Output<'t>, input: &GraphInput) -> Result<Var<'t>> {
        let tape = out.logit.tape();
        let n = input.n_nodes;
        let task = match self.config.task {
            Task::Regression => {
                let y = tape.constant(Tensor::new(&[n], input.y_reg.clone())?);
                out.prob.sub(y)?.square()?.mean()?
            }
            Task::Classification => {
                let y = tape.constant(Tensor::new(&[n], input.y_cls.iter().map(|&c| c as f64).collect())?);
                bce_with_logits(out.logit, y)?
            }
        };
        if self.config.lambda_div == 0.0 {
            return Ok(task);
        }
        let div = diversity_penalty(out.head_logits)?;
        Ok(task.add(div.scale(self.config.lambda_div)?)?)
    }

    pub fn forward_values(&self, input: &GraphInput, capture: Option<&mut AttentionCapture>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let v: Vec<Var<'_>> = self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let out = self.forward(&v, input, None, capture)?;
        Ok(out.prob.value().into_data())
    }
}

/// Mean of `softplus(z) − y·z`.
pub fn bce_with_logits<'t>(logit: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    Ok(logit.softplus()?.sub(logit.mul(y)?)?.mean()?)
}

/// Mean squared Pearson correlation between the columns of `(nodes, heads)`
/// over all head pairs; zero with a single node or a single head.
pub fn diversity_penalty<'t>(head_logits: Var<'t>) -> Result<Var<'t>> {
    let shape = head_logits.shape();
    let (n, p) = (shape[0], shape[1]);
    let tape = head_logits.tape();
    if n < 2 || p < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let centered = head_logits.sub(head_logits.mean_axis(0)?)?;
    let norms = centered.square()?.sum_axis(0)?.add_scalar(1e-12)?.powf(-0.5)?;
    let unit = centered.mul(norms)?;
    let corr = unit.transpose()?.matmul(unit)?;
    let diag = unit.square()?.sum_axis(0)?.square()?.sum()?;
    Ok(corr.square()?.sum()?.sub(diag)?.scale(1.0 / (p * (p - 1)) as f64)?)
}
