use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use voxgraph::encoder::{param_counts, AttentionCapture, GraphInput};
use voxgraph::trainer::{load_model, save_model, DiceInput, EpochRecord, TrainObserver};
use voxgraph::{
    evaluate, generate_phantom, preprocess_volume, train as run_training, Model, ModelConfig, MultiModalVolume,
    PhantomSpec, PreprocessParams, SupervoxelGraph, TrainConfig,
};

use crate::config::overlay;
use crate::{AttentionArgs, EvalArgs, ParamsArgs, PhantomArgs, PreprocessArgs, TrainArgs};

const VOLUME_EXT: &str = "mmv";
const GRAPH_EXT: &str = "svg2";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    train: Vec<String>,
    #[serde(default)]
    test: Vec<String>,
}

fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing split manifest {}", path.display()))
}

/// Files with extension `ext` under each input (files taken as given),
/// sorted by path.
fn collect_files(inputs: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for entry in std::fs::read_dir(input).with_context(|| format!("listing {}", input.display()))? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == ext) {
                    out.push(p);
                }
            }
        } else if input.is_file() {
            out.push(input.clone());
        } else {
            bail!("no such file or directory: {}", input.display());
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

struct NamedGraph {
    name: String,
    graph: SupervoxelGraph,
}

fn load_graph(path: &Path) -> Result<NamedGraph> {
    let graph = SupervoxelGraph::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(NamedGraph { name: stem(path), graph })
}

fn graph_path(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(name);
    if p.extension().is_some_and(|e| e == GRAPH_EXT) {
        p
    } else {
        dir.join(format!("{name}.{GRAPH_EXT}"))
    }
}

fn load_named(dir: &Path, names: &[String]) -> Result<Vec<NamedGraph>> {
    names.iter().map(|n| load_graph(&graph_path(dir, n))).collect()
}

fn load_dir(dir: &Path) -> Result<Vec<NamedGraph>> {
    let files = collect_files(&[dir.to_path_buf()], GRAPH_EXT)?;
    ensure!(!files.is_empty(), "no .{GRAPH_EXT} graphs in {}", dir.display());
    files.iter().map(|p| load_graph(p)).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let width = a.n.saturating_sub(1).to_string().len().max(3);
    (0..a.n).into_par_iter().try_for_each(|i| -> Result<()> {
        let spec = PhantomSpec {
            dims: a.dims,
            n_lesions: a.lesions,
            noise_sigma: a.noise,
            seed: a.seed + i as u64,
            ..PhantomSpec::default()
        };
        let vol = generate_phantom(&spec)?;
        let path = a.out_dir.join(format!("phantom_{i:0width$}.{VOLUME_EXT}"));
        vol.save(&path).with_context(|| format!("writing {}", path.display()))
    })?;
    println!("wrote {} phantoms to {}", a.n, a.out_dir.display());
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let mut params = PreprocessParams {
        k_nn: a.k_nn,
        rule: a.rule.into(),
        k_pe: a.k_pe,
        tau_cls: a.tau_cls,
        seed: a.seed,
        ..PreprocessParams::default()
    };
    params.slic.n_sv = a.n_sv;
    params.slic.compactness = a.compactness;
    params.slic.reference_modality = a.reference_modality.clone();
    params.patch.n_patch = a.n_patch;
    params.patch.patch_size = a.patch_size;
    let params = overlay(params, a.config.as_deref())?;

    let files = collect_files(&a.inputs, VOLUME_EXT)?;
    ensure!(!files.is_empty(), "no .{VOLUME_EXT} volumes in the given inputs");
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let summaries = files
        .par_iter()
        .map(|path| -> Result<String> {
            let name = stem(path);
            let vol = MultiModalVolume::load(path).with_context(|| format!("loading {}", path.display()))?;
            let out = preprocess_volume(&vol, &params, &name).with_context(|| format!("preprocessing {name}"))?;
            let dest = a.out_dir.join(format!("{name}.{GRAPH_EXT}"));
            out.graph.save(&dest).with_context(|| format!("writing {}", dest.display()))?;
            let g = &out.graph;
            Ok(format!(
                "{name}: {} of {} supervoxels kept, {} edges, {} positive",
                g.n_nodes(),
                out.partition.n_sv(),
                g.adjacency.edges.len(),
                g.nodes.iter().filter(|n| n.y_cls == 1).count()
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for s in summaries {
        println!("{s}");
    }
    Ok(())
}

/// Writes one JSON line per epoch.
struct JsonlLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl TrainObserver for JsonlLog {
    fn on_epoch(&mut self, record: &EpochRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("epoch records serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error = Some(e);
        }
        log::info!("epoch {} loss {:.6} lr {:.3e}", record.epoch, record.train_loss, record.lr);
    }
}

fn inputs_of(graphs: &[NamedGraph]) -> Vec<GraphInput> {
    graphs.iter().map(|g| GraphInput::from_graph(&g.graph)).collect()
}

fn model_config_for(graph: &SupervoxelGraph, cfg: &TrainConfig, file: Option<&Path>) -> Result<ModelConfig> {
    let p = &graph.nodes[0].patches;
    let base = ModelConfig::for_profile(cfg.profile, cfg.task, p.n_modalities, p.patch_size, graph.k_pe());
    let mc: ModelConfig = overlay(base, file)?;
    mc.validate()?;
    Ok(mc)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (train_set, test_set) = match &a.split_manifest {
        Some(m) => {
            let m = read_manifest(m)?;
            (load_named(&a.graphs, &m.train)?, load_named(&a.graphs, &m.test)?)
        }
        None => (load_dir(&a.graphs)?, Vec::new()),
    };
    ensure!(!train_set.is_empty(), "the training split is empty");

    let task = a.task.into();
    let mut cfg = match a.profile {
        crate::ProfileArg::Toy => TrainConfig::phantom(task),
        crate::ProfileArg::Paper => TrainConfig { task, ..TrainConfig::default() },
    };
    cfg.profile = a.profile.into();
    cfg.seed = a.seed;
    cfg.eval_every = a.eval_every;
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.accum_steps {
        cfg.accum_steps = s;
    }
    let cfg = overlay(cfg, a.config.as_deref())?;
    let mc = model_config_for(&train_set[0].graph, &cfg, a.model_config.as_deref())?;
    let model = Model::new(mc, cfg.seed)?;

    let train_inputs = inputs_of(&train_set);
    let test_inputs = inputs_of(&test_set);
    let val = (!test_inputs.is_empty()).then_some(&test_inputs[..]);
    let mut log = JsonlLog {
        out: BufWriter::new(File::create(&a.log).with_context(|| format!("creating {}", a.log.display()))?),
        error: None,
    };
    let outcome = run_training(model, &train_inputs, val, &cfg, &mut log)?;
    if let Some(e) = log.error {
        return Err(e).with_context(|| format!("writing {}", a.log.display()));
    }
    save_model(&outcome.model, Some(&cfg), &a.out)?;
    let last = outcome.log.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({} optimizer steps) on {} graphs, final loss {last:.6}; checkpoint {}",
        outcome.log.len(),
        outcome.optimizer_steps,
        train_inputs.len(),
        a.out.display()
    );
    Ok(())
}

/// Owned voxel data behind one `DiceInput`.
struct DiceData {
    node_ids: Vec<u32>,
    labels: Vec<u32>,
    mask: Vec<u8>,
}

fn dice_data(g: &NamedGraph, volumes: &Path) -> Result<DiceData> {
    let grid = g
        .graph
        .label_grid
        .as_ref()
        .with_context(|| format!("graph {} has no label grid; preprocess with labels kept", g.name))?;
    let path = volumes.join(format!("{}.{VOLUME_EXT}", g.graph.meta.source));
    let vol = MultiModalVolume::load(&path).with_context(|| format!("loading source volume {}", path.display()))?;
    let mask = vol.mask().with_context(|| format!("{} has no tumour mask", path.display()))?;
    ensure!(vol.dims() == grid.dims, "{} does not match the label grid of {}", path.display(), g.name);
    Ok(DiceData {
        node_ids: g.graph.nodes.iter().map(|n| n.id).collect(),
        labels: grid.labels.clone(),
        mask: mask.to_vec(),
    })
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    graph: &'a str,
    id: u32,
    pred: f64,
    y_reg: f64,
    y_cls: u8,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let graphs = match &a.split_manifest {
        Some(m) => load_named(&a.graphs, &read_manifest(m)?.test)?,
        None => load_dir(&a.graphs)?,
    };
    ensure!(!graphs.is_empty(), "the evaluation split is empty");
    let inputs = inputs_of(&graphs);
    let dice_owned = if a.with_dice {
        graphs.iter().map(|g| dice_data(g, &a.volumes)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let dice_inputs: Vec<DiceInput<'_>> = dice_owned
        .iter()
        .map(|d| DiceInput { node_ids: &d.node_ids, labels: &d.labels, mask: &d.mask })
        .collect();
    let dice = a.with_dice.then_some((&dice_inputs[..], a.tau_dice));
    let evaluation = evaluate(&model, &inputs, dice)?;

    if let Some(path) = &a.predictions {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for ((g, input), preds) in graphs.iter().zip(&inputs).zip(&evaluation.predictions) {
            for (i, node) in g.graph.nodes.iter().enumerate() {
                let row = PredictionRow {
                    graph: &g.name,
                    id: node.id,
                    pred: preds[i],
                    y_reg: input.y_reg[i],
                    y_cls: input.y_cls[i],
                };
                writeln!(w, "{}", serde_json::to_string(&row)?)?;
            }
        }
        w.flush()?;
    }
    match &a.report {
        Some(path) => write_json(path, &evaluation.report)?,
        None => println!("{}", serde_json::to_string_pretty(&evaluation.report)?),
    }
    Ok(())
}

pub fn params_report(a: &ParamsArgs) -> Result<()> {
    let base = ModelConfig::for_profile(a.profile.into(), a.task.into(), a.n_modalities, a.patch_size, a.k_pe);
    let cfg: ModelConfig = overlay(base, a.model_config.as_deref())?;
    cfg.validate()?;
    let counts = param_counts(&cfg);
    println!("{}", serde_json::to_string_pretty(&json!({ "config": cfg, "counts": counts }))?);
    Ok(())
}

fn tensor_json(t: &voxgraph_autodiff::Tensor) -> serde_json::Value {
    json!({ "shape": t.shape(), "data": t.data() })
}

pub fn export_attention(a: &AttentionArgs) -> Result<()> {
    let model = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let g = load_graph(&a.graph)?;
    let input = GraphInput::from_graph(&g.graph);
    let mut capture = AttentionCapture::default();
    let preds = model.forward_values(&input, Some(&mut capture))?;
    let doc = json!({
        "graph": g.name,
        "node_ids": g.graph.nodes.iter().map(|n| n.id).collect::<Vec<_>>(),
        "predictions": preds,
        "patch_attention": {
            "layout": "per transformer layer: (nodes * heads, tokens, tokens); token 0 is CLS",
            "layers": capture.patch.iter().map(tensor_json).collect::<Vec<_>>(),
        },
        "graph_attention": {
            "layout": "per GAT layer: (messages, heads); message m goes src[m] -> dst[m]",
            "src": &input.src[..],
            "dst": &input.dst[..],
            "layers": capture.graph.iter().map(tensor_json).collect::<Vec<_>>(),
        },
        "head_weights": capture.heads.as_ref().map(tensor_json),
    });
    write_json(&a.out, &doc)?;
    println!("wrote attention for {} nodes to {}", g.graph.n_nodes(), a.out.display());
    Ok(())
}
