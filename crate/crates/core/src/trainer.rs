//! Training with gradient accumulation, evaluation, and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use voxgraph_autodiff::{cosine_restart_lr, AdamW, Checkpoint, ParamStore, RestartMode, Tape, Tensor, TensorError};

use crate::encoder::{DropoutRng, GraphInput, Model, ModelConfig, ModelError, Profile, Task};
use crate::metrics::{self, MetricError, MetricReport};
use crate::patch::supervoxel_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("evaluation split is empty")]
    EmptyEvalSplit,
    #[error("non-finite loss on sample {sample} in epoch {epoch}")]
    NonFiniteLoss { sample: usize, epoch: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestartKind {
    #[default]
    Amplitude,
    Period,
}

impl From<RestartKind> for RestartMode {
    fn from(k: RestartKind) -> Self {
        match k {
            RestartKind::Amplitude => RestartMode::Amplitude,
            RestartKind::Period => RestartMode::Period,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub t0: usize,
    pub gamma: f64,
    pub restart: RestartKind,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub task: Task,
    pub profile: Profile,
    /// Evaluate the validation split every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-5,
            weight_decay: 0.01,
            t0: 100,
            gamma: 0.5,
            restart: RestartKind::Amplitude,
            batch_size: 2,
            accum_steps: 8,
            max_epochs: 300,
            seed: 42,
            task: Task::Regression,
            profile: Profile::Toy,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the small phantom runs: the toy model learns within a
    /// few hundred epochs on CPU at a larger step size and with one update
    /// per batch.
    pub fn phantom(task: Task) -> Self {
        Self {
            base_lr: 1e-3,
            accum_steps: 1,
            task,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(TrainError::Config("batch_size and accum_steps must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("lr and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub optimizer_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricReport>,
}

/// Callbacks fired during training.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_step(&mut self, _step: u64, _params: &ParamStore) {}
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub optimizer_steps: u64,
}

/// Seed of the dropout stream for one sample in one epoch.
pub fn sample_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    supervoxel_seed(supervoxel_seed(seed, epoch as u32), sample as u32)
}

/// Loss and gradients of one graph, in parameter order.
pub fn graph_gradients(
    model: &Model,
    input: &GraphInput,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let drop = dropout.map(|rng| DropoutRng {
        rng,
        p: model.config.dropout,
    });
    let out = model.forward(&vars, input, drop, None)?;
    let loss = model.loss(&out, input)?;
    let value = loss.item();
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(model.params.iter())
        .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, g))
}

/// Graphs are visited in a per-epoch shuffled order; losses are averaged
/// over nodes within a graph, then over graphs. Gradients are summed in
/// visiting order and averaged over the graphs of each accumulation window.
/// The window carries over epoch boundaries.
pub fn train(
    mut model: Model,
    data: &[GraphInput],
    val: Option<&[GraphInput]>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut opt = AdamW::new(&model.params, cfg.base_lr, cfg.weight_decay);
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let zeros = || -> Vec<Tensor> { shapes.iter().map(|s| Tensor::zeros(s)).collect() };
    let mut acc = zeros();
    let mut graphs_in_window = 0usize;
    let mut batches_in_window = 0usize;
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.max_epochs {
        opt.lr = cosine_restart_lr(epoch, cfg.base_lr, cfg.t0, cfg.gamma, cfg.restart.into());
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, usize::MAX >> 32)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, i));
                let (loss, grads) = match graph_gradients(&model, &data[i], Some(&mut rng)) {
                    Ok(r) => r,
                    Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })))
                    | Err(TrainError::Tensor(TensorError::NonFinite { .. })) => {
                        return Err(TrainError::NonFiniteLoss { sample: i, epoch });
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { sample: i, epoch });
                }
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                graphs_in_window += 1;
            }
            batches_in_window += 1;
            if batches_in_window == cfg.accum_steps {
                let scale = 1.0 / graphs_in_window as f64;
                for a in &mut acc {
                    a.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
                opt.step(&mut model.params, &acc);
                observer.on_step(opt.step_count(), &model.params);
                acc = zeros();
                graphs_in_window = 0;
                batches_in_window = 0;
            }
        }
        let val_report = match val {
            Some(v) if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 => Some(evaluate(&model, v, None)?.report),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / data.len() as f64,
            optimizer_steps: opt.step_count(),
            val: val_report,
        };
        log::info!("epoch {epoch} lr {:.3e} loss {:.6}", record.lr, record.train_loss);
        observer.on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        optimizer_steps: opt.step_count(),
        model,
        log,
    })
}

/// Voxel-level data needed for Dice on one graph.
#[derive(Clone, Copy, Debug)]
pub struct DiceInput<'a> {
    pub node_ids: &'a [u32],
    pub labels: &'a [u32],
    pub mask: &'a [u8],
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Per graph, per node probability.
    pub predictions: Vec<Vec<f64>>,
}

/// Eval-mode predictions for every graph.
pub fn predict(model: &Model, data: &[GraphInput]) -> Result<Vec<Vec<f64>>, TrainError> {
    data.iter()
        .map(|g| model.forward_values(g, None).map_err(TrainError::from))
        .collect()
}

/// Pooled metrics from predictions. F1 thresholds the probability at 0.5;
/// regression metrics compare it with the tumour fraction.
pub fn report_from_predictions(
    predictions: &[Vec<f64>],
    data: &[GraphInput],
    dice: Option<(&[DiceInput<'_>], f64)>,
) -> Result<MetricReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyEvalSplit);
    }
    let pred: Vec<f64> = predictions.iter().flatten().copied().collect();
    let y_reg: Vec<f64> = data.iter().flat_map(|g| g.y_reg.iter().copied()).collect();
    let y_cls: Vec<u8> = data.iter().flat_map(|g| g.y_cls.iter().copied()).collect();
    let binary: Vec<u8> = pred.iter().map(|&p| u8::from(p > 0.5)).collect();
    let mut per_mae = 0.0;
    let mut per_f1 = 0.0;
    for (p, g) in predictions.iter().zip(data) {
        per_mae += metrics::mae(p, &g.y_reg)?;
        let b: Vec<u8> = p.iter().map(|&x| u8::from(x > 0.5)).collect();
        per_f1 += metrics::f1(&b, &g.y_cls)?;
    }
    let (dice_mean, dice_std) = match dice {
        Some((inputs, tau)) => {
            let scores = inputs
                .iter()
                .zip(predictions)
                .map(|(d, p)| metrics::dice_from_regression(d.node_ids, p, d.labels, d.mask, tau))
                .collect::<Result<Vec<_>, _>>()?;
            let n = scores.len().max(1) as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        }
        None => (None, None),
    };
    Ok(MetricReport {
        n_graphs: data.len(),
        n_nodes: pred.len(),
        mae: metrics::mae(&pred, &y_reg)?,
        r2: metrics::r2(&pred, &y_reg)?,
        f1: metrics::f1(&binary, &y_cls)?,
        roc_auc: metrics::roc_auc(&pred, &y_cls)?,
        per_graph_mae: per_mae / data.len() as f64,
        per_graph_f1: per_f1 / data.len() as f64,
        dice_mean,
        dice_std,
    })
}

pub fn evaluate(
    model: &Model,
    data: &[GraphInput],
    dice: Option<(&[DiceInput<'_>], f64)>,
) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyEvalSplit);
    }
    let predictions = predict(model, data)?;
    let report = report_from_predictions(&predictions, data, dice)?;
    Ok(Evaluation { report, predictions })
}

pub fn save_model(model: &Model, train: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut ck = Checkpoint::new(model.params.clone());
    let json = |e: serde_json::Error| TrainError::Checkpoint(e.to_string());
    ck.meta.push(("model_config".into(), serde_json::to_string(&model.config).map_err(json)?));
    if let Some(t) = train {
        ck.meta.push(("train_config".into(), serde_json::to_string(t).map_err(json)?));
    }
    ck.save(path)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, TrainError> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck
        .meta("model_config")
        .ok_or_else(|| TrainError::Checkpoint("missing model_config".into()))?;
    let cfg: ModelConfig = serde_json::from_str(cfg).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    Ok(Model::from_params(cfg, ck.params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.accum_steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_splits_rejected() {
        let m = Model::new(ModelConfig::toy(Task::Regression, 1, 1, 1), 0).unwrap();
        assert!(matches!(
            train(m.clone(), &[], None, &TrainConfig::default(), &mut ()),
            Err(TrainError::EmptyTrainSplit)
        ));
        assert!(matches!(evaluate(&m, &[], None), Err(TrainError::EmptyEvalSplit)));
    }
}
