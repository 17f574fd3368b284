//! Minibatch training, validation-based model selection and evaluation.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batchify, Batch, EmbeddingTable, PaperRecord, Vocabulary, RATING_CLASSES};
use crate::metrics::{self, EvalReport, LabeledPredictions, Metric, MetricsError};
use crate::model::{predict_item, Forward, ModelConfig, ModelError, ModelParams, PaperOutput, Task};
use crate::tensor::{Tape, TensorError};

pub use crate::checkpoint::{load_checkpoint, save_checkpoint};

/// Largest rating distance, used by DM.
pub const RATING_D_MAX: u64 = (RATING_CLASSES - 1) as u64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged at epoch {epoch}, batch {batch} (papers {ids}): {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        ids: String,
        detail: String,
    },
    #[error("{0} split has no labeled items")]
    EmptySplit(&'static str),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl Task {
    pub fn default_epochs(self) -> usize {
        match self {
            Task::Decision => 100,
            Task::Rating => 50,
        }
    }

    pub fn default_embedding_dim(self) -> usize {
        match self {
            Task::Decision => 50,
            Task::Rating => 100,
        }
    }

    /// Columns of the evaluation table.
    pub fn metrics(self) -> [Metric; 3] {
        match self {
            Task::Decision => Metric::DECISION,
            Task::Rating => Metric::RATING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::Decision)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            epochs: task.default_epochs(),
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1");
        }
        // zero is allowed: it freezes every parameter
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return fail("moment decays must lie in [0, 1) and epsilon must be positive");
        }
        if self.clip_norm <= 0.0 || self.clip_norm.is_nan() {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Seed of repeat `k`; repeat 0 keeps the base seed.
pub fn derive_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam moment accumulators, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Gradients = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (name, tensor) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            for (i, theta) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Validation metrics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub dm: Option<f64>,
    pub op: f64,
}

impl From<&EvalReport> for MetricValues {
    fn from(r: &EvalReport) -> Self {
        Self {
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            micro_f1: r.micro_f1,
            dm: r.dm,
            op: r.op,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: MetricValues,
    /// Selection metric: validation accuracy (decision) or DM (rating).
    pub selection: f64,
    /// Best epoch so far, 1-based.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn best_epoch(&self) -> Option<usize> {
        self.epochs.last().map(|r| r.best_epoch)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch().map(|e| &self.epochs[e - 1])
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<_>>()?;
        Ok(Self { epochs })
    }
}

/// Papers turned into single-item batches, in input order.
pub fn prepare(records: &[PaperRecord], model: &ModelConfig, vocab: &Vocabulary) -> Vec<Batch> {
    batchify(records, &model.caps(), vocab, 1)
}

fn has_label(task: Task, item: &Batch) -> bool {
    match task {
        Task::Decision => item.decisions[0].is_some(),
        Task::Rating => (0..item.caps.reviews).any(|m| item.rating(0, m).is_some()),
    }
}

fn selection_value(task: Task, report: &EvalReport) -> f64 {
    match task {
        Task::Decision => report.accuracy,
        Task::Rating => report.dm.unwrap_or(f64::NEG_INFINITY),
    }
}

/// Forward passes over `items`, fanned out over the rayon pool and merged in input order.
pub fn predict_items(
    model: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    items: &[Batch],
    with_trace: bool,
) -> Result<Vec<PaperOutput>> {
    let outputs: std::result::Result<Vec<_>, _> = items
        .par_iter()
        .map(|item| predict_item(model, params, embeddings, item, 0, with_trace))
        .collect();
    Ok(outputs?)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Gold and predicted labels for the task: decision classes 0/1, or ratings 1–10.
pub fn label_pairs(task: Task, items: &[Batch], outputs: &[PaperOutput]) -> (Vec<i64>, Vec<i64>) {
    let (mut truth, mut predicted) = (Vec::new(), Vec::new());
    for (item, out) in items.iter().zip(outputs) {
        match task {
            Task::Decision => {
                if let (Some(label), Some(p)) = (item.decisions[0], &out.decision) {
                    truth.push(label as i64);
                    predicted.push(argmax(p) as i64);
                }
            }
            Task::Rating => {
                for (dist, &m) in out.ratings.iter().zip(&out.review_slots) {
                    if let Some(label) = item.rating(0, m) {
                        truth.push(label as i64 + 1);
                        predicted.push(argmax(dist) as i64 + 1);
                    }
                }
            }
        }
    }
    (truth, predicted)
}

/// Metric report from task labels: DM is included for ratings only.
pub fn report_for(task: Task, truth: Vec<i64>, predicted: Vec<i64>) -> Result<EvalReport> {
    let report = match task {
        Task::Decision => metrics::evaluate(&LabeledPredictions::new(truth, predicted, 0..=1)?, None)?,
        Task::Rating => metrics::evaluate(&LabeledPredictions::ratings(truth, predicted)?, Some(RATING_D_MAX))?,
    };
    Ok(report)
}

/// Rejects metric lists that do not apply to the task.
pub fn check_metrics(task: Task, requested: &[Metric]) -> Result<()> {
    if task == Task::Decision && requested.contains(&Metric::Dm) {
        return Err(TrainError::Config("DM is defined for the rating task only".into()));
    }
    Ok(())
}

/// Forward-only evaluation of prepared items.
pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    items: &[Batch],
    requested: &[Metric],
) -> Result<EvalReport> {
    check_metrics(model.task, requested)?;
    params.check_compatible(model)?;
    let outputs = predict_items(model, params, embeddings, items, false)?;
    let (truth, predicted) = label_pairs(model.task, items, &outputs);
    if truth.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    report_for(model.task, truth, predicted)
}

pub struct TrainData<'a> {
    pub train: &'a [Batch],
    pub validation: &'a [Batch],
    pub embeddings: &'a EmbeddingTable,
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ModelParams,
    pub log: RunLog,
}

/// Loss of one item; its gradient, scaled by `weight`, goes to `sink`.
fn item_gradients(
    model: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    item: &Batch,
    weight: f64,
    sink: impl FnOnce(&crate::model::BoundParams),
) -> std::result::Result<f64, ModelError> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let fwd = Forward {
        config: model,
        embeddings,
        params: &bound,
        tape: &tape,
    };
    let logits = fwd.paper(item, 0, None)?;
    let loss = fwd
        .loss(item, 0, &logits)?
        .ok_or_else(|| ModelError::Input {
            item: item.ids[0].clone(),
            reason: "no label for the task".into(),
        })?;
    let value = loss.value().item()?;
    tape.backward(loss.scale(weight)?)?;
    sink(&bound);
    Ok(value)
}

/// Mean loss and summed gradients of a minibatch. Items are processed in
/// parallel chunks but reduced strictly in input order.
fn batch_gradients(
    model: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    items: &[&Batch],
) -> std::result::Result<(f64, Gradients), ModelError> {
    let weight = 1.0 / items.len() as f64;
    let mut total: Gradients = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
        .collect();
    let mut loss = 0.0;
    let threads = rayon::current_num_threads();
    if threads <= 1 {
        for item in items {
            loss += weight * item_gradients(model, params, embeddings, item, weight, |b| b.add_gradients(&mut total))?;
        }
        return Ok((loss, total));
    }
    for group in items.chunks(threads) {
        let results: Vec<_> = group
            .par_iter()
            .map(|item| {
                let mut grads = None;
                let l = item_gradients(model, params, embeddings, item, weight, |b| grads = Some(b.gradients()))?;
                Ok::<_, ModelError>((l, grads.expect("sink called")))
            })
            .collect();
        for r in results {
            let (l, grads) = r?;
            loss += l * weight;
            for (k, g) in grads {
                let acc = total.get_mut(&k).expect("gradient per parameter");
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((loss, total))
}

/// Trains from freshly initialized parameters and keeps the best validation epoch.
pub fn train(data: &TrainData, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(model, &mut rng)?;
    train_from(data, model, cfg, params)
}

/// Trains starting from `params`.
pub fn train_from(data: &TrainData, model: &ModelConfig, cfg: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if model.task != cfg.task {
        return Err(TrainError::Config(format!(
            "model task {:?} differs from training task {:?}",
            model.task, cfg.task
        )));
    }
    if data.embeddings.dim() != model.d_e {
        return Err(TrainError::Config(format!(
            "embedding width {} differs from d_e {}",
            data.embeddings.dim(),
            model.d_e
        )));
    }
    let train_items: Vec<&Batch> = data.train.iter().filter(|b| has_label(cfg.task, b)).collect();
    if train_items.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if train_items.len() < data.train.len() {
        warn!("{} training items have no label and are ignored", data.train.len() - train_items.len());
    }
    if !data.validation.iter().any(|b| has_label(cfg.task, b)) {
        return Err(TrainError::EmptySplit("validation"));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut optimizer = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut log = RunLog::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&Batch> = chunk.iter().map(|&i| train_items[i]).collect();
            let diverged = |detail: String| TrainError::Divergence {
                epoch,
                batch: bi,
                ids: items.iter().map(|b| b.ids[0].as_str()).collect::<Vec<_>>().join(","),
                detail,
            };
            let (loss, mut grads) = batch_gradients(model, &params, data.embeddings, &items).map_err(|e| match e {
                ModelError::Tensor(TensorError::NonFinite { op }) => diverged(format!("non-finite value in {op}")),
                other => TrainError::Model(other),
            })?;
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(diverged(format!("loss {loss}, gradient norm {norm}")));
            }
            optimizer.update(&mut params, &grads, cfg);
            loss_sum += loss * items.len() as f64;
        }
        let train_loss = loss_sum / train_items.len() as f64;
        let report = evaluate(model, &params, data.embeddings, data.validation, &[])?;
        let selection = selection_value(cfg.task, &report);
        if best.as_ref().is_none_or(|(b, _)| selection > *b) {
            best = Some((selection, params.clone()));
            best_epoch = epoch;
        }
        info!("epoch {epoch}: train loss {train_loss:.6}, validation {selection:.4} (best epoch {best_epoch})");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation: MetricValues::from(&report),
            selection,
            best_epoch,
        });
    }
    let (_, params) = best.expect("at least one epoch");
    Ok(TrainOutcome { params, log })
}
