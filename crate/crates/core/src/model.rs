//! The three-level encoder stack and its two prediction heads.
//!
//! Words of a sentence go through Bi-SAN and source2token pooling to give a
//! sentence encoding `s` (2·d_e). Sentences of a review go through a second
//! Bi-SAN + pooling stage to give a review encoding `r` (4·d_e), which feeds
//! the rating head. Reviews of a paper pass through a bi-directional GRU, a
//! third Bi-SAN and a final pooling stage to give the paper encoding `rs`
//! (8·d_e), which feeds the decision head.
//!
//! Only valid (unmasked) positions are gathered before each level, so
//! padding never reaches the arithmetic.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{bisan, glorot, Activation, DirectionalSan, DirectionalSanParams, LevelMask, Source2Token, Source2TokenParams};
use crate::data::{Batch, Caps, EmbeddingTable, RATING_CLASSES};
use crate::tensor::{concat, cross_entropy, stack, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error("batch item {item}: {reason}")]
    Input { item: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// Equal-weight mean of review encodings instead of the inter-review encoder.
    V1,
    /// Mean word embedding instead of the sentence encoder.
    V2,
    /// Mean sentence encoding instead of the intra-review encoder.
    V3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Decision,
    Rating,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Decision => 2,
            Task::Rating => RATING_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_e: usize,
    pub max_words: usize,
    pub max_sentences: usize,
    pub max_reviews: usize,
    pub variant: Variant,
    pub task: Task,
    /// GRU width per direction; half the review-encoding width.
    pub gru_hidden: usize,
    pub activation: Activation,
    /// Hidden width of the source2token scoring MLP; the level's input width when unset.
    pub d_h: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(50, Variant::Full, Task::Decision)
    }
}

impl ModelConfig {
    pub fn new(d_e: usize, variant: Variant, task: Task) -> Self {
        let mut cfg = Self {
            d_e,
            max_words: 50,
            max_sentences: 40,
            max_reviews: 5,
            variant,
            task,
            gru_hidden: 0,
            activation: Activation::Elu,
            d_h: None,
        };
        cfg.gru_hidden = cfg.review_width() / 2;
        cfg
    }

    pub fn caps(&self) -> Caps {
        Caps {
            words: self.max_words,
            sentences: self.max_sentences,
            reviews: self.max_reviews,
        }
    }

    /// Width of `s`.
    pub fn sentence_width(&self) -> usize {
        match self.variant {
            Variant::V2 => self.d_e,
            _ => 2 * self.d_e,
        }
    }

    /// Width of `r`.
    pub fn review_width(&self) -> usize {
        match self.variant {
            Variant::V3 => self.sentence_width(),
            _ => 2 * self.sentence_width(),
        }
    }

    /// Width of `rs`.
    pub fn paper_width(&self) -> usize {
        match self.variant {
            Variant::V1 => self.review_width(),
            _ => 2 * self.review_width(),
        }
    }

    pub fn has_sentence_encoder(&self) -> bool {
        self.variant != Variant::V2
    }

    pub fn has_review_encoder(&self) -> bool {
        self.variant != Variant::V3
    }

    pub fn has_paper_encoder(&self) -> bool {
        self.variant != Variant::V1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_e == 0 || self.max_words == 0 || self.max_sentences == 0 || self.max_reviews == 0 {
            return fail("d_e and truncation caps must be at least 1".into());
        }
        if self.d_h == Some(0) {
            return fail("d_h must be at least 1".into());
        }
        if self.has_paper_encoder() && 2 * self.gru_hidden != self.review_width() {
            return fail(format!(
                "gru_hidden {} must be half the review width {} so the Bi-GRU preserves it",
                self.gru_hidden,
                self.review_width()
            ));
        }
        Ok(())
    }

    fn d_h(&self, d_in: usize) -> usize {
        self.d_h.unwrap_or(d_in)
    }
}

const GRU_GATES: [&str; 3] = ["z", "r", "n"];

/// All trainable arrays, keyed by dotted name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Glorot-uniform matrices and zero biases for every module the variant uses.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Self::default();
        let add_level = |params: &mut Self, prefix: &str, d: usize, mut rng: &mut dyn rand::RngCore| {
            for dir in ["fw", "bw"] {
                for (name, t) in DirectionalSanParams::init(&mut rng, d).named() {
                    params.insert(format!("{prefix}.{dir}.{name}"), t);
                }
            }
            for (name, t) in Source2TokenParams::init(&mut rng, 2 * d, config.d_h(2 * d)).named() {
                params.insert(format!("{prefix}.pool.{name}"), t);
            }
        };
        if config.has_sentence_encoder() {
            add_level(&mut params, "sentence", config.d_e, rng);
        }
        if config.has_review_encoder() {
            add_level(&mut params, "review", config.sentence_width(), rng);
        }
        if config.has_paper_encoder() {
            let (input, hidden) = (config.review_width(), config.gru_hidden);
            for dir in ["fw", "bw"] {
                for gate in GRU_GATES {
                    params.insert(format!("paper.gru.{dir}.w{gate}"), glorot(rng, hidden, input));
                    params.insert(format!("paper.gru.{dir}.u{gate}"), glorot(rng, hidden, hidden));
                    params.insert(format!("paper.gru.{dir}.b{gate}"), Tensor::zeros(&[hidden]));
                }
            }
            add_level(&mut params, "paper", config.review_width(), rng);
        }
        params.insert("head.decision.w".into(), glorot(rng, 2, config.paper_width()));
        params.insert("head.decision.b".into(), Tensor::zeros(&[2]));
        params.insert("head.rating.w".into(), glorot(rng, RATING_CLASSES, config.review_width()));
        params.insert("head.rating.b".into(), Tensor::zeros(&[RATING_CLASSES]));
        Ok(params)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Records every array on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Checks that the arrays match what `config` expects, by name and shape.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::init(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        for (name, t) in &expected.tensors {
            match self.get(name) {
                None => return Err(ModelError::MissingParam(name.clone())),
                Some(have) if have.shape() != t.shape() => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, configuration expects {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.names().find(|n| expected.get(n).is_none()) {
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct BoundParams<'t> {
    pub vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn san(&self, prefix: &str) -> Result<DirectionalSan<'t>> {
        Ok(DirectionalSan {
            wq: self.get(&format!("{prefix}.wq"))?,
            wk: self.get(&format!("{prefix}.wk"))?,
            b_attn: self.get(&format!("{prefix}.b_attn"))?,
            wf: self.get(&format!("{prefix}.wf"))?,
            wx: self.get(&format!("{prefix}.wx"))?,
            bf: self.get(&format!("{prefix}.bf"))?,
            scale: crate::attention::DEFAULT_SCALE,
        })
    }

    fn pool(&self, prefix: &str, activation: Activation) -> Result<Source2Token<'t>> {
        Ok(Source2Token {
            w1: self.get(&format!("{prefix}.w1"))?,
            b1: self.get(&format!("{prefix}.b1"))?,
            w: self.get(&format!("{prefix}.w"))?,
            b: self.get(&format!("{prefix}.b"))?,
            activation,
        })
    }

    /// Adds each parameter's gradient into the matching entry of `acc`.
    pub fn add_gradients(&self, acc: &mut BTreeMap<String, Vec<f64>>) {
        for (k, v) in &self.vars {
            if let Some(slot) = acc.get_mut(k) {
                v.tape().with_grad(*v, |g| slot.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
        }
    }

    /// Gradients of every bound parameter after `Tape::backward`; zeros for
    /// parameters the loss did not reach.
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = v
                    .grad()
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; v.value().len()]);
                (k.clone(), g)
            })
            .collect()
    }
}

/// Bi-SAN followed by source2token pooling, as used at every level.
struct Level<'t> {
    forward: DirectionalSan<'t>,
    backward: DirectionalSan<'t>,
    pool: Source2Token<'t>,
}

impl<'t> Level<'t> {
    fn bind(params: &BoundParams<'t>, prefix: &str, activation: Activation) -> Result<Self> {
        Ok(Self {
            forward: params.san(&format!("{prefix}.fw"))?,
            backward: params.san(&format!("{prefix}.bw"))?,
            pool: params.pool(&format!("{prefix}.pool"), activation)?,
        })
    }

    /// Returns (pooled summary, context-aware rows, pooling weights).
    fn encode(&self, x: Var<'t>, mask: &LevelMask) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let contextual = bisan(x, mask, &self.forward, &self.backward)?;
        let (summary, weights) = self.pool.apply(contextual, mask)?;
        Ok((summary, contextual, weights))
    }
}

struct GruDirection<'t> {
    w: [Var<'t>; 3],
    u: [Var<'t>; 3],
    b: [Var<'t>; 3],
}

impl<'t> GruDirection<'t> {
    fn bind(params: &BoundParams<'t>, dir: &str) -> Result<Self> {
        let get = |kind: &str, gate: &str| params.get(&format!("paper.gru.{dir}.{kind}{gate}"));
        let [z, r, n] = GRU_GATES;
        Ok(Self {
            w: [get("w", z)?, get("w", r)?, get("w", n)?],
            u: [get("u", z)?, get("u", r)?, get("u", n)?],
            b: [get("b", z)?, get("b", r)?, get("b", n)?],
        })
    }

    /// Hidden states for rows of `x` visited in `order`, returned in row order.
    fn run(&self, x: Var<'t>, order: impl Iterator<Item = usize>, hidden: usize) -> Result<Vec<Var<'t>>> {
        let tape = x.tape();
        let rows = x.shape()[0];
        let proj: Vec<Var<'t>> = self
            .w
            .iter()
            .map(|w| x.matmul_nt(*w))
            .collect::<std::result::Result<_, _>>()?;
        let mut h = tape.constant(Tensor::zeros(&[hidden]));
        let mut out: Vec<Option<Var<'t>>> = vec![None; rows];
        for t in order {
            let z = proj[0].row(t)?.add(self.u[0].matvec(h)?)?.add(self.b[0])?.sigmoid()?;
            let r = proj[1].row(t)?.add(self.u[1].matvec(h)?)?.add(self.b[1])?.sigmoid()?;
            let candidate = proj[2]
                .row(t)?
                .add(self.u[2].matvec(r.mul(h)?)?)?
                .add(self.b[2])?
                .tanh()?;
            h = h.add(z.mul(candidate.sub(h)?)?)?;
            out[t] = Some(h);
        }
        Ok(out.into_iter().map(|v| v.expect("every row visited")).collect())
    }
}

/// Snapshot of attention weights and encodings for one paper. Vectors are
/// indexed by valid review/sentence order; `review_slots` and
/// `sentence_slots` map back to batch positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub review_slots: Vec<usize>,
    pub sentence_slots: Vec<Vec<usize>>,
    /// Per review, per sentence: `[L×2d_e]` word pooling weights.
    pub word_weights: Vec<Vec<Tensor>>,
    /// Per review: `[N×|se|]` sentence pooling weights.
    pub sentence_weights: Vec<Tensor>,
    /// `[M×|re|]` review pooling weights.
    pub review_weights: Option<Tensor>,
    pub we: Vec<Vec<Tensor>>,
    pub s: Vec<Vec<Tensor>>,
    pub se: Vec<Tensor>,
    pub r: Vec<Tensor>,
    pub re: Option<Tensor>,
    pub rs: Option<Tensor>,
}

/// Logits of one paper on a tape.
pub struct PaperLogits<'t> {
    pub decision: Option<Var<'t>>,
    /// One entry per valid review, in review order.
    pub ratings: Vec<Var<'t>>,
    /// Batch slot of each valid review.
    pub review_slots: Vec<usize>,
}

/// Forward graph over one batch item.
pub struct Forward<'a, 't> {
    pub config: &'a ModelConfig,
    pub embeddings: &'a EmbeddingTable,
    pub params: &'a BoundParams<'t>,
    pub tape: &'t Tape,
}

fn valid_positions(n: usize, valid: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..n).filter(|&i| valid(i)).collect()
}

impl<'t> Forward<'_, 't> {
    fn input_err(&self, batch: &Batch, b: usize, reason: &str) -> ModelError {
        ModelError::Input {
            item: batch.ids[b].clone(),
            reason: reason.to_string(),
        }
    }

    /// Sentence encoding from `[L×d_e]` word vectors: Bi-SAN then pooling.
    /// Returns (s, we, word weights).
    pub fn encode_sentence(&self, words: Var<'t>, mask: &LevelMask) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let level = Level::bind(self.params, "sentence", self.config.activation)?;
        level.encode(words, mask)
    }

    /// Review encoding from `[N×|s|]` sentence encodings. Returns (r, se, sentence weights).
    pub fn encode_review(&self, sentences: Var<'t>, mask: &LevelMask) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let level = Level::bind(self.params, "review", self.config.activation)?;
        level.encode(sentences, mask)
    }

    /// Paper encoding from `[M×|r|]` review encodings: Bi-GRU, Bi-SAN,
    /// pooling. Returns (rs, re, review weights).
    pub fn encode_paper(&self, reviews: Var<'t>, mask: &LevelMask) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let valid: Vec<usize> = valid_positions(mask.len(), |i| mask.is_valid(i));
        if valid.is_empty() {
            return Err(TensorError::DegenerateSlice {
                op: "encode_paper",
                slice: 0,
            }
            .into());
        }
        let hidden = self.config.gru_hidden;
        let fw = GruDirection::bind(self.params, "fw")?.run(reviews, valid.iter().copied(), hidden)?;
        let bw = GruDirection::bind(self.params, "bw")?.run(reviews, valid.iter().rev().copied(), hidden)?;
        let zeros = self.tape.constant(Tensor::zeros(&[2 * hidden]));
        let rows = (0..mask.len())
            .map(|i| {
                if mask.is_valid(i) {
                    concat(&[fw[valid_index(&valid, i)], bw[valid_index(&valid, i)]])
                } else {
                    Ok(zeros)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let recurrent = stack(&rows)?;
        let level = Level::bind(self.params, "paper", self.config.activation)?;
        level.encode(recurrent, mask)
    }

    fn word_matrix(&self, indices: &[u32]) -> Result<Var<'t>> {
        let d = self.embeddings.dim();
        let data: Vec<f64> = indices.iter().flat_map(|&i| self.embeddings.row(i).iter().copied()).collect();
        Ok(self.tape.constant(Tensor::matrix(indices.len(), d, data)?))
    }

    fn mean_rows(&self, rows: &[Var<'t>]) -> Result<Var<'t>> {
        Ok(stack(rows)?.sum_rows()?.scale(1.0 / rows.len() as f64)?)
    }

    /// Runs item `b` of `batch`. The decision path is only built for the
    /// decision task; rating logits are produced for every valid review.
    pub fn paper(&self, batch: &Batch, b: usize, mut trace: Option<&mut ForwardTrace>) -> Result<PaperLogits<'t>> {
        let cfg = self.config;
        let caps = batch.caps;
        if self.embeddings.dim() != cfg.d_e {
            return Err(ModelError::Config(format!(
                "embedding width {} differs from d_e {}",
                self.embeddings.dim(),
                cfg.d_e
            )));
        }
        let review_slots = valid_positions(caps.reviews, |m| batch.review_valid(b, m));
        if review_slots.is_empty() {
            return Err(self.input_err(batch, b, "no valid review"));
        }
        if let Some(t) = trace.as_deref_mut() {
            *t = ForwardTrace {
                review_slots: review_slots.clone(),
                ..Default::default()
            };
        }
        let mut reviews = Vec::with_capacity(review_slots.len());
        let mut ratings = Vec::with_capacity(review_slots.len());
        let rating_w = self.params.get("head.rating.w")?;
        let rating_b = self.params.get("head.rating.b")?;
        for &m in &review_slots {
            let sentence_slots = valid_positions(caps.sentences, |n| batch.sentence_valid(b, m, n));
            if sentence_slots.is_empty() {
                return Err(self.input_err(batch, b, "valid review without sentences"));
            }
            let mut sentences = Vec::with_capacity(sentence_slots.len());
            let (mut ww, mut we, mut ss) = (Vec::new(), Vec::new(), Vec::new());
            for &n in &sentence_slots {
                let words: Vec<u32> = valid_positions(caps.words, |l| batch.word_valid(b, m, n, l))
                    .into_iter()
                    .map(|l| batch.word(b, m, n, l))
                    .collect();
                if words.is_empty() {
                    return Err(self.input_err(batch, b, "valid sentence without words"));
                }
                let x = self.word_matrix(&words)?;
                let s = if cfg.has_sentence_encoder() {
                    let (s, contextual, weights) = self.encode_sentence(x, &LevelMask::all_valid(words.len()))?;
                    if trace.is_some() {
                        ww.push(weights.value());
                        we.push(contextual.value());
                    }
                    s
                } else {
                    x.sum_rows()?.scale(1.0 / words.len() as f64)?
                };
                if trace.is_some() {
                    ss.push(s.value());
                }
                sentences.push(s);
            }
            let r = if cfg.has_review_encoder() {
                let (r, se, weights) = self.encode_review(stack(&sentences)?, &LevelMask::all_valid(sentences.len()))?;
                if let Some(t) = trace.as_deref_mut() {
                    t.sentence_weights.push(weights.value());
                    t.se.push(se.value());
                }
                r
            } else {
                self.mean_rows(&sentences)?
            };
            if let Some(t) = trace.as_deref_mut() {
                t.sentence_slots.push(sentence_slots);
                t.word_weights.push(ww);
                t.we.push(we);
                t.s.push(ss);
                t.r.push(r.value());
            }
            ratings.push(rating_w.matvec(r)?.add(rating_b)?);
            reviews.push(r);
        }

        let decision = if cfg.task == Task::Decision {
            let rs = if cfg.has_paper_encoder() {
                let (rs, re, weights) = self.encode_paper(stack(&reviews)?, &LevelMask::all_valid(reviews.len()))?;
                if let Some(t) = trace.as_deref_mut() {
                    t.review_weights = Some(weights.value());
                    t.re = Some(re.value());
                }
                rs
            } else {
                self.mean_rows(&reviews)?
            };
            if let Some(t) = trace.as_mut() {
                t.rs = Some(rs.value());
            }
            let w = self.params.get("head.decision.w")?;
            let bias = self.params.get("head.decision.b")?;
            if w.shape()[1] != rs.shape()[0] {
                return Err(TensorError::Shape {
                    op: "decision head",
                    lhs: w.shape(),
                    rhs: rs.shape(),
                }
                .into());
            }
            Some(w.matvec(rs)?.add(bias)?)
        } else {
            None
        };
        Ok(PaperLogits {
            decision,
            ratings,
            review_slots,
        })
    }

    /// Cross-entropy of item `b` for the configured task, or `None` when the
    /// item carries no label for it.
    pub fn loss(&self, batch: &Batch, b: usize, logits: &PaperLogits<'t>) -> Result<Option<Var<'t>>> {
        match self.config.task {
            Task::Decision => match (batch.decisions[b], logits.decision) {
                (Some(label), Some(z)) => Ok(Some(cross_entropy(stack(&[z])?, &[label])?)),
                _ => Ok(None),
            },
            Task::Rating => {
                let (mut rows, mut labels) = (Vec::new(), Vec::new());
                for (z, &m) in logits.ratings.iter().zip(&logits.review_slots) {
                    if let Some(label) = batch.rating(b, m) {
                        rows.push(*z);
                        labels.push(label);
                    }
                }
                if rows.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(cross_entropy(stack(&rows)?, &labels)?))
                }
            }
        }
    }
}

fn valid_index(valid: &[usize], slot: usize) -> usize {
    valid.iter().position(|&v| v == slot).expect("slot is valid")
}

/// Class probabilities with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Predictions for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct PaperOutput {
    pub id: String,
    /// `[P(reject), P(accept)]`, decision task only.
    pub decision: Option<Vec<f64>>,
    /// Rating distribution per valid review (class `k` ↔ rating `k + 1`).
    pub ratings: Vec<Vec<f64>>,
    pub review_slots: Vec<usize>,
    pub trace: Option<ForwardTrace>,
}

/// Forward-only evaluation of one batch item on a fresh tape.
pub fn predict_item(
    config: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    batch: &Batch,
    b: usize,
    with_trace: bool,
) -> Result<PaperOutput> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let fwd = Forward {
        config,
        embeddings,
        params: &bound,
        tape: &tape,
    };
    let mut trace = with_trace.then(ForwardTrace::default);
    let logits = fwd.paper(batch, b, trace.as_mut())?;
    Ok(PaperOutput {
        id: batch.ids[b].clone(),
        decision: logits.decision.map(|z| softmax(z.value().data())),
        ratings: logits.ratings.iter().map(|z| softmax(z.value().data())).collect(),
        review_slots: logits.review_slots,
        trace,
    })
}

/// Forward pass over every item of a batch.
pub fn forward(
    batch: &Batch,
    config: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    with_trace: bool,
) -> Result<Vec<PaperOutput>> {
    (0..batch.len())
        .map(|b| predict_item(config, params, embeddings, batch, b, with_trace))
        .collect()
}
