//! Attention-weight exports at word, sentence and review level.
//!
//! Source2token weights are per dimension; every export reduces them to one
//! scalar per unit by averaging over the feature dimensions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Decision, EmbeddingTable};
use crate::model::{ForwardTrace, ModelConfig, ModelParams, PaperOutput};
use crate::tensor::Tensor;
use crate::trainer::{predict_items, TrainError};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ExportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Sentence,
    Review,
}

/// Aggregated word weight within one decision class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordRanking {
    pub class: String,
    pub rank: usize,
    pub token: String,
    pub weight: f64,
    pub count: usize,
}

/// Scalar weight of one sentence within its review, or one review within its paper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitWeight {
    pub level: Level,
    pub paper: String,
    pub class: String,
    pub review: usize,
    pub sentence: Option<usize>,
    pub weight: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordOptions {
    pub top_k: usize,
    pub by_class: bool,
    pub min_count: usize,
}

impl Default for WordOptions {
    fn default() -> Self {
        Self {
            top_k: 15,
            by_class: true,
            min_count: 5,
        }
    }
}

/// Mean over the feature axis of each row of a `[T×d]` weight matrix.
pub fn row_means(weights: &Tensor) -> Vec<f64> {
    let d = weights.shape()[1] as f64;
    (0..weights.shape()[0])
        .map(|i| weights.row(i).iter().sum::<f64>() / d)
        .collect()
}

fn class_name(item: &Batch) -> String {
    match item.decisions[0] {
        Some(c) => match Decision::from_class(c) {
            Decision::Accept => "accept".into(),
            Decision::Reject => "reject".into(),
        },
        None => "unlabeled".into(),
    }
}

fn traced(
    model: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    items: &[Batch],
) -> Result<Vec<PaperOutput>> {
    Ok(predict_items(model, params, embeddings, items, true)?)
}

fn trace(out: &PaperOutput) -> &ForwardTrace {
    out.trace.as_ref().expect("trace requested")
}

fn valid_words(item: &Batch, m: usize, n: usize) -> Vec<u32> {
    (0..item.caps.words)
        .filter(|&l| item.word_valid(0, m, n, l))
        .map(|l| item.word(0, m, n, l))
        .collect()
}

fn sentence_text(item: &Batch, embeddings: &EmbeddingTable, m: usize, n: usize) -> String {
    valid_words(item, m, n)
        .iter()
        .map(|&w| embeddings.vocab.token(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Ranks token types by their mean word-level weight, per decision class
/// (or over everything when `by_class` is off). Types seen fewer than
/// `min_count` times are dropped; ties go to the lexicographically smaller token.
pub fn word_rankings(
    model: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    items: &[Batch],
    opts: &WordOptions,
) -> Result<Vec<WordRanking>> {
    if !model.has_sentence_encoder() {
        return Err(ExportError::Unsupported(
            "word-level attention needs the sentence encoder; this variant averages embeddings".into(),
        ));
    }
    let outputs = traced(model, params, embeddings, items)?;
    let mut stats: BTreeMap<String, BTreeMap<u32, (f64, usize)>> = BTreeMap::new();
    for (item, out) in items.iter().zip(&outputs) {
        let class = if opts.by_class { class_name(item) } else { "all".into() };
        let per_class = stats.entry(class).or_default();
        let t = trace(out);
        for (mi, &m) in t.review_slots.iter().enumerate() {
            for (ni, &n) in t.sentence_slots[mi].iter().enumerate() {
                let words = valid_words(item, m, n);
                for (w, weight) in words.iter().zip(row_means(&t.word_weights[mi][ni])) {
                    let e = per_class.entry(*w).or_insert((0.0, 0));
                    e.0 += weight;
                    e.1 += 1;
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (class, per_class) in stats {
        let mut ranked: Vec<(String, f64, usize)> = per_class
            .into_iter()
            .filter(|(_, (_, c))| *c >= opts.min_count)
            .map(|(w, (s, c))| (embeddings.vocab.token(w).to_string(), s / c as f64, c))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if ranked.len() < opts.top_k {
            warn!(
                "class {class}: only {} token types reach {} occurrences; emitting fewer than {} rows",
                ranked.len(),
                opts.min_count,
                opts.top_k
            );
        }
        rows.extend(ranked.into_iter().take(opts.top_k).enumerate().map(|(i, (token, weight, count))| {
            WordRanking {
                class: class.clone(),
                rank: i + 1,
                token,
                weight,
                count,
            }
        }));
    }
    Ok(rows)
}

/// Which units to export at sentence or review level.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitFilter {
    pub paper: Option<String>,
    pub review: Option<usize>,
}

/// Per-sentence weights within each review, or per-review weights within each paper.
pub fn unit_weights(
    model: &ModelConfig,
    params: &ModelParams,
    embeddings: &EmbeddingTable,
    items: &[Batch],
    level: Level,
    filter: &UnitFilter,
) -> Result<Vec<UnitWeight>> {
    match level {
        Level::Word => return Err(ExportError::Unsupported("use word_rankings for word level".into())),
        Level::Sentence if !model.has_review_encoder() => {
            return Err(ExportError::Unsupported(
                "sentence-level attention needs the intra-review encoder; this variant averages sentences".into(),
            ))
        }
        Level::Review if !model.has_paper_encoder() || model.task != crate::model::Task::Decision => {
            return Err(ExportError::Unsupported(
                "review-level attention needs a decision model with the inter-review encoder".into(),
            ))
        }
        _ => {}
    }
    let selected: Vec<Batch> = items
        .iter()
        .filter(|b| filter.paper.as_ref().is_none_or(|p| &b.ids[0] == p))
        .cloned()
        .collect();
    let outputs = traced(model, params, embeddings, &selected)?;
    let mut rows = Vec::new();
    for (item, out) in selected.iter().zip(&outputs) {
        let t = trace(out);
        let class = class_name(item);
        for (mi, &m) in t.review_slots.iter().enumerate() {
            if filter.review.is_some_and(|r| r != m) {
                continue;
            }
            let review_text = || {
                t.sentence_slots[mi]
                    .iter()
                    .map(|&n| sentence_text(item, embeddings, m, n))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            match level {
                Level::Sentence => {
                    let weights = row_means(&t.sentence_weights[mi]);
                    for (&n, w) in t.sentence_slots[mi].iter().zip(weights) {
                        rows.push(UnitWeight {
                            level,
                            paper: item.ids[0].clone(),
                            class: class.clone(),
                            review: m,
                            sentence: Some(n),
                            weight: w,
                            text: sentence_text(item, embeddings, m, n),
                        });
                    }
                }
                Level::Review => {
                    let weights = row_means(t.review_weights.as_ref().expect("decision trace"));
                    rows.push(UnitWeight {
                        level,
                        paper: item.ids[0].clone(),
                        class: class.clone(),
                        review: m,
                        sentence: None,
                        weight: weights[mi],
                        text: review_text(),
                    });
                }
                Level::Word => unreachable!(),
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(input: impl io::Read) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// White to dark red, `t` in [0, 1].
fn heat(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 178.0), lerp(255.0, 24.0), lerp(255.0, 43.0))
}

const ROW: f64 = 18.0;

/// Horizontal bars, one block per class.
pub fn word_svg(rows: &[WordRanking]) -> String {
    let max = rows.iter().map(|r| r.weight).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut body = String::new();
    let mut y = 10.0;
    let mut class: Option<&str> = None;
    for r in rows {
        if class != Some(r.class.as_str()) {
            y += ROW;
            let _ = writeln!(body, r#"<text x="10" y="{y}" font-weight="bold">{}</text>"#, escape(&r.class));
            class = Some(&r.class);
        }
        y += ROW;
        let width = 300.0 * r.weight / max;
        let _ = writeln!(
            body,
            r#"<text x="150" y="{y}" text-anchor="end">{}</text><rect x="160" y="{}" width="{width:.2}" height="{}" fill="{}"/><text x="{:.2}" y="{y}">{:.4}</text>"#,
            escape(&r.token),
            y - ROW + 5.0,
            ROW - 4.0,
            heat(r.weight / max),
            165.0 + width,
            r.weight
        );
    }
    document(520.0, y + ROW, &body)
}

/// One colored strip per unit, shaded by weight relative to its siblings' maximum.
pub fn unit_svg(rows: &[UnitWeight]) -> String {
    let mut max: BTreeMap<(&str, usize), f64> = BTreeMap::new();
    for r in rows {
        let key = (r.paper.as_str(), if r.level == Level::Sentence { r.review } else { 0 });
        let e = max.entry(key).or_insert(0.0);
        *e = e.max(r.weight);
    }
    let mut body = String::new();
    let mut y = 10.0;
    for r in rows {
        y += ROW;
        let key = (r.paper.as_str(), if r.level == Level::Sentence { r.review } else { 0 });
        let m = max[&key].max(f64::MIN_POSITIVE);
        let label = match r.sentence {
            Some(n) => format!("{} r{} s{}", r.paper, r.review, n),
            None => format!("{} r{}", r.paper, r.review),
        };
        let text: String = r.text.chars().take(90).collect();
        let _ = writeln!(
            body,
            r#"<rect x="10" y="{}" width="780" height="{}" fill="{}"/><text x="14" y="{}">{} ({:.4}) {}</text>"#,
            y - ROW + 4.0,
            ROW - 2.0,
            heat(r.weight / m),
            y - 2.0,
            escape(&label),
            r.weight,
            escape(&text)
        );
    }
    document(800.0, y + ROW, &body)
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticConfig};
    use crate::model::{Task, Variant};
    use crate::trainer::prepare;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ModelParams, EmbeddingTable, Vec<Batch>) {
        let corpus = generate(&SyntheticConfig {
            papers: 10,
            dim: 4,
            ..Default::default()
        });
        let model = ModelConfig::new(4, Variant::Full, Task::Decision);
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let items = prepare(&corpus.papers, &model, &corpus.embeddings.vocab);
        (model, params, corpus.embeddings, items)
    }

    #[test]
    fn sentence_weights_normalize_per_review() {
        let (model, params, emb, items) = setup();
        let rows = unit_weights(&model, &params, &emb, &items, Level::Sentence, &UnitFilter::default()).unwrap();
        let mut sums: BTreeMap<(String, usize), f64> = BTreeMap::new();
        for r in &rows {
            *sums.entry((r.paper.clone(), r.review)).or_default() += r.weight;
        }
        assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-12));
        let reviews = unit_weights(&model, &params, &emb, &items, Level::Review, &UnitFilter::default()).unwrap();
        let mut per_paper: BTreeMap<String, f64> = BTreeMap::new();
        for r in &reviews {
            *per_paper.entry(r.paper.clone()).or_default() += r.weight;
        }
        assert!(per_paper.values().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn word_rankings_respect_top_k_and_min_count() {
        let (model, params, emb, items) = setup();
        let opts = WordOptions {
            top_k: 3,
            by_class: true,
            min_count: 2,
        };
        let rows = word_rankings(&model, &params, &emb, &items, &opts).unwrap();
        for class in ["accept", "reject"] {
            let c: Vec<_> = rows.iter().filter(|r| r.class == class).collect();
            assert_eq!(c.len(), 3);
            assert!(c.windows(2).all(|w| w[0].weight >= w[1].weight));
            assert!(c.iter().all(|r| r.count >= 2));
        }
        let none = word_rankings(&model, &params, &emb, &items, &WordOptions { min_count: 10_000, ..opts }).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let (model, params, emb, items) = setup();
        let rows = word_rankings(&model, &params, &emb, &items, &WordOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_csv::<WordRanking>(buf.as_slice()).unwrap(), rows);
        let units = unit_weights(&model, &params, &emb, &items, Level::Sentence, &UnitFilter::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&units, &mut buf).unwrap();
        assert_eq!(read_csv::<UnitWeight>(buf.as_slice()).unwrap(), units);
        assert!(unit_svg(&units).starts_with("<svg"));
        assert!(word_svg(&rows).ends_with("</svg>\n"));
    }

    #[test]
    fn single_sentence_review_has_weight_one() {
        let (model, params, emb, _) = setup();
        let paper = crate::data::PaperRecord {
            id: "solo".into(),
            decision: Some(Decision::Accept),
            reviews: vec![crate::data::ReviewRecord {
                text: "novel solid".into(),
                rating: None,
            }],
        };
        let items = prepare(&[paper], &model, &emb.vocab);
        let rows = unit_weights(&model, &params, &emb, &items, Level::Sentence, &UnitFilter::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), "#ffffff");
        assert_eq!(heat(1.0), "#b2182b");
        assert_eq!(escape("<a&\">"), "&lt;a&amp;&quot;&gt;");
    }
}
