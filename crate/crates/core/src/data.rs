//! Corpus ingestion, tokenization, embeddings, splitting and batching.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub mod synthetic;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const RATING_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed corpus JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("paper {paper}: {reason}")]
    Validation { paper: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("split: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Reject,
    Accept,
}

impl Decision {
    /// Class index: reject = 0, accept = 1.
    pub fn class(self) -> usize {
        match self {
            Decision::Reject => 0,
            Decision::Accept => 1,
        }
    }

    pub fn from_class(class: usize) -> Self {
        if class == 1 {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub text: String,
    pub rating: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    pub decision: Option<Decision>,
    pub reviews: Vec<ReviewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub papers: Vec<PaperRecord>,
}

impl PaperRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| DataError::Validation {
            paper: self.id.clone(),
            reason,
        };
        if self.reviews.is_empty() {
            return Err(fail("paper has no reviews".into()));
        }
        for (i, r) in self.reviews.iter().enumerate() {
            if let Some(rating) = r.rating {
                if !(1..=10).contains(&rating) {
                    return Err(fail(format!("review {i}: rating {rating} outside 1..=10")));
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a corpus file. Ratings outside `1..=10` or papers
/// without reviews are rejected with the paper id.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<PaperRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_corpus(&text).map_err(|e| match e {
        DataError::Json { source, .. } => DataError::Json {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn parse_corpus(text: &str) -> Result<Vec<PaperRecord>> {
    // ratings are read as i64 first so out-of-range values get a validation
    // error naming the paper rather than a generic JSON error
    #[derive(Deserialize)]
    struct RawReview {
        text: String,
        rating: Option<i64>,
    }
    #[derive(Deserialize)]
    struct RawPaper {
        id: String,
        decision: Option<Decision>,
        reviews: Vec<RawReview>,
    }
    #[derive(Deserialize)]
    struct RawCorpus {
        papers: Vec<RawPaper>,
    }
    let raw: RawCorpus = serde_json::from_str(text).map_err(|source| DataError::Json {
        path: PathBuf::new(),
        source,
    })?;
    let mut papers = Vec::with_capacity(raw.papers.len());
    for p in raw.papers {
        let mut reviews = Vec::with_capacity(p.reviews.len());
        for (i, r) in p.reviews.into_iter().enumerate() {
            let rating = match r.rating {
                None => None,
                Some(v) if (1..=10).contains(&v) => Some(v as u8),
                Some(v) => {
                    return Err(DataError::Validation {
                        paper: p.id,
                        reason: format!("review {i}: rating {v} outside 1..=10"),
                    })
                }
            };
            reviews.push(ReviewRecord { text: r.text, rating });
        }
        let paper = PaperRecord {
            id: p.id,
            decision: p.decision,
            reviews,
        };
        paper.validate()?;
        papers.push(paper);
    }
    Ok(papers)
}

pub fn save_corpus(path: impl AsRef<Path>, papers: &[PaperRecord]) -> Result<()> {
    let path = path.as_ref();
    let corpus = Corpus {
        papers: papers.to_vec(),
    };
    let text = serde_json::to_string_pretty(&corpus).expect("corpus serializes");
    fs::write(path, text).map_err(io_err(path))
}

/// Paper/review/decision counts and the rating histogram.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub papers: usize,
    pub reviews: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub undecided: usize,
    /// Counts for ratings 1..=10.
    pub rating_histogram: [usize; RATING_CLASSES],
    pub unrated: usize,
}

pub fn corpus_stats(papers: &[PaperRecord]) -> CorpusStats {
    let mut stats = CorpusStats {
        papers: papers.len(),
        reviews: 0,
        accepted: 0,
        rejected: 0,
        undecided: 0,
        rating_histogram: [0; RATING_CLASSES],
        unrated: 0,
    };
    for p in papers {
        match p.decision {
            Some(Decision::Accept) => stats.accepted += 1,
            Some(Decision::Reject) => stats.rejected += 1,
            None => stats.undecided += 1,
        }
        for r in &p.reviews {
            stats.reviews += 1;
            match r.rating {
                Some(v) => stats.rating_histogram[v as usize - 1] += 1,
                None => stats.unrated += 1,
            }
        }
    }
    stats
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits text into lowercased token sentences. Sentences end at `.`, `!`
/// or `?` followed by whitespace or end of text; punctuation characters are
/// tokens of their own.
pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    let mut sentence: Vec<String> = Vec::new();
    let mut word = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            sentence.push(std::mem::take(&mut word));
        }
        if c.is_whitespace() {
            continue;
        }
        sentence.push(c.to_string());
        let boundary = is_terminal(c) && chars.peek().is_none_or(|n| n.is_whitespace());
        if boundary && !sentence.is_empty() {
            sentences.push(std::mem::take(&mut sentence));
        }
    }
    if !word.is_empty() {
        sentence.push(word);
    }
    if !sentence.is_empty() {
        sentences.push(sentence);
    }
    sentences
}

/// Token ↔ index map with `PAD = 0` and `UNK = 1` reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    pub fn new() -> Self {
        Self {
            tokens: vec![Self::PAD_TOKEN.into(), Self::UNK_TOKEN.into()],
            index: HashMap::new(),
        }
    }

    /// Adds a token if absent and returns its index.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Sorted token set of all review texts.
    pub fn from_papers(papers: &[PaperRecord]) -> Self {
        let mut all: Vec<String> = papers
            .iter()
            .flat_map(|p| &p.reviews)
            .flat_map(|r| tokenize(&r.text))
            .flatten()
            .collect();
        all.sort_unstable();
        all.dedup();
        let mut vocab = Self::new();
        for t in &all {
            vocab.insert(t);
        }
        vocab
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: u32) -> &str {
        &self.tokens[index as usize]
    }

    /// Including the two reserved entries.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    /// Non-reserved tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// Frozen word vectors, one row per vocabulary index. PAD and UNK rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub vectors: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub requested: usize,
    pub found: usize,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        if self.requested == 0 {
            1.0
        } else {
            self.found as f64 / self.requested as f64
        }
    }
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, index: u32) -> &[f64] {
        self.vectors.row(index as usize)
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        self.row(self.vocab.lookup(token))
    }

    /// Writes the non-reserved rows in the `token v1 ... vd` line format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (i, token) in self.vocab.tokens().iter().enumerate() {
            out.push_str(token);
            for v in self.row(i as u32 + 2) {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(out.as_bytes()).map_err(io_err(path))
    }
}

/// Loads a `token v1 ... vd` file. With `wanted`, only tokens of that
/// vocabulary are kept (others are skipped) and coverage is measured against
/// it; without it every line is kept.
pub fn load_embeddings(path: impl AsRef<Path>, wanted: Option<&Vocabulary>) -> Result<(EmbeddingTable, Coverage)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut found: BTreeMap<u32, (String, Vec<f64>)> = BTreeMap::new();
    let mut order = 0u32;
    let mut dim: Option<usize> = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let fail = |reason: String| DataError::Format {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let values = parts
            .map(|s| s.parse::<f64>().map_err(|e| fail(format!("bad value {s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        match dim {
            None if values.is_empty() => return Err(fail("no vector values".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(fail(format!("expected {d} values, found {}", values.len())))
            }
            _ => {}
        }
        let key = match wanted {
            Some(v) => match v.get(token) {
                Some(i) if i >= 2 => i,
                _ => continue,
            },
            None => {
                order += 1;
                order
            }
        };
        found.entry(key).or_insert_with(|| (token.to_string(), values));
    }
    let dim = dim.ok_or_else(|| DataError::Format {
        path: path.to_path_buf(),
        line: 0,
        reason: "empty embedding file".into(),
    })?;
    let mut vocab = Vocabulary::new();
    let mut data = vec![0.0; 2 * dim];
    for (token, values) in found.into_values() {
        vocab.insert(&token);
        data.extend(values);
    }
    let rows = vocab.len();
    let coverage = Coverage {
        requested: wanted.map_or(rows - 2, |v| v.len() - 2),
        found: rows - 2,
    };
    let vectors = Tensor::matrix(rows, dim, data).expect("validated finite values");
    Ok((EmbeddingTable { vocab, vectors }, coverage))
}

/// Sizes of the three partitions after a seeded shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSpec {
    /// 70/15/15, with the remainder going to test.
    pub fn by_ratio(total: usize, seed: u64) -> Self {
        let train = total * 70 / 100;
        let validation = total * 15 / 100;
        Self {
            seed,
            train,
            validation,
            test: total - train - validation,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<PaperRecord>,
    pub validation: Vec<PaperRecord>,
    pub test: Vec<PaperRecord>,
}

/// Sorts by id, shuffles with the seed, then slices contiguously.
pub fn split_dataset(items: &[PaperRecord], spec: &SplitSpec) -> Result<Splits> {
    if spec.total() != items.len() {
        return Err(DataError::Split(format!(
            "counts {}+{}+{} = {} do not match the {} available items",
            spec.train,
            spec.validation,
            spec.test,
            spec.total(),
            items.len()
        )));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = sorted.split_off(spec.train + spec.validation);
    let validation = sorted.split_off(spec.train);
    Ok(Splits {
        train: sorted,
        validation,
        test,
    })
}

/// One single-review record per rated review, for the rating task.
/// Ids are `<paper id>#<review index>`.
pub fn review_items(papers: &[PaperRecord]) -> Vec<PaperRecord> {
    papers
        .iter()
        .flat_map(|p| {
            p.reviews
                .iter()
                .enumerate()
                .filter(|(_, r)| r.rating.is_some())
                .map(move |(i, r)| PaperRecord {
                    id: format!("{}#{i}", p.id),
                    decision: p.decision,
                    reviews: vec![r.clone()],
                })
        })
        .collect()
}

/// Truncation caps: words per sentence, sentences per review, reviews per paper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub words: usize,
    pub sentences: usize,
    pub reviews: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            words: 50,
            sentences: 40,
            reviews: 5,
        }
    }
}

/// Tokenized, truncated review structure of one paper: reviews → sentences → tokens.
pub type PaperTokens = Vec<Vec<Vec<String>>>;

/// Tokenizes and truncates a paper. Reviews without tokens are dropped.
pub fn paper_tokens(paper: &PaperRecord, caps: &Caps) -> PaperTokens {
    paper
        .reviews
        .iter()
        .map(|r| {
            tokenize(&r.text)
                .into_iter()
                .take(caps.sentences)
                .map(|mut s| {
                    s.truncate(caps.words);
                    s
                })
                .collect::<Vec<_>>()
        })
        .filter(|r| !r.is_empty())
        .take(caps.reviews)
        .collect()
}

/// Padded index arrays `[B×M×N×L]` with validity masks at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub caps: Caps,
    pub words: Vec<u32>,
    pub word_mask: Vec<bool>,
    pub sentence_mask: Vec<bool>,
    pub review_mask: Vec<bool>,
    pub decisions: Vec<Option<usize>>,
    /// Rating class (rating - 1) per review slot.
    pub ratings: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn review_slot(&self, b: usize, m: usize) -> usize {
        b * self.caps.reviews + m
    }

    pub fn sentence_slot(&self, b: usize, m: usize, n: usize) -> usize {
        self.review_slot(b, m) * self.caps.sentences + n
    }

    pub fn word_slot(&self, b: usize, m: usize, n: usize, l: usize) -> usize {
        self.sentence_slot(b, m, n) * self.caps.words + l
    }

    pub fn review_valid(&self, b: usize, m: usize) -> bool {
        self.review_mask[self.review_slot(b, m)]
    }

    pub fn sentence_valid(&self, b: usize, m: usize, n: usize) -> bool {
        self.sentence_mask[self.sentence_slot(b, m, n)]
    }

    pub fn word_valid(&self, b: usize, m: usize, n: usize, l: usize) -> bool {
        self.word_mask[self.word_slot(b, m, n, l)]
    }

    pub fn word(&self, b: usize, m: usize, n: usize, l: usize) -> u32 {
        self.words[self.word_slot(b, m, n, l)]
    }

    pub fn rating(&self, b: usize, m: usize) -> Option<usize> {
        self.ratings[self.review_slot(b, m)]
    }

    /// Valid word indices of item `b`, structured reviews → sentences → words.
    pub fn depad(&self, b: usize) -> Vec<Vec<Vec<u32>>> {
        (0..self.caps.reviews)
            .filter(|&m| self.review_valid(b, m))
            .map(|m| {
                (0..self.caps.sentences)
                    .filter(|&n| self.sentence_valid(b, m, n))
                    .map(|n| {
                        (0..self.caps.words)
                            .filter(|&l| self.word_valid(b, m, n, l))
                            .map(|l| self.word(b, m, n, l))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Checks the mask hierarchy and per-level non-emptiness.
    pub fn check_masks(&self) -> bool {
        let c = self.caps;
        (0..self.len()).all(|b| {
            (0..c.reviews).all(|m| {
                let rv = self.review_valid(b, m);
                let sentences = (0..c.sentences).filter(|&n| self.sentence_valid(b, m, n)).count();
                (rv == (sentences > 0))
                    && (0..c.sentences).all(|n| {
                        let sv = self.sentence_valid(b, m, n);
                        let words = (0..c.words).filter(|&l| self.word_valid(b, m, n, l)).count();
                        (!sv || rv) && (sv == (words > 0))
                    })
            })
        })
    }
}

/// Builds padded batches of at most `batch_size` items, in input order.
/// Papers with no tokens left after truncation are skipped with a warning.
pub fn batchify(records: &[PaperRecord], caps: &Caps, vocab: &Vocabulary, batch_size: usize) -> Vec<Batch> {
    let kept: Vec<(&PaperRecord, PaperTokens)> = records
        .iter()
        .filter_map(|p| {
            let tokens = paper_tokens(p, caps);
            if tokens.is_empty() {
                warn!("skipping paper {}: no tokens after truncation", p.id);
                None
            } else {
                Some((p, tokens))
            }
        })
        .collect();
    kept.chunks(batch_size.max(1))
        .map(|chunk| build_batch(chunk, caps, vocab))
        .collect()
}

fn build_batch(items: &[(&PaperRecord, PaperTokens)], caps: &Caps, vocab: &Vocabulary) -> Batch {
    let b = items.len();
    let (m, n, l) = (caps.reviews, caps.sentences, caps.words);
    let mut batch = Batch {
        ids: items.iter().map(|(p, _)| p.id.clone()).collect(),
        caps: *caps,
        words: vec![PAD; b * m * n * l],
        word_mask: vec![false; b * m * n * l],
        sentence_mask: vec![false; b * m * n],
        review_mask: vec![false; b * m],
        decisions: items.iter().map(|(p, _)| p.decision.map(Decision::class)).collect(),
        ratings: vec![None; b * m],
    };
    for (bi, (paper, tokens)) in items.iter().enumerate() {
        // ratings follow the reviews that survived empty-text filtering
        let rated: Vec<Option<u8>> = paper
            .reviews
            .iter()
            .filter(|r| !tokenize(&r.text).is_empty())
            .map(|r| r.rating)
            .collect();
        for (mi, review) in tokens.iter().enumerate() {
            let slot = batch.review_slot(bi, mi);
            batch.review_mask[slot] = true;
            batch.ratings[slot] = rated[mi].map(|r| r as usize - 1);
            for (ni, sentence) in review.iter().enumerate() {
                let s = batch.sentence_slot(bi, mi, ni);
                batch.sentence_mask[s] = true;
                for (li, token) in sentence.iter().enumerate() {
                    let w = batch.word_slot(bi, mi, ni, li);
                    batch.word_mask[w] = true;
                    batch.words[w] = vocab.lookup(token);
                }
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper(id: &str, texts: &[&str]) -> PaperRecord {
        PaperRecord {
            id: id.into(),
            decision: Some(Decision::Accept),
            reviews: texts
                .iter()
                .map(|t| ReviewRecord {
                    text: (*t).into(),
                    rating: Some(7),
                })
                .collect(),
        }
    }

    #[test]
    fn tokenize_rule_application() {
        assert_eq!(
            tokenize("Good paper. Accept!"),
            vec![vec!["good", "paper", "."], vec!["accept", "!"]]
        );
        assert_eq!(tokenize(""), Vec::<Vec<String>>::new());
        assert_eq!(tokenize("Version 3.5 is fine"), vec![vec!["version", "3", ".", "5", "is", "fine"]]);
        assert_eq!(tokenize("Why?!  Really."), vec![vec!["why", "?", "!"], vec!["really", "."]]);
    }

    #[test]
    fn tokenize_is_idempotent_on_token_stream() {
        let text = "The method (see Sec. 3) isn't novel; results: 92.5% vs. 90%. Reject?";
        let first: Vec<String> = tokenize(text).into_iter().flatten().collect();
        let joined = first.join(" ");
        let second: Vec<String> = tokenize(&joined).into_iter().flatten().collect();
        assert_eq!(first, second);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let papers = vec![paper("p1", &["Nice work."])];
        save_corpus(&path, &papers).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, papers);
        save_corpus(&path, &loaded).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), papers);
    }

    #[test]
    fn corpus_validation_errors() {
        let bad_rating = r#"{"papers":[{"id":"x","decision":"accept","reviews":[{"text":"a","rating":11}]}]}"#;
        match parse_corpus(bad_rating) {
            Err(DataError::Validation { paper, reason }) => {
                assert_eq!(paper, "x");
                assert!(reason.contains("11"));
            }
            other => panic!("{other:?}"),
        }
        let no_reviews = r#"{"papers":[{"id":"y","decision":null,"reviews":[]}]}"#;
        assert!(matches!(parse_corpus(no_reviews), Err(DataError::Validation { .. })));
        assert!(matches!(parse_corpus("{\"papers\": [1]}"), Err(DataError::Json { .. })));
    }

    #[test]
    fn embeddings_load_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        fs::write(&path, "good 0.1 -0.25 3\nbad 1e-3 2 -7.5\n").unwrap();
        let (table, cov) = load_embeddings(&path, None).unwrap();
        assert_eq!(table.vectors.shape(), &[4, 3]);
        assert_eq!(table.lookup("good"), &[0.1, -0.25, 3.0]);
        assert_eq!(table.lookup("bad"), &[1e-3, 2.0, -7.5]);
        assert_eq!(table.lookup("absent"), &[0.0, 0.0, 0.0]);
        assert_eq!(table.row(PAD), &[0.0; 3]);
        assert_eq!(cov.found, 2);

        let mut wanted = Vocabulary::new();
        wanted.insert("bad");
        wanted.insert("missing");
        let (table, cov) = load_embeddings(&path, Some(&wanted)).unwrap();
        assert_eq!(table.vectors.shape(), &[3, 3]);
        assert_eq!((cov.requested, cov.found), (2, 1));

        // save → load reproduces the rows exactly
        let out = dir.path().join("e2.txt");
        table.save(&out).unwrap();
        let (again, _) = load_embeddings(&out, None).unwrap();
        assert_eq!(again, table);
    }

    #[test]
    fn embeddings_reject_ragged_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        fs::write(&path, "a 1 2\nb 1 2 3\n").unwrap();
        assert!(matches!(
            load_embeddings(&path, None),
            Err(DataError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        let papers = vec![paper("a", &["b a c. a b!"]), paper("b", &["z y."])];
        let vocab = Vocabulary::from_papers(&papers);
        for (i, t) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.get(t), Some(i as u32 + 2));
            assert_eq!(vocab.token(i as u32 + 2), t);
        }
        assert_eq!(vocab.lookup("unseen"), UNK);
    }

    #[test]
    fn splits_are_deterministic_partitions() {
        let papers: Vec<PaperRecord> = (0..20).map(|i| paper(&format!("p{i:02}"), &["x."])).collect();
        let spec = SplitSpec { seed: 3, train: 14, validation: 3, test: 3 };
        let a = split_dataset(&papers, &spec).unwrap();
        let b = split_dataset(&papers, &spec).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = a.train.iter().chain(&a.validation).chain(&a.test).map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        // input order does not matter
        let mut reversed = papers.clone();
        reversed.reverse();
        assert_eq!(split_dataset(&reversed, &spec).unwrap(), a);

        let bad = SplitSpec { seed: 0, train: 10, validation: 3, test: 3 };
        assert!(matches!(split_dataset(&papers, &bad), Err(DataError::Split(_))));
    }

    #[test]
    fn published_decision_counts_do_not_cover_the_full_dump() {
        let spec = SplitSpec { seed: 0, train: 2293, validation: 491, test: 492 };
        assert_eq!(spec.total(), 3276);
        let papers: Vec<PaperRecord> = (0..3303).map(|i| paper(&format!("p{i}"), &["x."])).collect();
        let err = split_dataset(&papers, &spec).unwrap_err().to_string();
        assert!(err.contains("3276") && err.contains("3303"), "{err}");
    }

    #[test]
    fn batch_padding_and_truncation() {
        let long: String = (0..100).map(|i| format!("w{i} ")).collect();
        let papers = vec![paper("p", &[&long])];
        let vocab = Vocabulary::from_papers(&papers);
        let caps = Caps { words: 50, sentences: 4, reviews: 5 };
        let batches = batchify(&papers, &caps, &vocab, 8);
        let b = &batches[0];
        assert!(b.review_valid(0, 0));
        assert!((1..5).all(|m| !b.review_valid(0, m)));
        let kept = &b.depad(0)[0][0];
        assert_eq!(kept.len(), 50);
        let want: Vec<u32> = (0..50).map(|i| vocab.lookup(&format!("w{i}"))).collect();
        assert_eq!(kept, &want);
        assert!(b.check_masks());
    }

    #[test]
    fn empty_reviews_and_papers_are_skipped() {
        let mut p = paper("p", &["", "Fine."]);
        p.reviews[1].rating = Some(4);
        let empty = paper("q", &["   "]);
        let vocab = Vocabulary::from_papers(&[p.clone()]);
        let batches = batchify(&[p, empty], &Caps::default(), &vocab, 8);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].ids, vec!["p"]);
        assert_eq!(batches[0].rating(0, 0), Some(3));
    }

    #[test]
    fn review_items_flatten_rated_reviews() {
        let mut p = paper("p", &["a.", "b.", "c."]);
        p.reviews[1].rating = None;
        let items = review_items(&[p]);
        assert_eq!(items.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["p#0", "p#2"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn review_text() -> impl Strategy<Value = String> {
            prop::collection::vec(
                prop::collection::vec("[a-e]{1,3}", 1..9).prop_map(|w| w.join(" ") + "."),
                0..6,
            )
            .prop_map(|s| s.join(" "))
        }

        proptest! {
            #[test]
            fn masks_obey_hierarchy_and_depad_recovers_tokens(
                texts in prop::collection::vec(review_text(), 1..7),
                words in 1usize..6, sentences in 1usize..4, reviews in 1usize..5,
            ) {
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                let p = paper("p", &refs);
                let vocab = Vocabulary::from_papers(std::slice::from_ref(&p));
                let caps = Caps { words, sentences, reviews };
                let batches = batchify(std::slice::from_ref(&p), &caps, &vocab, 4);
                let expected = paper_tokens(&p, &caps);
                if expected.is_empty() {
                    prop_assert!(batches.is_empty());
                } else {
                    let b = &batches[0];
                    prop_assert!(b.check_masks());
                    let got: Vec<Vec<Vec<String>>> = b.depad(0).iter().map(|r| r.iter().map(|s| {
                        s.iter().map(|&i| vocab.token(i).to_string()).collect()
                    }).collect()).collect();
                    prop_assert_eq!(got, expected);
                }
            }
        }
    }
}
