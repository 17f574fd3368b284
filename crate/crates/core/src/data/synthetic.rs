//! Synthetic review corpora whose decisions are fixed by planted keywords.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Decision, EmbeddingTable, PaperRecord, ReviewRecord, Vocabulary};
use crate::tensor::Tensor;

pub const POSITIVE: [&str; 4] = ["excellent", "novel", "convincing", "solid"];
pub const NEGATIVE: [&str; 4] = ["flawed", "unclear", "weak", "incremental"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub papers: usize,
    pub min_reviews: usize,
    pub max_reviews: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Total distinct tokens, keywords and the sentence terminator included.
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            papers: 32,
            min_reviews: 2,
            max_reviews: 4,
            min_sentences: 2,
            max_sentences: 3,
            min_words: 3,
            max_words: 6,
            vocab_size: 60,
            dim: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub papers: Vec<PaperRecord>,
    pub embeddings: EmbeddingTable,
}

fn filler_words(cfg: &SyntheticConfig) -> Vec<String> {
    let reserved = POSITIVE.len() + NEGATIVE.len() + 1;
    assert!(cfg.vocab_size > reserved, "vocabulary too small for keywords");
    (0..cfg.vocab_size - reserved).map(|i| format!("w{i:02}")).collect()
}

/// Accepted papers carry positive keywords in every review, rejected papers
/// negative ones; everything else is uniformly drawn filler.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let filler = filler_words(cfg);
    let mut papers = Vec::with_capacity(cfg.papers);
    for p in 0..cfg.papers {
        // alternate classes so every corpus is balanced
        let decision = if p % 2 == 0 { Decision::Accept } else { Decision::Reject };
        let keywords: &[&str] = match decision {
            Decision::Accept => &POSITIVE,
            Decision::Reject => &NEGATIVE,
        };
        let n_reviews = rng.gen_range(cfg.min_reviews..=cfg.max_reviews);
        let reviews = (0..n_reviews)
            .map(|_| {
                let mut sentences: Vec<Vec<String>> = (0..rng.gen_range(cfg.min_sentences..=cfg.max_sentences))
                    .map(|_| {
                        (0..rng.gen_range(cfg.min_words..=cfg.max_words))
                            .map(|_| filler.choose(&mut rng).unwrap().clone())
                            .collect()
                    })
                    .collect();
                let planted = rng.gen_range(1..=2);
                for _ in 0..planted {
                    let s = rng.gen_range(0..sentences.len());
                    let at = rng.gen_range(0..sentences[s].len());
                    sentences[s][at] = keywords.choose(&mut rng).unwrap().to_string();
                }
                let jitter: i64 = rng.gen_range(0..=1);
                let rating = match decision {
                    Decision::Accept => 5 + planted + jitter + rng.gen_range(0..=2),
                    Decision::Reject => 6 - planted - jitter - rng.gen_range(0..=2),
                };
                let text = sentences
                    .iter()
                    .map(|s| s.join(" ") + ".")
                    .collect::<Vec<_>>()
                    .join(" ");
                ReviewRecord {
                    text,
                    rating: Some(rating.clamp(1, 10) as u8),
                }
            })
            .collect();
        papers.push(PaperRecord {
            id: format!("paper{p:04}"),
            decision: Some(decision),
            reviews,
        });
    }

    let mut vocab = Vocabulary::new();
    for t in POSITIVE.iter().chain(&NEGATIVE).copied().chain(["."]) {
        vocab.insert(t);
    }
    for w in &filler {
        vocab.insert(w);
    }
    let mut data = vec![0.0; 2 * cfg.dim];
    data.extend((0..(vocab.len() - 2) * cfg.dim).map(|_| rng.gen_range(-1.0..=1.0)));
    let vectors = Tensor::matrix(vocab.len(), cfg.dim, data).expect("finite");
    SyntheticCorpus {
        papers,
        embeddings: EmbeddingTable { vocab, vectors },
    }
}
