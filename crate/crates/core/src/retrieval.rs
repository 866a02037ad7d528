//! Top-k retrieval of expert-labeled training sentences.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldLabels, Sentence, Span, Subtask};
use crate::embedding::{cosine, Embedding, EmbeddingError, EmbeddingProvider};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("cannot embed training sentence {sentence_id:?}: {source}")]
    TrainingEmbedding {
        sentence_id: String,
        source: EmbeddingError,
    },
    #[error("training sentence {0:?} has no gold labels")]
    MissingGold(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone)]
struct IndexEntry {
    sentence: Sentence,
    vector: Embedding,
}

/// An exhaustive-scan index over the training sentences.
#[derive(Debug, Clone)]
pub struct ExampleIndex {
    provider: Arc<dyn EmbeddingProvider>,
    entries: Vec<IndexEntry>,
    gold: GoldLabels,
}

/// A training sentence shown alongside a HIT, with gold spans for one sub-task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicExample {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub visible_spans: Vec<Span>,
    pub score: f64,
    pub rank: usize,
}

/// Descending score, then ascending sentence id.
pub fn ranking_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl ExampleIndex {
    pub fn build(
        train: &[Sentence],
        provider: Arc<dyn EmbeddingProvider>,
        gold: &GoldLabels,
    ) -> Result<Self, RetrievalError> {
        if train.is_empty() {
            return Err(RetrievalError::EmptyTrainingSet);
        }
        let mut entries = Vec::with_capacity(train.len());
        for sentence in train {
            if !gold.contains(&sentence.id) {
                return Err(RetrievalError::MissingGold(sentence.id.clone()));
            }
            let vector =
                provider
                    .embed(sentence)
                    .map_err(|source| RetrievalError::TrainingEmbedding {
                        sentence_id: sentence.id.clone(),
                        source,
                    })?;
            entries.push(IndexEntry {
                sentence: sentence.clone(),
                vector,
            });
        }
        let gold = gold.restrict(train.iter().map(|s| s.id.as_str()));
        Ok(ExampleIndex {
            provider,
            entries,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn sentence_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.sentence.id.as_str())
    }

    pub fn gold(&self) -> &GoldLabels {
        &self.gold
    }

    /// Scores every training sentence against `query`, in index order.
    pub fn scores(&self, query: &Sentence) -> Result<Vec<(f64, &str)>, RetrievalError> {
        let q = self.provider.embed(query)?;
        self.entries
            .iter()
            .map(|e| Ok((cosine(&q, &e.vector)?, e.sentence.id.as_str())))
            .collect()
    }

    /// The `k` most similar training sentences, ranked by [`ranking_order`].
    /// Only gold spans of `subtask` are attached.
    pub fn query_top_k(
        &self,
        query: &Sentence,
        subtask: Subtask,
        k: usize,
    ) -> Result<Vec<DynamicExample>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let q = self.provider.embed(query)?;
        let mut scored = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            scored.push((cosine(&q, &entry.vector)?, i));
        }
        let key = |&(score, i): &(f64, usize)| (score, self.entries[i].sentence.id.as_str());
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| ranking_order(key(a), key(b)));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| ranking_order(key(a), key(b)));
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (score, i))| {
                let s = &self.entries[i].sentence;
                DynamicExample {
                    sentence_id: s.id.clone(),
                    tokens: s.tokens.clone(),
                    visible_spans: self.gold.spans(&s.id, subtask).to_vec(),
                    score,
                    rank: r + 1,
                }
            })
            .collect())
    }
}

pub fn build_index(
    train: &[Sentence],
    provider: Arc<dyn EmbeddingProvider>,
    gold: &GoldLabels,
) -> Result<ExampleIndex, RetrievalError> {
    ExampleIndex::build(train, provider, gold)
}
