//! Sentence vectors and cosine similarity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("no precomputed embedding for sentence {0:?}")]
    Missing(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

/// `dot(u, v) / (|u| |v|)`, defined as 0 when either vector has zero norm.
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64, EmbeddingError> {
    if u.dimension() != v.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.dimension(),
            right: v.dimension(),
        });
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.0.iter().zip(&v.0) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    // Multiplying the norms keeps the expression symmetric in u and v.
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderSource {
    BuiltinHashedNgram,
    PrecomputedTable,
}

/// Maps a sentence to a fixed-dimension vector. Implementations must be pure.
pub trait EmbeddingProvider: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn source(&self) -> ProviderSource;
    fn embed(&self, sentence: &Sentence) -> Result<Embedding, EmbeddingError>;
}

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Feature-hashed unigram and bigram counts.
///
/// Tokens are lowercased and tokens without any alphanumeric character are
/// dropped. Each unigram `u:<tok>` and each adjacent bigram `b:<tok> <tok>`
/// over the remaining tokens is hashed with seeded 64-bit FNV-1a into one of
/// `dimension` buckets. Bucket counts are divided by the feature count and
/// the result is L2-normalized. A sentence with no features maps to the zero
/// vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashedNgramEmbedder {
    dimension: usize,
    seed: u64,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        HashedNgramEmbedder {
            dimension: DEFAULT_DIMENSION,
            seed: DEFAULT_HASH_SEED,
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl HashedNgramEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self, EmbeddingError> {
        if dimension == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        Ok(HashedNgramEmbedder { dimension, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn bucket(&self, feature: &str) -> usize {
        (fnv1a(self.seed, feature.as_bytes()) % self.dimension as u64) as usize
    }

    fn normalized_tokens(tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .filter(|t| t.chars().any(char::is_alphanumeric))
            .map(|t| t.to_lowercase())
            .collect()
    }

    /// Raw unigram bucket counts.
    pub fn unigram_counts(&self, tokens: &[String]) -> Vec<u32> {
        let mut counts = vec![0; self.dimension];
        for tok in Self::normalized_tokens(tokens) {
            counts[self.bucket(&format!("u:{tok}"))] += 1;
        }
        counts
    }

    /// Raw bigram bucket counts.
    pub fn bigram_counts(&self, tokens: &[String]) -> Vec<u32> {
        let mut counts = vec![0; self.dimension];
        for pair in Self::normalized_tokens(tokens).windows(2) {
            counts[self.bucket(&format!("b:{} {}", pair[0], pair[1]))] += 1;
        }
        counts
    }

    pub fn embed_tokens(&self, tokens: &[String]) -> Embedding {
        let uni = self.unigram_counts(tokens);
        let bi = self.bigram_counts(tokens);
        let features: u32 = uni.iter().chain(&bi).sum();
        if features == 0 {
            return Embedding(vec![0.0; self.dimension]);
        }
        let mut values: Vec<f64> = uni
            .iter()
            .zip(&bi)
            .map(|(&u, &b)| f64::from(u + b) / f64::from(features))
            .collect();
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut values {
            *x /= norm;
        }
        Embedding(values)
    }
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn name(&self) -> &str {
        "hashed-ngram"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn source(&self) -> ProviderSource {
        ProviderSource::BuiltinHashedNgram
    }

    fn embed(&self, sentence: &Sentence) -> Result<Embedding, EmbeddingError> {
        Ok(self.embed_tokens(&sentence.tokens))
    }
}

/// Vectors looked up by sentence id, e.g. exported from an external model.
#[derive(Debug, Clone)]
pub struct PrecomputedTable {
    name: String,
    dimension: usize,
    vectors: HashMap<String, Embedding>,
}

impl PrecomputedTable {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        Ok(PrecomputedTable {
            name: "precomputed".into(),
            dimension,
            vectors: HashMap::new(),
        })
    }

    pub fn insert(&mut self, sentence_id: String, v: Embedding) -> Result<(), EmbeddingError> {
        if v.dimension() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                left: self.dimension,
                right: v.dimension(),
            });
        }
        self.vectors.insert(sentence_id, v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedTable {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn source(&self) -> ProviderSource {
        ProviderSource::PrecomputedTable
    }

    fn embed(&self, sentence: &Sentence) -> Result<Embedding, EmbeddingError> {
        self.vectors
            .get(&sentence.id)
            .cloned()
            .ok_or_else(|| EmbeddingError::Missing(sentence.id.clone()))
    }
}

#[derive(Deserialize)]
struct TableHeader {
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    sentence_id: String,
    vector: Vec<f64>,
}

/// Reads an embedding table: a `{"dimension": d}` header line followed by
/// `{"sentence_id", "vector"}` lines. A header with no rows is a valid, empty
/// table.
pub fn load_precomputed(path: &Path) -> Result<PrecomputedTable, EmbeddingError> {
    let reader = BufReader::new(File::open(path)?);
    let mut table: Option<PrecomputedTable> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let malformed = |message: String| EmbeddingError::Malformed {
            line: lineno,
            message,
        };
        match table.as_mut() {
            None => {
                let header: TableHeader =
                    serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
                table = Some(PrecomputedTable::new(header.dimension).map_err(|e| malformed(e.to_string()))?);
            }
            Some(t) => {
                let row: TableRow =
                    serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
                if row.vector.iter().any(|x| !x.is_finite()) {
                    return Err(malformed(format!("non-finite entry for {}", row.sentence_id)));
                }
                if row.vector.len() != t.dimension {
                    return Err(malformed(format!(
                        "vector for {} has dimension {}, header says {}",
                        row.sentence_id,
                        row.vector.len(),
                        t.dimension
                    )));
                }
                t.vectors.insert(row.sentence_id, Embedding(row.vector));
            }
        }
    }
    table.ok_or(EmbeddingError::Malformed {
        line: 0,
        message: "missing header line".into(),
    })
}

/// Writes vectors for `sentences` in the table format read by [`load_precomputed`].
pub fn write_table<'a>(
    path: &Path,
    provider: &dyn EmbeddingProvider,
    sentences: impl IntoIterator<Item = &'a Sentence>,
) -> Result<usize, EmbeddingError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    writeln!(out, "{}", serde_json::json!({ "dimension": provider.dimension() }))?;
    let mut rows = 0;
    for s in sentences {
        let row = TableRow {
            sentence_id: s.id.clone(),
            vector: provider.embed(s)?.0,
        };
        writeln!(out, "{}", serde_json::to_string(&row).expect("row serializes"))?;
        rows += 1;
    }
    out.flush()?;
    Ok(rows)
}

/// Serializable description of a provider, so a study can be rebuilt on replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ProviderSpec {
    BuiltinHashedNgram { dimension: usize, seed: u64 },
    PrecomputedTable { path: PathBuf },
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::BuiltinHashedNgram {
            dimension: DEFAULT_DIMENSION,
            seed: DEFAULT_HASH_SEED,
        }
    }
}

impl ProviderSpec {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbeddingError> {
        Ok(match self {
            ProviderSpec::BuiltinHashedNgram { dimension, seed } => {
                Arc::new(HashedNgramEmbedder::new(*dimension, *seed)?)
            }
            ProviderSpec::PrecomputedTable { path } => Arc::new(load_precomputed(path)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentence(words: &[&str]) -> Sentence {
        Sentence::new("s", words.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&e(&[1.0, 1.0]), &e(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine(&e(&[1.0]), &e(&[1.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|d| {
            (
                prop::collection::vec(-100.0f64..100.0, d),
                prop::collection::vec(-100.0f64..100.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_symmetric((u, v) in vec_pair()) {
            let (u, v) = (Embedding::new(u), Embedding::new(v));
            prop_assert_eq!(cosine(&u, &v).unwrap(), cosine(&v, &u).unwrap());
        }

        #[test]
        fn cosine_scale_invariant((u, v) in vec_pair(), c in 0.001f64..1000.0) {
            let scaled = Embedding::new(u.iter().map(|x| x * c).collect());
            let (u, v) = (Embedding::new(u), Embedding::new(v));
            let a = cosine(&u, &v).unwrap();
            let b = cosine(&scaled, &v).unwrap();
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }

        #[test]
        fn self_similarity_is_one((u, _) in vec_pair()) {
            let u = Embedding::new(u);
            prop_assume!(u.norm() > 1e-6);
            prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn unigram_part_ignores_order(words in prop::collection::vec("[a-z]{1,6}", 1..12), seed in any::<u64>()) {
            let tokens: Vec<String> = words;
            let mut shuffled = tokens.clone();
            shuffled.reverse();
            shuffled.rotate_left(seed as usize % tokens.len());
            let emb = HashedNgramEmbedder::default();
            prop_assert_eq!(emb.unigram_counts(&tokens), emb.unigram_counts(&shuffled));
        }
    }

    #[test]
    fn embedder_is_deterministic() {
        let emb = HashedNgramEmbedder::default();
        let s = sentence(&["No", "adverse", "events", "."]);
        assert_eq!(emb.embed(&s).unwrap(), emb.embed(&s).unwrap());
        assert_eq!(emb.embed(&s).unwrap().dimension(), DEFAULT_DIMENSION);
        assert!((emb.embed(&s).unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn punctuation_only_sentence_embeds_to_zero() {
        let emb = HashedNgramEmbedder::default();
        let v = emb.embed(&sentence(&["(", ".", ")"])).unwrap();
        assert!(v.is_zero());
    }

    #[test]
    fn bigrams_make_order_matter() {
        let emb = HashedNgramEmbedder::default();
        let a = emb.embed(&sentence(&["pain", "reduced", "significantly"])).unwrap();
        let b = emb.embed(&sentence(&["significantly", "reduced", "pain"])).unwrap();
        assert_ne!(a, b);
        assert!(cosine(&a, &b).unwrap() > 0.5);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(HashedNgramEmbedder::new(0, 1).is_err());
    }

    #[test]
    fn precomputed_tables() {
        let dir = tempfile::tempdir().unwrap();

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "{\"dimension\": 4}\n").unwrap();
        let table = load_precomputed(&empty).unwrap();
        assert_eq!(table.dimension(), 4);
        assert!(matches!(
            table.embed(&sentence(&["x"])),
            Err(EmbeddingError::Missing(_))
        ));

        let mixed = dir.path().join("mixed.jsonl");
        std::fs::write(
            &mixed,
            "{\"dimension\": 2}\n{\"sentence_id\":\"a\",\"vector\":[1,0]}\n{\"sentence_id\":\"b\",\"vector\":[1,0,0]}\n",
        )
        .unwrap();
        assert!(matches!(
            load_precomputed(&mixed),
            Err(EmbeddingError::Malformed { line: 3, .. })
        ));

        let headerless = dir.path().join("none.jsonl");
        std::fs::write(&headerless, "").unwrap();
        assert!(load_precomputed(&headerless).is_err());

        let big = dir.path().join("big.jsonl");
        let emb = HashedNgramEmbedder::new(700, 7).unwrap();
        let sentences: Vec<Sentence> = (0..1636)
            .map(|i| {
                Sentence::new(format!("t:{i}"), vec![format!("w{i}"), "x".into()]).unwrap()
            })
            .collect();
        assert_eq!(write_table(&big, &emb, &sentences).unwrap(), 1636);
        let table = load_precomputed(&big).unwrap();
        assert_eq!(table.dimension(), 700);
        assert_eq!(table.len(), 1636);
        assert_eq!(table.embed(&sentences[5]).unwrap(), emb.embed(&sentences[5]).unwrap());
    }
}
