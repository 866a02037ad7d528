//! Hashed n-gram embeddings frozen from an independent FNV-1a implementation.

use approx::assert_abs_diff_eq;
use serde::Deserialize;
use spanwork_core::corpus::Sentence;
use spanwork_core::embedding::{EmbeddingProvider, HashedNgramEmbedder, DEFAULT_DIMENSION, DEFAULT_HASH_SEED};
use std::collections::BTreeMap;

#[derive(Deserialize)]
struct Case {
    tokens: Vec<String>,
    dimension: usize,
    seed: u64,
    nonzero: BTreeMap<usize, f64>,
}

fn cases() -> Vec<Case> {
    serde_json::from_str(include_str!("data/embedding_golden.json")).unwrap()
}

#[test]
fn embeddings_match_frozen_vectors() {
    for case in cases() {
        let embedder = HashedNgramEmbedder::new(case.dimension, case.seed).unwrap();
        let sentence = Sentence::new("golden", case.tokens.clone()).unwrap();
        let v = embedder.embed(&sentence).unwrap();
        assert_eq!(v.dimension(), case.dimension);
        for (i, &x) in v.values().iter().enumerate() {
            let want = case.nonzero.get(&i).copied().unwrap_or(0.0);
            assert_abs_diff_eq!(x, want, epsilon = 1e-12);
        }
    }
}

#[test]
fn first_case_uses_default_parameters() {
    let case = &cases()[0];
    assert_eq!(case.dimension, DEFAULT_DIMENSION);
    assert_eq!(case.seed, DEFAULT_HASH_SEED);
    let v = HashedNgramEmbedder::default().embed_tokens(&case.tokens);
    let nonzero: Vec<usize> = (0..v.dimension()).filter(|&i| v.values()[i] != 0.0).collect();
    assert_eq!(nonzero, case.nonzero.keys().copied().collect::<Vec<_>>());
}
