//! Crowdsourced span annotation with dynamic expert examples.
//!
//! Workers annotating a sentence are shown the `k` expert-labeled training
//! sentences most similar to it. This crate holds the study logic; the
//! `spanwork` crate wraps it in a persistent HTTP service and a CLI.

pub mod aggregation;
pub mod agreement;
pub mod corpus;
pub mod embedding;
pub mod retrieval;
pub mod simulator;
pub mod study;

pub use aggregation::{aggregate, dawid_skene, majority_vote, AggregationMethod, LabelMatrix, SampleSize};
pub use agreement::{cohens_kappa, evaluate_subsampled, evaluate_workers, feedback_conditioned_agreement};
pub use corpus::{Document, GoldLabels, Sentence, Span, Subtask, TokenLabelVector};
pub use embedding::{cosine, EmbeddingProvider, HashedNgramEmbedder, ProviderSpec};
pub use retrieval::{DynamicExample, ExampleIndex};
pub use study::{AnnotationRecord, Study, StudyConfig, StudyEvent};
