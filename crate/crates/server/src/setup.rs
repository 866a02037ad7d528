//! Everything needed to rebuild a study from scratch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use spanwork_core::corpus::Sentence;
use spanwork_core::embedding::{EmbeddingError, ProviderSpec};
use spanwork_core::retrieval::{ExampleIndex, RetrievalError};
use spanwork_core::study::{create_study, ExpertCorpus, Study, StudyConfig, StudyError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("embedding provider: {0}")]
    Provider(#[from] EmbeddingError),
    #[error("example index: {0}")]
    Index(#[from] RetrievalError),
    #[error(transparent)]
    Study(#[from] StudyError),
}

/// Payload of the first log event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySetup {
    pub config: StudyConfig,
    pub corpus: ExpertCorpus,
    #[serde(default)]
    pub unlabeled: Vec<Sentence>,
    #[serde(default)]
    pub provider: ProviderSpec,
}

impl StudySetup {
    pub fn build(&self) -> Result<Study, SetupError> {
        let provider = self.provider.build()?;
        let index = ExampleIndex::build(&self.corpus.train, provider, &self.corpus.gold)?;
        Ok(create_study(
            &self.corpus,
            self.unlabeled.clone(),
            self.config.clone(),
            Arc::new(index),
        )?)
    }
}
