//! Token-level truth inference over redundant annotations.
//!
//! Both aggregators are binary (inside/outside a span) and run on one
//! sub-task at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Subtask, TokenLabelVector};
use crate::study::AnnotationRecord;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("label matrix has no rows")]
    EmptyMatrix,
    #[error("token {token} of sentence {sentence_id:?} has no votes")]
    NoVotes { sentence_id: String, token: usize },
    #[error("annotator {0:?} has no votes")]
    AnnotatorWithoutVotes(String),
    #[error("annotator index {0} out of range")]
    UnknownAnnotator(usize),
    #[error("annotator {annotator:?} labeled sentence {sentence_id:?} more than once")]
    DuplicateAnnotation {
        annotator: String,
        sentence_id: String,
    },
    #[error("annotation of {sentence_id:?} has {got} labels, expected {expected}")]
    LengthMismatch {
        sentence_id: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown sentence {0:?}")]
    UnknownSentence(String),
    #[error("invalid record for {sentence_id:?}: {source}")]
    InvalidRecord {
        sentence_id: String,
        source: CorpusError,
    },
    #[error("unknown aggregation method {0:?}")]
    UnknownMethod(String),
    #[error("invalid sample size {0:?}")]
    InvalidSampleSize(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationMethod {
    #[serde(rename = "MV")]
    MajorityVote,
    #[serde(rename = "DS")]
    DawidSkene,
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMethod::MajorityVote => "MV",
            AggregationMethod::DawidSkene => "DS",
        })
    }
}

impl FromStr for AggregationMethod {
    type Err = AggregationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mv" | "majority" => Ok(AggregationMethod::MajorityVote),
            "ds" | "dawid-skene" => Ok(AggregationMethod::DawidSkene),
            _ => Err(AggregationError::UnknownMethod(s.to_string())),
        }
    }
}

/// Number of annotations drawn per task instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SampleSize {
    Count(usize),
    All,
}

impl fmt::Display for SampleSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSize::Count(n) => write!(f, "{n}"),
            SampleSize::All => f.write_str("ALL"),
        }
    }
}

impl FromStr for SampleSize {
    type Err = AggregationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SampleSize::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(SampleSize::Count(n)),
            _ => Err(AggregationError::InvalidSampleSize(s.to_string())),
        }
    }
}

impl From<SampleSize> for String {
    fn from(n: SampleSize) -> String {
        n.to_string()
    }
}

impl TryFrom<String> for SampleSize {
    type Error = AggregationError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// One annotator's labels for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub annotator: usize,
    pub labels: Vec<bool>,
}

/// All annotations of one (sentence, sub-task).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub sentence_id: String,
    pub token_count: usize,
    pub annotations: Vec<Annotation>,
}

/// Token x annotator matrix of binary labels. Absence is recorded per
/// sentence: an annotator either labeled every token of a sentence or none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    subtask: Subtask,
    annotators: Vec<String>,
    instances: Vec<TaskInstance>,
}

impl LabelMatrix {
    pub fn new(
        subtask: Subtask,
        annotators: Vec<String>,
        mut instances: Vec<TaskInstance>,
    ) -> Result<Self, AggregationError> {
        for inst in &mut instances {
            let mut seen = BTreeSet::new();
            for a in &inst.annotations {
                let name = annotators
                    .get(a.annotator)
                    .ok_or(AggregationError::UnknownAnnotator(a.annotator))?;
                if !seen.insert(a.annotator) {
                    return Err(AggregationError::DuplicateAnnotation {
                        annotator: name.clone(),
                        sentence_id: inst.sentence_id.clone(),
                    });
                }
                if a.labels.len() != inst.token_count {
                    return Err(AggregationError::LengthMismatch {
                        sentence_id: inst.sentence_id.clone(),
                        expected: inst.token_count,
                        got: a.labels.len(),
                    });
                }
            }
            inst.annotations.sort_by_key(|a| a.annotator);
        }
        Ok(LabelMatrix {
            subtask,
            annotators,
            instances,
        })
    }

    /// Builds the matrix for `subtask` from annotation records; `token_count`
    /// resolves sentence lengths. Instances are ordered by sentence id and
    /// annotators by worker id.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a AnnotationRecord>,
        subtask: Subtask,
        token_count: impl Fn(&str) -> Option<usize>,
    ) -> Result<Self, AggregationError> {
        let records: Vec<&AnnotationRecord> =
            records.into_iter().filter(|r| r.subtask == subtask).collect();
        let annotators: Vec<String> = records
            .iter()
            .map(|r| r.worker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut by_sentence: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
        for r in records {
            let len = token_count(&r.sentence_id)
                .ok_or_else(|| AggregationError::UnknownSentence(r.sentence_id.clone()))?;
            let v = TokenLabelVector::from_spans(r.sentence_id.clone(), subtask, len, &r.spans)
                .map_err(|source| AggregationError::InvalidRecord {
                    sentence_id: r.sentence_id.clone(),
                    source,
                })?;
            let annotator = annotators
                .binary_search(&r.worker_id)
                .expect("annotator collected above");
            by_sentence.entry(&r.sentence_id).or_default().push(Annotation {
                annotator,
                labels: v.labels,
            });
        }
        let instances = by_sentence
            .into_iter()
            .map(|(id, annotations)| TaskInstance {
                sentence_id: id.to_string(),
                token_count: annotations[0].labels.len(),
                annotations,
            })
            .collect();
        LabelMatrix::new(subtask, annotators, instances)
    }

    pub fn subtask(&self) -> Subtask {
        self.subtask
    }

    pub fn annotators(&self) -> &[String] {
        &self.annotators
    }

    pub fn instances(&self) -> &[TaskInstance] {
        &self.instances
    }

    pub fn row_count(&self) -> usize {
        self.instances.iter().map(|i| i.token_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.row_count() == 0
    }

    /// Drops annotators without any remaining vote and reindexes the rest.
    fn prune_annotators(self) -> Self {
        let used: BTreeSet<usize> = self
            .instances
            .iter()
            .flat_map(|i| i.annotations.iter().map(|a| a.annotator))
            .collect();
        if used.len() == self.annotators.len() {
            return self;
        }
        let remap: BTreeMap<usize, usize> =
            used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let annotators = used.iter().map(|&i| self.annotators[i].clone()).collect();
        let instances = self
            .instances
            .into_iter()
            .map(|mut inst| {
                for a in &mut inst.annotations {
                    a.annotator = remap[&a.annotator];
                }
                inst
            })
            .collect();
        LabelMatrix {
            subtask: self.subtask,
            annotators,
            instances,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedLabels {
    pub method: AggregationMethod,
    pub subtask: Subtask,
    /// One vector per task instance, in matrix order.
    pub vectors: Vec<TokenLabelVector>,
    /// Annotations aggregated per task instance.
    pub n_used: Vec<usize>,
}

/// One line of the aggregated output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedLine {
    pub sentence_id: String,
    pub subtask: Subtask,
    pub labels: String,
    pub method: AggregationMethod,
    pub n: usize,
}

impl AggregatedLabels {
    pub fn lines(&self) -> Vec<AggregatedLine> {
        self.vectors
            .iter()
            .zip(&self.n_used)
            .map(|(v, &n)| AggregatedLine {
                sentence_id: v.sentence_id.clone(),
                subtask: self.subtask,
                labels: v.to_bit_string(),
                method: self.method,
                n,
            })
            .collect()
    }
}

fn check_votes(matrix: &LabelMatrix) -> Result<(), AggregationError> {
    if matrix.is_empty() {
        return Err(AggregationError::EmptyMatrix);
    }
    for inst in &matrix.instances {
        if inst.annotations.is_empty() && inst.token_count > 0 {
            return Err(AggregationError::NoVotes {
                sentence_id: inst.sentence_id.clone(),
                token: 0,
            });
        }
    }
    Ok(())
}

/// A token is labeled 1 iff strictly more than half of its votes are 1.
pub fn majority_vote(matrix: &LabelMatrix) -> Result<AggregatedLabels, AggregationError> {
    check_votes(matrix)?;
    let vectors = matrix
        .instances
        .iter()
        .map(|inst| {
            let n = inst.annotations.len();
            let labels = (0..inst.token_count)
                .map(|t| 2 * inst.annotations.iter().filter(|a| a.labels[t]).count() > n)
                .collect();
            TokenLabelVector {
                sentence_id: inst.sentence_id.clone(),
                subtask: matrix.subtask,
                labels,
            }
        })
        .collect();
    Ok(AggregatedLabels {
        method: AggregationMethod::MajorityVote,
        subtask: matrix.subtask,
        vectors,
        n_used: matrix.instances.iter().map(|i| i.annotations.len()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DawidSkeneConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Additive smoothing on every count in the M-step.
    pub smoothing: f64,
}

impl Default for DawidSkeneConfig {
    fn default() -> Self {
        DawidSkeneConfig {
            max_iters: 100,
            tol: 1e-6,
            smoothing: 0.01,
        }
    }
}

/// `confusion[true_class][emitted_label]`.
pub type Confusion = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct DawidSkeneModel {
    /// `[P(class 0), P(class 1)]`.
    pub class_priors: [f64; 2],
    pub confusion: Vec<Confusion>,
    /// Per token row, `P(class 1)`, rows in instance-then-token order.
    pub posteriors: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after each M-step.
    pub log_likelihood: Vec<f64>,
    /// Log-likelihood plus the log of the Dirichlet prior implied by the
    /// smoothing; the quantity EM with smoothing provably never decreases.
    pub objective: Vec<f64>,
}

struct Rows {
    /// Flattened `(annotator, label)` votes.
    votes: Vec<(usize, bool)>,
    /// `offsets[r]..offsets[r + 1]` indexes `votes` for row `r`.
    offsets: Vec<usize>,
}

impl Rows {
    fn new(matrix: &LabelMatrix) -> Self {
        let mut votes = Vec::new();
        let mut offsets = vec![0];
        for inst in &matrix.instances {
            for t in 0..inst.token_count {
                votes.extend(inst.annotations.iter().map(|a| (a.annotator, a.labels[t])));
                offsets.push(votes.len());
            }
        }
        Rows { votes, offsets }
    }

    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, r: usize) -> &[(usize, bool)] {
        &self.votes[self.offsets[r]..self.offsets[r + 1]]
    }
}

fn m_step(
    rows: &Rows,
    posteriors: &[f64],
    annotators: usize,
    alpha: f64,
) -> ([f64; 2], Vec<Confusion>) {
    let n = posteriors.len() as f64;
    let ones: f64 = posteriors.iter().sum();
    let p1 = (ones + alpha) / (n + 2.0 * alpha);
    let priors = [1.0 - p1, p1];
    // counts[j][c][l]
    let mut counts = vec![[[0.0f64; 2]; 2]; annotators];
    for r in 0..rows.len() {
        let t1 = posteriors[r];
        let t = [1.0 - t1, t1];
        for &(j, label) in rows.row(r) {
            let l = usize::from(label);
            counts[j][0][l] += t[0];
            counts[j][1][l] += t[1];
        }
    }
    let confusion = counts
        .iter()
        .map(|c| {
            let mut m = [[0.0; 2]; 2];
            for class in 0..2 {
                let total = c[class][0] + c[class][1] + 2.0 * alpha;
                m[class][1] = (c[class][1] + alpha) / total;
                m[class][0] = 1.0 - m[class][1];
            }
            m
        })
        .collect();
    (priors, confusion)
}

/// Returns the new posteriors and the observed-data log-likelihood.
fn e_step(rows: &Rows, priors: &[f64; 2], confusion: &[Confusion]) -> (Vec<f64>, f64) {
    let mut ll = 0.0;
    let posteriors = (0..rows.len())
        .map(|r| {
            let mut lp = [priors[0].ln(), priors[1].ln()];
            for &(j, label) in rows.row(r) {
                let l = usize::from(label);
                lp[0] += confusion[j][0][l].ln();
                lp[1] += confusion[j][1][l].ln();
            }
            let hi = lp[0].max(lp[1]);
            let z = hi + ((lp[0] - hi).exp() + (lp[1] - hi).exp()).ln();
            ll += z;
            (lp[1] - z).exp()
        })
        .collect();
    (posteriors, ll)
}

fn log_prior(priors: &[f64; 2], confusion: &[Confusion], alpha: f64) -> f64 {
    let mut s = priors[0].ln() + priors[1].ln();
    for m in confusion {
        s += m[0][0].ln() + m[0][1].ln() + m[1][0].ln() + m[1][1].ln();
    }
    alpha * s
}

/// Binary Dawid-Skene EM.
///
/// Posteriors start from the majority vote (exact ties at 0.5). Each
/// iteration re-estimates the class prior and per-annotator confusion
/// matrices with additive smoothing, then recomputes posteriors. Iteration
/// stops once no posterior moves by `tol` or more, or after `max_iters`.
/// A token is labeled 1 iff its posterior exceeds 0.5.
pub fn dawid_skene(
    matrix: &LabelMatrix,
    config: &DawidSkeneConfig,
) -> Result<(DawidSkeneModel, AggregatedLabels), AggregationError> {
    check_votes(matrix)?;
    let mut has_votes = vec![false; matrix.annotators.len()];
    for inst in &matrix.instances {
        if inst.token_count > 0 {
            for a in &inst.annotations {
                has_votes[a.annotator] = true;
            }
        }
    }
    if let Some(j) = has_votes.iter().position(|&v| !v) {
        return Err(AggregationError::AnnotatorWithoutVotes(
            matrix.annotators[j].clone(),
        ));
    }

    let rows = Rows::new(matrix);
    let mut posteriors: Vec<f64> = (0..rows.len())
        .map(|r| {
            let votes = rows.row(r);
            let ones = votes.iter().filter(|v| v.1).count();
            match (2 * ones).cmp(&votes.len()) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => 0.5,
            }
        })
        .collect();

    let alpha = config.smoothing;
    let mut priors = [0.5, 0.5];
    let mut confusion = Vec::new();
    let mut log_likelihood = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;
    while iterations_run < config.max_iters {
        (priors, confusion) = m_step(&rows, &posteriors, matrix.annotators.len(), alpha);
        let (next, ll) = e_step(&rows, &priors, &confusion);
        iterations_run += 1;
        log_likelihood.push(ll);
        objective.push(ll + log_prior(&priors, &confusion, alpha));
        let delta = posteriors
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        posteriors = next;
        if delta < config.tol {
            converged = true;
            break;
        }
    }

    let mut r = 0;
    let vectors = matrix
        .instances
        .iter()
        .map(|inst| {
            let labels = posteriors[r..r + inst.token_count]
                .iter()
                .map(|&p| p > 0.5)
                .collect();
            r += inst.token_count;
            TokenLabelVector {
                sentence_id: inst.sentence_id.clone(),
                subtask: matrix.subtask,
                labels,
            }
        })
        .collect();
    let labels = AggregatedLabels {
        method: AggregationMethod::DawidSkene,
        subtask: matrix.subtask,
        vectors,
        n_used: matrix.instances.iter().map(|i| i.annotations.len()).collect(),
    };
    let model = DawidSkeneModel {
        class_priors: priors,
        confusion,
        posteriors,
        iterations_run,
        converged,
        log_likelihood,
        objective,
    };
    Ok((model, labels))
}

pub fn aggregate(
    matrix: &LabelMatrix,
    method: AggregationMethod,
    ds: &DawidSkeneConfig,
) -> Result<AggregatedLabels, AggregationError> {
    match method {
        AggregationMethod::MajorityVote => majority_vote(matrix),
        AggregationMethod::DawidSkene => dawid_skene(matrix, ds).map(|(_, labels)| labels),
    }
}

/// Keeps `min(n, available)` annotations per task instance, drawn uniformly
/// without replacement. Annotators left without any vote are dropped.
pub fn subsample_annotations(matrix: &LabelMatrix, n: SampleSize, seed: u64) -> LabelMatrix {
    let n = match n {
        SampleSize::All => return matrix.clone(),
        SampleSize::Count(n) => n.max(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = matrix
        .instances
        .iter()
        .map(|inst| {
            let available = inst.annotations.len();
            if n >= available {
                return inst.clone();
            }
            let mut keep = sample(&mut rng, available, n).into_vec();
            keep.sort_unstable();
            TaskInstance {
                sentence_id: inst.sentence_id.clone(),
                token_count: inst.token_count,
                annotations: keep.into_iter().map(|i| inst.annotations[i].clone()).collect(),
            }
        })
        .collect();
    LabelMatrix {
        subtask: matrix.subtask,
        annotators: matrix.annotators.clone(),
        instances,
    }
    .prune_annotators()
}
