//! Study lifecycle: expert split, test injection, worker qualification and
//! redundancy-capped HIT assignment.
//!
//! Every mutation is expressed as a [`StudyEvent`]. The `plan_*` methods
//! validate a request against the current state and return the event that
//! would carry it out without changing anything; [`Study::apply`] performs
//! the change. A persistence layer can therefore log an event before it takes
//! effect, and replaying the same events rebuilds the same state.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use chrono::{DateTime, TimeDelta, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{ContingencyTable, KappaReport};
use crate::corpus::{normalize_spans, Document, GoldLabels, Sentence, Span, Subtask, TokenLabelVector};
use crate::retrieval::{DynamicExample, ExampleIndex, RetrievalError};

pub type Timestamp = DateTime<Utc>;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("test document count {requested} out of range for {available} documents")]
    SplitOutOfRange { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("example index does not match the training split: {0}")]
    IndexMismatch(String),
    #[error("sentence {0:?} appears more than once in the annotation set")]
    DuplicateSentence(String),
    #[error("unknown worker {0:?}")]
    UnknownWorker(String),
    #[error("worker {0:?} already registered")]
    DuplicateWorker(String),
    #[error("approval rate {0} outside [0, 1]")]
    InvalidApprovalRate(f64),
    #[error("worker {worker_id:?} is not qualified for sub-task {subtask}")]
    NotQualified { worker_id: String, subtask: Subtask },
    #[error("sub-task {0} is not part of this study")]
    SubtaskNotInStudy(Subtask),
    #[error("unknown HIT {0:?}")]
    UnknownHit(String),
    #[error("HIT {0:?} already exists")]
    DuplicateHit(String),
    #[error("HIT {hit_id:?} is {status:?}")]
    HitNotOpen { hit_id: String, status: HitStatus },
    #[error("HIT {hit_id:?} was issued to another worker")]
    ForeignHit { hit_id: String },
    #[error("HIT {hit_id:?} has not reached its timeout")]
    NotExpired { hit_id: String },
    #[error("record does not match HIT {hit_id:?}: {reason}")]
    RecordMismatch { hit_id: String, reason: String },
    #[error("invalid spans: {0}")]
    InvalidSpans(String),
    #[error("sentence {0:?} is not in the annotation set")]
    UnknownSentence(String),
    #[error("sentence {0:?} has no gold labels")]
    MissingGold(String),
    #[error("assignment rejected: {0}")]
    Ineligible(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub subtasks: Vec<Subtask>,
    /// Dynamic examples per HIT.
    pub k: usize,
    /// Completed annotations wanted per (sentence, sub-task).
    pub redundancy: usize,
    pub min_approval_rate: f64,
    /// Minimum test-run kappa for qualification.
    pub qualification_threshold: f64,
    /// Workers covering less than this fraction of the test set are left out
    /// of per-worker summaries.
    pub worker_filter_fraction: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            subtasks: Subtask::ALL.to_vec(),
            k: 3,
            redundancy: 3,
            min_approval_rate: 0.90,
            qualification_threshold: 0.5,
            worker_filter_fraction: 0.05,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: &str| Err(StudyError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.redundancy == 0 {
            return bad("redundancy must be at least 1");
        }
        if self.subtasks.is_empty() {
            return bad("at least one sub-task is required");
        }
        if self.subtasks.iter().collect::<BTreeSet<_>>().len() != self.subtasks.len() {
            return bad("duplicate sub-task");
        }
        if !(0.0..=1.0).contains(&self.min_approval_rate) {
            return bad("min_approval_rate outside [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.worker_filter_fraction) {
            return bad("worker_filter_fraction outside [0, 1]");
        }
        Ok(())
    }
}

/// The expert-labeled set split at document granularity into a training part
/// (example source) and a test part (injected into the annotation set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCorpus {
    pub train: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub gold: GoldLabels,
    pub train_docs: Vec<String>,
    pub test_docs: Vec<String>,
    pub split_seed: u64,
}

/// Shuffles documents (ordered by id first) with `seed` and assigns the first
/// `test_doc_count` to the test side. Only gold-labeled sentences are kept;
/// documents without any are ignored.
pub fn split_expert_set(
    documents: &[Document],
    gold: &GoldLabels,
    test_doc_count: usize,
    seed: u64,
) -> Result<ExpertCorpus, StudyError> {
    let mut labeled: Vec<(&str, Vec<&Sentence>)> = documents
        .iter()
        .map(|d| {
            (
                d.doc_id.as_str(),
                d.sentences.iter().filter(|s| gold.contains(&s.id)).collect::<Vec<_>>(),
            )
        })
        .filter(|(_, s)| !s.is_empty())
        .collect();
    labeled.sort_by(|a, b| a.0.cmp(b.0));
    if test_doc_count == 0 || test_doc_count >= labeled.len() {
        return Err(StudyError::SplitOutOfRange {
            requested: test_doc_count,
            available: labeled.len(),
        });
    }
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_set: BTreeSet<usize> = order[..test_doc_count].iter().copied().collect();

    let mut corpus = ExpertCorpus {
        train: Vec::new(),
        test: Vec::new(),
        gold: GoldLabels::new(),
        train_docs: Vec::new(),
        test_docs: Vec::new(),
        split_seed: seed,
    };
    for (i, (doc_id, sentences)) in labeled.into_iter().enumerate() {
        let (docs, side) = if test_set.contains(&i) {
            (&mut corpus.test_docs, &mut corpus.test)
        } else {
            (&mut corpus.train_docs, &mut corpus.train)
        };
        docs.push(doc_id.to_string());
        side.extend(sentences.into_iter().cloned());
    }
    corpus.gold = gold.restrict(
        corpus
            .train
            .iter()
            .chain(&corpus.test)
            .map(|s| s.id.as_str()),
    );
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Unlabeled,
    InjectedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub approval_rate: f64,
    pub qualified: BTreeMap<Subtask, bool>,
    pub annotation_count: BTreeMap<Subtask, usize>,
}

impl WorkerProfile {
    pub fn new(worker_id: impl Into<String>, approval_rate: f64) -> Self {
        WorkerProfile {
            worker_id: worker_id.into(),
            approval_rate,
            qualified: BTreeMap::new(),
            annotation_count: BTreeMap::new(),
        }
    }

    pub fn is_qualified(&self, subtask: Subtask) -> bool {
        self.qualified.get(&subtask).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum QualificationStatus {
    Qualified { kappa: f64 },
    BelowThreshold { kappa: f64 },
    LowApprovalRate { kappa: Option<f64> },
    NoTestRun,
}

impl QualificationStatus {
    pub fn qualified(&self) -> bool {
        matches!(self, QualificationStatus::Qualified { .. })
    }

    pub fn kappa(&self) -> Option<f64> {
        match *self {
            QualificationStatus::Qualified { kappa } | QualificationStatus::BelowThreshold { kappa } => {
                Some(kappa)
            }
            QualificationStatus::LowApprovalRate { kappa } => kappa,
            QualificationStatus::NoTestRun => None,
        }
    }
}

/// Decides qualification per configured sub-task from test-run annotations
/// on gold sentences. A worker qualifies when the approval rate reaches
/// `min_approval_rate` and the pooled token-level kappa reaches
/// `qualification_threshold`. Sub-tasks without test-run records keep their
/// previous state and report [`QualificationStatus::NoTestRun`].
pub fn qualify_worker(
    worker: &WorkerProfile,
    testrun: &[AnnotationRecord],
    gold: &GoldLabels,
    config: &StudyConfig,
) -> Result<(WorkerProfile, BTreeMap<Subtask, QualificationStatus>), StudyError> {
    let mut tables: BTreeMap<Subtask, ContingencyTable> = BTreeMap::new();
    for r in testrun {
        let g = gold
            .vector(&r.sentence_id, r.subtask)
            .ok_or_else(|| StudyError::MissingGold(r.sentence_id.clone()))?;
        let v = TokenLabelVector::from_spans(r.sentence_id.clone(), r.subtask, g.len(), &r.spans)
            .map_err(|e| StudyError::InvalidSpans(e.to_string()))?;
        let t = tables.entry(r.subtask).or_default();
        for (&x, &y) in v.labels.iter().zip(&g.labels) {
            t.add(x, y);
        }
    }
    let approval_ok = worker.approval_rate >= config.min_approval_rate;
    let mut updated = worker.clone();
    let mut statuses = BTreeMap::new();
    for &subtask in &config.subtasks {
        let kappa = tables.get(&subtask).and_then(ContingencyTable::report).map(|r: KappaReport| r.kappa);
        let status = match kappa {
            None => QualificationStatus::NoTestRun,
            Some(k) if !approval_ok => QualificationStatus::LowApprovalRate { kappa: Some(k) },
            Some(k) if k >= config.qualification_threshold => QualificationStatus::Qualified { kappa: k },
            Some(k) => QualificationStatus::BelowThreshold { kappa: k },
        };
        if status != QualificationStatus::NoTestRun {
            updated.qualified.insert(subtask, status.qualified());
        }
        statuses.insert(subtask, status);
    }
    Ok((updated, statuses))
}

/// One unit of work as shown to a worker. Carries no gold labels for the
/// sentence under annotation and no provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub hit_id: String,
    pub sentence: Sentence,
    pub subtask: Subtask,
    pub examples: Vec<DynamicExample>,
    pub issued_to: String,
    pub issued_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub hit_id: String,
    pub worker_id: String,
    pub sentence_id: String,
    pub subtask: Subtask,
    pub spans: Vec<Span>,
    pub feedback_useful: bool,
    pub submitted_at: Timestamp,
}

/// What a worker sends for a HIT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub spans: Vec<Span>,
    pub feedback_useful: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HitStatus {
    Open,
    Completed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum StudyEvent {
    WorkerRegistered {
        worker_id: String,
        approval_rate: f64,
        token: String,
    },
    WorkerQualified {
        worker_id: String,
        qualified: BTreeMap<Subtask, bool>,
        kappa: BTreeMap<Subtask, f64>,
    },
    HitIssued {
        hit_id: String,
        worker_id: String,
        sentence_id: String,
        subtask: Subtask,
        at: Timestamp,
    },
    HitExpired {
        hit_id: String,
        at: Timestamp,
    },
    AnnotationSubmitted {
        record: AnnotationRecord,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Slot {
    open: usize,
    completed: usize,
    issued_to: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitState {
    pub hit_id: String,
    pub worker_id: String,
    pub sentence_id: String,
    pub subtask: Subtask,
    pub issued_at: Timestamp,
    pub status: HitStatus,
}

#[derive(Debug, Clone)]
struct Item {
    sentence: Sentence,
    provenance: Provenance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub open: usize,
    pub remaining: usize,
}

/// Everything that changes while a study runs. Two studies with equal state
/// behave identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub workers: BTreeMap<String, WorkerProfile>,
    pub hits: BTreeMap<String, HitState>,
    pub records: Vec<AnnotationRecord>,
    pub slots: BTreeMap<String, (usize, usize, Vec<String>)>,
}

#[derive(Debug, Clone)]
pub struct Study {
    config: StudyConfig,
    index: Arc<ExampleIndex>,
    gold: GoldLabels,
    items: Vec<Item>,
    item_pos: HashMap<String, usize>,
    workers: BTreeMap<String, WorkerProfile>,
    tokens: HashMap<String, String>,
    slots: BTreeMap<Subtask, Vec<Slot>>,
    hits: BTreeMap<String, HitState>,
    records: Vec<AnnotationRecord>,
}

/// Materializes `A = U ∪ E_te` and zeroes every assignment counter.
pub fn create_study(
    corpus: &ExpertCorpus,
    unlabeled: Vec<Sentence>,
    config: StudyConfig,
    index: Arc<ExampleIndex>,
) -> Result<Study, StudyError> {
    config.validate()?;
    let train_ids: BTreeSet<&str> = corpus.train.iter().map(|s| s.id.as_str()).collect();
    let index_ids: BTreeSet<&str> = index.sentence_ids().collect();
    if train_ids != index_ids {
        let missing = train_ids.symmetric_difference(&index_ids).next().copied().unwrap_or("");
        return Err(StudyError::IndexMismatch(format!(
            "{} indexed vs {} training sentences (first difference {missing:?})",
            index_ids.len(),
            train_ids.len()
        )));
    }
    let mut items: Vec<Item> = unlabeled
        .into_iter()
        .map(|sentence| Item {
            sentence,
            provenance: Provenance::Unlabeled,
        })
        .chain(corpus.test.iter().cloned().map(|sentence| Item {
            sentence,
            provenance: Provenance::InjectedTest,
        }))
        .collect();
    items.sort_by(|a, b| a.sentence.id.cmp(&b.sentence.id));
    let mut item_pos = HashMap::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if item_pos.insert(item.sentence.id.clone(), i).is_some() {
            return Err(StudyError::DuplicateSentence(item.sentence.id.clone()));
        }
    }
    let slots = config
        .subtasks
        .iter()
        .map(|&s| (s, vec![Slot::default(); items.len()]))
        .collect();
    Ok(Study {
        config,
        index,
        gold: corpus.gold.clone(),
        items,
        item_pos,
        workers: BTreeMap::new(),
        tokens: HashMap::new(),
        slots,
        hits: BTreeMap::new(),
        records: Vec::new(),
    })
}

impl Study {
    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn index(&self) -> &ExampleIndex {
        &self.index
    }

    pub fn gold(&self) -> &GoldLabels {
        &self.gold
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> impl Iterator<Item = (&Sentence, Provenance)> {
        self.items.iter().map(|i| (&i.sentence, i.provenance))
    }

    pub fn test_sentence_count(&self) -> usize {
        self.items
            .iter()
            .filter(|i| i.provenance == Provenance::InjectedTest)
            .count()
    }

    pub fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.item_pos.get(id).map(|&i| &self.items[i].sentence)
    }

    /// Annotation slots across all configured sub-tasks.
    pub fn total_slots(&self) -> usize {
        self.items.len() * self.config.subtasks.len() * self.config.redundancy
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerProfile> {
        self.workers.get(worker_id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerProfile> {
        self.workers.values()
    }

    /// `(token, worker_id)` pairs.
    pub fn tokens(&self) -> impl Iterator<Item = (&str, &str)> {
        self.tokens.iter().map(|(t, w)| (t.as_str(), w.as_str()))
    }

    pub fn worker_for_token(&self, token: &str) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    pub fn hit_state(&self, hit_id: &str) -> Option<&HitState> {
        self.hits.get(hit_id)
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn progress(&self) -> BTreeMap<Subtask, Progress> {
        self.slots
            .iter()
            .map(|(&s, slots)| {
                let completed: usize = slots.iter().map(|x| x.completed).sum();
                let open: usize = slots.iter().map(|x| x.open).sum();
                let total = slots.len() * self.config.redundancy;
                (
                    s,
                    Progress {
                        completed,
                        open,
                        remaining: total - completed - open,
                    },
                )
            })
            .collect()
    }

    /// True once every (sentence, sub-task) has `redundancy` completed records.
    pub fn is_complete(&self) -> bool {
        self.slots
            .values()
            .all(|v| v.iter().all(|s| s.completed == self.config.redundancy))
    }

    pub fn state(&self) -> StudyState {
        let mut slots = BTreeMap::new();
        for (subtask, v) in &self.slots {
            for (i, slot) in v.iter().enumerate() {
                slots.insert(
                    format!("{}/{}", self.items[i].sentence.id, subtask),
                    (slot.open, slot.completed, slot.issued_to.iter().cloned().collect()),
                );
            }
        }
        StudyState {
            workers: self.workers.clone(),
            hits: self.hits.clone(),
            records: self.records.clone(),
            slots,
        }
    }

    /// Recounts assignments from the HIT table and checks the redundancy cap,
    /// the no-repeat rule and counter consistency.
    pub fn verify_invariants(&self) -> Result<(), String> {
        let mut live: HashMap<(&str, Subtask), (usize, usize)> = HashMap::new();
        let mut pairs = BTreeSet::new();
        for h in self.hits.values() {
            if !pairs.insert((h.worker_id.as_str(), h.sentence_id.as_str(), h.subtask)) {
                return Err(format!(
                    "worker {} holds two HITs for {}/{}",
                    h.worker_id, h.sentence_id, h.subtask
                ));
            }
            let e = live.entry((h.sentence_id.as_str(), h.subtask)).or_default();
            match h.status {
                HitStatus::Open => e.0 += 1,
                HitStatus::Completed => e.1 += 1,
                HitStatus::Expired => {}
            }
        }
        for (&subtask, slots) in &self.slots {
            for (i, slot) in slots.iter().enumerate() {
                let id = self.items[i].sentence.id.as_str();
                let (open, completed) = live.get(&(id, subtask)).copied().unwrap_or_default();
                if (open, completed) != (slot.open, slot.completed) {
                    return Err(format!("counter drift on {id}/{subtask}"));
                }
                if open + completed > self.config.redundancy {
                    return Err(format!(
                        "{id}/{subtask} has {open} open + {completed} completed > {}",
                        self.config.redundancy
                    ));
                }
            }
        }
        let submitted = self.hits.values().filter(|h| h.status == HitStatus::Completed).count();
        if submitted != self.records.len() {
            return Err("record count differs from completed HITs".into());
        }
        Ok(())
    }

    fn check_subtask(&self, subtask: Subtask) -> Result<(), StudyError> {
        if self.slots.contains_key(&subtask) {
            Ok(())
        } else {
            Err(StudyError::SubtaskNotInStudy(subtask))
        }
    }

    fn eligible(&self, worker_id: &str, subtask: Subtask) -> Option<usize> {
        let slots = self.slots.get(&subtask)?;
        slots
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.open + s.completed < self.config.redundancy && !s.issued_to.contains(worker_id)
            })
            .min_by_key(|(i, s)| (s.completed, *i))
            .map(|(i, _)| i)
    }

    pub fn plan_register_worker(
        &self,
        approval_rate: f64,
        token: String,
    ) -> Result<StudyEvent, StudyError> {
        if !(0.0..=1.0).contains(&approval_rate) {
            return Err(StudyError::InvalidApprovalRate(approval_rate));
        }
        Ok(StudyEvent::WorkerRegistered {
            worker_id: format!("w{:04}", self.workers.len() + 1),
            approval_rate,
            token,
        })
    }

    pub fn plan_qualification(
        &self,
        worker_id: &str,
        testrun: &[AnnotationRecord],
    ) -> Result<(StudyEvent, BTreeMap<Subtask, QualificationStatus>), StudyError> {
        let worker = self
            .workers
            .get(worker_id)
            .ok_or_else(|| StudyError::UnknownWorker(worker_id.to_string()))?;
        // Test runs draw on training sentences only; test gold stays hidden.
        let (updated, statuses) = qualify_worker(worker, testrun, self.index.gold(), &self.config)?;
        let kappa = statuses
            .iter()
            .filter_map(|(&s, st)| st.kappa().map(|k| (s, k)))
            .collect();
        Ok((
            StudyEvent::WorkerQualified {
                worker_id: worker_id.to_string(),
                qualified: updated.qualified,
                kappa,
            },
            statuses,
        ))
    }

    /// Picks the eligible sentence with the fewest completed annotations
    /// (ties by sentence id). `Ok(None)` means nothing is left for this worker.
    pub fn plan_next_hit(
        &self,
        worker_id: &str,
        subtask: Subtask,
        at: Timestamp,
    ) -> Result<Option<StudyEvent>, StudyError> {
        self.check_subtask(subtask)?;
        let worker = self
            .workers
            .get(worker_id)
            .ok_or_else(|| StudyError::UnknownWorker(worker_id.to_string()))?;
        if !worker.is_qualified(subtask) {
            return Err(StudyError::NotQualified {
                worker_id: worker_id.to_string(),
                subtask,
            });
        }
        Ok(self.eligible(worker_id, subtask).map(|i| StudyEvent::HitIssued {
            hit_id: format!("hit-{:06}", self.hits.len() + 1),
            worker_id: worker_id.to_string(),
            sentence_id: self.items[i].sentence.id.clone(),
            subtask,
            at,
        }))
    }

    /// Builds the record a worker's submission would produce.
    pub fn plan_submission(
        &self,
        hit_id: &str,
        worker_id: &str,
        submission: Submission,
        at: Timestamp,
    ) -> Result<StudyEvent, StudyError> {
        let hit = self
            .hits
            .get(hit_id)
            .ok_or_else(|| StudyError::UnknownHit(hit_id.to_string()))?;
        let record = AnnotationRecord {
            hit_id: hit_id.to_string(),
            worker_id: worker_id.to_string(),
            sentence_id: hit.sentence_id.clone(),
            subtask: hit.subtask,
            spans: submission.spans,
            feedback_useful: submission.feedback_useful,
            submitted_at: at,
        };
        self.check_record(&record)?;
        Ok(StudyEvent::AnnotationSubmitted { record })
    }

    fn check_record(&self, record: &AnnotationRecord) -> Result<(), StudyError> {
        let hit = self
            .hits
            .get(&record.hit_id)
            .ok_or_else(|| StudyError::UnknownHit(record.hit_id.clone()))?;
        if hit.status != HitStatus::Open {
            return Err(StudyError::HitNotOpen {
                hit_id: hit.hit_id.clone(),
                status: hit.status,
            });
        }
        if hit.worker_id != record.worker_id {
            return Err(StudyError::ForeignHit {
                hit_id: hit.hit_id.clone(),
            });
        }
        if hit.sentence_id != record.sentence_id || hit.subtask != record.subtask {
            return Err(StudyError::RecordMismatch {
                hit_id: hit.hit_id.clone(),
                reason: format!(
                    "HIT is {}/{}, record is {}/{}",
                    hit.sentence_id, hit.subtask, record.sentence_id, record.subtask
                ),
            });
        }
        let len = self.sentence(&record.sentence_id).map(Sentence::len).unwrap_or(0);
        for span in &record.spans {
            span.validate(len)
                .map_err(|e| StudyError::InvalidSpans(e.to_string()))?;
        }
        Ok(())
    }

    /// Expiry is allowed once the HIT has been open for at least `timeout`.
    pub fn plan_expiry(
        &self,
        hit_id: &str,
        timeout: TimeDelta,
        now: Timestamp,
    ) -> Result<StudyEvent, StudyError> {
        let hit = self
            .hits
            .get(hit_id)
            .ok_or_else(|| StudyError::UnknownHit(hit_id.to_string()))?;
        if hit.status != HitStatus::Open {
            return Err(StudyError::HitNotOpen {
                hit_id: hit_id.to_string(),
                status: hit.status,
            });
        }
        if now - hit.issued_at < timeout {
            return Err(StudyError::NotExpired {
                hit_id: hit_id.to_string(),
            });
        }
        Ok(StudyEvent::HitExpired {
            hit_id: hit_id.to_string(),
            at: now,
        })
    }

    /// Open HITs issued at least `timeout` before `now`, oldest first.
    pub fn stale_hits(&self, timeout: TimeDelta, now: Timestamp) -> Vec<String> {
        let mut stale: Vec<&HitState> = self
            .hits
            .values()
            .filter(|h| h.status == HitStatus::Open && now - h.issued_at >= timeout)
            .collect();
        stale.sort_by(|a, b| a.issued_at.cmp(&b.issued_at).then(a.hit_id.cmp(&b.hit_id)));
        stale.into_iter().map(|h| h.hit_id.clone()).collect()
    }

    /// Applies an event. Events are validated again, so a corrupted or
    /// reordered log is rejected instead of producing an inconsistent state.
    pub fn apply(&mut self, event: &StudyEvent) -> Result<(), StudyError> {
        match event {
            StudyEvent::WorkerRegistered {
                worker_id,
                approval_rate,
                token,
            } => {
                if self.workers.contains_key(worker_id) {
                    return Err(StudyError::DuplicateWorker(worker_id.clone()));
                }
                if !(0.0..=1.0).contains(approval_rate) {
                    return Err(StudyError::InvalidApprovalRate(*approval_rate));
                }
                self.workers
                    .insert(worker_id.clone(), WorkerProfile::new(worker_id.clone(), *approval_rate));
                self.tokens.insert(token.clone(), worker_id.clone());
            }
            StudyEvent::WorkerQualified {
                worker_id,
                qualified,
                ..
            } => {
                let worker = self
                    .workers
                    .get_mut(worker_id)
                    .ok_or_else(|| StudyError::UnknownWorker(worker_id.clone()))?;
                worker.qualified = qualified.clone();
            }
            StudyEvent::HitIssued {
                hit_id,
                worker_id,
                sentence_id,
                subtask,
                at,
            } => {
                if self.hits.contains_key(hit_id) {
                    return Err(StudyError::DuplicateHit(hit_id.clone()));
                }
                self.check_subtask(*subtask)?;
                let worker = self
                    .workers
                    .get(worker_id)
                    .ok_or_else(|| StudyError::UnknownWorker(worker_id.clone()))?;
                if !worker.is_qualified(*subtask) {
                    return Err(StudyError::NotQualified {
                        worker_id: worker_id.clone(),
                        subtask: *subtask,
                    });
                }
                let i = *self
                    .item_pos
                    .get(sentence_id)
                    .ok_or_else(|| StudyError::UnknownSentence(sentence_id.clone()))?;
                let redundancy = self.config.redundancy;
                let slot = &mut self.slots.get_mut(subtask).expect("checked")[i];
                if slot.open + slot.completed >= redundancy {
                    return Err(StudyError::Ineligible(format!(
                        "{sentence_id}/{subtask} is at capacity"
                    )));
                }
                if !slot.issued_to.insert(worker_id.clone()) {
                    return Err(StudyError::Ineligible(format!(
                        "{sentence_id}/{subtask} was already issued to {worker_id}"
                    )));
                }
                slot.open += 1;
                self.hits.insert(
                    hit_id.clone(),
                    HitState {
                        hit_id: hit_id.clone(),
                        worker_id: worker_id.clone(),
                        sentence_id: sentence_id.clone(),
                        subtask: *subtask,
                        issued_at: *at,
                        status: HitStatus::Open,
                    },
                );
            }
            StudyEvent::HitExpired { hit_id, .. } => {
                let hit = self
                    .hits
                    .get_mut(hit_id)
                    .ok_or_else(|| StudyError::UnknownHit(hit_id.clone()))?;
                if hit.status != HitStatus::Open {
                    return Err(StudyError::HitNotOpen {
                        hit_id: hit_id.clone(),
                        status: hit.status,
                    });
                }
                hit.status = HitStatus::Expired;
                let i = self.item_pos[&hit.sentence_id];
                self.slots.get_mut(&hit.subtask).expect("checked at issue")[i].open -= 1;
            }
            StudyEvent::AnnotationSubmitted { record } => {
                self.check_record(record)?;
                let mut record = record.clone();
                record.spans = normalize_spans(&record.spans);
                let hit = self.hits.get_mut(&record.hit_id).expect("checked");
                hit.status = HitStatus::Completed;
                let i = self.item_pos[&record.sentence_id];
                let slot = &mut self.slots.get_mut(&record.subtask).expect("checked")[i];
                slot.open -= 1;
                slot.completed += 1;
                *self
                    .workers
                    .get_mut(&record.worker_id)
                    .expect("HIT holder is registered")
                    .annotation_count
                    .entry(record.subtask)
                    .or_default() += 1;
                self.records.push(record);
            }
        }
        Ok(())
    }

    /// The worker-facing document for an issued HIT, with dynamic examples.
    pub fn hit_document(&self, hit_id: &str) -> Result<Hit, StudyError> {
        let h = self
            .hits
            .get(hit_id)
            .ok_or_else(|| StudyError::UnknownHit(hit_id.to_string()))?;
        self.build_hit(&h.hit_id, &h.worker_id, &h.sentence_id, h.subtask, h.issued_at)
    }

    fn build_hit(
        &self,
        hit_id: &str,
        worker_id: &str,
        sentence_id: &str,
        subtask: Subtask,
        issued_at: Timestamp,
    ) -> Result<Hit, StudyError> {
        let sentence = self
            .sentence(sentence_id)
            .ok_or_else(|| StudyError::UnknownSentence(sentence_id.to_string()))?;
        let examples = self.index.query_top_k(sentence, subtask, self.config.k)?;
        Ok(Hit {
            hit_id: hit_id.to_string(),
            sentence: sentence.clone(),
            subtask,
            examples,
            issued_to: worker_id.to_string(),
            issued_at,
        })
    }

    /// The document a planned `HitIssued` event will hand out.
    pub fn preview_hit(&self, event: &StudyEvent) -> Result<Hit, StudyError> {
        match event {
            StudyEvent::HitIssued {
                hit_id,
                worker_id,
                sentence_id,
                subtask,
                at,
            } => self.build_hit(hit_id, worker_id, sentence_id, *subtask, *at),
            _ => Err(StudyError::Ineligible("not a HIT issue".into())),
        }
    }

    pub fn register_worker(
        &mut self,
        approval_rate: f64,
        token: impl Into<String>,
    ) -> Result<WorkerProfile, StudyError> {
        let event = self.plan_register_worker(approval_rate, token.into())?;
        self.apply(&event)?;
        let StudyEvent::WorkerRegistered { worker_id, .. } = event else {
            unreachable!()
        };
        Ok(self.workers[&worker_id].clone())
    }

    pub fn qualify(
        &mut self,
        worker_id: &str,
        testrun: &[AnnotationRecord],
    ) -> Result<BTreeMap<Subtask, QualificationStatus>, StudyError> {
        let (event, statuses) = self.plan_qualification(worker_id, testrun)?;
        self.apply(&event)?;
        Ok(statuses)
    }

    pub fn next_hit(
        &mut self,
        worker_id: &str,
        subtask: Subtask,
        at: Timestamp,
    ) -> Result<Option<Hit>, StudyError> {
        let Some(event) = self.plan_next_hit(worker_id, subtask, at)? else {
            return Ok(None);
        };
        // Build the document first so a retrieval failure leaves no open HIT.
        let hit = self.preview_hit(&event)?;
        self.apply(&event)?;
        Ok(Some(hit))
    }

    pub fn submit_annotation(&mut self, record: AnnotationRecord) -> Result<(), StudyError> {
        self.apply(&StudyEvent::AnnotationSubmitted { record })
    }

    pub fn expire_hit(
        &mut self,
        hit_id: &str,
        timeout: TimeDelta,
        now: Timestamp,
    ) -> Result<(), StudyError> {
        let event = self.plan_expiry(hit_id, timeout, now)?;
        self.apply(&event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedNgramEmbedder;
    use chrono::TimeZone;

    fn t(s: i64) -> Timestamp {
        Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap()
    }

    fn doc(id: &str, sentences: &[&str]) -> Document {
        Document::from_tokens(
            id,
            sentences
                .iter()
                .map(|s| s.split(' ').map(String::from).collect())
                .collect(),
        )
        .unwrap()
    }

    fn labeled(docs: &[Document]) -> GoldLabels {
        let mut gold = GoldLabels::new();
        for d in docs {
            for s in &d.sentences {
                gold.insert(s, Subtask::P, &[Span::new(0, 1)]).unwrap();
            }
        }
        gold
    }

    fn fixture(test_docs: usize, config: StudyConfig) -> Study {
        let docs: Vec<Document> = (0..6)
            .map(|i| {
                doc(
                    &format!("d{i}"),
                    &["patients with pain received drug", "pain was reduced", "no adverse events"],
                )
            })
            .collect();
        let gold = labeled(&docs);
        let corpus = split_expert_set(&docs, &gold, test_docs, 11).unwrap();
        let index = ExampleIndex::build(
            &corpus.train,
            Arc::new(HashedNgramEmbedder::default()),
            &corpus.gold,
        )
        .unwrap();
        create_study(&corpus, vec![], config, Arc::new(index)).unwrap()
    }

    fn qualified_worker(study: &mut Study, name: &str) -> String {
        let w = study.register_worker(0.95, format!("tok-{name}")).unwrap();
        let event = StudyEvent::WorkerQualified {
            worker_id: w.worker_id.clone(),
            qualified: Subtask::ALL.iter().map(|&s| (s, true)).collect(),
            kappa: BTreeMap::new(),
        };
        study.apply(&event).unwrap();
        w.worker_id
    }

    #[test]
    fn split_sizes_and_determinism() {
        let docs: Vec<Document> = (0..191).map(|i| doc(&format!("doc{i:03}"), &["a b", "c d"])).collect();
        let gold = labeled(&docs);
        let a = split_expert_set(&docs, &gold, 41, 7).unwrap();
        assert_eq!(a.test_docs.len(), 41);
        assert_eq!(a.train_docs.len(), 150);
        assert_eq!(a.test.len(), 82);
        let b = split_expert_set(&docs, &gold, 41, 7).unwrap();
        assert_eq!(a, b);
        let c = split_expert_set(&docs, &gold, 41, 8).unwrap();
        assert_ne!(a.test_docs, c.test_docs);
        let train: BTreeSet<_> = a.train.iter().map(|s| &s.id).collect();
        assert!(a.test.iter().all(|s| !train.contains(&s.id)));
        for d in &a.test_docs {
            assert!(a.test.iter().any(|s| s.id.starts_with(&format!("{d}:"))));
        }
        assert!(matches!(
            split_expert_set(&docs, &gold, 191, 7),
            Err(StudyError::SplitOutOfRange { .. })
        ));
        assert!(split_expert_set(&docs, &gold, 0, 7).is_err());
    }

    #[test]
    fn slot_counts() {
        let study = fixture(2, StudyConfig::default());
        assert_eq!(study.item_count(), 6);
        assert_eq!(study.total_slots(), 6 * 3 * 3);
        let single = fixture(
            1,
            StudyConfig {
                subtasks: vec![Subtask::O],
                redundancy: 1,
                ..StudyConfig::default()
            },
        );
        assert_eq!(single.total_slots(), 3);
    }

    #[test]
    fn hit_carries_examples() {
        let mut study = fixture(
            5,
            StudyConfig {
                k: 10,
                ..StudyConfig::default()
            },
        );
        let w = qualified_worker(&mut study, "a");
        let hit = study.next_hit(&w, Subtask::P, t(0)).unwrap().unwrap();
        // Only one training document of three sentences remains.
        assert_eq!(hit.examples.len(), 3);
        let json = serde_json::to_string(&hit).unwrap();
        assert!(!json.contains("injected"));
        assert!(!json.contains("provenance"));
    }

    #[test]
    fn unqualified_worker_rejected() {
        let mut study = fixture(2, StudyConfig::default());
        let w = study.register_worker(0.99, "t").unwrap();
        assert!(matches!(
            study.next_hit(&w.worker_id, Subtask::P, t(0)),
            Err(StudyError::NotQualified { .. })
        ));
        assert!(matches!(
            study.next_hit("nobody", Subtask::P, t(0)),
            Err(StudyError::UnknownWorker(_))
        ));
    }

    #[test]
    fn worker_exhaustion_and_redundancy_cap() {
        let mut study = fixture(2, StudyConfig::default());
        let workers: Vec<String> = (0..4).map(|i| qualified_worker(&mut study, &i.to_string())).collect();
        let mut per_sentence: BTreeMap<String, usize> = BTreeMap::new();
        // Worker 0 takes every sentence once, then is exhausted.
        for i in 0..6 {
            let hit = study.next_hit(&workers[0], Subtask::I, t(i)).unwrap().unwrap();
            *per_sentence.entry(hit.sentence.id.clone()).or_default() += 1;
            study
                .submit_annotation(AnnotationRecord {
                    hit_id: hit.hit_id,
                    worker_id: workers[0].clone(),
                    sentence_id: hit.sentence.id,
                    subtask: Subtask::I,
                    spans: vec![],
                    feedback_useful: true,
                    submitted_at: t(i),
                })
                .unwrap();
        }
        assert!(study.next_hit(&workers[0], Subtask::I, t(10)).unwrap().is_none());
        for w in &workers[1..] {
            while let Some(hit) = study.next_hit(w, Subtask::I, t(20)).unwrap() {
                study
                    .apply(&study.plan_submission(&hit.hit_id, w, Submission { spans: vec![], feedback_useful: false }, t(21)).unwrap())
                    .unwrap();
            }
        }
        // Three completed per sentence: the fourth worker got nothing.
        assert_eq!(study.workers().find(|p| p.worker_id == workers[3]).unwrap().annotation_count.get(&Subtask::I), None);
        assert_eq!(study.progress()[&Subtask::I].completed, 18);
        assert_eq!(study.progress()[&Subtask::I].remaining, 0);
        study.verify_invariants().unwrap();
    }

    #[test]
    fn fewest_completed_first() {
        let mut study = fixture(2, StudyConfig::default());
        let a = qualified_worker(&mut study, "a");
        let b = qualified_worker(&mut study, "b");
        let first = study.next_hit(&a, Subtask::P, t(0)).unwrap().unwrap();
        study
            .apply(&study.plan_submission(&first.hit_id, &a, Submission { spans: vec![], feedback_useful: true }, t(1)).unwrap())
            .unwrap();
        let second = study.next_hit(&b, Subtask::P, t(2)).unwrap().unwrap();
        assert_ne!(first.sentence.id, second.sentence.id);
        assert!(second.sentence.id > first.sentence.id);
    }

    #[test]
    fn submission_errors() {
        let mut study = fixture(2, StudyConfig::default());
        let a = qualified_worker(&mut study, "a");
        let b = qualified_worker(&mut study, "b");
        let hit = study.next_hit(&a, Subtask::O, t(0)).unwrap().unwrap();
        let len = hit.sentence.len();
        let ok = Submission {
            spans: vec![Span::new(0, 1)],
            feedback_useful: true,
        };
        assert!(matches!(
            study.plan_submission(&hit.hit_id, &b, ok.clone(), t(1)),
            Err(StudyError::ForeignHit { .. })
        ));
        assert!(matches!(
            study.plan_submission(
                &hit.hit_id,
                &a,
                Submission {
                    spans: vec![Span::new(0, len + 1)],
                    feedback_useful: true
                },
                t(1)
            ),
            Err(StudyError::InvalidSpans(_))
        ));
        assert!(matches!(
            study.plan_submission("hit-999999", &a, ok.clone(), t(1)),
            Err(StudyError::UnknownHit(_))
        ));
        let event = study.plan_submission(&hit.hit_id, &a, ok.clone(), t(1)).unwrap();
        let before = study.progress()[&Subtask::O];
        study.apply(&event).unwrap();
        let after = study.progress()[&Subtask::O];
        assert_eq!(before.open + before.completed, after.open + after.completed);
        assert!(matches!(study.apply(&event), Err(StudyError::HitNotOpen { .. })));
        assert_eq!(study.records().len(), 1);
        assert!(study.records()[0].feedback_useful);
    }

    #[test]
    fn expiry_round_trip() {
        let mut study = fixture(
            1,
            StudyConfig {
                redundancy: 1,
                ..StudyConfig::default()
            },
        );
        let a = qualified_worker(&mut study, "a");
        let b = qualified_worker(&mut study, "b");
        let before = study.progress();
        let hit = study.next_hit(&a, Subtask::P, t(0)).unwrap().unwrap();
        let timeout = TimeDelta::seconds(60);
        assert!(matches!(
            study.expire_hit(&hit.hit_id, timeout, t(30)),
            Err(StudyError::NotExpired { .. })
        ));
        assert_eq!(study.stale_hits(timeout, t(60)), vec![hit.hit_id.clone()]);
        study.expire_hit(&hit.hit_id, timeout, t(61)).unwrap();
        assert_eq!(study.progress(), before);
        assert!(matches!(
            study.expire_hit(&hit.hit_id, timeout, t(62)),
            Err(StudyError::HitNotOpen { .. })
        ));
        // Another worker may receive the same sentence; the original never again.
        let again = study.next_hit(&b, Subtask::P, t(70)).unwrap().unwrap();
        assert_eq!(again.sentence.id, hit.sentence.id);
        let next_for_a = study.next_hit(&a, Subtask::P, t(71)).unwrap().unwrap();
        assert_ne!(next_for_a.sentence.id, hit.sentence.id);
        study.verify_invariants().unwrap();
    }

    #[test]
    fn qualification_rules() {
        let config = StudyConfig::default();
        let mut gold = GoldLabels::new();
        let s = Sentence::new("g:0", vec!["w".into(); 10]).unwrap();
        gold.insert(&s, Subtask::P, &[Span::new(2, 5)]).unwrap();
        let rec = |spans: Vec<Span>| AnnotationRecord {
            hit_id: "testrun".into(),
            worker_id: "w".into(),
            sentence_id: "g:0".into(),
            subtask: Subtask::P,
            spans,
            feedback_useful: true,
            submitted_at: t(0),
        };

        let good = WorkerProfile::new("w", 0.95);
        let (p, st) = qualify_worker(&good, &[rec(vec![Span::new(2, 5)])], &gold, &config).unwrap();
        assert!(p.is_qualified(Subtask::P));
        assert_eq!(st[&Subtask::P], QualificationStatus::Qualified { kappa: 1.0 });
        assert_eq!(st[&Subtask::I], QualificationStatus::NoTestRun);
        assert!(!p.is_qualified(Subtask::I));

        // One token off: p_o = 0.9, kappa = 0.8.
        let (p, st) = qualify_worker(&good, &[rec(vec![Span::new(2, 6)])], &gold, &config).unwrap();
        assert!(p.is_qualified(Subtask::P));
        assert!((st[&Subtask::P].kappa().unwrap() - 0.7826).abs() < 1e-3);

        let low = WorkerProfile::new("w", 0.85);
        let (p, st) = qualify_worker(&low, &[rec(vec![Span::new(2, 5)])], &gold, &config).unwrap();
        assert!(!p.is_qualified(Subtask::P));
        assert!(matches!(st[&Subtask::P], QualificationStatus::LowApprovalRate { .. }));

        let (p, st) = qualify_worker(&good, &[rec(vec![Span::new(7, 10)])], &gold, &config).unwrap();
        assert!(!p.is_qualified(Subtask::P));
        assert!(matches!(st[&Subtask::P], QualificationStatus::BelowThreshold { .. }));

        let (p, st) = qualify_worker(&good, &[], &gold, &config).unwrap();
        assert!(p.qualified.is_empty());
        assert!(st.values().all(|s| *s == QualificationStatus::NoTestRun));
    }

    #[test]
    fn index_mismatch_rejected() {
        let docs: Vec<Document> = (0..3).map(|i| doc(&format!("d{i}"), &["x y z"])).collect();
        let gold = labeled(&docs);
        let corpus = split_expert_set(&docs, &gold, 1, 1).unwrap();
        let wrong = ExampleIndex::build(
            &corpus.test,
            Arc::new(HashedNgramEmbedder::default()),
            &corpus.gold,
        )
        .unwrap();
        assert!(matches!(
            create_study(&corpus, vec![], StudyConfig::default(), Arc::new(wrong)),
            Err(StudyError::IndexMismatch(_))
        ));
    }

    #[test]
    fn unlabeled_items_are_injected_with_tests() {
        let docs: Vec<Document> = (0..3).map(|i| doc(&format!("d{i}"), &["x y z"])).collect();
        let gold = labeled(&docs);
        let corpus = split_expert_set(&docs, &gold, 1, 1).unwrap();
        let index = ExampleIndex::build(&corpus.train, Arc::new(HashedNgramEmbedder::default()), &corpus.gold).unwrap();
        let u = vec![Sentence::new("u:0", vec!["new".into(), "text".into()]).unwrap()];
        let study = create_study(&corpus, u, StudyConfig::default(), Arc::new(index)).unwrap();
        assert_eq!(study.item_count(), 2);
        assert_eq!(study.test_sentence_count(), 1);
        let flags: Vec<Provenance> = study.items().map(|(_, p)| p).collect();
        assert!(flags.contains(&Provenance::Unlabeled));
    }

    #[test]
    fn config_validation() {
        assert!(StudyConfig { k: 0, ..StudyConfig::default() }.validate().is_err());
        assert!(StudyConfig { redundancy: 0, ..StudyConfig::default() }.validate().is_err());
        assert!(StudyConfig { subtasks: vec![Subtask::P, Subtask::P], ..StudyConfig::default() }.validate().is_err());
        assert!(StudyConfig::default().validate().is_ok());
    }
}
