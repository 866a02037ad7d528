//! The study behind a single serialized writer.
//!
//! Every mutation is planned against the current study, appended to the log,
//! and only then applied. Reads that need no consistency with a pending
//! write are served from a snapshot refreshed after each commit.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{TimeDelta, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use spanwork_core::corpus::{Span, Subtask};
use spanwork_core::study::{
    AnnotationRecord, Hit, Progress, QualificationStatus, Study, StudyError, StudyEvent, StudyState,
    Submission, Timestamp,
};
use thiserror::Error;

use crate::report::{build_report, Report, ReportError, ReportOptions};
use crate::setup::StudySetup;
use crate::store::{Entry, EventLog, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl From<StudyError> for ServiceError {
    fn from(e: StudyError) -> Self {
        let msg = e.to_string();
        match e {
            StudyError::NotQualified { .. } | StudyError::ForeignHit { .. } => {
                ServiceError::Forbidden(msg)
            }
            StudyError::UnknownWorker(_) | StudyError::UnknownHit(_) => ServiceError::NotFound(msg),
            StudyError::HitNotOpen { .. } | StudyError::NotExpired { .. } => {
                ServiceError::Conflict(msg)
            }
            _ => ServiceError::BadRequest(msg),
        }
    }
}

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

#[derive(Clone)]
pub struct ServiceConfig {
    /// Open HITs older than this are expired by [`StudyService::expire_stale`].
    pub hit_timeout: TimeDelta,
    pub fsync: bool,
    pub report: ReportOptions,
    pub clock: Clock,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            hit_timeout: TimeDelta::minutes(30),
            fsync: true,
            report: ReportOptions::default(),
            clock: Arc::new(Utc::now),
        }
    }
}

impl std::fmt::Debug for ServiceConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceConfig")
            .field("hit_timeout", &self.hit_timeout)
            .field("fsync", &self.fsync)
            .field("report", &self.report)
            .finish()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Snapshot {
    pub last_seq: u64,
    pub progress: BTreeMap<Subtask, Progress>,
    pub records: usize,
    #[serde(skip)]
    tokens: Arc<HashMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub worker_id: String,
    pub token: String,
}

/// One test-run answer. Sentences must come from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestrunAnswer {
    pub sentence_id: String,
    pub subtask: Subtask,
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestrunResult {
    pub qualified: BTreeMap<Subtask, bool>,
    pub kappa: BTreeMap<Subtask, f64>,
    pub status: BTreeMap<Subtask, QualificationStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub hit_id: String,
    pub sentence_id: String,
    pub subtask: Subtask,
    pub seq: u64,
    pub submitted_at: Timestamp,
}

struct Writer {
    study: Study,
    log: EventLog,
}

pub struct StudyService {
    writer: Mutex<Writer>,
    snapshot: RwLock<Arc<Snapshot>>,
    setup: StudySetup,
    config: ServiceConfig,
}

impl std::fmt::Debug for StudyService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StudyService").field("config", &self.config).finish()
    }
}

fn snapshot_of(study: &Study, last_seq: u64, tokens: Arc<HashMap<String, String>>) -> Snapshot {
    Snapshot {
        last_seq,
        progress: study.progress(),
        records: study.records().len(),
        tokens,
    }
}

fn token_map(study: &Study) -> Arc<HashMap<String, String>> {
    Arc::new(
        study
            .tokens()
            .map(|(t, w)| (t.to_string(), w.to_string()))
            .collect(),
    )
}

impl StudyService {
    pub fn create(dir: &Path, setup: StudySetup, config: ServiceConfig) -> Result<Self, ServiceError> {
        let (log, study) = EventLog::create(dir, setup.clone(), (config.clock)(), config.fsync)?;
        Ok(Self::from_parts(log, setup, study, config))
    }

    pub fn open(dir: &Path, config: ServiceConfig) -> Result<Self, ServiceError> {
        let (log, setup, study) = EventLog::open(dir, config.fsync)?;
        Ok(Self::from_parts(log, setup, study, config))
    }

    fn from_parts(log: EventLog, setup: StudySetup, study: Study, config: ServiceConfig) -> Self {
        let snapshot = snapshot_of(&study, log.next_seq() - 1, token_map(&study));
        StudyService {
            writer: Mutex::new(Writer { study, log }),
            snapshot: RwLock::new(Arc::new(snapshot)),
            setup,
            config,
        }
    }

    pub fn setup(&self) -> &StudySetup {
        &self.setup
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Writer> {
        // A panic while holding the lock happens before the event is applied
        // or after it completed; the study itself is never half-updated.
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn commit(&self, w: &mut Writer, event: StudyEvent) -> Result<u64, ServiceError> {
        let seq = w.log.append(&Entry::Study(event.clone()), (self.config.clock)())?;
        w.study
            .apply(&event)
            .expect("planned events apply cleanly");
        let tokens = if matches!(event, StudyEvent::WorkerRegistered { .. }) {
            token_map(&w.study)
        } else {
            self.snapshot().tokens.clone()
        };
        *self.snapshot.write().unwrap_or_else(|p| p.into_inner()) =
            Arc::new(snapshot_of(&w.study, seq, tokens));
        Ok(seq)
    }

    pub fn authenticate(&self, token: &str) -> Option<String> {
        self.snapshot().tokens.get(token).cloned()
    }

    pub fn register_worker(&self, approval_rate: f64) -> Result<Registration, ServiceError> {
        let token = format!("{:032x}", rand::rng().random::<u128>());
        let mut w = self.lock();
        let event = w.study.plan_register_worker(approval_rate, token.clone())?;
        let StudyEvent::WorkerRegistered { worker_id, .. } = &event else {
            unreachable!()
        };
        let worker_id = worker_id.clone();
        self.commit(&mut w, event)?;
        Ok(Registration { worker_id, token })
    }

    pub fn testrun(
        &self,
        worker_id: &str,
        answers: Vec<TestrunAnswer>,
    ) -> Result<TestrunResult, ServiceError> {
        let at = (self.config.clock)();
        let records: Vec<AnnotationRecord> = answers
            .into_iter()
            .map(|a| AnnotationRecord {
                hit_id: "testrun".into(),
                worker_id: worker_id.to_string(),
                sentence_id: a.sentence_id,
                subtask: a.subtask,
                spans: a.spans,
                feedback_useful: false,
                submitted_at: at,
            })
            .collect();
        let mut w = self.lock();
        let (event, status) = w.study.plan_qualification(worker_id, &records)?;
        let StudyEvent::WorkerQualified {
            qualified, kappa, ..
        } = &event
        else {
            unreachable!()
        };
        let result = TestrunResult {
            qualified: qualified.clone(),
            kappa: kappa.clone(),
            status,
        };
        self.commit(&mut w, event)?;
        Ok(result)
    }

    pub fn next_hit(&self, worker_id: &str, subtask: Subtask) -> Result<Option<Hit>, ServiceError> {
        let mut w = self.lock();
        let Some(event) = w.study.plan_next_hit(worker_id, subtask, (self.config.clock)())? else {
            return Ok(None);
        };
        let hit = w.study.preview_hit(&event)?;
        self.commit(&mut w, event)?;
        Ok(Some(hit))
    }

    pub fn submit(
        &self,
        worker_id: &str,
        hit_id: &str,
        submission: Submission,
    ) -> Result<Receipt, ServiceError> {
        let mut w = self.lock();
        let event = w
            .study
            .plan_submission(hit_id, worker_id, submission, (self.config.clock)())?;
        let StudyEvent::AnnotationSubmitted { record } = &event else {
            unreachable!()
        };
        let (sentence_id, subtask, submitted_at) =
            (record.sentence_id.clone(), record.subtask, record.submitted_at);
        let seq = self.commit(&mut w, event)?;
        Ok(Receipt {
            hit_id: hit_id.to_string(),
            sentence_id,
            subtask,
            seq,
            submitted_at,
        })
    }

    /// Expires every open HIT past the timeout; returns how many.
    pub fn expire_stale(&self) -> Result<usize, ServiceError> {
        let now = (self.config.clock)();
        let mut w = self.lock();
        let stale = w.study.stale_hits(self.config.hit_timeout, now);
        for hit_id in &stale {
            let event = w.study.plan_expiry(hit_id, self.config.hit_timeout, now)?;
            self.commit(&mut w, event)?;
        }
        Ok(stale.len())
    }

    pub fn progress(&self) -> BTreeMap<Subtask, Progress> {
        self.snapshot().progress.clone()
    }

    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.lock().study.records().to_vec()
    }

    pub fn report(&self) -> Result<Report, ServiceError> {
        let records = self.records();
        let corpus = &self.setup.corpus;
        let gold = corpus.gold.restrict(corpus.test.iter().map(|s| s.id.as_str()));
        Ok(build_report(&records, &gold, corpus.test.len(), &self.config.report)?)
    }

    pub fn state(&self) -> StudyState {
        self.lock().study.state()
    }

    pub fn verify_invariants(&self) -> Result<(), String> {
        self.lock().study.verify_invariants()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use spanwork_core::simulator::synthetic_corpus;
    use spanwork_core::study::{split_expert_set, StudyConfig};
    use std::sync::atomic::{AtomicI64, Ordering};

    fn setup() -> StudySetup {
        let (docs, gold) = synthetic_corpus(8, 3);
        StudySetup {
            config: StudyConfig::default(),
            corpus: split_expert_set(&docs, &gold, 2, 4).unwrap(),
            unlabeled: vec![],
            provider: Default::default(),
        }
    }

    fn manual_clock() -> (Clock, Arc<AtomicI64>) {
        let secs = Arc::new(AtomicI64::new(0));
        let s = secs.clone();
        let clock: Clock =
            Arc::new(move || Utc.timestamp_opt(1_700_000_000 + s.load(Ordering::SeqCst), 0).unwrap());
        (clock, secs)
    }

    fn perfect_testrun(service: &StudyService) -> Vec<TestrunAnswer> {
        let c = &service.setup().corpus;
        c.train
            .iter()
            .take(5)
            .flat_map(|s| {
                Subtask::ALL.map(|st| TestrunAnswer {
                    sentence_id: s.id.clone(),
                    subtask: st,
                    spans: c.gold.spans(&s.id, st).to_vec(),
                })
            })
            .collect()
    }

    #[test]
    fn lifecycle_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let (clock, secs) = manual_clock();
        let config = ServiceConfig {
            clock,
            fsync: false,
            hit_timeout: TimeDelta::seconds(100),
            ..ServiceConfig::default()
        };
        let service = StudyService::create(dir.path(), setup(), config.clone()).unwrap();
        let reg = service.register_worker(0.95).unwrap();
        assert_eq!(service.authenticate(&reg.token).as_deref(), Some(reg.worker_id.as_str()));
        assert!(matches!(
            service.next_hit(&reg.worker_id, Subtask::P),
            Err(ServiceError::Forbidden(_))
        ));
        let result = service.testrun(&reg.worker_id, perfect_testrun(&service)).unwrap();
        assert!(result.qualified.values().all(|&q| q));
        assert_eq!(result.kappa[&Subtask::I], 1.0);

        let hit = service.next_hit(&reg.worker_id, Subtask::P).unwrap().unwrap();
        let open_before = service.progress()[&Subtask::P];
        assert_eq!(open_before.open, 1);
        let state = service.state();
        drop(service);

        let service = StudyService::open(dir.path(), config.clone()).unwrap();
        assert_eq!(service.state(), state);
        assert_eq!(service.progress()[&Subtask::P], open_before);
        assert_eq!(service.authenticate(&reg.token).as_deref(), Some(reg.worker_id.as_str()));

        let receipt = service
            .submit(
                &reg.worker_id,
                &hit.hit_id,
                Submission {
                    spans: vec![Span::new(0, 1)],
                    feedback_useful: true,
                },
            )
            .unwrap();
        assert_eq!(receipt.sentence_id, hit.sentence.id);
        assert!(matches!(
            service.submit(
                &reg.worker_id,
                &hit.hit_id,
                Submission {
                    spans: vec![],
                    feedback_useful: true
                }
            ),
            Err(ServiceError::Conflict(_))
        ));

        let second = service.next_hit(&reg.worker_id, Subtask::O).unwrap().unwrap();
        assert_eq!(service.expire_stale().unwrap(), 0);
        secs.store(500, Ordering::SeqCst);
        assert_eq!(service.expire_stale().unwrap(), 1);
        assert!(matches!(
            service.submit(
                &reg.worker_id,
                &second.hit_id,
                Submission {
                    spans: vec![],
                    feedback_useful: false
                }
            ),
            Err(ServiceError::Conflict(_))
        ));
        service.verify_invariants().unwrap();
        assert_eq!(service.records().len(), 1);
    }

    #[test]
    fn testrun_rejects_test_sentences() {
        let dir = tempfile::tempdir().unwrap();
        let service = StudyService::create(
            dir.path(),
            setup(),
            ServiceConfig {
                fsync: false,
                ..ServiceConfig::default()
            },
        )
        .unwrap();
        let reg = service.register_worker(1.0).unwrap();
        let test_id = service.setup().corpus.test[0].id.clone();
        let answers = vec![TestrunAnswer {
            sentence_id: test_id,
            subtask: Subtask::P,
            spans: vec![],
        }];
        assert!(matches!(
            service.testrun(&reg.worker_id, answers),
            Err(ServiceError::BadRequest(_))
        ));
        assert!(matches!(
            service.testrun("w9999", vec![]),
            Err(ServiceError::NotFound(_))
        ));
    }
}
