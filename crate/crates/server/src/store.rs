//! Append-only event log.
//!
//! One JSON object per line: `{"checksum": <crc32>, "event": {...}}`, where
//! the checksum covers the exact bytes of the `event` value. The first event
//! is always `study-created`; replaying the log rebuilds the study.
//!
//! A final line without its newline is the remnant of an interrupted write
//! and is dropped (and truncated away when the log is reopened for writing).
//! Any other unreadable or mismatching line is corruption.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;
use spanwork_core::study::{AnnotationRecord, Study, StudyError, StudyEvent, Timestamp};
use thiserror::Error;

use crate::setup::{SetupError, StudySetup};

pub const LOG_FILE: &str = "events.jsonl";
pub const STUDY_CREATED: &str = "study-created";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("checksum mismatch for event seq {seq} (line {line})")]
    Checksum { seq: u64, line: usize },
    #[error("event seq {found} at line {line}, expected {expected}")]
    Sequence { line: usize, expected: u64, found: u64 },
    #[error("no study in {0}")]
    Missing(PathBuf),
    #[error("a study already exists in {0}")]
    Exists(PathBuf),
    #[error("replay failed at seq {seq}: {source}")]
    Replay { seq: u64, source: StudyError },
    #[error("cannot rebuild study: {0}")]
    Setup(#[from] SetupError),
}

/// One log entry as stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: Timestamp,
    pub kind: String,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Created(Box<StudySetup>),
    Study(StudyEvent),
}

impl Entry {
    fn to_record(&self, seq: u64, at: Timestamp) -> EventRecord {
        let (kind, payload) = match self {
            Entry::Created(setup) => (
                STUDY_CREATED.to_string(),
                serde_json::to_value(setup).expect("setup serializes"),
            ),
            Entry::Study(event) => {
                let Value::Object(mut obj) = serde_json::to_value(event).expect("event serializes")
                else {
                    unreachable!("adjacently tagged enum")
                };
                let kind = obj.remove("kind").and_then(|k| k.as_str().map(String::from));
                (
                    kind.expect("tagged"),
                    obj.remove("payload").unwrap_or(Value::Null),
                )
            }
        };
        EventRecord {
            seq,
            at,
            kind,
            payload,
        }
    }

    pub fn from_record(record: &EventRecord) -> Result<Entry, serde_json::Error> {
        if record.kind == STUDY_CREATED {
            return Ok(Entry::Created(Box::new(StudySetup::deserialize(&record.payload)?)));
        }
        let tagged = serde_json::json!({ "kind": record.kind, "payload": record.payload });
        Ok(Entry::Study(StudyEvent::deserialize(tagged)?))
    }
}

#[derive(Serialize, Deserialize)]
struct Line<'a> {
    checksum: u32,
    #[serde(borrow)]
    event: &'a RawValue,
}

fn encode(record: &EventRecord) -> String {
    let event = serde_json::to_string(record).expect("record serializes");
    let raw = RawValue::from_string(event).expect("valid json");
    let line = Line {
        checksum: crc32fast::hash(raw.get().as_bytes()),
        event: &raw,
    };
    let mut out = serde_json::to_string(&line).expect("line serializes");
    out.push('\n');
    out
}

/// The readable prefix of a log plus the byte length it occupies.
#[derive(Debug)]
pub struct LogContents {
    pub records: Vec<EventRecord>,
    pub valid_len: u64,
    pub torn_tail: bool,
}

pub fn read_log(path: &Path) -> Result<LogContents, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut torn_tail = false;
    for (i, chunk) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        if chunk.last() != Some(&b'\n') {
            torn_tail = true;
            break;
        }
        let text = std::str::from_utf8(&chunk[..chunk.len() - 1]).map_err(|e| StoreError::Corrupt {
            line,
            reason: e.to_string(),
        })?;
        let corrupt = |reason: String| StoreError::Corrupt { line, reason };
        let parsed: Line = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        let record: EventRecord =
            serde_json::from_str(parsed.event.get()).map_err(|e| corrupt(e.to_string()))?;
        if crc32fast::hash(parsed.event.get().as_bytes()) != parsed.checksum {
            return Err(StoreError::Checksum {
                seq: record.seq,
                line,
            });
        }
        let expected = records.len() as u64 + 1;
        if record.seq != expected {
            return Err(StoreError::Sequence {
                line,
                expected,
                found: record.seq,
            });
        }
        records.push(record);
        offset += chunk.len();
    }
    Ok(LogContents {
        records,
        valid_len: offset as u64,
        torn_tail,
    })
}

/// Rebuilds the study from decoded records.
pub fn replay(records: &[EventRecord]) -> Result<(StudySetup, Study), StoreError> {
    let (first, rest) = records
        .split_first()
        .ok_or_else(|| StoreError::Corrupt {
            line: 1,
            reason: "empty log".into(),
        })?;
    let decode = |r: &EventRecord| {
        Entry::from_record(r).map_err(|e| StoreError::Corrupt {
            line: r.seq as usize,
            reason: format!("seq {}: {e}", r.seq),
        })
    };
    let Entry::Created(setup) = decode(first)? else {
        return Err(StoreError::Corrupt {
            line: 1,
            reason: format!("first event is {:?}, expected {STUDY_CREATED}", first.kind),
        });
    };
    let mut study = setup.build()?;
    for r in rest {
        match decode(r)? {
            Entry::Study(event) => study
                .apply(&event)
                .map_err(|source| StoreError::Replay { seq: r.seq, source })?,
            Entry::Created(_) => {
                return Err(StoreError::Corrupt {
                    line: r.seq as usize,
                    reason: format!("seq {}: second {STUDY_CREATED}", r.seq),
                })
            }
        }
    }
    Ok((*setup, study))
}

pub struct EventLog {
    writer: BufWriter<File>,
    next_seq: u64,
    fsync: bool,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("next_seq", &self.next_seq)
            .field("fsync", &self.fsync)
            .finish()
    }
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join(LOG_FILE)
}

impl EventLog {
    /// Starts a new log in `dir` with a `study-created` event.
    pub fn create(
        dir: &Path,
        setup: StudySetup,
        at: Timestamp,
        fsync: bool,
    ) -> Result<(EventLog, Study), StoreError> {
        fs::create_dir_all(dir)?;
        let path = log_path(dir);
        if fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false) {
            return Err(StoreError::Exists(dir.to_path_buf()));
        }
        let study = setup.build()?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut log = EventLog {
            writer: BufWriter::new(file),
            next_seq: 1,
            fsync,
        };
        log.append(&Entry::Created(Box::new(setup)), at)?;
        Ok((log, study))
    }

    /// Replays the log in `dir` and reopens it for appending.
    pub fn open(dir: &Path, fsync: bool) -> Result<(EventLog, StudySetup, Study), StoreError> {
        let path = log_path(dir);
        let contents = read_log(&path)?;
        if contents.records.is_empty() {
            return Err(StoreError::Missing(dir.to_path_buf()));
        }
        let (setup, study) = replay(&contents.records)?;
        let file = OpenOptions::new().write(true).open(&path)?;
        if contents.torn_tail {
            file.set_len(contents.valid_len)?;
            file.sync_data()?;
        }
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok((
            EventLog {
                writer: BufWriter::new(file),
                next_seq: contents.records.len() as u64 + 1,
                fsync,
            },
            setup,
            study,
        ))
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Writes one event and returns its seq. The line is flushed (and synced
    /// when configured) before returning.
    pub fn append(&mut self, entry: &Entry, at: Timestamp) -> Result<u64, StoreError> {
        let seq = self.next_seq;
        let line = encode(&entry.to_record(seq, at));
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        if self.fsync {
            self.writer.get_ref().sync_data()?;
        }
        self.next_seq += 1;
        Ok(seq)
    }
}

/// Annotation records in seq order.
pub fn export_dump(dir: &Path) -> Result<Vec<AnnotationRecord>, StoreError> {
    let path = log_path(dir);
    if !path.exists() {
        return Err(StoreError::Missing(dir.to_path_buf()));
    }
    let contents = read_log(&path)?;
    let mut out = Vec::new();
    for r in &contents.records {
        if r.kind == STUDY_CREATED {
            continue;
        }
        let entry = Entry::from_record(r).map_err(|e| StoreError::Corrupt {
            line: r.seq as usize,
            reason: e.to_string(),
        })?;
        if let Entry::Study(StudyEvent::AnnotationSubmitted { record }) = entry {
            out.push(record);
        }
    }
    Ok(out)
}

pub fn write_dump<W: Write>(mut out: W, records: &[AnnotationRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_dump(path: &Path) -> Result<Vec<AnnotationRecord>, StoreError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use spanwork_core::simulator::synthetic_corpus;
    use spanwork_core::study::{split_expert_set, StudyConfig};

    fn t(s: i64) -> Timestamp {
        chrono::Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap()
    }

    fn setup() -> StudySetup {
        let (docs, gold) = synthetic_corpus(6, 1);
        StudySetup {
            config: StudyConfig::default(),
            corpus: split_expert_set(&docs, &gold, 2, 3).unwrap(),
            unlabeled: vec![],
            provider: Default::default(),
        }
    }

    #[test]
    fn event_round_trip() {
        let event = StudyEvent::HitExpired {
            hit_id: "hit-000001".into(),
            at: t(5),
        };
        let record = Entry::Study(event.clone()).to_record(7, t(6));
        assert_eq!(record.kind, "hit-expired");
        assert_eq!(Entry::from_record(&record).unwrap(), Entry::Study(event));
    }

    #[test]
    fn create_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let (mut log, mut study) = EventLog::create(dir.path(), setup(), t(0), false).unwrap();
        let event = study.plan_register_worker(0.95, "tok".into()).unwrap();
        log.append(&Entry::Study(event.clone()), t(1)).unwrap();
        study.apply(&event).unwrap();
        drop(log);
        let (log, restored_setup, restored) = EventLog::open(dir.path(), false).unwrap();
        assert_eq!(log.next_seq(), 3);
        assert_eq!(restored_setup, setup());
        assert_eq!(restored.state(), study.state());
        assert!(matches!(
            EventLog::create(dir.path(), setup(), t(0), false),
            Err(StoreError::Exists(_))
        ));
        assert!(export_dump(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let (log, _) = EventLog::create(dir.path(), setup(), t(0), false).unwrap();
        drop(log);
        let path = log_path(dir.path());
        let good = fs::read(&path).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"checksum\":1,\"event\":{\"seq\":2,").unwrap();
        drop(f);
        let contents = read_log(&path).unwrap();
        assert!(contents.torn_tail);
        assert_eq!(contents.records.len(), 1);
        let (mut log, _, _) = EventLog::open(dir.path(), false).unwrap();
        assert_eq!(fs::read(&path).unwrap(), good);
        log.append(
            &Entry::Study(StudyEvent::WorkerRegistered {
                worker_id: "w0001".into(),
                approval_rate: 1.0,
                token: "x".into(),
            }),
            t(1),
        )
        .unwrap();
        assert_eq!(read_log(&path).unwrap().records.len(), 2);
    }

    #[test]
    fn checksum_mismatch_names_seq() {
        let dir = tempfile::tempdir().unwrap();
        let (mut log, _) = EventLog::create(dir.path(), setup(), t(0), false).unwrap();
        log.append(
            &Entry::Study(StudyEvent::WorkerRegistered {
                worker_id: "w0001".into(),
                approval_rate: 0.5,
                token: "x".into(),
            }),
            t(1),
        )
        .unwrap();
        drop(log);
        let path = log_path(dir.path());
        let text = fs::read_to_string(&path).unwrap();
        let (first, second) = text.split_once('\n').unwrap();
        fs::write(&path, format!("{first}\n{}", second.replace("0.5", "0.9"))).unwrap();
        match EventLog::open(dir.path(), false) {
            Err(StoreError::Checksum { seq: 2, line: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(export_dump(dir.path()).is_err());
    }

    #[test]
    fn missing_store() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(EventLog::open(dir.path(), false), Err(StoreError::Missing(_))));
        assert!(matches!(export_dump(dir.path()), Err(StoreError::Missing(_))));
    }
}
