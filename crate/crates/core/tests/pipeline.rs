//! Corpus files through split, index and study creation.

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{TimeDelta, TimeZone, Utc};
use spanwork_core::corpus::{load_gold, read_corpus, write_corpus, write_gold, Corpus, LineSegmenter, Subtask};
use spanwork_core::retrieval::ExampleIndex;
use spanwork_core::simulator::synthetic_corpus;
use spanwork_core::study::{create_study, split_expert_set, Provenance, StudyConfig, Submission};
use spanwork_core::{AnnotationRecord, HashedNgramEmbedder};

#[test]
fn files_to_hits_without_leaking_test_sentences() {
    let dir = tempfile::tempdir().unwrap();
    let (docs, gold) = synthetic_corpus(24, 5);
    let corpus = Corpus::new(docs).unwrap();
    write_corpus(&dir.path().join("corpus.jsonl"), &corpus).unwrap();
    write_gold(&dir.path().join("gold.jsonl"), &gold).unwrap();

    let read = read_corpus(&dir.path().join("corpus.jsonl"), &LineSegmenter).unwrap();
    assert_eq!(read.sentence_count(), corpus.sentence_count());
    let read_gold = load_gold(&dir.path().join("gold.jsonl"), &read).unwrap();
    assert_eq!(read_gold.lines(), gold.lines());

    let expert = split_expert_set(read.documents(), &read_gold, 6, 11).unwrap();
    assert_eq!((expert.test_docs.len(), expert.train_docs.len()), (6, 18));
    let index = ExampleIndex::build(&expert.train, Arc::new(HashedNgramEmbedder::default()), &expert.gold).unwrap();
    let config = StudyConfig {
        redundancy: 1,
        ..StudyConfig::default()
    };
    let mut study = create_study(&expert, Vec::new(), config, Arc::new(index)).unwrap();
    assert_eq!(study.item_count(), expert.test.len());
    assert!(study.items().all(|(_, p)| p == Provenance::InjectedTest));

    let t0 = Utc.timestamp_opt(1_700_000_000, 0).unwrap();
    let worker = study.register_worker(0.99, "tok").unwrap().worker_id;
    let mut testrun = Vec::new();
    for s in expert.train.iter().take(20) {
        for subtask in Subtask::ALL {
            testrun.push(AnnotationRecord {
                hit_id: "testrun".into(),
                worker_id: worker.clone(),
                sentence_id: s.id.clone(),
                subtask,
                spans: expert.gold.spans(&s.id, subtask).to_vec(),
                feedback_useful: true,
                submitted_at: t0,
            });
        }
    }
    let statuses = study.qualify(&worker, &testrun).unwrap();
    assert!(statuses.values().all(|s| s.qualified()));

    let test_ids: BTreeSet<&str> = expert.test.iter().map(|s| s.id.as_str()).collect();
    let mut seen = BTreeSet::new();
    let mut at = t0;
    for subtask in Subtask::ALL {
        while let Some(hit) = study.next_hit(&worker, subtask, at).unwrap() {
            at += TimeDelta::seconds(1);
            assert!(test_ids.contains(hit.sentence.id.as_str()));
            assert_eq!(hit.examples.len(), 3);
            for ex in &hit.examples {
                assert!(!test_ids.contains(ex.sentence_id.as_str()));
                assert_eq!(ex.visible_spans, expert.gold.spans(&ex.sentence_id, subtask));
            }
            seen.insert((hit.sentence.id.clone(), subtask));
            let spans = expert.gold.spans(&hit.sentence.id, subtask).to_vec();
            let event = study
                .plan_submission(&hit.hit_id, &worker, Submission { spans, feedback_useful: true }, at)
                .unwrap();
            study.apply(&event).unwrap();
        }
    }
    assert_eq!(seen.len(), 3 * expert.test.len());
    assert!(study.is_complete());
    study.verify_invariants().unwrap();
}
