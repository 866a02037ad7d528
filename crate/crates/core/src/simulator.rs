//! Synthetic annotators and a synthetic trial-report corpus.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{TimeDelta, TimeZone};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, GoldLabels, Sentence, Span, Subtask, TokenLabelVector};
use crate::embedding::{fnv1a, HashedNgramEmbedder};
use crate::retrieval::ExampleIndex;
use crate::study::{
    create_study, AnnotationRecord, ExpertCorpus, QualificationStatus, StudyConfig, StudyError,
    Submission, Timestamp,
};

/// Row `t` is the distribution of emitted labels given gold class `t`.
pub type ConfusionMatrix = [[f64; 2]; 2];

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("confusion row {row} sums to {sum}")]
    InvalidConfusion { row: usize, sum: f64 },
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("{qualified} qualified workers for sub-task {subtask}, redundancy needs {needed}")]
    InsufficientWorkers {
        subtask: Subtask,
        qualified: usize,
        needed: usize,
    },
    #[error("study stopped before completion")]
    Incomplete,
    #[error(transparent)]
    Study(#[from] StudyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    ConfusionMatrix,
    GoldReplay,
    Adversarial,
    FeedbackCoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub confusion: ConfusionMatrix,
    pub useful_confusion: Option<ConfusionMatrix>,
    pub not_useful_confusion: Option<ConfusionMatrix>,
    /// Chance that a HIT is reported as having a useful example.
    pub useful_probability: f64,
    pub seed: u64,
}

pub fn symmetric_confusion(flip: f64) -> ConfusionMatrix {
    [[1.0 - flip, flip], [flip, 1.0 - flip]]
}

fn check_confusion(m: &ConfusionMatrix) -> Result<(), SimulationError> {
    for (row, r) in m.iter().enumerate() {
        if r.iter().any(|p| !(0.0..=1.0).contains(p)) || (r[0] + r[1] - 1.0).abs() > 1e-9 {
            return Err(SimulationError::InvalidConfusion {
                row,
                sum: r[0] + r[1],
            });
        }
    }
    Ok(())
}

fn check_probability(p: f64) -> Result<(), SimulationError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SimulationError::InvalidProbability(p))
    }
}

impl NoiseModel {
    pub fn confusion(confusion: ConfusionMatrix, seed: u64) -> Result<Self, SimulationError> {
        check_confusion(&confusion)?;
        Ok(NoiseModel {
            kind: NoiseKind::ConfusionMatrix,
            confusion,
            useful_confusion: None,
            not_useful_confusion: None,
            useful_probability: 1.0,
            seed,
        })
    }

    pub fn symmetric(flip: f64, seed: u64) -> Result<Self, SimulationError> {
        check_probability(flip)?;
        Self::confusion(symmetric_confusion(flip), seed)
    }

    pub fn gold_replay(seed: u64) -> Self {
        NoiseModel {
            kind: NoiseKind::GoldReplay,
            ..Self::symmetric(0.0, seed).expect("valid")
        }
    }

    pub fn adversarial(seed: u64) -> Self {
        NoiseModel {
            kind: NoiseKind::Adversarial,
            ..Self::symmetric(1.0, seed).expect("valid")
        }
    }

    /// Reports a useful example with probability `useful_probability` per
    /// HIT and labels with flip rate `useful_flip` or `not_useful_flip`
    /// accordingly.
    pub fn feedback_coupled(
        useful_probability: f64,
        useful_flip: f64,
        not_useful_flip: f64,
        seed: u64,
    ) -> Result<Self, SimulationError> {
        for p in [useful_probability, useful_flip, not_useful_flip] {
            check_probability(p)?;
        }
        Ok(NoiseModel {
            kind: NoiseKind::FeedbackCoupled,
            confusion: symmetric_confusion(useful_flip),
            useful_confusion: Some(symmetric_confusion(useful_flip)),
            not_useful_confusion: Some(symmetric_confusion(not_useful_flip)),
            useful_probability,
            seed,
        })
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        check_confusion(&self.confusion)?;
        for m in self.useful_confusion.iter().chain(&self.not_useful_confusion) {
            check_confusion(m)?;
        }
        check_probability(self.useful_probability)
    }
}

/// Noise is drawn from a stream keyed by (model seed, sentence, sub-task), so
/// a worker's output for a sentence does not depend on what it saw before.
fn stream(seed: u64, sentence_id: &str, subtask: Subtask) -> ChaCha8Rng {
    let key = format!("{sentence_id}\u{0}{subtask}");
    ChaCha8Rng::seed_from_u64(fnv1a(seed, key.as_bytes()))
}

pub fn simulate_worker(gold: &TokenLabelVector, model: &NoiseModel) -> (TokenLabelVector, bool) {
    let mut rng = stream(model.seed, &gold.sentence_id, gold.subtask);
    let useful = rng.random_bool(model.useful_probability);
    let confusion = match (model.kind, useful) {
        (NoiseKind::GoldReplay, _) => return (gold.clone(), useful),
        (NoiseKind::FeedbackCoupled, true) => model.useful_confusion.unwrap_or(model.confusion),
        (NoiseKind::FeedbackCoupled, false) => model.not_useful_confusion.unwrap_or(model.confusion),
        _ => model.confusion,
    };
    let labels = gold
        .labels
        .iter()
        .map(|&g| rng.random_bool(confusion[usize::from(g)][1]))
        .collect();
    (
        TokenLabelVector {
            sentence_id: gold.sentence_id.clone(),
            subtask: gold.subtask,
            labels,
        },
        useful,
    )
}

const POPULATIONS: &[&str] = &["adults", "children", "elderly patients", "women", "outpatients", "smokers"];
const CONDITIONS: &[&str] = &[
    "type 2 diabetes",
    "chronic low back pain",
    "acute myeloid leukemia",
    "asthma",
    "hypertension",
    "major depression",
    "rheumatoid arthritis",
    "heart failure",
    "oral candidiasis",
];
const TREATMENTS: &[&str] = &[
    "metformin",
    "placebo",
    "fluconazole",
    "ibuprofen 400 mg",
    "cognitive behavioural therapy",
    "doxycycline",
    "insulin glargine",
    "acupuncture",
    "usual care",
];
const OUTCOMES: &[&str] = &[
    "pain scores",
    "HbA1c levels",
    "all-cause mortality",
    "quality of life",
    "systolic blood pressure",
    "relapse rates",
    "adverse events",
    "length of hospital stay",
    "mycological cure",
];

type Segment = (String, Option<Subtask>);

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn template(rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let n = rng.random_range(20..400).to_string();
    let pop = pick(rng, POPULATIONS);
    let cond = pick(rng, CONDITIONS);
    let (d1, d2) = (pick(rng, TREATMENTS), pick(rng, TREATMENTS));
    let (o1, o2) = (pick(rng, OUTCOMES), pick(rng, OUTCOMES));
    let s = |t: &str| (t.to_string(), None);
    let p = |t: String| (t, Some(Subtask::P));
    let i = |t: &str| (t.to_string(), Some(Subtask::I));
    let o = |t: &str| (t.to_string(), Some(Subtask::O));
    match rng.random_range(0..10) {
        0 => vec![s("A total of"), p(format!("{n} {pop} with {cond}")), s("were randomized .")],
        1 => vec![p(format!("{pop} with {cond}")), s("received"), i(d1), s("or"), i(d2), s(".")],
        2 => vec![o(o1), s("improved more with"), i(d1), s("than with"), i(d2), s(".")],
        3 => vec![s("The primary outcome was"), o(o1), s("at 12 weeks .")],
        4 => vec![s("No serious"), o("adverse events"), s("were reported .")],
        5 => vec![s("The trial was approved by the local ethics committee .")],
        6 => vec![s(&format!("Participants were followed for {} months .", rng.random_range(3..37)))],
        7 => vec![s("Secondary outcomes included"), o(o1), s("and"), o(o2), s(".")],
        8 => vec![
            s("We enrolled"),
            p(format!("{n} {pop} with {cond}")),
            s(&format!("from {} centres .", rng.random_range(2..30))),
        ],
        _ => vec![
            s("Treatment with"),
            i(d1),
            s("reduced"),
            o(o1),
            s("in"),
            p(format!("{pop} with {cond}")),
            s("."),
        ],
    }
}

fn assemble(segments: &[Segment]) -> (Vec<String>, BTreeMap<Subtask, Vec<Span>>) {
    let mut tokens = Vec::new();
    let mut spans: BTreeMap<Subtask, Vec<Span>> = BTreeMap::new();
    for (text, label) in segments {
        let start = tokens.len();
        tokens.extend(text.split_whitespace().map(String::from));
        if let Some(subtask) = label {
            spans.entry(*subtask).or_default().push(Span::new(start, tokens.len()));
        }
    }
    (tokens, spans)
}

/// Documents of 8 to 13 templated trial-report sentences with P/I/O gold
/// spans. Every sentence is gold-covered for every sub-task.
pub fn synthetic_corpus(doc_count: usize, seed: u64) -> (Vec<Document>, GoldLabels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(doc_count);
    let mut gold = GoldLabels::new();
    for d in 0..doc_count {
        let n = rng.random_range(8..14);
        let built: Vec<_> = (0..n).map(|_| assemble(&template(&mut rng))).collect();
        let doc = Document::from_tokens(
            &format!("syn{d:04}"),
            built.iter().map(|(t, _)| t.clone()).collect(),
        )
        .expect("templates are non-empty");
        for (sentence, (_, spans)) in doc.sentences.iter().zip(&built) {
            gold.cover(sentence);
            for subtask in Subtask::ALL {
                let s = spans.get(&subtask).map(Vec::as_slice).unwrap_or(&[]);
                gold.insert(sentence, subtask, s).expect("spans built from tokens");
            }
        }
        docs.push(doc);
    }
    (docs, gold)
}

/// Test-run sentences drawn from the training split for qualification.
pub const TESTRUN_SENTENCES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRun {
    pub worker_ids: Vec<String>,
    pub qualification: Vec<BTreeMap<Subtask, QualificationStatus>>,
    pub records: Vec<AnnotationRecord>,
}

fn epoch() -> Timestamp {
    chrono::Utc.timestamp_opt(1_600_000_000, 0).unwrap()
}

/// Registers one worker per model, qualifies each on a test run over training
/// sentences, then drives next_hit/submit over the injected test sentences
/// until every (sentence, sub-task) has `redundancy` records. Workers that
/// fail qualification for a sub-task take no part in it.
pub fn run_synthetic_study(
    corpus: &ExpertCorpus,
    config: StudyConfig,
    workers: &[NoiseModel],
    seed: u64,
) -> Result<SyntheticRun, SimulationError> {
    for w in workers {
        w.validate()?;
    }
    let index = ExampleIndex::build(&corpus.train, Arc::new(HashedNgramEmbedder::default()), &corpus.gold)
        .map_err(StudyError::from)?;
    let mut study = create_study(corpus, Vec::new(), config.clone(), Arc::new(index))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clock = 0i64;
    let mut tick = || {
        clock += 1;
        epoch() + TimeDelta::seconds(clock)
    };

    let testrun: Vec<&Sentence> = corpus.train.iter().take(TESTRUN_SENTENCES).collect();
    let mut ids = Vec::with_capacity(workers.len());
    let mut qualification = Vec::with_capacity(workers.len());
    for (w, model) in workers.iter().enumerate() {
        let profile = study.register_worker(1.0, format!("synthetic-{seed}-{w}"))?;
        let mut records = Vec::new();
        for s in &testrun {
            for &subtask in &config.subtasks {
                let gold = study.gold().vector(&s.id, subtask).ok_or_else(|| StudyError::MissingGold(s.id.clone()))?;
                let (labels, useful) = simulate_worker(&gold, model);
                records.push(AnnotationRecord {
                    hit_id: "testrun".into(),
                    worker_id: profile.worker_id.clone(),
                    sentence_id: s.id.clone(),
                    subtask,
                    spans: labels.spans(),
                    feedback_useful: useful,
                    submitted_at: tick(),
                });
            }
        }
        qualification.push(study.qualify(&profile.worker_id, &records)?);
        ids.push(profile.worker_id);
    }
    for &subtask in &config.subtasks {
        let qualified = qualification.iter().filter(|q| q[&subtask].qualified()).count();
        if qualified < config.redundancy {
            return Err(SimulationError::InsufficientWorkers {
                subtask,
                qualified,
                needed: config.redundancy,
            });
        }
    }

    let mut active: Vec<(usize, Subtask)> = Vec::new();
    for &s in &config.subtasks {
        active.extend((0..workers.len()).filter(|&w| qualification[w][&s].qualified()).map(|w| (w, s)));
    }
    while !active.is_empty() {
        active.shuffle(&mut rng);
        let mut still = Vec::with_capacity(active.len());
        for (w, subtask) in active {
            let Some(hit) = study.next_hit(&ids[w], subtask, tick())? else {
                continue;
            };
            let gold = study
                .gold()
                .vector(&hit.sentence.id, subtask)
                .ok_or_else(|| StudyError::MissingGold(hit.sentence.id.clone()))?;
            let (labels, useful) = simulate_worker(&gold, &workers[w]);
            let event = study.plan_submission(
                &hit.hit_id,
                &ids[w],
                Submission {
                    spans: labels.spans(),
                    feedback_useful: useful,
                },
                tick(),
            )?;
            study.apply(&event)?;
            still.push((w, subtask));
        }
        active = still;
    }
    if !study.is_complete() {
        return Err(SimulationError::Incomplete);
    }
    Ok(SyntheticRun {
        worker_ids: ids,
        qualification,
        records: study.records().to_vec(),
    })
}
