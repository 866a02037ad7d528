//! Cohen's kappa against gold labels and the evaluation protocols built on it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    aggregate, subsample_annotations, AggregationError, AggregationMethod, DawidSkeneConfig,
    LabelMatrix, SampleSize,
};
use crate::corpus::{CorpusError, GoldLabels, Subtask, TokenLabelVector};
use crate::study::AnnotationRecord;

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("label coverage differs: {0}")]
    CoverageMismatch(String),
    #[error("no tokens to compare")]
    Empty,
    #[error("sentence {0:?} has no gold labels")]
    MissingGold(String),
    #[error("invalid record for {sentence_id:?}: {source}")]
    InvalidRecord {
        sentence_id: String,
        source: CorpusError,
    },
    #[error("repeats must be at least 1")]
    ZeroRepeats,
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

/// Binary 2x2 table; the first index is rater `a`, the second rater `b`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl ContingencyTable {
    pub fn add(&mut self, a: bool, b: bool) {
        match (a, b) {
            (true, true) => self.n11 += 1,
            (true, false) => self.n10 += 1,
            (false, true) => self.n01 += 1,
            (false, false) => self.n00 += 1,
        }
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        self.n11 += other.n11;
        self.n10 += other.n10;
        self.n01 += other.n01;
        self.n00 += other.n00;
    }

    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    /// `None` for an empty table.
    pub fn report(&self) -> Option<KappaReport> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let a1 = self.n11 + self.n10;
        let b1 = self.n11 + self.n01;
        let p_o = (self.n11 + self.n00) as f64 / nf;
        let (pa1, pb1) = (a1 as f64 / nf, b1 as f64 / nf);
        let p_e = pa1 * pb1 + (1.0 - pa1) * (1.0 - pb1);
        // Both raters constant and identical: chance agreement is total.
        let degenerate = (a1 == n && b1 == n) || (a1 == 0 && b1 == 0);
        let kappa = if degenerate {
            if p_o == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            // n^2 (p_o - p_e) / n^2 (1 - p_e) in exact integer arithmetic.
            let (n, a1, b1) = (u128::from(n), u128::from(a1), u128::from(b1));
            let chance = a1 * b1 + (n - a1) * (n - b1);
            let agree = u128::from(self.n11 + self.n00) * n;
            (agree as i128 - chance as i128) as f64 / (n * n - chance) as f64
        };
        Some(KappaReport {
            kappa,
            observed_agreement: p_o,
            expected_agreement: if degenerate { 1.0 } else { p_e },
            token_count: n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub token_count: u64,
}

/// Pools every token of the paired vectors into one contingency table.
/// Vectors are paired by `(sentence_id, subtask)`; both sides must cover the
/// same sentences with the same lengths.
pub fn contingency(
    a: &[TokenLabelVector],
    b: &[TokenLabelVector],
) -> Result<ContingencyTable, AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::CoverageMismatch(format!(
            "{} vs {} sentences",
            a.len(),
            b.len()
        )));
    }
    let by_key: HashMap<(&str, Subtask), &TokenLabelVector> = b
        .iter()
        .map(|v| ((v.sentence_id.as_str(), v.subtask), v))
        .collect();
    if by_key.len() != b.len() {
        return Err(AgreementError::CoverageMismatch(
            "duplicate sentence in second argument".into(),
        ));
    }
    let mut table = ContingencyTable::default();
    let mut seen = BTreeSet::new();
    for va in a {
        let key = (va.sentence_id.as_str(), va.subtask);
        if !seen.insert(key) {
            return Err(AgreementError::CoverageMismatch(format!(
                "duplicate sentence {:?}",
                va.sentence_id
            )));
        }
        let vb = by_key.get(&key).ok_or_else(|| {
            AgreementError::CoverageMismatch(format!("{:?} missing on one side", va.sentence_id))
        })?;
        if va.len() != vb.len() {
            return Err(AgreementError::CoverageMismatch(format!(
                "{:?} has {} vs {} tokens",
                va.sentence_id,
                va.len(),
                vb.len()
            )));
        }
        for (&x, &y) in va.labels.iter().zip(&vb.labels) {
            table.add(x, y);
        }
    }
    Ok(table)
}

/// Cohen's kappa over all tokens pooled across sentences.
///
/// When both sides are constant and equal, chance agreement is 1 and kappa
/// is reported as 1 if observed agreement is 1, else 0.
pub fn cohens_kappa(
    a: &[TokenLabelVector],
    b: &[TokenLabelVector],
) -> Result<KappaReport, AgreementError> {
    contingency(a, b)?.report().ok_or(AgreementError::Empty)
}

/// Gold vectors for every vector in `labels`, in the same order.
fn gold_vectors(
    labels: &[TokenLabelVector],
    gold: &GoldLabels,
) -> Result<Vec<TokenLabelVector>, AgreementError> {
    labels
        .iter()
        .map(|v| {
            gold.vector(&v.sentence_id, v.subtask)
                .ok_or_else(|| AgreementError::MissingGold(v.sentence_id.clone()))
        })
        .collect()
}

pub fn kappa_against_gold(
    labels: &[TokenLabelVector],
    gold: &GoldLabels,
) -> Result<KappaReport, AgreementError> {
    let g = gold_vectors(labels, gold)?;
    cohens_kappa(labels, &g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerEvaluation {
    pub worker_id: String,
    pub subtask: Subtask,
    pub kappa: KappaReport,
    pub sentences: usize,
    pub coverage_fraction: f64,
    pub filtered: bool,
}

type WorkerTables = BTreeMap<(String, Subtask), (ContingencyTable, BTreeSet<String>)>;

/// Per (worker, sub-task) pooled table over the worker's gold-sentence records.
fn worker_tables(records: &[AnnotationRecord], gold: &GoldLabels) -> Result<WorkerTables, AgreementError> {
    let mut tables = WorkerTables::new();
    for r in records {
        let Some(g) = gold.vector(&r.sentence_id, r.subtask) else {
            continue;
        };
        let v = TokenLabelVector::from_spans(r.sentence_id.clone(), r.subtask, g.len(), &r.spans)
            .map_err(|source| AgreementError::InvalidRecord {
                sentence_id: r.sentence_id.clone(),
                source,
            })?;
        let (table, sentences) = tables.entry((r.worker_id.clone(), r.subtask)).or_default();
        for (&x, &y) in v.labels.iter().zip(&g.labels) {
            table.add(x, y);
        }
        sentences.insert(r.sentence_id.clone());
    }
    Ok(tables)
}

/// One evaluation per (worker, sub-task) with at least one gold-sentence
/// record. Records for sentences without gold labels are ignored. Kappa is
/// computed over the sentences the worker labeled; `filtered` marks workers
/// who labeled fewer than `filter_fraction * test_size` distinct sentences.
pub fn evaluate_workers(
    records: &[AnnotationRecord],
    gold: &GoldLabels,
    filter_fraction: f64,
    test_size: usize,
) -> Result<Vec<WorkerEvaluation>, AgreementError> {
    Ok(worker_tables(records, gold)?
        .into_iter()
        .filter_map(|((worker_id, subtask), (table, sentences))| {
            let kappa = table.report()?;
            let coverage_fraction = sentences.len() as f64 / test_size.max(1) as f64;
            Some(WorkerEvaluation {
                worker_id,
                subtask,
                kappa,
                sentences: sentences.len(),
                coverage_fraction,
                filtered: coverage_fraction < filter_fraction,
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation; 0 for a single value.
    pub stdev: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stdev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(Summary {
            count: n,
            mean,
            median,
            stdev,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

/// Kappa summary per sub-task over workers that were not filtered.
pub fn summarize_workers(evals: &[WorkerEvaluation]) -> BTreeMap<Subtask, Summary> {
    let mut by_subtask: BTreeMap<Subtask, Vec<f64>> = BTreeMap::new();
    for e in evals.iter().filter(|e| !e.filtered) {
        by_subtask.entry(e.subtask).or_default().push(e.kappa.kappa);
    }
    by_subtask
        .into_iter()
        .filter_map(|(s, v)| Summary::of(&v).map(|sum| (s, sum)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampledEvaluation {
    pub subtask: Subtask,
    pub n: SampleSize,
    pub method: AggregationMethod,
    pub repeats: usize,
    pub per_repeat_kappa: Vec<f64>,
    pub mean_kappa: f64,
    pub seed: u64,
}

/// Repeatedly subsamples, aggregates and scores against gold; reports the
/// mean kappa. Per-repeat seeds are drawn from a generator seeded with `seed`.
pub fn evaluate_subsampled(
    matrix: &LabelMatrix,
    gold: &GoldLabels,
    n: SampleSize,
    method: AggregationMethod,
    repeats: usize,
    seed: u64,
    ds: &DawidSkeneConfig,
) -> Result<SubsampledEvaluation, AgreementError> {
    if repeats == 0 {
        return Err(AgreementError::ZeroRepeats);
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut per_repeat_kappa = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let sampled = subsample_annotations(matrix, n, seeds.next_u64());
        let labels = aggregate(&sampled, method, ds)?;
        per_repeat_kappa.push(kappa_against_gold(&labels.vectors, gold)?.kappa);
    }
    let mean_kappa = per_repeat_kappa.iter().sum::<f64>() / repeats as f64;
    Ok(SubsampledEvaluation {
        subtask: matrix.subtask(),
        n,
        method,
        repeats,
        per_repeat_kappa,
        mean_kappa,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub records: usize,
    /// Fraction of the retained workers' records in this partition.
    pub share: f64,
    /// Workers with at least one record in this partition.
    pub workers: usize,
    pub mean_kappa: Option<f64>,
    pub stdev_kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub useful: PartitionStats,
    pub not_useful: PartitionStats,
}

/// Splits each retained worker's gold-sentence records by the usefulness flag
/// and macro-averages per-worker kappa within each partition.
pub fn feedback_conditioned_agreement(
    records: &[AnnotationRecord],
    gold: &GoldLabels,
    filter_fraction: f64,
    test_size: usize,
) -> Result<BTreeMap<Subtask, FeedbackReport>, AgreementError> {
    let retained: BTreeSet<(String, Subtask)> =
        evaluate_workers(records, gold, filter_fraction, test_size)?
            .into_iter()
            .filter(|e| !e.filtered)
            .map(|e| (e.worker_id, e.subtask))
            .collect();

    let mut out = BTreeMap::new();
    let subtasks: BTreeSet<Subtask> = retained.iter().map(|(_, s)| *s).collect();
    for subtask in subtasks {
        let mut partitions = Vec::with_capacity(2);
        let kept: Vec<&AnnotationRecord> = records
            .iter()
            .filter(|r| {
                r.subtask == subtask
                    && gold.contains(&r.sentence_id)
                    && retained.contains(&(r.worker_id.clone(), subtask))
            })
            .collect();
        for flag in [true, false] {
            let part: Vec<AnnotationRecord> = kept
                .iter()
                .filter(|r| r.feedback_useful == flag)
                .map(|r| (*r).clone())
                .collect();
            let tables = worker_tables(&part, gold)?;
            let kappas: Vec<f64> = tables
                .values()
                .filter_map(|(t, _)| t.report().map(|r| r.kappa))
                .collect();
            let summary = Summary::of(&kappas);
            partitions.push(PartitionStats {
                records: part.len(),
                share: if kept.is_empty() {
                    0.0
                } else {
                    part.len() as f64 / kept.len() as f64
                },
                workers: kappas.len(),
                mean_kappa: summary.map(|s| s.mean),
                stdev_kappa: summary.map(|s| s.stdev),
            });
        }
        let not_useful = partitions.pop().expect("two partitions");
        let useful = partitions.pop().expect("two partitions");
        out.insert(subtask, FeedbackReport { useful, not_useful });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentence, Span};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn v(id: &str, bits: &str) -> TokenLabelVector {
        TokenLabelVector::from_bit_string(id, Subtask::P, bits).unwrap()
    }

    /// Direct formula over explicit counts.
    fn oracle(n11: f64, n10: f64, n01: f64, n00: f64) -> f64 {
        let n = n11 + n10 + n01 + n00;
        let po = (n11 + n00) / n;
        let pe = ((n11 + n10) / n) * ((n11 + n01) / n) + ((n01 + n00) / n) * ((n10 + n00) / n);
        (po - pe) / (1.0 - pe)
    }

    #[test]
    fn identical_vectors() {
        let a = vec![v("s1", "0011100"), v("s2", "10")];
        assert_eq!(cohens_kappa(&a, &a).unwrap().kappa, 1.0);
    }

    #[test]
    fn worked_contingency_example() {
        let mut bits_a = String::new();
        let mut bits_b = String::new();
        for (a, b, n) in [('1', '1', 45), ('0', '0', 30), ('1', '0', 15), ('0', '1', 10)] {
            for _ in 0..n {
                bits_a.push(a);
                bits_b.push(b);
            }
        }
        let r = cohens_kappa(&[v("s", &bits_a)], &[v("s", &bits_b)]).unwrap();
        assert!((r.observed_agreement - 0.75).abs() < 1e-12);
        assert!((r.expected_agreement - 0.51).abs() < 1e-12);
        assert!((r.kappa - oracle(45.0, 15.0, 10.0, 30.0)).abs() < 1e-12);
        assert!((r.kappa - 0.4898).abs() < 1e-4);
    }

    #[test]
    fn complement_is_minus_one() {
        let r = cohens_kappa(&[v("s", "110010")], &[v("s", "001101")]).unwrap();
        assert_eq!(r.kappa, -1.0);
    }

    #[test]
    fn degenerate_constant_raters() {
        assert_eq!(cohens_kappa(&[v("s", "000")], &[v("s", "000")]).unwrap().kappa, 1.0);
        assert_eq!(cohens_kappa(&[v("s", "111")], &[v("s", "111")]).unwrap().kappa, 1.0);
        // One side constant, the other not: ordinary formula, kappa 0.
        assert_eq!(cohens_kappa(&[v("s", "000")], &[v("s", "010")]).unwrap().kappa, 0.0);
    }

    #[test]
    fn coverage_mismatch_rejected() {
        assert!(cohens_kappa(&[v("s", "01")], &[v("t", "01")]).is_err());
        assert!(cohens_kappa(&[v("s", "01")], &[v("s", "011")]).is_err());
        assert!(cohens_kappa(&[v("s", "01")], &[]).is_err());
        assert!(matches!(cohens_kappa(&[], &[]), Err(AgreementError::Empty)));
    }

    #[test]
    fn pairing_ignores_order() {
        let a = vec![v("s1", "0110"), v("s2", "100")];
        let b = vec![v("s2", "110"), v("s1", "0100")];
        let b_sorted = vec![v("s1", "0100"), v("s2", "110")];
        assert_eq!(cohens_kappa(&a, &b).unwrap(), cohens_kappa(&a, &b_sorted).unwrap());
    }

    fn vec_pairs() -> impl Strategy<Value = Vec<(Vec<bool>, Vec<bool>)>> {
        prop::collection::vec(
            (1usize..30).prop_flat_map(|n| {
                (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
            }),
            1..8,
        )
    }

    fn split(pairs: &[(Vec<bool>, Vec<bool>)]) -> (Vec<TokenLabelVector>, Vec<TokenLabelVector>) {
        let mk = |i: usize, labels: &Vec<bool>| TokenLabelVector {
            sentence_id: format!("s{i}"),
            subtask: Subtask::I,
            labels: labels.clone(),
        };
        (
            pairs.iter().enumerate().map(|(i, p)| mk(i, &p.0)).collect(),
            pairs.iter().enumerate().map(|(i, p)| mk(i, &p.1)).collect(),
        )
    }

    proptest! {
        #[test]
        fn kappa_is_symmetric(pairs in vec_pairs()) {
            let (a, b) = split(&pairs);
            prop_assert_eq!(cohens_kappa(&a, &b).unwrap().kappa, cohens_kappa(&b, &a).unwrap().kappa);
        }

        #[test]
        fn pooled_equals_summed_tables(pairs in vec_pairs()) {
            let (a, b) = split(&pairs);
            let mut summed = ContingencyTable::default();
            for (x, y) in a.iter().zip(&b) {
                summed.merge(&contingency(std::slice::from_ref(x), std::slice::from_ref(y)).unwrap());
            }
            prop_assert_eq!(summed.report().unwrap(), cohens_kappa(&a, &b).unwrap());
        }

        #[test]
        fn kappa_in_range(pairs in vec_pairs()) {
            let (a, b) = split(&pairs);
            let k = cohens_kappa(&a, &b).unwrap().kappa;
            prop_assert!((-1.0..=1.0).contains(&k));
        }
    }

    fn gold_with(n_sentences: usize) -> (GoldLabels, Vec<Sentence>) {
        let mut gold = GoldLabels::new();
        let mut sentences = Vec::new();
        for i in 0..n_sentences {
            let s = Sentence::new(format!("t:{i:03}"), vec!["w".into(); 6]).unwrap();
            gold.insert(&s, Subtask::P, &[Span::new(i % 4, i % 4 + 2)]).unwrap();
            sentences.push(s);
        }
        (gold, sentences)
    }

    fn record(worker: &str, sentence: &str, spans: Vec<Span>, useful: bool) -> AnnotationRecord {
        AnnotationRecord {
            hit_id: format!("{worker}-{sentence}"),
            worker_id: worker.into(),
            sentence_id: sentence.into(),
            subtask: Subtask::P,
            spans,
            feedback_useful: useful,
            submitted_at: Utc.timestamp_opt(0, 0).unwrap(),
        }
    }

    #[test]
    fn worker_filter_and_gold_replay() {
        let (gold, sentences) = gold_with(426);
        let mut records = Vec::new();
        for s in &sentences[..20] {
            records.push(record("few", &s.id, gold.spans(&s.id, Subtask::P).to_vec(), true));
        }
        for s in &sentences[..200] {
            records.push(record("many", &s.id, gold.spans(&s.id, Subtask::P).to_vec(), true));
        }
        records.push(record("many", "unlabeled:0", vec![], true));
        let evals = evaluate_workers(&records, &gold, 0.05, 426).unwrap();
        assert_eq!(evals.len(), 2);
        let few = evals.iter().find(|e| e.worker_id == "few").unwrap();
        assert!(few.filtered);
        assert_eq!(few.sentences, 20);
        let many = evals.iter().find(|e| e.worker_id == "many").unwrap();
        assert!(!many.filtered);
        assert_eq!(many.kappa.kappa, 1.0);
        assert!(evals.iter().all(|e| e.worker_id != "silent"));

        let summary = summarize_workers(&evals);
        assert_eq!(summary[&Subtask::P].count, 1);
    }

    #[test]
    fn feedback_shares() {
        let (gold, sentences) = gold_with(8);
        let records: Vec<_> = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| record("w", &s.id, gold.spans(&s.id, Subtask::P).to_vec(), i < 2))
            .collect();
        let report = feedback_conditioned_agreement(&records, &gold, 0.05, 8).unwrap();
        let p = &report[&Subtask::P];
        assert!((p.useful.share - 0.25).abs() < 1e-12);
        assert!((p.not_useful.share - 0.75).abs() < 1e-12);
        assert_eq!(p.useful.mean_kappa, Some(1.0));

        let all_true: Vec<_> = records
            .into_iter()
            .map(|mut r| {
                r.feedback_useful = true;
                r
            })
            .collect();
        let report = feedback_conditioned_agreement(&all_true, &gold, 0.05, 8).unwrap();
        let p = &report[&Subtask::P];
        assert_eq!(p.useful.share, 1.0);
        assert_eq!(p.not_useful.records, 0);
        assert_eq!(p.not_useful.mean_kappa, None);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert!((s.stdev - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[7.0]).unwrap().stdev, 0.0);
        assert!(Summary::of(&[]).is_none());
    }
}
