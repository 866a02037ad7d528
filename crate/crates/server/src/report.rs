//! Aggregation and agreement report over annotation records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use spanwork_core::aggregation::{
    AggregationError, AggregationMethod, DawidSkeneConfig, LabelMatrix, SampleSize,
};
use spanwork_core::agreement::{
    evaluate_subsampled, evaluate_workers, feedback_conditioned_agreement, summarize_workers,
    AgreementError, FeedbackReport, Summary,
};
use spanwork_core::corpus::{GoldLabels, Subtask};
use spanwork_core::study::AnnotationRecord;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub sample_sizes: Vec<SampleSize>,
    pub methods: Vec<AggregationMethod>,
    pub repeats: usize,
    pub seed: u64,
    pub filter_fraction: f64,
    #[serde(skip)]
    pub ds: DawidSkeneConfig,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            sample_sizes: vec![
                SampleSize::Count(3),
                SampleSize::Count(6),
                SampleSize::Count(9),
                SampleSize::All,
            ],
            methods: vec![AggregationMethod::MajorityVote, AggregationMethod::DawidSkene],
            repeats: 20,
            seed: 0,
            filter_fraction: 0.05,
            ds: DawidSkeneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSection {
    pub evaluated: usize,
    pub retained: usize,
    pub kappa: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationRow {
    pub subtask: Subtask,
    pub method: AggregationMethod,
    pub n: SampleSize,
    pub repeats: usize,
    pub mean_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub test_sentences: usize,
    /// Records on gold sentences, the only ones that can be scored.
    pub scored_records: usize,
    pub workers: BTreeMap<Subtask, WorkerSection>,
    pub aggregation: Vec<AggregationRow>,
    pub feedback: BTreeMap<Subtask, FeedbackReport>,
}

/// Scores `records` against `gold`. Records on sentences without gold are
/// ignored; `test_size` is the number of gold sentences in the annotation set.
pub fn build_report(
    records: &[AnnotationRecord],
    gold: &GoldLabels,
    test_size: usize,
    options: &ReportOptions,
) -> Result<Report, ReportError> {
    let scored: Vec<AnnotationRecord> = records
        .iter()
        .filter(|r| gold.contains(&r.sentence_id))
        .cloned()
        .collect();
    let evals = evaluate_workers(&scored, gold, options.filter_fraction, test_size)?;
    let summaries = summarize_workers(&evals);
    let mut workers = BTreeMap::new();
    for subtask in Subtask::ALL {
        let of_subtask: Vec<_> = evals.iter().filter(|e| e.subtask == subtask).collect();
        if of_subtask.is_empty() {
            continue;
        }
        workers.insert(
            subtask,
            WorkerSection {
                evaluated: of_subtask.len(),
                retained: of_subtask.iter().filter(|e| !e.filtered).count(),
                kappa: summaries.get(&subtask).copied(),
            },
        );
    }

    let mut aggregation = Vec::new();
    for subtask in Subtask::ALL {
        if !scored.iter().any(|r| r.subtask == subtask) {
            continue;
        }
        let matrix = LabelMatrix::from_records(&scored, subtask, |id| gold.token_count(id))?;
        for &method in &options.methods {
            for &n in &options.sample_sizes {
                let eval = evaluate_subsampled(
                    &matrix,
                    gold,
                    n,
                    method,
                    options.repeats,
                    options.seed,
                    &options.ds,
                )?;
                aggregation.push(AggregationRow {
                    subtask,
                    method,
                    n,
                    repeats: eval.repeats,
                    mean_kappa: eval.mean_kappa,
                });
            }
        }
    }

    Ok(Report {
        test_sentences: test_size,
        scored_records: scored.len(),
        workers,
        aggregation,
        feedback: feedback_conditioned_agreement(&scored, gold, options.filter_fraction, test_size)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

impl Report {
    /// Aligned plain-text tables.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "test sentences: {}  scored records: {}",
            self.test_sentences, self.scored_records
        );

        let _ = writeln!(out, "\nper-worker kappa");
        let _ = writeln!(
            out,
            "{:<8}{:>10}{:>10}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "subtask", "evaluated", "retained", "mean", "sd", "median", "min", "max"
        );
        for (s, w) in &self.workers {
            let k = w.kappa;
            let _ = writeln!(
                out,
                "{:<8}{:>10}{:>10}{:>8}{:>8}{:>8}{:>8}{:>8}",
                s.as_str(),
                w.evaluated,
                w.retained,
                opt(k.map(|k| k.mean)),
                opt(k.map(|k| k.stdev)),
                opt(k.map(|k| k.median)),
                opt(k.map(|k| k.min)),
                opt(k.map(|k| k.max)),
            );
        }

        let _ = writeln!(out, "\naggregated kappa");
        let mut columns: Vec<(AggregationMethod, SampleSize)> = Vec::new();
        for row in &self.aggregation {
            if !columns.contains(&(row.method, row.n)) {
                columns.push((row.method, row.n));
            }
        }
        let _ = write!(out, "{:<8}", "subtask");
        for (m, n) in &columns {
            let _ = write!(out, "{:>8}", format!("{m}{n}"));
        }
        out.push('\n');
        let mut subtasks: Vec<Subtask> = self.aggregation.iter().map(|r| r.subtask).collect();
        subtasks.dedup();
        for s in subtasks {
            let _ = write!(out, "{:<8}", s.as_str());
            for (m, n) in &columns {
                let cell = self
                    .aggregation
                    .iter()
                    .find(|r| r.subtask == s && r.method == *m && r.n == *n)
                    .map(|r| r.mean_kappa);
                let _ = write!(out, "{:>8}", opt(cell));
            }
            out.push('\n');
        }

        let _ = writeln!(out, "\nfeedback-conditioned kappa");
        let _ = writeln!(
            out,
            "{:<8}{:>9}{:>8}{:>8}{:>9}{:>8}{:>8}",
            "subtask", "useful%", "mean", "sd", "other%", "mean", "sd"
        );
        for (s, f) in &self.feedback {
            let _ = writeln!(
                out,
                "{:<8}{:>9}{:>8}{:>8}{:>9}{:>8}{:>8}",
                s.as_str(),
                format!("{:.1}", 100.0 * f.useful.share),
                opt(f.useful.mean_kappa),
                opt(f.useful.stdev_kappa),
                format!("{:.1}", 100.0 * f.not_useful.share),
                opt(f.not_useful.mean_kappa),
                opt(f.not_useful.stdev_kappa),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spanwork_core::simulator::{run_synthetic_study, synthetic_corpus, NoiseModel};
    use spanwork_core::study::{split_expert_set, StudyConfig};

    #[test]
    fn gold_replay_report() {
        let (docs, gold) = synthetic_corpus(10, 5);
        let corpus = split_expert_set(&docs, &gold, 3, 2).unwrap();
        let workers: Vec<_> = (0..3).map(NoiseModel::gold_replay).collect();
        let run = run_synthetic_study(&corpus, StudyConfig::default(), &workers, 1).unwrap();
        let test_gold = corpus.gold.restrict(corpus.test.iter().map(|s| s.id.as_str()));
        let options = ReportOptions {
            repeats: 2,
            ..ReportOptions::default()
        };
        let report = build_report(&run.records, &test_gold, corpus.test.len(), &options).unwrap();
        assert_eq!(report.scored_records, run.records.len());
        assert_eq!(report.aggregation.len(), 3 * 2 * 4);
        assert!(report.aggregation.iter().all(|r| r.mean_kappa == 1.0));
        assert!(report.workers.values().all(|w| w.kappa.unwrap().mean == 1.0));
        let text = report.render_text();
        assert!(text.contains("MV3"));
        assert!(text.contains("DSALL"));
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<Report>(&json).unwrap().aggregation, report.aggregation);
    }

    #[test]
    fn empty_records_give_empty_report() {
        let report = build_report(&[], &GoldLabels::new(), 0, &ReportOptions::default()).unwrap();
        assert!(report.aggregation.is_empty());
        assert!(report.workers.is_empty());
        assert!(report.render_text().contains("scored records: 0"));
    }
}
