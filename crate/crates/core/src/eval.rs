//! Three-stage scoring for sparse slot extraction: format validity, slot
//! detection, and exact-value correctness — plus run-to-run deltas, an
//! asymmetric-cost note, and CSV/markdown rendering of summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ReportRecord;
use crate::postprocess::{FilterTrace, FormatStatus};
use crate::record::{PhysiologyRecord, Slot};

/// Everything one report contributed to a run: what the model emitted, whether
/// it parsed, what survived the filters, and the audit trail of removals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionOutcome {
    pub report_id: String,
    pub raw_output: String,
    pub status: FormatStatus,
    /// Present exactly when `status` is parsed; holds the post-filter record.
    pub record: Option<PhysiologyRecord>,
    pub trace: FilterTrace,
}

impl ExtractionOutcome {
    pub fn new(
        report_id: impl Into<String>,
        raw_output: impl Into<String>,
        status: FormatStatus,
        record: Option<PhysiologyRecord>,
        trace: FilterTrace,
    ) -> Self {
        ExtractionOutcome {
            report_id: report_id.into(),
            raw_output: raw_output.into(),
            status,
            record,
            trace,
        }
    }

    /// The record used for scoring: the parsed record when in format, or
    /// `None` when the output never yielded one.
    pub fn scoreable_record(&self) -> Option<&PhysiologyRecord> {
        if self.status.is_parsed() {
            self.record.as_ref()
        } else {
            None
        }
    }
}

/// Detection-stage cell tallies over (report, slot) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionCounts {
    /// Slot holds a value in the truth and the extraction.
    pub tp: u64,
    /// Slot is absent in the truth but the extraction put a value there.
    pub fp: u64,
    /// Slot holds a value in the truth that the extraction missed.
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Slot is absent on both sides.
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn observe(&mut self, truth_present: bool, predicted_present: bool) {
        match (truth_present, predicted_present) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Detection metrics with explicit markers for empty denominators. A metric
/// whose denominator is empty is reported as `0.0` with its `*_na` flag set,
/// so tables can show a number while machine consumers keep the distinction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy_na: bool,
    pub precision_na: bool,
    pub recall_na: bool,
}

impl DetectionMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let total = c.total();
        let (accuracy, accuracy_na) = fraction(c.tp + c.tn, total);
        let (precision, precision_na) = fraction(c.tp, c.tp + c.fp);
        let (recall, recall_na) = fraction(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionMetrics {
            accuracy,
            precision,
            recall,
            f1,
            accuracy_na,
            precision_na,
            recall_na,
        }
    }
}

fn fraction(numerator: u64, denominator: u64) -> (f64, bool) {
    if denominator == 0 {
        (0.0, true)
    } else {
        (numerator as f64 / denominator as f64, false)
    }
}

/// How reports whose output never parsed enter the detection stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfFormatPolicy {
    /// Count them separately and keep them out of the confusion cells.
    #[default]
    Exclude,
    /// Score them as if the model had answered all-absent, for sensitivity
    /// analysis of the exclusion choice.
    ScoreAsAllNull,
}

/// The scored result of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub out_of_format_count: u64,
    /// Reports that contributed confusion cells; cell conservation holds as
    /// `counts.total() == 10 * scored_report_count`.
    pub scored_report_count: u64,
    pub policy: OutOfFormatPolicy,
    pub counts: ConfusionCounts,
    pub detection: DetectionMetrics,
    /// Detected cells whose extracted decimal equals the truth exactly.
    pub exact_match_count: u64,
    /// `exact_match_count / tp`; the denominator is detected cells, not all
    /// truth-present cells, and the field is `None` when nothing was detected.
    pub value_accuracy: Option<f64>,
    pub per_field: BTreeMap<String, ConfusionCounts>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("cannot align runs: {truths} truth records vs {outcomes} outcomes")]
    LengthMismatch { truths: usize, outcomes: usize },
    #[error("report id mismatch at position {position}: truth {truth_id:?} vs outcome {outcome_id:?}")]
    IdMismatch {
        position: usize,
        truth_id: String,
        outcome_id: String,
    },
}

/// Scores a run against its corpus with the default policy of excluding
/// out-of-format outputs from the confusion cells.
pub fn evaluate_run(
    reports: &[ReportRecord],
    outcomes: &[ExtractionOutcome],
) -> Result<EvalSummary, EvalError> {
    evaluate_run_with_policy(reports, outcomes, OutOfFormatPolicy::Exclude)
}

/// Scores a run against its corpus. Inputs must be the same length and carry
/// matching report ids position by position.
pub fn evaluate_run_with_policy(
    reports: &[ReportRecord],
    outcomes: &[ExtractionOutcome],
    policy: OutOfFormatPolicy,
) -> Result<EvalSummary, EvalError> {
    if reports.len() != outcomes.len() {
        return Err(EvalError::LengthMismatch {
            truths: reports.len(),
            outcomes: outcomes.len(),
        });
    }
    for (position, (report, outcome)) in reports.iter().zip(outcomes).enumerate() {
        if report.id != outcome.report_id {
            return Err(EvalError::IdMismatch {
                position,
                truth_id: report.id.clone(),
                outcome_id: outcome.report_id.clone(),
            });
        }
    }

    let all_null = PhysiologyRecord::empty();
    let mut out_of_format_count = 0u64;
    let mut scored_report_count = 0u64;
    let mut exact_match_count = 0u64;
    let mut per_field: BTreeMap<String, ConfusionCounts> = Slot::ALL
        .iter()
        .map(|slot| (slot.flat_key(), ConfusionCounts::default()))
        .collect();

    for (report, outcome) in reports.iter().zip(outcomes) {
        let scored = match outcome.scoreable_record() {
            Some(record) => record,
            None => {
                out_of_format_count += 1;
                match policy {
                    OutOfFormatPolicy::Exclude => continue,
                    OutOfFormatPolicy::ScoreAsAllNull => &all_null,
                }
            }
        };
        scored_report_count += 1;
        for (slot, truth_value) in report.truth.iter() {
            let predicted_value = scored.get(slot);
            let cell = per_field
                .get_mut(&slot.flat_key())
                .expect("per-field map seeded with every slot");
            cell.observe(truth_value.is_some(), predicted_value.is_some());
            if let (Some(t), Some(p)) = (truth_value, predicted_value) {
                if t == p {
                    exact_match_count += 1;
                }
            }
        }
    }

    let mut counts = ConfusionCounts::default();
    for cell in per_field.values() {
        counts.add(cell);
    }
    let detection = DetectionMetrics::from_counts(&counts);
    let value_accuracy = if counts.tp == 0 {
        None
    } else {
        Some(exact_match_count as f64 / counts.tp as f64)
    };

    Ok(EvalSummary {
        out_of_format_count,
        scored_report_count,
        policy,
        counts,
        detection,
        exact_match_count,
        value_accuracy,
        per_field,
    })
}

/// Signed metric differences of run `b` relative to run `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when either side had no detected cells to score.
    pub value_accuracy: Option<f64>,
    pub out_of_format: i64,
    pub tp: i64,
    pub fp: i64,
    #[serde(rename = "fn")]
    pub fn_: i64,
    pub tn: i64,
}

pub fn compare_runs(a: &EvalSummary, b: &EvalSummary) -> DeltaReport {
    DeltaReport {
        accuracy: b.detection.accuracy - a.detection.accuracy,
        precision: b.detection.precision - a.detection.precision,
        recall: b.detection.recall - a.detection.recall,
        f1: b.detection.f1 - a.detection.f1,
        value_accuracy: match (a.value_accuracy, b.value_accuracy) {
            (Some(x), Some(y)) => Some(y - x),
            _ => None,
        },
        out_of_format: b.out_of_format_count as i64 - a.out_of_format_count as i64,
        tp: b.counts.tp as i64 - a.counts.tp as i64,
        fp: b.counts.fp as i64 - a.counts.fp as i64,
        fn_: b.counts.fn_ as i64 - a.counts.fn_ as i64,
        tn: b.counts.tn as i64 - a.counts.tn as i64,
    }
}

/// A note that weights the two error kinds asymmetrically: inventing a value
/// that is not in the report costs more than missing one that is, so false
/// extractions lead and precision is the first metric in the rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymmetryNote {
    pub false_extraction_count: u64,
    pub missed_value_count: u64,
    pub headline: String,
    pub rendered: String,
}

pub fn asymmetric_report(summary: &EvalSummary) -> AsymmetryNote {
    let fp = summary.counts.fp;
    let fn_ = summary.counts.fn_;
    let headline = if fp == 0 {
        "no false extractions".to_string()
    } else {
        format!(
            "{fp} false extraction{} against {fn_} missed value{}",
            plural(fp),
            plural(fn_)
        )
    };
    let d = &summary.detection;
    let rendered = format!(
        "{headline}\n\
         precision       {}\n\
         recall          {}\n\
         f1              {}\n\
         accuracy        {}\n\
         value_accuracy  {}\n\
         false extractions (fp)  {fp}\n\
         missed values (fn)      {fn_}\n",
        fmt3(d.precision),
        fmt3(d.recall),
        fmt3(d.f1),
        fmt3(d.accuracy),
        fmt_opt3(summary.value_accuracy),
    );
    AsymmetryNote {
        false_extraction_count: fp,
        missed_value_count: fn_,
        headline,
        rendered,
    }
}

fn plural(n: u64) -> &'static str {
    if n == 1 {
        ""
    } else {
        "s"
    }
}

fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

fn fmt_opt3(x: Option<f64>) -> String {
    match x {
        Some(v) => fmt3(v),
        None => "N/A".to_string(),
    }
}

/// Column header matching [`csv_row`].
pub fn csv_header() -> &'static str {
    "setting,accuracy,precision,recall,f1,value_accuracy"
}

/// One summary as a CSV row: three-decimal metrics in the order accuracy,
/// precision, recall, f1, value accuracy; an unscoreable value accuracy
/// renders as `N/A`.
pub fn csv_row(setting: &str, summary: &EvalSummary) -> String {
    let d = &summary.detection;
    format!(
        "{setting},{},{},{},{},{}",
        fmt3(d.accuracy),
        fmt3(d.precision),
        fmt3(d.recall),
        fmt3(d.f1),
        fmt_opt3(summary.value_accuracy),
    )
}

/// Renders labelled summaries as a markdown table in the same column order as
/// the CSV, with an extra out-of-format column.
pub fn markdown_table(rows: &[(String, EvalSummary)]) -> String {
    let mut out = String::from(
        "| setting | accuracy | precision | recall | f1 | value_accuracy | out_of_format |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for (setting, summary) in rows {
        let d = &summary.detection;
        out.push_str(&format!(
            "| {setting} | {} | {} | {} | {} | {} | {} |\n",
            fmt3(d.accuracy),
            fmt3(d.precision),
            fmt3(d.recall),
            fmt3(d.f1),
            fmt_opt3(summary.value_accuracy),
            summary.out_of_format_count,
        ));
    }
    out
}
