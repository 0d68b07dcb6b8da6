//! Classification metrics for the top-down resonance classifier.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::model::ResonanceLabel;
use crate::resonance::map_nli_label;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub premise: String,
    pub hypothesis: String,
    pub gold: ResonanceLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<ResonanceLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub per_class: BTreeMap<ResonanceLabel, ClassMetrics>,
    /// `confusion[gold][predicted]`, indexed Resonance, Neutral, Contradiction.
    pub confusion: [[usize; 3]; 3],
}

/// Ratio with an empty denominator defined as 0.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn confusion_matrix(gold: &[ResonanceLabel], predicted: &[ResonanceLabel]) -> [[usize; 3]; 3] {
    let mut m = [[0usize; 3]; 3];
    for (g, p) in gold.iter().zip(predicted) {
        m[g.index()][p.index()] += 1;
    }
    m
}

pub fn report_from_labels(gold: &[ResonanceLabel], predicted: &[ResonanceLabel]) -> Result<MetricReport, EvalError> {
    if gold.len() != predicted.len() {
        return Err(EvalError::InvalidArgument(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    if gold.is_empty() {
        return Err(EvalError::InvalidArgument("no labeled pairs".into()));
    }
    let confusion = confusion_matrix(gold, predicted);
    let mut per_class = BTreeMap::new();
    let mut tp_all = 0;
    let mut fp_all = 0;
    let mut fn_all = 0;
    for label in ResonanceLabel::ALL {
        let k = label.index();
        let tp = confusion[k][k];
        let predicted_k: usize = (0..3).map(|g| confusion[g][k]).sum();
        let support: usize = confusion[k].iter().sum();
        let precision = ratio(tp, predicted_k);
        let recall = ratio(tp, support);
        per_class.insert(
            label,
            ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support,
            },
        );
        tp_all += tp;
        fp_all += predicted_k - tp;
        fn_all += support - tp;
    }
    let micro_p = ratio(tp_all, tp_all + fp_all);
    let micro_r = ratio(tp_all, tp_all + fn_all);
    Ok(MetricReport {
        n: gold.len(),
        micro_f1: f1(micro_p, micro_r),
        accuracy: ratio(tp_all, gold.len()),
        per_class,
        confusion,
    })
}

/// Confusion matrix, pooled micro-F1 and per-class precision/recall/F1.
pub fn micro_f1(pairs: &[LabeledPair]) -> Result<MetricReport, EvalError> {
    let missing: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.predicted.is_none())
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions(missing));
    }
    let gold: Vec<_> = pairs.iter().map(|p| p.gold).collect();
    let predicted: Vec<_> = pairs.iter().filter_map(|p| p.predicted).collect();
    report_from_labels(&gold, &predicted)
}

impl MetricReport {
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("gold\\predicted,resonance,neutral,contradiction\n");
        for label in ResonanceLabel::ALL {
            let row = &self.confusion[label.index()];
            out.push_str(&format!("{},{},{},{}\n", label, row[0], row[1], row[2]));
        }
        out
    }
}

#[derive(Deserialize)]
struct RawLabeledPair {
    premise: String,
    hypothesis: String,
    gold: String,
    #[serde(default)]
    predicted: Option<String>,
}

/// Reads JSONL pairs; labels accept the resonance or NLI vocabulary.
pub fn read_labeled_pairs<R: BufRead>(reader: R) -> Result<Vec<LabeledPair>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLabeledPair =
            serde_json::from_str(&line).map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)))?;
        let label = |s: &str| map_nli_label(s).map_err(|e| EvalError::Format(format!("line {}: {e}", i + 1)));
        out.push(LabeledPair {
            gold: label(&raw.gold)?,
            predicted: raw.predicted.as_deref().map(label).transpose()?,
            premise: raw.premise,
            hypothesis: raw.hypothesis,
        });
    }
    Ok(out)
}
