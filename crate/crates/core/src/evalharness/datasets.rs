//! Merging labeled pair datasets with per-source label vocabularies.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::LabeledPair;
use super::EvalError;
use crate::model::ResonanceLabel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

/// A dataset and the mapping from its native labels (e.g. FAVOR/AGAINST/NONE).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSource {
    pub name: String,
    pub mapping: BTreeMap<String, ResonanceLabel>,
    pub pairs: Vec<RawPair>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub resonance: usize,
    pub neutral: usize,
    pub contradiction: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.resonance + self.neutral + self.contradiction
    }

    fn bump(&mut self, label: ResonanceLabel) {
        match label {
            ResonanceLabel::Resonance => self.resonance += 1,
            ResonanceLabel::Neutral => self.neutral += 1,
            ResonanceLabel::Contradiction => self.contradiction += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSet {
    pub pairs: Vec<LabeledPair>,
    pub counts: LabelCounts,
    pub duplicates_removed: usize,
}

impl LabeledSource {
    fn map(&self, raw: &str) -> Option<ResonanceLabel> {
        self.mapping.get(raw).copied().or_else(|| {
            self.mapping
                .iter()
                .find(|(k, _)| k.trim().eq_ignore_ascii_case(raw.trim()))
                .map(|(_, v)| *v)
        })
    }

    /// Sidecar path for a dataset file: `name.tsv` pairs with `name.labels.json`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("labels.json")
    }

    /// Reads a `.tsv` (header `premise<TAB>hypothesis<TAB>label`) or `.jsonl` dataset and its sidecar.
    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let io = |e: std::io::Error, p: &Path| EvalError::Io(format!("{}: {e}", p.display()));
        let sidecar = Self::sidecar_path(path);
        let mapping: BTreeMap<String, ResonanceLabel> = serde_json::from_str(
            &fs::read_to_string(&sidecar).map_err(|e| io(e, &sidecar))?,
        )
        .map_err(|e| EvalError::Format(format!("{}: {e}", sidecar.display())))?;
        let raw = fs::read_to_string(path).map_err(|e| io(e, path))?;
        let is_tsv = path.extension().is_some_and(|e| e == "tsv");
        let mut pairs = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() || (is_tsv && i == 0) {
                continue;
            }
            let pair = if is_tsv {
                let cols: Vec<&str> = line.split('\t').collect();
                let [premise, hypothesis, label] = cols[..] else {
                    return Err(EvalError::Format(format!(
                        "{}:{}: expected 3 tab-separated columns",
                        path.display(),
                        i + 1
                    )));
                };
                RawPair {
                    premise: premise.into(),
                    hypothesis: hypothesis.into(),
                    label: label.into(),
                }
            } else {
                serde_json::from_str(line)
                    .map_err(|e| EvalError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?
            };
            pairs.push(pair);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(LabeledSource { name, mapping, pairs })
    }
}

/// Maps every source into resonance labels, drops exact (premise, hypothesis, label) repeats
/// and counts the result per label.
pub fn assemble_training_pairs(sources: &[LabeledSource]) -> Result<TrainingSet, EvalError> {
    let mut seen: HashSet<(String, String, ResonanceLabel)> = HashSet::new();
    let mut out = TrainingSet {
        pairs: Vec::new(),
        counts: LabelCounts::default(),
        duplicates_removed: 0,
    };
    for source in sources {
        for raw in &source.pairs {
            let label = source.map(&raw.label).ok_or_else(|| EvalError::UnmappedLabel {
                source_name: source.name.clone(),
                label: raw.label.clone(),
            })?;
            if !seen.insert((raw.premise.clone(), raw.hypothesis.clone(), label)) {
                out.duplicates_removed += 1;
                continue;
            }
            out.counts.bump(label);
            out.pairs.push(LabeledPair {
                premise: raw.premise.clone(),
                hypothesis: raw.hypothesis.clone(),
                gold: label,
                predicted: None,
            });
        }
    }
    Ok(out)
}
