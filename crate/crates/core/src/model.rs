//! Shared domain vocabulary: documents, themes, resonance labels and judgments.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::sha256_hex;

/// Tolerance on the score triple of a stored judgment.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown theme category {0:?}")]
    UnknownCategory(String),
    #[error("unknown position {0:?}")]
    UnknownPosition(String),
}

/// Which side of a comparative analysis a document argues for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Pro,
    Anti,
}

impl Stance {
    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Pro => "pro",
            Stance::Anti => "anti",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stance {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pro" => Ok(Stance::Pro),
            "anti" => Ok(Stance::Anti),
            _ => Err(ModelError::UnknownPosition(s.to_string())),
        }
    }
}

/// Corpus position tag. On disk `Unlabeled` is `null`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Position {
    Pro,
    Anti,
    #[default]
    Unlabeled,
}

impl Position {
    pub fn stance(self) -> Option<Stance> {
        match self {
            Position::Pro => Some(Stance::Pro),
            Position::Anti => Some(Stance::Anti),
            Position::Unlabeled => None,
        }
    }
}

impl From<Stance> for Position {
    fn from(s: Stance) -> Self {
        match s {
            Stance::Pro => Position::Pro,
            Stance::Anti => Position::Anti,
        }
    }
}

impl Serialize for Position {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.stance().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Position {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Option::<String>::deserialize(deserializer)?;
        match raw {
            None => Ok(Position::Unlabeled),
            Some(s) => s
                .parse::<Stance>()
                .map(Position::from)
                .map_err(serde::de::Error::custom),
        }
    }
}

/// One paragraph-scale text unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub position: Position,
    #[serde(default)]
    pub source: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, position: Position) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            position,
            source: String::new(),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ThemeCategory {
    Observation,
    Evaluation,
    Agenda,
}

impl ThemeCategory {
    pub const ALL: [ThemeCategory; 3] = [
        ThemeCategory::Observation,
        ThemeCategory::Evaluation,
        ThemeCategory::Agenda,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThemeCategory::Observation => "Observation",
            ThemeCategory::Evaluation => "Evaluation",
            ThemeCategory::Agenda => "Agenda",
        }
    }

    /// Short tag used in figure legends.
    pub fn short(self) -> &'static str {
        match self {
            ThemeCategory::Observation => "Obs",
            ThemeCategory::Evaluation => "Val",
            ThemeCategory::Agenda => "Agn",
        }
    }
}

impl fmt::Display for ThemeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThemeCategory {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        ThemeCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| ModelError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeOrigin {
    Extracted {
        document_id: String,
        extractor_id: String,
    },
    #[default]
    UserProvided,
}

fn default_attribution() -> String {
    Theme::AUTHOR.to_string()
}

/// A proposition-form value statement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Theme {
    pub text: String,
    pub category: ThemeCategory,
    #[serde(default = "default_attribution")]
    pub attribution: String,
    #[serde(default)]
    pub origin: ThemeOrigin,
}

impl Theme {
    /// Reserved attribution naming the text's own author.
    pub const AUTHOR: &'static str = "author";

    pub fn new(
        text: impl Into<String>,
        category: ThemeCategory,
        attribution: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let theme = Theme {
            text: text.into().trim().to_string(),
            category,
            attribution: attribution.into().trim().to_string(),
            origin: ThemeOrigin::UserProvided,
        };
        theme.validate()?;
        Ok(theme)
    }

    pub fn with_origin(mut self, origin: ThemeOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::InvalidArgument("theme text is empty".into()));
        }
        if self.text.contains(['\n', '\r']) {
            return Err(ModelError::InvalidArgument(
                "theme text spans multiple lines".into(),
            ));
        }
        if self.attribution.trim().is_empty() {
            return Err(ModelError::InvalidArgument("theme attribution is empty".into()));
        }
        if self.attribution.contains(['\n', '\r']) {
            return Err(ModelError::InvalidArgument(
                "theme attribution spans multiple lines".into(),
            ));
        }
        if self.text.trim() != self.text || self.attribution.trim() != self.attribution {
            return Err(ModelError::InvalidArgument(
                "theme text and attribution must be trimmed".into(),
            ));
        }
        // the rendered "(Category by attribution)" group is located by paren matching
        let mut depth = 0i64;
        for ch in self.attribution.chars() {
            match ch {
                '(' => depth += 1,
                ')' => depth -= 1,
                _ => {}
            }
            if depth < 0 {
                break;
            }
        }
        if depth != 0 {
            return Err(ModelError::InvalidArgument(
                "theme attribution has unbalanced parentheses".into(),
            ));
        }
        Ok(())
    }

    /// Stable identifier derived from category and exact text.
    pub fn id(&self) -> String {
        let digest = sha256_hex(format!("{}\u{1f}{}", self.category, self.text).as_bytes());
        format!("t-{}", &digest[..12])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResonanceLabel {
    Resonance,
    Neutral,
    Contradiction,
}

impl ResonanceLabel {
    /// Also the tie-break priority order.
    pub const ALL: [ResonanceLabel; 3] = [
        ResonanceLabel::Resonance,
        ResonanceLabel::Neutral,
        ResonanceLabel::Contradiction,
    ];

    pub fn index(self) -> usize {
        match self {
            ResonanceLabel::Resonance => 0,
            ResonanceLabel::Neutral => 1,
            ResonanceLabel::Contradiction => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResonanceLabel::Resonance => "resonance",
            ResonanceLabel::Neutral => "neutral",
            ResonanceLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for ResonanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Score triple in the order (resonance, neutral, contradiction). Serialized as a 3-array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Scores {
    pub resonance: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl From<[f64; 3]> for Scores {
    fn from(a: [f64; 3]) -> Self {
        Scores {
            resonance: a[0],
            neutral: a[1],
            contradiction: a[2],
        }
    }
}

impl From<Scores> for [f64; 3] {
    fn from(s: Scores) -> Self {
        s.as_array()
    }
}

impl Scores {
    pub fn as_array(&self) -> [f64; 3] {
        [self.resonance, self.neutral, self.contradiction]
    }

    pub fn one_hot(label: ResonanceLabel) -> Self {
        let mut a = [0.0; 3];
        a[label.index()] = 1.0;
        a.into()
    }

    pub fn get(&self, label: ResonanceLabel) -> f64 {
        self.as_array()[label.index()]
    }

    /// Highest-scoring label; equal scores resolve Resonance > Neutral > Contradiction.
    pub fn argmax(&self) -> ResonanceLabel {
        let mut best = ResonanceLabel::Resonance;
        for label in ResonanceLabel::ALL {
            if self.get(label) > self.get(best) {
                best = label;
            }
        }
        best
    }

    pub fn is_normalized(&self) -> bool {
        let a = self.as_array();
        a.iter().all(|s| s.is_finite() && (0.0..=1.0).contains(s))
            && (a.iter().sum::<f64>() - 1.0).abs() <= SCORE_SUM_TOLERANCE
    }
}

/// Label and scores for a single premise/hypothesis pair, without ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: ResonanceLabel,
    pub scores: Scores,
}

impl Verdict {
    pub fn from_scores(scores: Scores) -> Self {
        Verdict {
            label: scores.argmax(),
            scores,
        }
    }

    pub fn one_hot(label: ResonanceLabel) -> Self {
        Verdict {
            label,
            scores: Scores::one_hot(label),
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.scores.is_normalized() && self.scores.argmax() == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceJudgment {
    pub premise_id: String,
    pub hypothesis_id: String,
    pub label: ResonanceLabel,
    pub scores: Scores,
}

impl ResonanceJudgment {
    pub fn new(premise_id: impl Into<String>, hypothesis_id: impl Into<String>, verdict: Verdict) -> Self {
        ResonanceJudgment {
            premise_id: premise_id.into(),
            hypothesis_id: hypothesis_id.into(),
            label: verdict.label,
            scores: verdict.scores,
        }
    }

    pub fn verdict(&self) -> Verdict {
        Verdict {
            label: self.label,
            scores: self.scores,
        }
    }

    /// Scores normalized and label equal to their argmax.
    pub fn is_consistent(&self) -> bool {
        self.verdict().is_consistent()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EmptyId,
    DuplicateId,
    EmptyText,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub document_id: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rule {
            Rule::EmptyId => write!(f, "empty id"),
            Rule::DuplicateId => write!(f, "duplicate id {}", self.document_id),
            Rule::EmptyText => write!(f, "empty text in {}", self.document_id),
        }
    }
}

/// Checks every corpus and document invariant. An empty result means the corpus is valid.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for doc in &corpus.documents {
        if doc.id.is_empty() {
            out.push(Violation {
                document_id: String::new(),
                rule: Rule::EmptyId,
            });
        } else if !seen.insert(doc.id.as_str()) {
            out.push(Violation {
                document_id: doc.id.clone(),
                rule: Rule::DuplicateId,
            });
        }
        if doc.text.trim().is_empty() {
            out.push(Violation {
                document_id: doc.id.clone(),
                rule: Rule::EmptyText,
            });
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

impl Corpus {
    pub fn new(name: impl Into<String>, documents: Vec<Document>) -> Self {
        Corpus {
            name: name.into(),
            documents,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Reads a JSONL corpus. The corpus name is the file stem. Blank lines are skipped.
    pub fn read_jsonl(path: &Path) -> Result<Corpus, CorpusError> {
        let display = path.display().to_string();
        let file = fs::File::open(path).map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        let mut documents = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| CorpusError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: display.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            documents.push(doc);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Corpus { name, documents })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for doc in &self.documents {
            serde_json::to_writer(&mut w, doc)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
