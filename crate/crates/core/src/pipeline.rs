//! End-to-end corpus runs: extraction over a corpus and the comparative analysis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError};
use crate::model::{validate_corpus, Corpus, Position, Stance, Theme};
use crate::pluralism::{
    comparative_report, consolidate_themes, position_profiles, relevant_themes, split_by_stance,
    ComparativeReport, ConsolidatedTheme, ConsolidationStrategy, PluralismError, ReportMetadata,
    ThemeProfile, DEFAULT_MIN_NONNEUTRAL, DEFAULT_TOP_K,
};
use crate::resonance::{score_corpus, CellCache, ResonanceError, ResonanceMatrix};
use crate::themeio::Reject;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("comparative analysis requires two positions")]
    SinglePosition,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Resonance(#[from] ResonanceError),
    #[error(transparent)]
    Pluralism(#[from] PluralismError),
}

/// Extraction output for one document; one line of an extraction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentExtraction {
    pub doc_id: String,
    pub themes: Vec<Theme>,
    pub rejects: Vec<Reject>,
    #[serde(default)]
    pub duplicates: usize,
}

fn check_corpus(corpus: &Corpus) -> Result<(), PipelineError> {
    let violations = validate_corpus(corpus);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::InvalidCorpus(
            violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        ))
    }
}

/// Extracts themes from every document, in corpus order. Any failed document fails the run.
pub fn extract_corpus(corpus: &Corpus, extractor: &Backend) -> Result<Vec<DocumentExtraction>, PipelineError> {
    check_corpus(corpus)?;
    corpus
        .documents
        .iter()
        .zip(extractor.extract_corpus(&corpus.documents))
        .map(|(doc, parsed)| {
            let parsed = parsed?;
            Ok(DocumentExtraction {
                doc_id: doc.id.clone(),
                themes: parsed.themes,
                rejects: parsed.rejects,
                duplicates: parsed.duplicates,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub topic: String,
    pub strategy: ConsolidationStrategy,
    pub min_nonneutral: f64,
    pub top_k: Option<usize>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            topic: String::new(),
            strategy: ConsolidationStrategy::ExactNormalized,
            min_nonneutral: DEFAULT_MIN_NONNEUTRAL,
            top_k: Some(DEFAULT_TOP_K),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub consolidated: Vec<ConsolidatedTheme>,
    pub themes: Vec<Theme>,
    pub matrix: ResonanceMatrix,
    pub profiles: Vec<ThemeProfile>,
    pub report: ComparativeReport,
}

/// consolidate, score, profile, filter by relevance, report.
pub fn analyze(
    corpus: &Corpus,
    raw_themes: &[Theme],
    classifier: &Backend,
    options: &AnalysisOptions,
    cache: Option<&mut CellCache>,
) -> Result<Analysis, PipelineError> {
    check_corpus(corpus)?;
    let has = |p: Position| corpus.documents.iter().any(|d| d.position == p);
    if !(has(Position::Pro) && has(Position::Anti)) {
        return Err(PipelineError::SinglePosition);
    }
    if !(0.0..=1.0).contains(&options.min_nonneutral) {
        return Err(PipelineError::Pluralism(PluralismError::InvalidArgument(
            "min_nonneutral must lie in [0, 1]".into(),
        )));
    }
    let consolidated = consolidate_themes(raw_themes, options.strategy, Some(classifier))?;
    let themes: Vec<Theme> = dedup_texts(consolidated.iter().map(|c| c.theme.clone()));
    let matrix = score_corpus(corpus, &themes, classifier, cache)?;
    let profiles = position_profiles(&matrix, corpus, &themes)?;
    let (pro, anti) = split_by_stance(&profiles);
    let both: std::collections::HashSet<&str> = pro
        .iter()
        .map(|p| p.theme_id.as_str())
        .filter(|id| anti.iter().any(|a| a.theme_id == *id))
        .collect();
    let comparable: Vec<ThemeProfile> = profiles
        .iter()
        .filter(|p| both.contains(p.theme_id.as_str()))
        .cloned()
        .collect();
    let relevant = relevant_themes(&comparable, options.min_nonneutral, options.top_k);
    let report = comparative_report(&options.topic, &pro, &anti, &relevant)?.with_metadata(ReportMetadata {
        consolidation: Some(options.strategy),
        min_nonneutral: Some(options.min_nonneutral),
        top_k: options.top_k,
        consolidated: consolidated.clone(),
    });
    Ok(Analysis {
        consolidated,
        themes,
        matrix,
        profiles,
        report,
    })
}

/// The same proposition text under two categories is scored once, under its first category.
fn dedup_texts(themes: impl Iterator<Item = Theme>) -> Vec<Theme> {
    let mut seen = std::collections::HashSet::new();
    themes.filter(|t| seen.insert(t.text.clone())).collect()
}

pub fn profiles_for(profiles: &[ThemeProfile], stance: Stance) -> Vec<&ThemeProfile> {
    profiles.iter().filter(|p| p.position == stance).collect()
}
