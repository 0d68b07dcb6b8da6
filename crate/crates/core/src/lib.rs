//! Value analysis toolkit: bottom-up theme extraction, top-down resonance scoring,
//! pluralism read-outs and the evaluation harness used to validate them.

pub mod backends;
pub mod digest;
pub mod evalharness;
pub mod model;
pub mod pipeline;
pub mod pluralism;
pub mod resonance;
pub mod themeio;

pub use backends::{Backend, BackendConfig, BackendError, MockTable};
pub use model::{
    validate_corpus, Corpus, Document, Position, ResonanceJudgment, ResonanceLabel, Scores, Stance,
    Theme, ThemeCategory, ThemeOrigin, Verdict,
};
pub use pipeline::{analyze, extract_corpus, Analysis, AnalysisOptions, DocumentExtraction, PipelineError};
pub use resonance::{build_value_network, map_nli_label, score_corpus, ResonanceMatrix, ValueNetwork};
pub use themeio::{
    build_extraction_prompt, build_generation_prompt, parse_theme_output, render_theme,
    ParsedExtraction,
};
