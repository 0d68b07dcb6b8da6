//! Prompt construction and the line-oriented theme grammar
//! `TEXT (CATEGORY by ATTRIBUTION)`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Stance, Theme, ThemeCategory};

pub const EXTRACTION_TEMPLATE: &str = include_str!("../assets/extraction_prompt.v1.txt");
pub const GENERATION_TEMPLATE: &str = include_str!("../assets/generation_prompt.v1.txt");
pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ThemeIoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPrompt {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub text: String,
    pub article: String,
    pub agenda: String,
    pub evaluation: String,
    pub stance: Stance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    NoCategoryAnnotation,
    UnknownCategory(String),
    MissingAttribution,
    EmptyThemeText,
    InvalidTheme(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::NoCategoryAnnotation => f.write_str("no category annotation"),
            RejectReason::UnknownCategory(c) => write!(f, "unknown category {c:?}"),
            RejectReason::MissingAttribution => f.write_str("missing attribution"),
            RejectReason::EmptyThemeText => f.write_str("empty theme text"),
            RejectReason::InvalidTheme(m) => write!(f, "invalid theme: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedExtraction {
    pub themes: Vec<Theme>,
    pub rejects: Vec<Reject>,
    /// Well-formed lines dropped as normalized repeats of an earlier theme.
    #[serde(default)]
    pub duplicates: usize,
}

/// Substitutes `<key>` placeholders in one left-to-right pass, so values are never re-scanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    'outer: while let Some(open) = rest.find('<') {
        for (key, value) in values {
            let tail = &rest[open + 1..];
            if tail.starts_with(key) && tail[key.len()..].starts_with('>') {
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &tail[key.len() + 1..];
                continue 'outer;
            }
        }
        out.push_str(&rest[..=open]);
        rest = &rest[open + 1..];
    }
    out.push_str(rest);
    out
}

pub fn build_extraction_prompt(input_text: &str) -> Result<ExtractionPrompt, ThemeIoError> {
    if input_text.trim().is_empty() {
        return Err(ThemeIoError::InvalidArgument("input text is empty".into()));
    }
    Ok(ExtractionPrompt {
        text: fill(EXTRACTION_TEMPLATE, &[("input_text", input_text)]),
    })
}

pub fn build_generation_prompt(
    article: &str,
    agenda: &str,
    evaluation: &str,
    stance: Stance,
) -> Result<GenerationPrompt, ThemeIoError> {
    for (name, value) in [("article", article), ("agenda", agenda), ("evaluation", evaluation)] {
        if value.trim().is_empty() {
            return Err(ThemeIoError::InvalidArgument(format!("{name} is empty")));
        }
    }
    let text = fill(
        GENERATION_TEMPLATE,
        &[("article", article), ("agenda", agenda), ("evaluation", evaluation)],
    );
    Ok(GenerationPrompt {
        text,
        article: article.to_string(),
        agenda: agenda.to_string(),
        evaluation: evaluation.to_string(),
        stance,
    })
}

pub fn render_theme(theme: &Theme) -> String {
    format!("{} ({} by {})", theme.text, theme.category, theme.attribution)
}

/// Byte offset of the `(` matching the final `)` of `line`, if any.
fn trailing_group_start(line: &str) -> Option<usize> {
    if !line.ends_with(')') {
        return None;
    }
    let mut depth = 0usize;
    for (i, ch) in line.char_indices().rev() {
        match ch {
            ')' => depth += 1,
            '(' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn find_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack
        .as_bytes()
        .windows(needle.len())
        .position(|w| w.eq_ignore_ascii_case(needle.as_bytes()))
}

fn parse_line(line: &str) -> Result<Theme, RejectReason> {
    let start = trailing_group_start(line).ok_or(RejectReason::NoCategoryAnnotation)?;
    let group = &line[start + 1..line.len() - 1];
    let Some(by) = find_ascii_ci(group, " by ") else {
        return match group.trim().parse::<ThemeCategory>() {
            Ok(_) => Err(RejectReason::MissingAttribution),
            Err(_) => Err(RejectReason::NoCategoryAnnotation),
        };
    };
    let category_raw = group[..by].trim();
    let category = category_raw
        .parse::<ThemeCategory>()
        .map_err(|_| RejectReason::UnknownCategory(category_raw.to_string()))?;
    let attribution = group[by + 4..].trim();
    if attribution.is_empty() {
        return Err(RejectReason::MissingAttribution);
    }
    let text = line[..start].trim();
    if text.is_empty() {
        return Err(RejectReason::EmptyThemeText);
    }
    Theme::new(text, category, attribution).map_err(|e| RejectReason::InvalidTheme(e.to_string()))
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dedup_key(theme: &Theme) -> (String, ThemeCategory, String) {
    (
        collapse_ws(&theme.text),
        theme.category,
        collapse_ws(&theme.attribution).to_lowercase(),
    )
}

/// Parses a completion into themes. Never fails: malformed lines land in `rejects`.
pub fn parse_theme_output(completion: &str) -> ParsedExtraction {
    let mut out = ParsedExtraction::default();
    let mut seen = HashSet::new();
    for raw in completion.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(theme) => {
                if seen.insert(dedup_key(&theme)) {
                    out.themes.push(theme);
                } else {
                    out.duplicates += 1;
                }
            }
            Err(reason) => out.rejects.push(Reject {
                line: raw.to_string(),
                reason,
            }),
        }
    }
    out
}

/// Generation protocol settings used for the document-generation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub timeout: Option<f64>,
    pub max_retries: u32,
}

/// Each unique generation prompt is run this many times.
pub const GENERATION_REPEATS: u32 = 5;
/// Comments requested per completion ("five varied comments").
pub const COMMENTS_PER_COMPLETION: u32 = 5;

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            model: "gpt-4".into(),
            temperature: 1.0,
            max_tokens: None,
            timeout: None,
            max_retries: 2,
        }
    }
}

/// Reads one theme per non-blank JSONL line.
pub fn read_themes_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<Theme>, ThemeIoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let bad = |m: String| ThemeIoError::InvalidArgument(format!("line {}: {m}", i + 1));
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let theme: Theme = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        theme.validate().map_err(|e| bad(e.to_string()))?;
        out.push(theme);
    }
    Ok(out)
}

pub fn write_themes_jsonl<W: std::io::Write>(themes: &[Theme], mut w: W) -> std::io::Result<()> {
    for t in themes {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Topic table shipped with the crate: two topics, one pro and one anti row each.
pub const DEFAULT_TOPIC_TABLE: &str = include_str!("../assets/generation_topics.csv");

/// One row of a generation topic table (CSV columns topic, article, stance, agenda, evaluation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicRow {
    pub topic: String,
    pub article: String,
    pub stance: String,
    pub agenda: String,
    pub evaluation: String,
}

/// A unique generation prompt with its run protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptJob {
    pub prompt_id: String,
    pub topic: String,
    pub stance: Stance,
    pub prompt: String,
    pub repeats: u32,
    pub comments_per_completion: u32,
    pub template_version: String,
    pub settings: GenerationSettings,
}

impl PromptJob {
    pub fn expected_comments(&self) -> u32 {
        self.repeats * self.comments_per_completion
    }
}

pub fn read_topic_table<R: std::io::Read>(reader: R) -> Result<Vec<TopicRow>, ThemeIoError> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| ThemeIoError::InvalidArgument(format!("row {}: {e}", i + 1))))
        .collect()
}

/// One job per distinct prompt text, in table order. Rows are numbered from 1 in errors.
pub fn generation_batch(rows: &[TopicRow], settings: &GenerationSettings) -> Result<Vec<PromptJob>, ThemeIoError> {
    if rows.is_empty() {
        return Err(ThemeIoError::InvalidArgument("topic table has no rows".into()));
    }
    let mut seen = HashSet::new();
    let mut jobs = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let incomplete = |field: &str| ThemeIoError::InvalidArgument(format!("row {}: {field} is empty", i + 1));
        if row.topic.trim().is_empty() {
            return Err(incomplete("topic"));
        }
        let stance: Stance = row
            .stance
            .trim()
            .parse()
            .map_err(|_| ThemeIoError::InvalidArgument(format!("row {}: unknown stance {:?}", i + 1, row.stance)))?;
        let prompt = build_generation_prompt(row.article.trim(), row.agenda.trim(), row.evaluation.trim(), stance)
            .map_err(|ThemeIoError::InvalidArgument(m)| ThemeIoError::InvalidArgument(format!("row {}: {m}", i + 1)))?;
        if !seen.insert(prompt.text.clone()) {
            continue;
        }
        let digest = crate::digest::sha256_hex(prompt.text.as_bytes());
        jobs.push(PromptJob {
            prompt_id: format!("p-{}", &digest[..12]),
            topic: row.topic.trim().to_string(),
            stance,
            prompt: prompt.text,
            repeats: GENERATION_REPEATS,
            comments_per_completion: COMMENTS_PER_COMPLETION,
            template_version: TEMPLATE_VERSION.to_string(),
            settings: settings.clone(),
        });
    }
    Ok(jobs)
}
