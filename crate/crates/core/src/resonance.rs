//! Pairwise resonance at scale: document x theme matrices and the directed theme network.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError};
use crate::digest::sha256_hex;
use crate::model::{validate_corpus, Corpus, ResonanceJudgment, ResonanceLabel, Scores, Theme, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum ResonanceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unmapped label {0:?}")]
    UnmappedLabel(String),
    #[error("malformed matrix file: {0}")]
    Format(String),
}

/// Maps classifier vocabulary (value-resonance or NLI) onto [`ResonanceLabel`].
pub fn map_nli_label(raw: &str) -> Result<ResonanceLabel, ResonanceError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "resonance" | "entailment" => Ok(ResonanceLabel::Resonance),
        "neutral" => Ok(ResonanceLabel::Neutral),
        "contradiction" => Ok(ResonanceLabel::Contradiction),
        _ => Err(ResonanceError::UnmappedLabel(raw.to_string())),
    }
}

/// Outcome of one classification. Failed cells are kept so partial runs stay usable.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Scored(Verdict),
    Failed(String),
}

impl Cell {
    pub fn verdict(&self) -> Option<&Verdict> {
        match self {
            Cell::Scored(v) => Some(v),
            Cell::Failed(_) => None,
        }
    }

    pub fn label(&self) -> Option<ResonanceLabel> {
        self.verdict().map(|v| v.label)
    }
}

impl From<Result<Verdict, BackendError>> for Cell {
    fn from(r: Result<Verdict, BackendError>) -> Self {
        match r {
            Ok(v) => Cell::Scored(v),
            Err(e) => Cell::Failed(e.to_string()),
        }
    }
}

/// Documents x themes grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceMatrix {
    documents: Vec<String>,
    themes: Vec<String>,
    cells: Vec<Cell>,
}

impl ResonanceMatrix {
    pub fn new(documents: Vec<String>, themes: Vec<String>, cells: Vec<Cell>) -> Result<Self, ResonanceError> {
        if cells.len() != documents.len() * themes.len() {
            return Err(ResonanceError::Format(format!(
                "{} cells for a {}x{} grid",
                cells.len(),
                documents.len(),
                themes.len()
            )));
        }
        for (axis, ids) in [("document", &documents), ("theme", &themes)] {
            let mut seen = HashSet::new();
            if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(ResonanceError::Format(format!("duplicate {axis} id {dup}")));
            }
        }
        Ok(ResonanceMatrix {
            documents,
            themes,
            cells,
        })
    }

    pub fn documents(&self) -> &[String] {
        &self.documents
    }

    pub fn themes(&self) -> &[String] {
        &self.themes
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.themes.len() + col]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = (&str, &Cell)> + '_ {
        self.documents
            .iter()
            .enumerate()
            .map(move |(row, d)| (d.as_str(), self.cell(row, col)))
    }

    pub fn judgment(&self, row: usize, col: usize) -> Option<ResonanceJudgment> {
        self.cell(row, col)
            .verdict()
            .map(|v| ResonanceJudgment::new(&self.documents[row], &self.themes[col], *v))
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c, Cell::Failed(_))).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = MatrixRecord::Header {
            documents: self.documents.clone(),
            themes: self.themes.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (row, doc_id) in self.documents.iter().enumerate() {
            for (col, theme_id) in self.themes.iter().enumerate() {
                let rec = CellRecord::from_cell(doc_id, theme_id, self.cell(row, col));
                serde_json::to_writer(&mut w, &MatrixRecord::Cell(rec))?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ResonanceError> {
        let mut header: Option<(Vec<String>, Vec<String>)> = None;
        let mut found: BTreeMap<(String, String), Cell> = BTreeMap::new();
        for line in r.lines() {
            let line = line.map_err(|e| ResonanceError::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MatrixRecord =
                serde_json::from_str(&line).map_err(|e| ResonanceError::Format(e.to_string()))?;
            match rec {
                MatrixRecord::Header { documents, themes } => header = Some((documents, themes)),
                MatrixRecord::Cell(c) => {
                    let cell = c.to_cell()?;
                    found.insert((c.doc_id, c.theme_id), cell);
                }
            }
        }
        let (documents, themes) = header.ok_or_else(|| ResonanceError::Format("missing header".into()))?;
        let mut cells = Vec::with_capacity(documents.len() * themes.len());
        for d in &documents {
            for t in &themes {
                let cell = found
                    .remove(&(d.clone(), t.clone()))
                    .ok_or_else(|| ResonanceError::Format(format!("missing cell ({d}, {t})")))?;
                cells.push(cell);
            }
        }
        if let Some(((d, t), _)) = found.into_iter().next() {
            return Err(ResonanceError::Format(format!("cell ({d}, {t}) outside the axes")));
        }
        ResonanceMatrix::new(documents, themes, cells)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MatrixRecord {
    Header {
        documents: Vec<String>,
        themes: Vec<String>,
    },
    Cell(CellRecord),
}

#[derive(Debug, Serialize, Deserialize)]
struct CellRecord {
    doc_id: String,
    theme_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<ResonanceLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl CellRecord {
    fn from_cell(doc_id: &str, theme_id: &str, cell: &Cell) -> Self {
        let (label, scores, error) = match cell {
            Cell::Scored(v) => (Some(v.label), Some(v.scores), None),
            Cell::Failed(e) => (None, None, Some(e.clone())),
        };
        CellRecord {
            doc_id: doc_id.into(),
            theme_id: theme_id.into(),
            label,
            scores,
            error,
        }
    }

    fn to_cell(&self) -> Result<Cell, ResonanceError> {
        match (&self.label, &self.scores, &self.error) {
            (Some(label), Some(scores), None) => {
                let v = Verdict {
                    label: *label,
                    scores: *scores,
                };
                if !v.is_consistent() {
                    return Err(ResonanceError::Format(format!(
                        "cell ({}, {}) label disagrees with scores",
                        self.doc_id, self.theme_id
                    )));
                }
                Ok(Cell::Scored(v))
            }
            (None, None, Some(e)) => Ok(Cell::Failed(e.clone())),
            _ => Err(ResonanceError::Format(format!(
                "cell ({}, {}) needs either label+scores or error",
                self.doc_id, self.theme_id
            ))),
        }
    }
}

/// Content-addressed store of completed classifications, so reruns skip paid calls.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellCache {
    entries: BTreeMap<String, Verdict>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    #[serde(flatten)]
    verdict: Verdict,
}

impl CellCache {
    pub fn key(model: &str, premise: &str, hypothesis: &str) -> String {
        sha256_hex(format!("{model}\u{0}{premise}\u{0}{hypothesis}").as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Verdict> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: String, verdict: Verdict) {
        self.entries.insert(key, verdict);
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ResonanceError> {
        let mut cache = CellCache::default();
        for line in r.lines() {
            let line = line.map_err(|e| ResonanceError::Format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord =
                serde_json::from_str(&line).map_err(|e| ResonanceError::Format(e.to_string()))?;
            if rec.verdict.is_consistent() {
                cache.insert(rec.key, rec.verdict);
            }
        }
        Ok(cache)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (key, verdict) in &self.entries {
            serde_json::to_writer(
                &mut w,
                &CacheRecord {
                    key: key.clone(),
                    verdict: *verdict,
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Classifies pairs, answering from `cache` where possible and filling it with new successes.
pub fn classify_cached(backend: &Backend, pairs: &[(String, String)], cache: Option<&mut CellCache>) -> Vec<Cell> {
    let Some(cache) = cache else {
        return backend.classify_batch(pairs).into_iter().map(Cell::from).collect();
    };
    let model = backend.config().model_name.clone();
    let keys: Vec<String> = pairs.iter().map(|(p, h)| CellCache::key(&model, p, h)).collect();
    let mut cells: Vec<Option<Cell>> = keys
        .iter()
        .map(|k| cache.get(k).map(|v| Cell::Scored(*v)))
        .collect();
    let missing: Vec<usize> = (0..pairs.len()).filter(|&i| cells[i].is_none()).collect();
    let todo: Vec<(String, String)> = missing.iter().map(|&i| pairs[i].clone()).collect();
    for (i, result) in missing.into_iter().zip(backend.classify_batch(&todo)) {
        if let Ok(v) = &result {
            cache.insert(keys[i].clone(), *v);
        }
        cells[i] = Some(Cell::from(result));
    }
    cells.into_iter().map(|c| c.expect("all cells resolved")).collect()
}

fn check_unique_texts(themes: &[Theme]) -> Result<(), ResonanceError> {
    let mut seen = HashSet::new();
    for t in themes {
        t.validate()
            .map_err(|e| ResonanceError::InvalidArgument(e.to_string()))?;
        if !seen.insert(t.text.as_str()) {
            return Err(ResonanceError::InvalidArgument(format!(
                "duplicate theme text {:?}",
                t.text
            )));
        }
    }
    Ok(())
}

/// Scores every (document, theme) pair with the document as premise and the theme as hypothesis.
pub fn score_corpus(
    corpus: &Corpus,
    themes: &[Theme],
    backend: &Backend,
    cache: Option<&mut CellCache>,
) -> Result<ResonanceMatrix, ResonanceError> {
    if themes.is_empty() {
        return Err(ResonanceError::InvalidArgument("theme list is empty".into()));
    }
    check_unique_texts(themes)?;
    if let Some(v) = validate_corpus(corpus).first() {
        return Err(ResonanceError::InvalidArgument(format!("corpus: {v}")));
    }
    let pairs: Vec<(String, String)> = corpus
        .documents
        .iter()
        .flat_map(|d| themes.iter().map(move |t| (d.text.clone(), t.text.clone())))
        .collect();
    let cells = classify_cached(backend, &pairs, cache);
    ResonanceMatrix::new(
        corpus.documents.iter().map(|d| d.id.clone()).collect(),
        themes.iter().map(Theme::id).collect(),
        cells,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub cell: Cell,
}

/// Directed resonance/contradiction graph over themes; one edge per ordered pair of distinct nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNetwork {
    pub nodes: Vec<Theme>,
    pub edges: Vec<Edge>,
}

pub fn build_value_network(themes: &[Theme], backend: &Backend) -> Result<ValueNetwork, ResonanceError> {
    if themes.len() < 2 {
        return Err(ResonanceError::InvalidArgument(format!(
            "a value network needs at least 2 themes, got {}",
            themes.len()
        )));
    }
    check_unique_texts(themes)?;
    let mut index = Vec::new();
    let mut pairs = Vec::new();
    for (i, a) in themes.iter().enumerate() {
        for (j, b) in themes.iter().enumerate() {
            if i != j {
                index.push((i, j));
                pairs.push((a.text.clone(), b.text.clone()));
            }
        }
    }
    let edges = index
        .into_iter()
        .zip(classify_cached(backend, &pairs, None))
        .map(|((i, j), cell)| Edge {
            from: themes[i].id(),
            to: themes[j].id(),
            cell,
        })
        .collect();
    Ok(ValueNetwork {
        nodes: themes.to_vec(),
        edges,
    })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum NetworkRecord<'a> {
    Node {
        id: String,
        #[serde(flatten)]
        theme: &'a Theme,
    },
    Edge(CellRecordRef<'a>),
}

#[derive(Serialize)]
struct CellRecordRef<'a> {
    from: &'a str,
    to: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<ResonanceLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

impl ValueNetwork {
    pub fn edge(&self, from: &str, to: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    /// Node records followed by edge records, one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for theme in &self.nodes {
            serde_json::to_writer(&mut w, &NetworkRecord::Node { id: theme.id(), theme })?;
            w.write_all(b"\n")?;
        }
        for e in &self.edges {
            let (label, scores, error) = match &e.cell {
                Cell::Scored(v) => (Some(v.label), Some(v.scores), None),
                Cell::Failed(m) => (None, None, Some(m.as_str())),
            };
            let rec = NetworkRecord::Edge(CellRecordRef {
                from: &e.from,
                to: &e.to,
                label,
                scores,
                error,
            });
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockTable;
    use crate::model::{Document, Position, ThemeCategory};
    use ResonanceLabel::*;

    fn theme(text: &str) -> Theme {
        Theme::new(text, ThemeCategory::Evaluation, "author").unwrap()
    }

    #[test]
    fn nli_vocabulary() {
        assert_eq!(map_nli_label("entailment"), Ok(Resonance));
        assert_eq!(map_nli_label("NEUTRAL"), Ok(Neutral));
        assert_eq!(map_nli_label("Resonance"), Ok(Resonance));
        assert_eq!(map_nli_label("contradiction"), Ok(Contradiction));
        assert_eq!(map_nli_label("maybe"), Err(ResonanceError::UnmappedLabel("maybe".into())));
    }

    fn two_by_three() -> (Corpus, Vec<Theme>, MockTable) {
        let corpus = Corpus::new(
            "c",
            vec![
                Document::new("d1", "Colostrum is dirty; give cow milk.", Position::Anti),
                Document::new("d2", "Colostrum protects the baby.", Position::Pro),
            ],
        );
        let themes = vec![
            theme("Colostrum is dirty."),
            theme("Colostrum is healthy."),
            theme("Cow's milk is clean."),
        ];
        let mut table = MockTable::default();
        table.insert_label(&corpus.documents[0].text, "Colostrum is dirty.", Resonance);
        table.insert_label(&corpus.documents[0].text, "Colostrum is healthy.", Contradiction);
        table.insert_label(&corpus.documents[1].text, "Colostrum is dirty.", Contradiction);
        table.insert_label(&corpus.documents[1].text, "Colostrum is healthy.", Resonance);
        (corpus, themes, table)
    }

    #[test]
    fn two_by_three_matrix() {
        let (corpus, themes, table) = two_by_three();
        let m = score_corpus(&corpus, &themes, &Backend::mock(table), None).unwrap();
        let labels: Vec<_> = (0..2)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| m.cell(r, c).label().unwrap())
            .collect();
        assert_eq!(labels, vec![Resonance, Contradiction, Neutral, Contradiction, Resonance, Neutral]);
        let j = m.judgment(0, 0).unwrap();
        assert_eq!(j.premise_id, "d1");
        assert_eq!(j.hypothesis_id, themes[0].id());
        assert!(j.is_consistent());
    }

    #[test]
    fn self_entailment_cell() {
        let corpus = Corpus::new("c", vec![Document::new("d", "Cow's milk is clean.", Position::Pro)]);
        let m = score_corpus(&corpus, &[theme("Cow's milk is clean.")], &Backend::mock(MockTable::default()), None).unwrap();
        assert_eq!(m.cell(0, 0).label(), Some(Resonance));
    }

    #[test]
    fn empty_theme_list_is_rejected() {
        let (corpus, _, table) = two_by_three();
        assert!(matches!(
            score_corpus(&corpus, &[], &Backend::mock(table), None),
            Err(ResonanceError::InvalidArgument(_))
        ));
    }

    #[test]
    fn failed_cells_are_kept() {
        let (corpus, themes, mut table) = two_by_three();
        table.insert_failure(&corpus.documents[1].text, "Cow's milk is clean.");
        let m = score_corpus(&corpus, &themes, &Backend::mock(table), None).unwrap();
        assert_eq!(m.failed_cells(), 1);
        assert!(matches!(m.cell(1, 2), Cell::Failed(_)));
    }

    #[test]
    fn matrix_jsonl_round_trip() {
        let (corpus, themes, mut table) = two_by_three();
        table.insert_failure(&corpus.documents[0].text, "Cow's milk is clean.");
        let m = score_corpus(&corpus, &themes, &Backend::mock(table), None).unwrap();
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        let back = ResonanceMatrix::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with(r#"{"kind":"header","documents":["d1","d2"]"#));
    }

    #[test]
    fn cache_avoids_repeat_calls() {
        let (corpus, themes, table) = two_by_three();
        let backend = Backend::mock(table);
        let mut cache = CellCache::default();
        let first = score_corpus(&corpus, &themes, &backend, Some(&mut cache)).unwrap();
        assert_eq!(cache.len(), 6);
        // a backend that knows nothing still reproduces the matrix from the cache
        let empty = MockTable {
            default_label: Contradiction,
            ..Default::default()
        };
        let second = score_corpus(&corpus, &themes, &Backend::mock(empty), Some(&mut cache)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn mutual_contradiction_network() {
        let a = "Colostrum is healthy.";
        let b = "Colostrum causes vomiting.";
        let mut table = MockTable::default();
        table.insert_label(a, b, Contradiction);
        table.insert_label(b, a, Contradiction);
        let net = build_value_network(&[theme(a), theme(b)], &Backend::mock(table)).unwrap();
        assert_eq!(net.edges.len(), 2);
        assert!(net.edges.iter().all(|e| e.cell.label() == Some(Contradiction)));
    }

    #[test]
    fn network_edge_count_and_direction() {
        let themes = vec![theme("A."), theme("B."), theme("C.")];
        let mut table = MockTable::default();
        table.insert_label("A.", "B.", Resonance);
        table.insert_label("B.", "A.", Neutral);
        let net = build_value_network(&themes, &Backend::mock(table)).unwrap();
        assert_eq!(net.edges.len(), 6);
        let (a, b) = (themes[0].id(), themes[1].id());
        assert_eq!(net.edge(&a, &b).unwrap().cell.label(), Some(Resonance));
        assert_eq!(net.edge(&b, &a).unwrap().cell.label(), Some(Neutral));
        assert!(net.edges.iter().all(|e| e.from != e.to));
    }

    #[test]
    fn network_needs_two_themes() {
        assert!(build_value_network(&[theme("A.")], &Backend::mock(MockTable::default())).is_err());
    }
}
