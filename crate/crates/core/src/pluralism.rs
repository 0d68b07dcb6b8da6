//! Read-outs over resonance matrices: consolidated themes, per-position proportions,
//! relevance filtering and comparative pro/anti reports.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Backend;
use crate::model::{Corpus, ResonanceLabel, Stance, Theme, ThemeCategory};
use crate::resonance::ResonanceMatrix;

pub const DEFAULT_MIN_NONNEUTRAL: f64 = 0.25;
pub const DEFAULT_TOP_K: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum PluralismError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corpus has no pro or anti documents among the scored rows")]
    NoPosition,
    #[error("incomplete input: theme {0:?} lacks a {1} profile")]
    IncompleteInput(String, Stance),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsolidationStrategy {
    ExactNormalized,
    ClassifierCluster,
}

impl ConsolidationStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ConsolidationStrategy::ExactNormalized => "exact-normalized",
            ConsolidationStrategy::ClassifierCluster => "classifier-cluster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedTheme {
    pub theme: Theme,
    pub multiplicity: usize,
    pub members: Vec<Theme>,
}

/// Trim, collapse whitespace, case-fold and drop trailing periods.
pub fn normalize_theme_text(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches('.').trim_end().to_string()
}

fn exact_groups(raw: &[Theme]) -> Vec<Vec<Theme>> {
    let mut order: Vec<Vec<Theme>> = Vec::new();
    let mut index: HashMap<(ThemeCategory, String), usize> = HashMap::new();
    for t in raw {
        let key = (t.category, normalize_theme_text(&t.text));
        match index.get(&key) {
            Some(&i) => order[i].push(t.clone()),
            None => {
                index.insert(key, order.len());
                order.push(vec![t.clone()]);
            }
        }
    }
    order
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Merges equivalent themes. Categories never mix.
///
/// `ClassifierCluster` single-links exact groups whose representatives resonate in both
/// directions and names each cluster after its lexicographically smallest member text.
pub fn consolidate_themes(
    raw: &[Theme],
    strategy: ConsolidationStrategy,
    backend: Option<&Backend>,
) -> Result<Vec<ConsolidatedTheme>, PluralismError> {
    if raw.is_empty() {
        return Err(PluralismError::InvalidArgument("no themes to consolidate".into()));
    }
    let groups = exact_groups(raw);
    let clusters: Vec<Vec<Theme>> = match strategy {
        ConsolidationStrategy::ExactNormalized => groups,
        ConsolidationStrategy::ClassifierCluster => {
            let backend = backend.ok_or_else(|| {
                PluralismError::InvalidArgument("classifier-cluster needs a classifier backend".into())
            })?;
            let mut index = Vec::new();
            let mut pairs = Vec::new();
            for i in 0..groups.len() {
                for j in 0..groups.len() {
                    if i != j && groups[i][0].category == groups[j][0].category {
                        index.push((i, j));
                        pairs.push((groups[i][0].text.clone(), groups[j][0].text.clone()));
                    }
                }
            }
            let verdicts = backend.classify_batch(&pairs);
            let resonant: std::collections::HashSet<(usize, usize)> = index
                .into_iter()
                .zip(verdicts)
                .filter(|(_, v)| matches!(v, Ok(v) if v.label == ResonanceLabel::Resonance))
                .map(|(ij, _)| ij)
                .collect();
            let mut parent: Vec<usize> = (0..groups.len()).collect();
            for &(i, j) in &resonant {
                if i < j && resonant.contains(&(j, i)) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
            let mut merged: BTreeMap<usize, Vec<Theme>> = BTreeMap::new();
            for (i, g) in groups.into_iter().enumerate() {
                let root = find(&mut parent, i);
                merged.entry(root).or_default().extend(g);
            }
            // root is the smallest index, so BTreeMap order is first-occurrence order
            merged
                .into_values()
                .map(|mut members| {
                    let smallest = members
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.text.cmp(&b.1.text))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    let canonical = members.remove(smallest);
                    members.insert(0, canonical);
                    members
                })
                .collect()
        }
    };
    Ok(clusters
        .into_iter()
        .map(|members| ConsolidatedTheme {
            theme: members[0].clone(),
            multiplicity: members.len(),
            members,
        })
        .collect())
}

/// Resonance/contradiction/neutral proportions of one theme within one stance group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeProfile {
    pub theme_id: String,
    pub theme: Theme,
    pub position: Stance,
    pub n_scored: usize,
    pub n_resonance: usize,
    pub n_neutral: usize,
    pub n_contradiction: usize,
    pub p_resonance: f64,
    pub p_contradiction: f64,
    pub p_neutral: f64,
}

impl ThemeProfile {
    fn from_counts(theme: &Theme, position: Stance, counts: [usize; 3]) -> Self {
        let n = counts.iter().sum::<usize>();
        let p = |k: usize| counts[k] as f64 / n as f64;
        ThemeProfile {
            theme_id: theme.id(),
            theme: theme.clone(),
            position,
            n_scored: n,
            n_resonance: counts[0],
            n_neutral: counts[1],
            n_contradiction: counts[2],
            p_resonance: p(0),
            p_contradiction: p(2),
            p_neutral: p(1),
        }
    }

    /// Share of scored documents that are not neutral toward the theme.
    pub fn nonneutral(&self) -> f64 {
        (self.n_resonance + self.n_contradiction) as f64 / self.n_scored as f64
    }
}

/// One profile per (theme, stance) with at least one scored document, in matrix column order.
///
/// Failed cells are left out of the denominators. Unlabeled documents are ignored.
pub fn position_profiles(
    matrix: &ResonanceMatrix,
    corpus: &Corpus,
    themes: &[Theme],
) -> Result<Vec<ThemeProfile>, PluralismError> {
    let positions: HashMap<&str, Option<Stance>> = corpus
        .documents
        .iter()
        .map(|d| (d.id.as_str(), d.position.stance()))
        .collect();
    let mut row_stance = Vec::with_capacity(matrix.documents().len());
    for id in matrix.documents() {
        let stance = positions.get(id.as_str()).ok_or_else(|| {
            PluralismError::InvalidArgument(format!("matrix document {id} is not in the corpus"))
        })?;
        row_stance.push(*stance);
    }
    if row_stance.iter().all(Option::is_none) {
        return Err(PluralismError::NoPosition);
    }
    let by_id: HashMap<String, &Theme> = themes.iter().map(|t| (t.id(), t)).collect();
    let mut out = Vec::new();
    for (col, theme_id) in matrix.themes().iter().enumerate() {
        let theme = by_id.get(theme_id).ok_or_else(|| {
            PluralismError::InvalidArgument(format!("matrix theme {theme_id} has no theme record"))
        })?;
        for stance in [Stance::Pro, Stance::Anti] {
            let mut counts = [0usize; 3];
            for (row, (_, cell)) in matrix.column(col).enumerate() {
                if row_stance[row] != Some(stance) {
                    continue;
                }
                if let Some(label) = cell.label() {
                    counts[label.index()] += 1;
                }
            }
            if counts.iter().sum::<usize>() > 0 {
                out.push(ThemeProfile::from_counts(theme, stance, counts));
            }
        }
    }
    Ok(out)
}

fn relevance_by_theme(profiles: &[ThemeProfile]) -> Vec<(f64, &Theme, &str)> {
    let mut best: BTreeMap<&str, (f64, &Theme)> = BTreeMap::new();
    for p in profiles {
        let stat = p.nonneutral();
        best.entry(p.theme_id.as_str())
            .and_modify(|e| {
                if stat > e.0 {
                    e.0 = stat;
                }
            })
            .or_insert((stat, &p.theme));
    }
    let mut ranked: Vec<(f64, &Theme, &str)> = best.into_iter().map(|(id, (s, t))| (s, t, id)).collect();
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.text.cmp(&b.1.text))
            .then_with(|| a.2.cmp(b.2))
    });
    ranked
}

/// Themes whose largest non-neutral share across positions reaches `min_nonneutral`,
/// strongest first, ties by theme text.
pub fn relevant_themes(profiles: &[ThemeProfile], min_nonneutral: f64, top_k: Option<usize>) -> Vec<Theme> {
    let mut out: Vec<Theme> = relevance_by_theme(profiles)
        .into_iter()
        .filter(|(s, _, _)| *s >= min_nonneutral)
        .map(|(_, t, _)| t.clone())
        .collect();
    if let Some(k) = top_k {
        out.truncate(k);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub theme: String,
    pub theme_id: String,
    pub category: ThemeCategory,
    pub relevance: f64,
    pub pro: ThemeProfile,
    pub anti: ThemeProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGroup {
    pub category: ThemeCategory,
    pub label: String,
    pub rows: Vec<ReportRow>,
}

/// Provenance carried alongside a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub consolidation: Option<ConsolidationStrategy>,
    pub min_nonneutral: Option<f64>,
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub consolidated: Vec<ConsolidatedTheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparativeReport {
    pub topic: String,
    pub groups: Vec<CategoryGroup>,
    pub metadata: ReportMetadata,
}

/// Builds Obs/Val/Agn row groups for `relevant`; each group is ordered by relevance.
pub fn comparative_report(
    topic: &str,
    pro_profiles: &[ThemeProfile],
    anti_profiles: &[ThemeProfile],
    relevant: &[Theme],
) -> Result<ComparativeReport, PluralismError> {
    let pro: HashMap<&str, &ThemeProfile> = pro_profiles.iter().map(|p| (p.theme_id.as_str(), p)).collect();
    let anti: HashMap<&str, &ThemeProfile> = anti_profiles.iter().map(|p| (p.theme_id.as_str(), p)).collect();
    let mut rows = Vec::with_capacity(relevant.len());
    for theme in relevant {
        let id = theme.id();
        let p = pro
            .get(id.as_str())
            .ok_or_else(|| PluralismError::IncompleteInput(theme.text.clone(), Stance::Pro))?;
        let a = anti
            .get(id.as_str())
            .ok_or_else(|| PluralismError::IncompleteInput(theme.text.clone(), Stance::Anti))?;
        rows.push(ReportRow {
            theme: theme.text.clone(),
            theme_id: id,
            category: theme.category,
            relevance: p.nonneutral().max(a.nonneutral()),
            pro: (*p).clone(),
            anti: (*a).clone(),
        });
    }
    rows.sort_by(|x, y| {
        y.relevance
            .total_cmp(&x.relevance)
            .then_with(|| x.theme.cmp(&y.theme))
            .then_with(|| x.theme_id.cmp(&y.theme_id))
    });
    let groups = ThemeCategory::ALL
        .into_iter()
        .map(|category| CategoryGroup {
            category,
            label: category.short().to_string(),
            rows: rows.iter().filter(|r| r.category == category).cloned().collect(),
        })
        .collect();
    Ok(ComparativeReport {
        topic: topic.to_string(),
        groups,
        metadata: ReportMetadata::default(),
    })
}

pub fn split_by_stance(profiles: &[ThemeProfile]) -> (Vec<ThemeProfile>, Vec<ThemeProfile>) {
    profiles.iter().cloned().partition(|p| p.position == Stance::Pro)
}

pub const CSV_HEADER: [&str; 8] = [
    "category", "theme", "pro_res", "pro_con", "anti_res", "anti_con", "n_pro", "n_anti",
];

impl ComparativeReport {
    pub fn with_metadata(mut self, metadata: ReportMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.groups.iter().flat_map(|g| g.rows.iter())
    }

    /// Plot-ready table; proportions are printed with four decimals.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in self.rows() {
            w.write_record([
                r.category.as_str().to_string(),
                r.theme.clone(),
                format!("{:.4}", r.pro.p_resonance),
                format!("{:.4}", r.pro.p_contradiction),
                format!("{:.4}", r.anti.p_resonance),
                format!("{:.4}", r.anti.p_contradiction),
                r.pro.n_scored.to_string(),
                r.anti.n_scored.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockTable;
    use crate::model::{Document, Position};
    use crate::resonance::{score_corpus, Cell, ResonanceMatrix};
    use crate::Verdict;
    use ResonanceLabel::*;

    fn th(text: &str, cat: ThemeCategory) -> Theme {
        Theme::new(text, cat, "author").unwrap()
    }

    #[test]
    fn exact_normalized_merges_case_and_period() {
        let raw = vec![
            th("Cow's milk is clean.", ThemeCategory::Evaluation),
            th("cow's  milk is clean", ThemeCategory::Evaluation),
        ];
        let out = consolidate_themes(&raw, ConsolidationStrategy::ExactNormalized, None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].multiplicity, 2);
        assert_eq!(out[0].theme.text, "Cow's milk is clean.");
    }

    #[test]
    fn categories_are_not_merged() {
        let raw = vec![
            th("Colostrum is dirty.", ThemeCategory::Evaluation),
            th("Colostrum is dirty.", ThemeCategory::Observation),
        ];
        let out = consolidate_themes(&raw, ConsolidationStrategy::ExactNormalized, None).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn classifier_cluster_single_link() {
        let a = "Colostrum is healthy.";
        let b = "Colostrum is good for the baby.";
        let c = "Colostrum strengthens newborns.";
        let d = "Cow's milk is clean.";
        let mut table = MockTable::default();
        for (x, y) in [(a, b), (b, a), (b, c), (c, b), (a, d)] {
            table.insert_label(x, y, Resonance);
        }
        let raw: Vec<Theme> = [a, b, c, d].iter().map(|t| th(t, ThemeCategory::Evaluation)).collect();
        let backend = Backend::mock(table);
        let out = consolidate_themes(&raw, ConsolidationStrategy::ClassifierCluster, Some(&backend)).unwrap();
        // a-b-c chain via b; d only one-directional with a
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].theme.text, b);
        assert_eq!(out[0].multiplicity, 3);
        assert_eq!(out[1].theme.text, d);
    }

    #[test]
    fn two_theme_cluster() {
        let a = "Colostrum is healthy.";
        let b = "Colostrum is good for the baby.";
        let mut table = MockTable::default();
        table.insert_label(a, b, Resonance);
        table.insert_label(b, a, Resonance);
        let raw = vec![th(a, ThemeCategory::Evaluation), th(b, ThemeCategory::Evaluation)];
        let out = consolidate_themes(&raw, ConsolidationStrategy::ClassifierCluster, Some(&Backend::mock(table))).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].multiplicity, 2);
    }

    #[test]
    fn cluster_requires_backend() {
        let raw = vec![th("A.", ThemeCategory::Agenda)];
        assert!(matches!(
            consolidate_themes(&raw, ConsolidationStrategy::ClassifierCluster, None),
            Err(PluralismError::InvalidArgument(_))
        ));
    }

    fn column_matrix(labels: &[Option<ResonanceLabel>], theme: &Theme) -> ResonanceMatrix {
        ResonanceMatrix::new(
            (0..labels.len()).map(|i| format!("d{i}")).collect(),
            vec![theme.id()],
            labels
                .iter()
                .map(|l| match l {
                    Some(l) => Cell::Scored(Verdict::one_hot(*l)),
                    None => Cell::Failed("down".into()),
                })
                .collect(),
        )
        .unwrap()
    }

    fn corpus_of(positions: &[Position]) -> Corpus {
        Corpus::new(
            "c",
            positions
                .iter()
                .enumerate()
                .map(|(i, p)| Document::new(format!("d{i}"), format!("text {i}"), *p))
                .collect(),
        )
    }

    #[test]
    fn hand_counted_profile() {
        let t = th("T.", ThemeCategory::Agenda);
        let m = column_matrix(&[Some(Resonance), Some(Resonance), Some(Contradiction), Some(Neutral)], &t);
        let profiles = position_profiles(&m, &corpus_of(&[Position::Pro; 4]), &[t]).unwrap();
        assert_eq!(profiles.len(), 1);
        let p = &profiles[0];
        assert_eq!((p.p_resonance, p.p_contradiction, p.p_neutral), (0.5, 0.25, 0.25));
    }

    #[test]
    fn all_neutral_profile() {
        let t = th("T.", ThemeCategory::Agenda);
        let m = column_matrix(&[Some(Neutral); 3], &t);
        let p = &position_profiles(&m, &corpus_of(&[Position::Anti; 3]), &[t]).unwrap()[0];
        assert_eq!((p.p_resonance, p.p_contradiction, p.p_neutral), (0.0, 0.0, 1.0));
    }

    #[test]
    fn failed_cell_shrinks_denominator() {
        let t = th("T.", ThemeCategory::Agenda);
        let m = column_matrix(
            &[Some(Resonance), None, Some(Resonance), Some(Contradiction), Some(Neutral)],
            &t,
        );
        let p = &position_profiles(&m, &corpus_of(&[Position::Pro; 5]), &[t]).unwrap()[0];
        assert_eq!(p.n_scored, 4);
        assert_eq!(p.p_resonance, 0.5);
    }

    #[test]
    fn unlabeled_only_corpus() {
        let t = th("T.", ThemeCategory::Agenda);
        let m = column_matrix(&[Some(Resonance)], &t);
        assert_eq!(
            position_profiles(&m, &corpus_of(&[Position::Unlabeled]), &[t]),
            Err(PluralismError::NoPosition)
        );
    }

    fn profile(text: &str, stance: Stance, counts: [usize; 3]) -> ThemeProfile {
        ThemeProfile::from_counts(&th(text, ThemeCategory::Evaluation), stance, counts)
    }

    #[test]
    fn relevance_uses_max_over_positions() {
        let profiles = vec![
            profile("X.", Stance::Pro, [8, 2, 0]),
            profile("X.", Stance::Anti, [1, 0, 9]),
            profile("Quiet.", Stance::Pro, [0, 10, 0]),
            profile("Quiet.", Stance::Anti, [0, 10, 0]),
        ];
        let r = relevant_themes(&profiles, 0.5, None);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].text, "X.");
        assert!(relevant_themes(&profiles, 0.1, None).iter().all(|t| t.text != "Quiet."));
    }

    #[test]
    fn relevance_ties_break_lexicographically() {
        let profiles = vec![
            profile("Zeta.", Stance::Pro, [1, 1, 0]),
            profile("Alpha.", Stance::Pro, [0, 1, 1]),
            profile("Mid.", Stance::Anti, [2, 0, 0]),
        ];
        let texts: Vec<_> = relevant_themes(&profiles, 0.0, None).into_iter().map(|t| t.text).collect();
        assert_eq!(texts, vec!["Mid.", "Alpha.", "Zeta."]);
        assert_eq!(relevant_themes(&profiles, 0.0, Some(1)).len(), 1);
    }

    #[test]
    fn report_groups_and_missing_profile() {
        let dirty = th("Colostrum is dirty.", ThemeCategory::Evaluation);
        let fair = th("Admissions should be fair.", ThemeCategory::Agenda);
        let pro = vec![
            ThemeProfile::from_counts(&dirty, Stance::Pro, [0, 1, 4]),
            ThemeProfile::from_counts(&fair, Stance::Pro, [5, 0, 0]),
        ];
        let anti = vec![
            ThemeProfile::from_counts(&dirty, Stance::Anti, [4, 1, 0]),
            ThemeProfile::from_counts(&fair, Stance::Anti, [4, 1, 0]),
        ];
        let report = comparative_report("t", &pro, &anti, &[fair.clone(), dirty.clone()]).unwrap();
        let labels: Vec<_> = report.groups.iter().map(|g| g.label.as_str()).collect();
        assert_eq!(labels, vec!["Obs", "Val", "Agn"]);
        assert_eq!(report.groups[1].rows[0].theme, "Colostrum is dirty.");
        assert_eq!(report.groups[2].rows[0].anti.p_resonance, 0.8);
        assert!(report.groups[0].rows.is_empty());
        let err = comparative_report("t", &pro[..1], &anti, std::slice::from_ref(&fair)).unwrap_err();
        assert_eq!(err, PluralismError::IncompleteInput(fair.text.clone(), Stance::Pro));
    }

    #[test]
    fn empty_report_is_valid() {
        let report = comparative_report("t", &[], &[], &[]).unwrap();
        assert_eq!(report.groups.len(), 3);
        assert_eq!(report.to_csv(), "category,theme,pro_res,pro_con,anti_res,anti_con,n_pro,n_anti\n");
    }

    #[test]
    fn csv_quotes_commas() {
        let t = th("Rules, taxes, and greed.", ThemeCategory::Evaluation);
        let pro = vec![ThemeProfile::from_counts(&t, Stance::Pro, [1, 0, 2])];
        let anti = vec![ThemeProfile::from_counts(&t, Stance::Anti, [3, 0, 0])];
        let csv = comparative_report("t", &pro, &anti, &[t]).unwrap().to_csv();
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "Evaluation,\"Rules, taxes, and greed.\",0.3333,0.6667,1.0000,0.0000,3,3"
        );
    }

    #[test]
    fn profiles_over_scored_corpus() {
        let corpus = Corpus::new(
            "c",
            vec![
                Document::new("p1", "pro one", Position::Pro),
                Document::new("a1", "anti one", Position::Anti),
                Document::new("u1", "raw", Position::Unlabeled),
            ],
        );
        let t = th("Claim.", ThemeCategory::Observation);
        let mut table = MockTable::default();
        table.insert_label("pro one", "Claim.", Resonance);
        table.insert_label("anti one", "Claim.", Contradiction);
        let m = score_corpus(&corpus, std::slice::from_ref(&t), &Backend::mock(table), None).unwrap();
        let profiles = position_profiles(&m, &corpus, &[t]).unwrap();
        assert_eq!(profiles.len(), 2);
        assert_eq!(profiles[0].position, Stance::Pro);
        assert_eq!(profiles[0].p_resonance, 1.0);
        assert_eq!(profiles[1].p_contradiction, 1.0);
    }
}
