//! Python bindings: theme grammar, prompts, label mapping, metrics and a mock-backed analysis.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use valuelens::evalharness::metrics::report_from_labels;
use valuelens::pluralism::ComparativeReport;
use valuelens::themeio::read_themes_jsonl;
use valuelens::{evalharness, Backend, Corpus, MockTable, ResonanceLabel, Stance, ThemeCategory};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Theme", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyTheme {
    inner: valuelens::Theme,
}

#[pymethods]
impl PyTheme {
    #[new]
    #[pyo3(signature = (text, category, attribution = "author"))]
    fn new(text: &str, category: &str, attribution: &str) -> PyResult<Self> {
        let category: ThemeCategory = category.parse().map_err(value_err)?;
        let inner = valuelens::Theme::new(text, category, attribution).map_err(value_err)?;
        Ok(PyTheme { inner })
    }

    #[getter]
    fn text(&self) -> &str {
        &self.inner.text
    }

    #[getter]
    fn category(&self) -> &'static str {
        self.inner.category.as_str()
    }

    #[getter]
    fn attribution(&self) -> &str {
        &self.inner.attribution
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    fn render(&self) -> String {
        valuelens::render_theme(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Theme({:?}, {:?}, {:?})", self.inner.text, self.inner.category.as_str(), self.inner.attribution)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Result of parsing one completion.
#[pyclass(name = "Extraction", frozen)]
pub struct PyExtraction {
    #[pyo3(get)]
    themes: Vec<PyTheme>,
    /// `(line, reason)` for every malformed line.
    #[pyo3(get)]
    rejects: Vec<(String, String)>,
    #[pyo3(get)]
    duplicates: usize,
}

#[pyfunction]
fn parse_theme_output(completion: &str) -> PyExtraction {
    let parsed = valuelens::parse_theme_output(completion);
    PyExtraction {
        themes: parsed.themes.into_iter().map(|inner| PyTheme { inner }).collect(),
        rejects: parsed.rejects.into_iter().map(|r| (r.line, r.reason.to_string())).collect(),
        duplicates: parsed.duplicates,
    }
}

#[pyfunction]
fn extraction_prompt(input_text: &str) -> PyResult<String> {
    Ok(valuelens::build_extraction_prompt(input_text).map_err(value_err)?.text)
}

#[pyfunction]
#[pyo3(signature = (article, agenda, evaluation, stance = "pro"))]
fn generation_prompt(article: &str, agenda: &str, evaluation: &str, stance: &str) -> PyResult<String> {
    let stance: Stance = stance.parse().map_err(value_err)?;
    Ok(valuelens::build_generation_prompt(article, agenda, evaluation, stance).map_err(value_err)?.text)
}

#[pyfunction]
fn map_nli_label(raw: &str) -> PyResult<&'static str> {
    Ok(valuelens::map_nli_label(raw).map_err(value_err)?.as_str())
}

fn labels(raw: &[String]) -> PyResult<Vec<ResonanceLabel>> {
    raw.iter().map(|l| valuelens::map_nli_label(l).map_err(value_err)).collect()
}

/// Micro-averaged F1 over three-way labels; NLI names are accepted.
#[pyfunction]
fn micro_f1(gold: Vec<String>, predicted: Vec<String>) -> PyResult<f64> {
    let report = report_from_labels(&labels(&gold)?, &labels(&predicted)?).map_err(value_err)?;
    Ok(report.micro_f1)
}

/// Two-sided test; returns `(u, p_value, method)`.
#[pyfunction]
fn mann_whitney_u(a: Vec<f64>, b: Vec<f64>) -> (f64, f64, &'static str) {
    let r = evalharness::mann_whitney_u(&a, &b);
    let method = match r.method {
        evalharness::stats::PValueMethod::Exact => "exact",
        evalharness::stats::PValueMethod::Asymptotic => "asymptotic",
    };
    (r.u, r.p_value, method)
}

#[pyclass(name = "Report", frozen)]
pub struct PyReport {
    inner: ComparativeReport,
}

#[pymethods]
impl PyReport {
    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __len__(&self) -> usize {
        self.inner.rows().count()
    }
}

/// Comparative analysis of a JSONL corpus against JSONL themes, scored by a mock table.
#[pyfunction]
#[pyo3(signature = (corpus, themes, mock_table, topic = "", min_nonneutral = 0.25, top_k = Some(12)))]
fn analyze_with_mock(
    corpus: PathBuf,
    themes: PathBuf,
    mock_table: PathBuf,
    topic: &str,
    min_nonneutral: f64,
    top_k: Option<usize>,
) -> PyResult<PyReport> {
    let corpus = Corpus::read_jsonl(&corpus).map_err(value_err)?;
    let file = File::open(&themes).map_err(|e| PyIOError::new_err(format!("{}: {e}", themes.display())))?;
    let themes = read_themes_jsonl(BufReader::new(file)).map_err(value_err)?;
    let table = MockTable::from_json_file(&mock_table).map_err(value_err)?;
    let options = valuelens::AnalysisOptions {
        topic: topic.to_string(),
        min_nonneutral,
        top_k,
        ..Default::default()
    };
    let analysis = valuelens::analyze(&corpus, &themes, &Backend::mock(table), &options, None).map_err(|e| match e {
        valuelens::PipelineError::Backend(_) => PyRuntimeError::new_err(e.to_string()),
        other => value_err(other),
    })?;
    Ok(PyReport { inner: analysis.report })
}

#[pymodule]
fn valuelens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTheme>()?;
    m.add_class::<PyExtraction>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(parse_theme_output, m)?)?;
    m.add_function(wrap_pyfunction!(extraction_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(generation_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(map_nli_label, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_with_mock, m)?)?;
    Ok(())
}
