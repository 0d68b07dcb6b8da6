//! `valuelens`: extraction, analysis, networks, evaluation, prompt batches and the judging service.
//!
//! Exit codes: 0 ok, 2 input error, 3 backend failure, 4 analysis precondition, 5 service failure.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use valuelens::evalharness::metrics::{micro_f1, read_labeled_pairs};
use valuelens::evalharness::EvalError;
use valuelens::pipeline::{analyze, extract_corpus, AnalysisOptions, PipelineError};
use valuelens::pluralism::{ConsolidationStrategy, PluralismError, DEFAULT_MIN_NONNEUTRAL, DEFAULT_TOP_K};
use valuelens::resonance::{build_value_network, CellCache, ResonanceError};
use valuelens::themeio::{generation_batch, read_themes_jsonl, read_topic_table, write_themes_jsonl, GenerationSettings};
use valuelens::{Backend, BackendConfig, BackendError, Corpus, MockTable, Theme};
use valuelens_server::{ServeError, ServerConfig, DEFAULT_ADMIN_TOKEN_ENV};

use manifest::Run;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Backend(String),
    Precondition(String),
    Service(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Precondition(_) => 4,
            CliError::Service(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Backend(m) | CliError::Precondition(m) | CliError::Service(m) => m,
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::InvalidArgument(_) => CliError::Input(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::SinglePosition | PipelineError::Pluralism(PluralismError::NoPosition) => {
                CliError::Precondition(e.to_string())
            }
            PipelineError::Backend(b) => b.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ResonanceError> for CliError {
    fn from(e: ResonanceError) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "valuelens", version, about = "Value analysis of text corpora")]
struct Cli {
    /// Backend config file (TOML with [extractor] and [classifier] sections).
    #[arg(long, global = true, env = "VALUELENS_CONFIG")]
    config: Option<PathBuf>,
    /// Answer every inference call from a mock table (JSON) instead of a service.
    #[arg(long, global = true, conflicts_with = "config")]
    mock: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract themes from every document of a corpus.
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score themes against a two-position corpus and write the comparative report.
    Analyze(AnalyzeArgs),
    /// Classify every ordered pair of themes into a directed network.
    Network {
        #[arg(long)]
        themes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Micro-F1, per-class metrics and confusion matrix for labeled pairs.
    Eval {
        /// JSONL with premise, hypothesis, gold and optionally predicted.
        #[arg(long)]
        gold: PathBuf,
        /// Fill missing predictions with the configured classifier.
        #[arg(long)]
        predict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a topic table (CSV: topic, article, stance, agenda, evaluation) into a prompt batch.
    Genprompts {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the blinded judging API.
    JudgeServe {
        /// JSONL extraction sets with provenance.
        #[arg(long)]
        items: PathBuf,
        /// Append-only rating log; replayed on start.
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8787")]
        bind: String,
        /// Static UI assets served under `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Environment variable holding the export bearer token.
        #[arg(long, default_value = DEFAULT_ADMIN_TOKEN_ENV)]
        admin_token_env: String,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Strategy {
    ExactNormalized,
    ClassifierCluster,
}

impl From<Strategy> for ConsolidationStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::ExactNormalized => ConsolidationStrategy::ExactNormalized,
            Strategy::ClassifierCluster => ConsolidationStrategy::ClassifierCluster,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Theme JSONL; themes are extracted from the corpus when omitted.
    #[arg(long)]
    themes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "")]
    topic: String,
    /// Minimum non-neutral share for a theme to be reported.
    #[arg(long, default_value_t = DEFAULT_MIN_NONNEUTRAL)]
    min_nonneutral: f64,
    /// Maximum number of reported themes.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "exact-normalized")]
    strategy: Strategy,
    /// Ignore and overwrite an existing cell cache in the output directory.
    #[arg(long)]
    fresh: bool,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    extractor: Option<BackendConfig>,
    classifier: Option<BackendConfig>,
}

struct Backends {
    extractor: Option<Backend>,
    classifier: Option<Backend>,
    settings: serde_json::Value,
}

impl Backends {
    fn load(cli: &Cli, run: &mut Run) -> Result<Backends, CliError> {
        if let Some(path) = &cli.mock {
            run.input("mock_table", path)?;
            let table = MockTable::from_json_file(path).map_err(|e| CliError::Input(e.to_string()))?;
            return Ok(Backends {
                extractor: Some(Backend::mock(table.clone())),
                classifier: Some(Backend::mock(table)),
                settings: json!({ "backend": "mock" }),
            });
        }
        let Some(path) = &cli.config else {
            return Ok(Backends {
                extractor: None,
                classifier: None,
                settings: json!({ "backend": null }),
            });
        };
        let raw = String::from_utf8(run.input("config", path)?)
            .map_err(|_| CliError::Input(format!("config {} is not UTF-8", path.display())))?;
        let config: FileConfig =
            toml::from_str(&raw).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
        let build = |c: &Option<BackendConfig>| -> Result<Option<Backend>, CliError> {
            c.as_ref()
                .map(|c| {
                    c.validate()?;
                    Backend::http(c.clone())
                })
                .transpose()
                .map_err(CliError::from)
        };
        Ok(Backends {
            extractor: build(&config.extractor)?,
            classifier: build(&config.classifier)?,
            settings: json!({ "backend": config }),
        })
    }

    fn extractor(&self) -> Result<&Backend, CliError> {
        self.extractor
            .as_ref()
            .ok_or_else(|| CliError::Input("no extractor backend configured (use --mock or --config)".into()))
    }

    fn classifier(&self) -> Result<&Backend, CliError> {
        self.classifier
            .as_ref()
            .ok_or_else(|| CliError::Input("no classifier backend configured (use --mock or --config)".into()))
    }
}

fn read_corpus(run: &mut Run, path: &Path) -> Result<Corpus, CliError> {
    run.input("corpus", path)?;
    Corpus::read_jsonl(path).map_err(|e| CliError::Input(e.to_string()))
}

fn read_themes(run: &mut Run, path: &Path) -> Result<Vec<Theme>, CliError> {
    let bytes = run.input("themes", path)?;
    read_themes_jsonl(bytes.as_slice()).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("rows serialize");
        out.push(b'\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

fn settings(backends: &Backends, options: serde_json::Value) -> serde_json::Value {
    json!({ "backends": backends.settings, "options": options })
}

/// Starts a run and loads the backends, recording both in the manifest.
fn start(cli: &Cli, command: &str, out: &Path, options: serde_json::Value) -> Result<(Run, Backends), CliError> {
    let mut run = Run::new(command, out, None)?;
    let backends = Backends::load(cli, &mut run)?;
    run.settings(&settings(&backends, options));
    Ok((run, backends))
}

fn cmd_extract(cli: &Cli, corpus_path: &Path, out: &Path) -> Result<(), CliError> {
    let (mut run, backends) = start(cli, "extract", out, json!({}))?;
    let corpus = read_corpus(&mut run, corpus_path)?;
    let extractions = extract_corpus(&corpus, backends.extractor()?)?;
    let themes: Vec<Theme> = extractions.iter().flat_map(|e| e.themes.clone()).collect();
    run.write("extraction.jsonl", &jsonl(&extractions))?;
    let mut buf = Vec::new();
    write_themes_jsonl(&themes, &mut buf).expect("in-memory write");
    run.write("themes.jsonl", &buf)?;
    run.finish()?;
    let rejects: usize = extractions.iter().map(|e| e.rejects.len()).sum();
    log::info!("{} themes from {} documents, {rejects} rejected lines", themes.len(), corpus.documents.len());
    Ok(())
}

fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<(), CliError> {
    let options = AnalysisOptions {
        topic: args.topic.clone(),
        strategy: args.strategy.into(),
        min_nonneutral: args.min_nonneutral,
        top_k: Some(args.top_k),
    };
    if !(0.0..=1.0).contains(&options.min_nonneutral) {
        return Err(CliError::Input("--min-nonneutral must lie in [0, 1]".into()));
    }
    let (mut run, backends) = start(
        cli,
        "analyze",
        &args.out,
        serde_json::to_value(&options).expect("options serialize"),
    )?;
    let classifier = backends.classifier()?;
    let corpus = read_corpus(&mut run, &args.corpus)?;

    let raw_themes = match &args.themes {
        Some(path) => read_themes(&mut run, path)?,
        None => {
            let extractions = extract_corpus(&corpus, backends.extractor()?)?;
            run.write("extraction.jsonl", &jsonl(&extractions))?;
            extractions.into_iter().flat_map(|e| e.themes).collect()
        }
    };

    let cache_path = run.output_path("cell_cache.jsonl");
    let mut cache = if !args.fresh && cache_path.is_file() {
        let cache = CellCache::read_jsonl(run.input("cell_cache", &cache_path)?.as_slice())?;
        log::info!("resuming with {} cached cells", cache.len());
        cache
    } else {
        CellCache::default()
    };
    let analysis = analyze(&corpus, &raw_themes, classifier, &options, Some(&mut cache))?;
    let cells = analysis.matrix.documents().len() * analysis.matrix.themes().len();
    let failed = analysis.matrix.failed_cells();
    if failed > 0 && failed == cells {
        return Err(CliError::Backend(format!("all {cells} classifications failed")));
    }
    if failed > 0 {
        log::warn!("{failed} of {cells} cells failed and are excluded from proportions");
    }

    let mut buf = Vec::new();
    write_themes_jsonl(&analysis.themes, &mut buf).expect("in-memory write");
    run.write("themes.jsonl", &buf)?;
    run.write("consolidated.json", &pretty(&analysis.consolidated))?;
    let mut buf = Vec::new();
    analysis.matrix.write_jsonl(&mut buf).expect("in-memory write");
    run.write("matrix.jsonl", &buf)?;
    let mut buf = Vec::new();
    cache.write_jsonl(&mut buf).expect("in-memory write");
    run.write("cell_cache.jsonl", &buf)?;
    run.write("profiles.json", &pretty(&analysis.profiles))?;
    run.write("report.csv", analysis.report.to_csv().as_bytes())?;
    run.write("report.json", analysis.report.to_json().as_bytes())?;
    run.finish()?;
    Ok(())
}

fn cmd_network(cli: &Cli, themes_path: &Path, out: &Path) -> Result<(), CliError> {
    let (mut run, backends) = start(cli, "network", out, json!({}))?;
    let themes = read_themes(&mut run, themes_path)?;
    let network = build_value_network(&themes, backends.classifier()?)?;
    if !network.edges.is_empty() && network.edges.iter().all(|e| e.cell.verdict().is_none()) {
        return Err(CliError::Backend(format!("all {} classifications failed", network.edges.len())));
    }
    let mut buf = Vec::new();
    network.write_jsonl(&mut buf).expect("in-memory write");
    run.write("network.jsonl", &buf)?;
    run.finish()?;
    Ok(())
}

fn eval_error(e: EvalError) -> CliError {
    CliError::Input(e.to_string())
}

fn cmd_eval(cli: &Cli, gold: &Path, predict: bool, out: &Path) -> Result<(), CliError> {
    let (mut run, backends) = start(cli, "eval", out, json!({ "predict": predict }))?;
    let bytes = run.input("gold", gold)?;
    let mut pairs = read_labeled_pairs(bytes.as_slice()).map_err(|e| CliError::Input(format!("{}: {e}", gold.display())))?;
    if predict {
        let classifier = backends.classifier()?;
        let missing: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].predicted.is_none()).collect();
        let queries: Vec<(String, String)> = missing
            .iter()
            .map(|&i| (pairs[i].premise.clone(), pairs[i].hypothesis.clone()))
            .collect();
        for (i, verdict) in missing.into_iter().zip(classifier.classify_batch(&queries)) {
            pairs[i].predicted = Some(verdict?.label);
        }
        run.write("predictions.jsonl", &jsonl(&pairs))?;
    }
    let report = micro_f1(&pairs).map_err(eval_error)?;
    run.write("metrics.json", &pretty(&report))?;
    run.write("confusion.csv", report.confusion_csv().as_bytes())?;
    run.finish()?;
    println!("micro-F1 {:.4} over {} pairs", report.micro_f1, report.n);
    Ok(())
}

fn cmd_genprompts(table: &Path, out: &Path) -> Result<(), CliError> {
    let settings = GenerationSettings::default();
    let mut run = Run::new("genprompts", out, None)?;
    run.settings(&json!({ "generation": settings }));
    let bytes = run.input("table", table)?;
    let rows = read_topic_table(bytes.as_slice()).map_err(|e| CliError::Input(format!("{}: {e}", table.display())))?;
    let jobs = generation_batch(&rows, &settings).map_err(|e| CliError::Input(format!("{}: {e}", table.display())))?;
    run.write("prompts.jsonl", &jsonl(&jobs))?;
    run.finish()?;
    println!("{} unique prompts x {} repeats", jobs.len(), valuelens::themeio::GENERATION_REPEATS);
    Ok(())
}

fn cmd_judge_serve(config: ServerConfig) -> Result<(), CliError> {
    valuelens_server::run_blocking(&config, |addr| {
        println!("listening on http://{addr}");
    })
    .map_err(|e| match e {
        ServeError::Store(EvalError::Io(_)) => CliError::Service(e.to_string()),
        ServeError::Store(_) => CliError::Input(e.to_string()),
        ServeError::Bind { .. } | ServeError::Io(_) => CliError::Service(e.to_string()),
    })
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Extract { corpus, out } => cmd_extract(cli, corpus, out),
        Command::Analyze(args) => cmd_analyze(cli, args),
        Command::Network { themes, out } => cmd_network(cli, themes, out),
        Command::Eval { gold, predict, out } => cmd_eval(cli, gold, *predict, out),
        Command::Genprompts { table, out } => cmd_genprompts(table, out),
        Command::JudgeServe {
            items,
            store,
            bind,
            ui_dir,
            admin_token_env,
        } => cmd_judge_serve(ServerConfig {
            items: items.clone(),
            store: store.clone(),
            bind: bind.clone(),
            ui_dir: ui_dir.clone(),
            admin_token_env: admin_token_env.clone(),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
