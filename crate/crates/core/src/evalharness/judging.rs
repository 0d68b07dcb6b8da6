//! Blinded judging of theme extractions.
//!
//! Extraction sets carry their provenance (a human annotator or a model) server-side only.
//! Judges receive [`JudgingItem`]s with opaque ids, rate them, and guess who produced them.
//! Ratings go to an append-only log; a later submission for the same (judge, item)
//! supersedes the earlier one in exports while both stay in the history.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{mann_whitney_u, MannWhitney, PValueMethod};
use super::EvalError;
use crate::digest::sha256_hex;
use crate::model::ThemeCategory;

pub const RATING_MIN: u8 = 1;
pub const RATING_MAX: u8 = 5;
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Provenance {
    Human(String),
    Machine(String),
}

impl Provenance {
    pub fn id(&self) -> &str {
        match self {
            Provenance::Human(id) | Provenance::Machine(id) => id,
        }
    }

    pub fn truth(&self) -> Guess {
        match self {
            Provenance::Human(_) => Guess::Human,
            Provenance::Machine(_) => Guess::Machine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTheme {
    pub text: String,
    pub category: ThemeCategory,
}

/// One extractor's theme set for one source text, with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionSet {
    pub set_id: String,
    pub source_text: String,
    pub themes: Vec<ItemTheme>,
    pub provenance: Provenance,
}

/// What a judge sees. Carries no extractor identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgingItem {
    pub item_id: String,
    pub source_text: String,
    pub themes: Vec<ItemTheme>,
    pub blinded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guess {
    Human,
    Machine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgingRecord {
    pub judge_id: String,
    pub item_id: String,
    pub completeness: u8,
    pub concision: u8,
    /// Theme index within the item to its quality rating.
    pub per_theme_quality: BTreeMap<usize, u8>,
    pub guess: Guess,
    /// Unix milliseconds. Zero means "stamp on receipt".
    #[serde(default)]
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub record_id: u64,
    pub record: JudgingRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub judge_id: String,
    pub seed: u64,
    pub order: Vec<String>,
}

/// Items with provenance stripped, plus the server-side key mapping item ids back.
#[derive(Debug, Clone)]
pub struct BlindedPool {
    items: Vec<JudgingItem>,
    key: BTreeMap<String, Provenance>,
}

fn item_id_for(set_id: &str) -> String {
    format!("i-{}", &sha256_hex(set_id.as_bytes())[..16])
}

impl BlindedPool {
    pub fn new(sets: Vec<ExtractionSet>) -> Result<Self, EvalError> {
        if sets.is_empty() {
            return Err(EvalError::InvalidArgument("no extraction sets".into()));
        }
        let mut items = Vec::with_capacity(sets.len());
        let mut key = BTreeMap::new();
        for set in sets {
            let item_id = item_id_for(&set.set_id);
            if key.insert(item_id.clone(), set.provenance).is_some() {
                return Err(EvalError::InvalidArgument(format!("duplicate set id {}", set.set_id)));
            }
            items.push(JudgingItem {
                item_id,
                source_text: set.source_text,
                themes: set.themes,
                blinded: true,
            });
        }
        Ok(BlindedPool { items, key })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, EvalError> {
        let file = File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        let mut sets = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            sets.push(
                serde_json::from_str::<ExtractionSet>(&line)
                    .map_err(|e| EvalError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
        BlindedPool::new(sets)
    }

    pub fn items(&self) -> &[JudgingItem] {
        &self.items
    }

    pub fn item(&self, item_id: &str) -> Option<&JudgingItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn provenance_key(&self) -> &BTreeMap<String, Provenance> {
        &self.key
    }

    /// Distinct provenance ids (e.g. annotator and model names).
    pub fn provenance_tags(&self) -> BTreeSet<String> {
        self.key.values().map(|p| p.id().to_string()).collect()
    }

    /// Seeded shuffle of all items; the same seed always yields the same order.
    pub fn create_session(&self, judge_id: &str, seed: u64) -> Session {
        let mut order: Vec<String> = self.items.iter().map(|i| i.item_id.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let session_id = format!(
            "s-{}",
            &sha256_hex(format!("{judge_id}\u{0}{seed}\u{0}{}", self.key.keys().cloned().collect::<Vec<_>>().join(",")).as_bytes())[..16]
        );
        Session {
            session_id,
            judge_id: judge_id.to_string(),
            seed,
            order,
        }
    }
}

pub fn validate_record(record: &JudgingRecord, item: &JudgingItem) -> Result<(), EvalError> {
    let in_range = |v: u8| (RATING_MIN..=RATING_MAX).contains(&v);
    if record.judge_id.trim().is_empty() {
        return Err(EvalError::Validation {
            field: "judge_id".into(),
            message: "must be non-empty".into(),
        });
    }
    for (field, v) in [("completeness", record.completeness), ("concision", record.concision)] {
        if !in_range(v) {
            return Err(EvalError::Validation {
                field: field.into(),
                message: format!("{v} is outside {RATING_MIN}-{RATING_MAX}"),
            });
        }
    }
    for (idx, v) in &record.per_theme_quality {
        if *idx >= item.themes.len() {
            return Err(EvalError::Validation {
                field: format!("per_theme_quality.{idx}"),
                message: format!("item has {} themes", item.themes.len()),
            });
        }
        if !in_range(*v) {
            return Err(EvalError::Validation {
                field: format!("per_theme_quality.{idx}"),
                message: format!("{v} is outside {RATING_MIN}-{RATING_MAX}"),
            });
        }
    }
    if record.per_theme_quality.len() != item.themes.len() {
        return Err(EvalError::Validation {
            field: "per_theme_quality".into(),
            message: format!(
                "{} of {} themes rated",
                record.per_theme_quality.len(),
                item.themes.len()
            ),
        });
    }
    Ok(())
}

/// Latest record per (judge, item), by timestamp then record id.
pub fn latest_records(history: &[StoredRecord]) -> Vec<StoredRecord> {
    let mut latest: BTreeMap<(&str, &str), &StoredRecord> = BTreeMap::new();
    for r in history {
        let key = (r.record.judge_id.as_str(), r.record.item_id.as_str());
        match latest.get(&key) {
            Some(prev) if (prev.record.timestamp, prev.record_id) > (r.record.timestamp, r.record_id) => {}
            _ => {
                latest.insert(key, r);
            }
        }
    }
    let mut out: Vec<StoredRecord> = latest.into_values().cloned().collect();
    out.sort_by_key(|r| r.record_id);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuessF1 {
    /// F1 with Machine as the positive class.
    pub f1: f64,
    /// F1 with Human as the positive class.
    pub human_positive_f1: f64,
    pub n: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / den as f64
    }
}

/// Binary F1 of human-vs-machine guesses against true provenance.
pub fn guess_f1(records: &[JudgingRecord], key: &BTreeMap<String, Provenance>) -> Result<GuessF1, EvalError> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        let truth = key
            .get(&r.item_id)
            .ok_or_else(|| EvalError::NotFound(format!("no provenance for item {}", r.item_id)))?
            .truth();
        match (r.guess, truth) {
            (Guess::Machine, Guess::Machine) => tp += 1,
            (Guess::Machine, Guess::Human) => fp += 1,
            (Guess::Human, Guess::Machine) => fn_ += 1,
            (Guess::Human, Guess::Human) => tn += 1,
        }
    }
    Ok(GuessF1 {
        f1: binary_f1(tp, fp, fn_),
        human_positive_f1: binary_f1(tn, fn_, fp),
        n: records.len(),
        true_positive: tp,
        false_positive: fp,
        false_negative: fn_,
        true_negative: tn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Completeness,
    Concision,
    ThemeQuality,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Completeness, Dimension::Concision, Dimension::ThemeQuality];

    fn ratings(self, r: &JudgingRecord) -> Vec<f64> {
        match self {
            Dimension::Completeness => vec![r.completeness as f64],
            Dimension::Concision => vec![r.concision as f64],
            Dimension::ThemeQuality => r.per_theme_quality.values().map(|&v| v as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub test: String,
    pub dimension: Dimension,
    pub group_a: Vec<String>,
    pub group_b: Vec<String>,
    pub n_a: usize,
    pub n_b: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub method: PValueMethod,
    pub alpha: f64,
    pub significant: bool,
}

pub const TEST_NAME: &str = "mann-whitney-u (two-sided)";

/// Compares rating distributions of two extractor groups on one dimension.
pub fn compare_groups(
    records: &[JudgingRecord],
    key: &BTreeMap<String, Provenance>,
    group_a: &[String],
    group_b: &[String],
    dimension: Dimension,
) -> Result<GroupComparison, EvalError> {
    let collect = |group: &[String]| -> Vec<f64> {
        records
            .iter()
            .filter(|r| key.get(&r.item_id).is_some_and(|p| group.iter().any(|g| g == p.id())))
            .flat_map(|r| dimension.ratings(r))
            .collect()
    };
    let (a, b) = (collect(group_a), collect(group_b));
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::Underpowered {
            n_a: a.len(),
            n_b: b.len(),
        });
    }
    let MannWhitney { u, p_value, method } = mann_whitney_u(&a, &b);
    Ok(GroupComparison {
        test: TEST_NAME.into(),
        dimension,
        group_a: group_a.to_vec(),
        group_b: group_b.to_vec(),
        n_a: a.len(),
        n_b: b.len(),
        statistic: u,
        p_value,
        method,
        alpha: ALPHA,
        significant: p_value < ALPHA,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub session_id: String,
    pub done: bool,
    pub completed: usize,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item: Option<JudgingItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub records: Vec<StoredRecord>,
    pub history: Vec<StoredRecord>,
    pub provenance: BTreeMap<String, Provenance>,
    pub guess_f1: GuessF1,
    /// Each extractor against all others, per dimension; underpowered pairs are skipped.
    pub comparisons: Vec<GroupComparison>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "lowercase")]
enum LogEvent {
    Session(Session),
    Rating(StoredRecord),
}

enum Commit<T> {
    Append(LogEvent, T),
    Existing(T),
}

#[derive(Debug, Default, Clone)]
struct Snapshot {
    sessions: BTreeMap<String, Session>,
    history: Vec<StoredRecord>,
}

/// Session registry and append-only rating log shared by concurrent judges.
///
/// Writes go through a single mutex-guarded log writer; readers clone an `Arc` snapshot.
pub struct JudgingStore {
    pool: BlindedPool,
    writer: Mutex<Option<File>>,
    path: Option<PathBuf>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl JudgingStore {
    pub fn in_memory(pool: BlindedPool) -> Self {
        JudgingStore {
            pool,
            writer: Mutex::new(None),
            path: None,
            snapshot: RwLock::new(Arc::new(Snapshot::default())),
        }
    }

    /// Opens (or creates) the log at `path` and replays it.
    pub fn open(pool: BlindedPool, path: &Path) -> Result<Self, EvalError> {
        let mut snapshot = Snapshot::default();
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let event: LogEvent = match serde_json::from_str(line) {
                    Ok(e) => e,
                    // a torn final line from an interrupted write is dropped
                    Err(e) if e.is_eof() && i + 1 == raw.lines().count() => break,
                    Err(e) => return Err(EvalError::Format(format!("{}:{}: {e}", path.display(), i + 1))),
                };
                match event {
                    LogEvent::Session(s) => {
                        snapshot.sessions.insert(s.session_id.clone(), s);
                    }
                    LogEvent::Rating(r) => snapshot.history.push(r),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Ok(JudgingStore {
            pool,
            writer: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
            snapshot: RwLock::new(Arc::new(snapshot)),
        })
    }

    pub fn pool(&self) -> &BlindedPool {
        &self.pool
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    /// Under the writer lock: decides against the current snapshot, appends, then publishes.
    fn commit<T>(&self, decide: impl FnOnce(&Snapshot) -> Commit<T>) -> Result<T, EvalError> {
        let mut writer = self.writer.lock().expect("log writer poisoned");
        let current = self.snapshot();
        let (event, out) = match decide(&current) {
            Commit::Append(event, out) => (event, out),
            Commit::Existing(out) => return Ok(out),
        };
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_vec(&event).expect("log events serialize");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.sync_data())
                .map_err(|e| EvalError::Io(e.to_string()))?;
        }
        let mut next = (*current).clone();
        match event {
            LogEvent::Session(s) => {
                next.sessions.insert(s.session_id.clone(), s);
            }
            LogEvent::Rating(r) => next.history.push(r),
        }
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(next);
        Ok(out)
    }

    pub fn create_session(&self, judge_id: &str, seed: u64) -> Result<Session, EvalError> {
        if judge_id.trim().is_empty() {
            return Err(EvalError::InvalidArgument("judge id is empty".into()));
        }
        let session = self.pool.create_session(judge_id, seed);
        self.commit(|snap| match snap.sessions.get(&session.session_id) {
            Some(existing) => Commit::Existing(existing.clone()),
            None => Commit::Append(LogEvent::Session(session.clone()), session.clone()),
        })
    }

    pub fn session(&self, session_id: &str) -> Option<Session> {
        self.snapshot().sessions.get(session_id).cloned()
    }

    pub fn next_item(&self, session_id: &str) -> Result<NextItem, EvalError> {
        let snap = self.snapshot();
        let session = snap
            .sessions
            .get(session_id)
            .ok_or_else(|| EvalError::NotFound(format!("session {session_id}")))?;
        let rated: BTreeSet<&str> = snap
            .history
            .iter()
            .filter(|r| r.record.judge_id == session.judge_id)
            .map(|r| r.record.item_id.as_str())
            .collect();
        let completed = session.order.iter().filter(|id| rated.contains(id.as_str())).count();
        let next = session.order.iter().find(|id| !rated.contains(id.as_str()));
        Ok(NextItem {
            session_id: session_id.to_string(),
            done: next.is_none(),
            completed,
            total: session.order.len(),
            item: next.and_then(|id| self.pool.item(id).cloned()),
        })
    }

    /// Validates and appends a rating; returns its record id.
    ///
    /// A repeated idempotency key from the same judge returns the original id without writing.
    pub fn record_rating(&self, mut record: JudgingRecord, now_ms: i64) -> Result<u64, EvalError> {
        let item = self
            .pool
            .item(&record.item_id)
            .ok_or_else(|| EvalError::NotFound(format!("item {}", record.item_id)))?;
        validate_record(&record, item)?;
        if record.timestamp == 0 {
            record.timestamp = now_ms;
        }
        self.commit(|snap| {
            if let Some(key) = &record.idempotency_key {
                if let Some(prev) = snap.history.iter().find(|r| {
                    r.record.judge_id == record.judge_id && r.record.idempotency_key.as_ref() == Some(key)
                }) {
                    return Commit::Existing(prev.record_id);
                }
            }
            let record_id = snap.history.iter().map(|r| r.record_id + 1).max().unwrap_or(1);
            Commit::Append(
                LogEvent::Rating(StoredRecord {
                    record_id,
                    record: record.clone(),
                }),
                record_id,
            )
        })
    }

    pub fn history(&self) -> Vec<StoredRecord> {
        self.snapshot().history.clone()
    }

    pub fn latest(&self) -> Vec<StoredRecord> {
        latest_records(&self.snapshot().history)
    }

    pub fn export(&self) -> Result<Export, EvalError> {
        let history = self.history();
        let records = latest_records(&history);
        let plain: Vec<JudgingRecord> = records.iter().map(|r| r.record.clone()).collect();
        let key = self.pool.provenance_key();
        let mut comparisons = Vec::new();
        let tags = self.pool.provenance_tags();
        for tag in &tags {
            let others: Vec<String> = tags.iter().filter(|t| *t != tag).cloned().collect();
            for dim in Dimension::ALL {
                if let Ok(c) = compare_groups(&plain, key, std::slice::from_ref(tag), &others, dim) {
                    comparisons.push(c);
                }
            }
        }
        Ok(Export {
            guess_f1: guess_f1(&plain, key)?,
            records,
            history,
            provenance: key.clone(),
            comparisons,
        })
    }

    pub fn flush(&self) -> Result<(), EvalError> {
        if let Some(f) = self.writer.lock().expect("log writer poisoned").as_mut() {
            f.flush().and_then(|_| f.sync_all()).map_err(|e| EvalError::Io(e.to_string()))?;
        }
        Ok(())
    }
}
