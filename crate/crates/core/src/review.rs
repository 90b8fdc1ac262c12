//! Persistent review projects: a ranked queue of predicted links that
//! engineers approve or reject, with approvals exported as an answer file.
//!
//! Each project lives in its own directory under the store root:
//!
//! ```text
//! <root>/<project-id>/
//!     project.json      metadata, written once
//!     dataset.json      the dataset the project was created from
//!     scores.json       current scorer and per-pair scores (replaced atomically)
//!     decisions.jsonl   append-only decision log, fsynced per entry
//!     snapshot.json     decided states up to a log sequence number and byte offset
//! ```
//!
//! Item states are derived only from the decision log; the snapshot is a
//! replay shortcut and can be deleted at any time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{answers_csv, generate_candidates, CorpusError, Dataset, PairId};
use crate::exec::Parallelism;
use crate::scoring::{score_candidates, score_pairs, ScoredCandidate, ScorerSpec, ScoringError};
use crate::textpipe::{TextError, Tokenizer, TokenizerProfile};

pub const DEFAULT_SNAPSHOT_EVERY: u64 = 50;

const META_FILE: &str = "project.json";
const DATASET_FILE: &str = "dataset.json";
const SCORES_FILE: &str = "scores.json";
const LOG_FILE: &str = "decisions.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("project exists: {0}")]
    ProjectExists(String),
    #[error("unknown project: {0}")]
    NotFound(String),
    #[error(
        "invalid project id {0:?}: use letters, digits, '.', '_' or '-', not starting with '.'"
    )]
    InvalidId(String),
    #[error("pair {0} is not a candidate of this project")]
    UnknownPair(PairId),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("dataset has {0} queries; name the one to review")]
    AmbiguousQuery(usize),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("decision log line {line}: {detail}")]
    CorruptLog { line: usize, detail: String },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReviewError + '_ {
    move |source| ReviewError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approve,
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemState {
    Pending,
    Approved,
    Rejected,
}

impl From<Verdict> for ItemState {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Approve => ItemState::Approved,
            Verdict::Reject => ItemState::Rejected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLogEntry {
    pub seq: u64,
    pub pair_id: PairId,
    pub verdict: Verdict,
    pub reviewer: String,
    /// RFC 3339, UTC, millisecond precision.
    pub timestamp: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub id: String,
    pub dataset: String,
    pub query_id: String,
    /// Scorer the project was created with.
    pub scorer: ScorerSpec,
    pub created_at: String,
    pub snapshot_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScoresFile {
    scorer: ScorerSpec,
    scores: Vec<ScoredCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SnapshotDecision {
    pair_id: PairId,
    verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    log_offset: u64,
    decisions: Vec<SnapshotDecision>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub pair_id: PairId,
    pub source_body: String,
    pub target_body: String,
    pub score: f64,
    pub overlapping_terms: Vec<String>,
    pub state: ItemState,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VettedMetrics {
    pub decided: usize,
    pub approved: usize,
    pub rejected: usize,
    pub pending: usize,
    /// Share of approvals that are true links; absent without truths or approvals.
    pub precision_vs_truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    #[serde(flatten)]
    pub meta: ProjectMeta,
    pub current_scorer: String,
    pub candidate_count: usize,
    pub log_entries: u64,
    pub vetted_metrics: VettedMetrics,
}

/// Latest verdict per pair, in log order.
pub fn replay<'a, I>(entries: I) -> BTreeMap<PairId, Verdict>
where
    I: IntoIterator<Item = &'a DecisionLogEntry>,
{
    let mut states = BTreeMap::new();
    for e in entries {
        states.insert(e.pair_id.clone(), e.verdict);
    }
    states
}

fn now_millis() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReviewError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| ReviewError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `value` next to `path` and renames it into place.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), ReviewError> {
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec(value).map_err(|source| ReviewError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    sync_dir(path.parent().unwrap_or(Path::new(".")));
    Ok(())
}

fn sync_dir(dir: &Path) {
    // Directory fsync is unsupported on some platforms; the rename itself has
    // already happened, so a failure here only weakens crash durability.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Parses newline-terminated log lines and returns them with the byte length
/// of that complete prefix. A trailing line without a newline is a torn write
/// and is left for the caller to truncate.
fn parse_log(
    bytes: &[u8],
    first_line: usize,
) -> Result<(Vec<DecisionLogEntry>, usize), ReviewError> {
    let mut entries = Vec::new();
    let mut pos = 0;
    let mut line_no = first_line;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[pos..pos + nl];
        if !line.iter().all(u8::is_ascii_whitespace) {
            let e: DecisionLogEntry =
                serde_json::from_slice(line).map_err(|e| ReviewError::CorruptLog {
                    line: line_no,
                    detail: e.to_string(),
                })?;
            entries.push(e);
        }
        pos += nl + 1;
        line_no += 1;
    }
    Ok((entries, pos))
}

fn check_sequence(entries: &[DecisionLogEntry], mut last: u64) -> Result<u64, ReviewError> {
    for (i, e) in entries.iter().enumerate() {
        if e.seq <= last {
            return Err(ReviewError::CorruptLog {
                line: i + 1,
                detail: format!("sequence {} does not follow {last}", e.seq),
            });
        }
        last = e.seq;
    }
    Ok(last)
}

pub struct Project {
    dir: PathBuf,
    meta: ProjectMeta,
    dataset: Arc<Dataset>,
    scorer: ScorerSpec,
    scores: BTreeMap<PairId, f64>,
    states: BTreeMap<PairId, Verdict>,
    last_seq: u64,
    log: File,
    log_len: u64,
    since_snapshot: u64,
    source_tok: Tokenizer,
    target_tok: Tokenizer,
}

impl std::fmt::Debug for Project {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Project")
            .field("dir", &self.dir)
            .field("meta", &self.meta)
            .field("last_seq", &self.last_seq)
            .finish_non_exhaustive()
    }
}

impl Project {
    /// Opens a project directory, replaying the decision log from the last
    /// snapshot and truncating a torn trailing line.
    pub fn open(dir: &Path) -> Result<Project, ReviewError> {
        let meta: ProjectMeta = read_json(&dir.join(META_FILE))?;
        let dataset: Dataset = read_json(&dir.join(DATASET_FILE))?;
        let scores_file: ScoresFile = read_json(&dir.join(SCORES_FILE))?;

        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let snapshot: Option<Snapshot> = if snapshot_path.exists() {
            Some(read_json(&snapshot_path)?)
        } else {
            None
        };

        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        let file_len = log.metadata().map_err(io_err(&log_path))?.len();

        // A snapshot pointing past the end of the log is stale; replay fully.
        let snapshot = snapshot.filter(|s| s.log_offset <= file_len);
        let (mut states, start_seq, offset) = match &snapshot {
            Some(s) => (
                s.decisions
                    .iter()
                    .map(|d| (d.pair_id.clone(), d.verdict))
                    .collect(),
                s.seq,
                s.log_offset,
            ),
            None => (BTreeMap::new(), 0, 0),
        };

        log.seek(SeekFrom::Start(offset))
            .map_err(io_err(&log_path))?;
        let mut tail = Vec::new();
        log.read_to_end(&mut tail).map_err(io_err(&log_path))?;
        let (entries, complete) = parse_log(&tail, 1)?;
        let last_seq = check_sequence(&entries, start_seq)?;
        let log_len = offset + complete as u64;
        if log_len < file_len {
            log.set_len(log_len).map_err(io_err(&log_path))?;
            log.sync_all().map_err(io_err(&log_path))?;
        }
        for e in &entries {
            states.insert(e.pair_id.clone(), e.verdict);
        }

        let query = dataset.require_query(&meta.query_id)?;
        let tokenizer_for = |layer: &str| -> Result<Tokenizer, ReviewError> {
            let layer = dataset.layer(layer).expect("query layers exist");
            Ok(Tokenizer::new(TokenizerProfile::analysis(layer.kind))?)
        };
        let source_tok = tokenizer_for(&query.source_layer_id)?;
        let target_tok = tokenizer_for(&query.target_layer_id)?;

        Ok(Project {
            dir: dir.to_path_buf(),
            since_snapshot: entries.len() as u64,
            scores: scores_file
                .scores
                .iter()
                .map(|c| (c.pair(), c.score))
                .collect(),
            scorer: scores_file.scorer,
            dataset: Arc::new(dataset),
            meta,
            states,
            last_seq,
            log,
            log_len,
            source_tok,
            target_tok,
        })
    }

    pub fn meta(&self) -> &ProjectMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn scorer(&self) -> &ScorerSpec {
        &self.scorer
    }

    pub fn candidate_count(&self) -> usize {
        self.scores.len()
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn score(&self, pair: &PairId) -> Option<f64> {
        self.scores.get(pair).copied()
    }

    pub fn state(&self, pair: &PairId) -> Option<ItemState> {
        self.scores.contains_key(pair).then(|| {
            self.states
                .get(pair)
                .map_or(ItemState::Pending, |&v| v.into())
        })
    }

    /// Decided pairs and their latest verdicts.
    pub fn decisions(&self) -> &BTreeMap<PairId, Verdict> {
        &self.states
    }

    pub fn pending(&self) -> Vec<PairId> {
        self.scores
            .keys()
            .filter(|p| !self.states.contains_key(*p))
            .cloned()
            .collect()
    }

    /// The `k` highest-scored pending items, ties in canonical pair order.
    pub fn next_batch(&self, k: usize) -> Result<Vec<ReviewItem>, ReviewError> {
        if k == 0 {
            return Err(ReviewError::InvalidBatchSize);
        }
        let mut pending: Vec<(&PairId, f64)> = self
            .scores
            .iter()
            .filter(|(p, _)| !self.states.contains_key(*p))
            .map(|(p, &s)| (p, s))
            .collect();
        pending.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(pending
            .into_iter()
            .take(k)
            .map(|(p, _)| self.item(p))
            .collect())
    }

    fn item(&self, pair: &PairId) -> ReviewItem {
        let q = self
            .dataset
            .query(&self.meta.query_id)
            .expect("project query exists");
        let body = |layer: &str, id: &str| {
            self.dataset
                .artifact(layer, id)
                .map(|a| a.body.clone())
                .unwrap_or_default()
        };
        let source_body = body(&q.source_layer_id, &pair.source_id);
        let target_body = body(&q.target_layer_id, &pair.target_id);
        let a: BTreeSet<String> = self.source_tok.tokenize(&source_body).into_iter().collect();
        let b: BTreeSet<String> = self.target_tok.tokenize(&target_body).into_iter().collect();
        ReviewItem {
            pair_id: pair.clone(),
            score: self.scores[pair],
            state: self.state(pair).expect("candidate pair"),
            overlapping_terms: a.intersection(&b).cloned().collect(),
            source_body,
            target_body,
        }
    }

    pub fn review_item(&self, pair: &PairId) -> Result<ReviewItem, ReviewError> {
        if !self.scores.contains_key(pair) {
            return Err(ReviewError::UnknownPair(pair.clone()));
        }
        Ok(self.item(pair))
    }

    /// Appends and fsyncs a decision, then applies it. On any failure the
    /// log is rolled back to its previous length and the state is untouched.
    pub fn record_decision(
        &mut self,
        pair: &PairId,
        verdict: Verdict,
        reviewer: &str,
    ) -> Result<DecisionLogEntry, ReviewError> {
        if !self.scores.contains_key(pair) {
            return Err(ReviewError::UnknownPair(pair.clone()));
        }
        let entry = DecisionLogEntry {
            seq: self.last_seq + 1,
            pair_id: pair.clone(),
            verdict,
            reviewer: reviewer.to_string(),
            timestamp: now_millis(),
        };
        let mut line = serde_json::to_vec(&entry).expect("log entry serializes");
        line.push(b'\n');
        let log_path = self.dir.join(LOG_FILE);
        let written = self
            .log
            .write_all(&line)
            .and_then(|_| self.log.sync_data())
            .map_err(io_err(&log_path));
        if let Err(e) = written {
            let _ = self.log.set_len(self.log_len);
            return Err(e);
        }
        self.log_len += line.len() as u64;
        self.last_seq = entry.seq;
        self.states.insert(pair.clone(), verdict);
        self.since_snapshot += 1;
        if self.since_snapshot >= self.meta.snapshot_every.max(1) {
            // The decision is already durable; a failed snapshot is retried
            // after the next decision.
            if self.write_snapshot().is_ok() {
                self.since_snapshot = 0;
            }
        }
        Ok(entry)
    }

    pub fn write_snapshot(&self) -> Result<(), ReviewError> {
        let snapshot = Snapshot {
            seq: self.last_seq,
            log_offset: self.log_len,
            decisions: self
                .states
                .iter()
                .map(|(p, &v)| SnapshotDecision {
                    pair_id: p.clone(),
                    verdict: v,
                })
                .collect(),
        };
        write_json_atomic(&self.dir.join(SNAPSHOT_FILE), &snapshot)
    }

    /// Every durable log entry, oldest first.
    pub fn read_log(&self) -> Result<Vec<DecisionLogEntry>, ReviewError> {
        let path = self.dir.join(LOG_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let end = (self.log_len as usize).min(bytes.len());
        Ok(parse_log(&bytes[..end], 1)?.0)
    }

    /// Answer-file CSV of the approved pairs in canonical order.
    pub fn export_training(&self) -> String {
        answers_csv(
            self.states
                .iter()
                .filter(|(_, &v)| v == Verdict::Approve)
                .map(|(p, _)| p),
        )
    }

    pub fn vetted_metrics(&self, truths: Option<&BTreeSet<PairId>>) -> VettedMetrics {
        let approved: Vec<&PairId> = self
            .states
            .iter()
            .filter(|(_, &v)| v == Verdict::Approve)
            .map(|(p, _)| p)
            .collect();
        let decided = self.states.len();
        VettedMetrics {
            decided,
            approved: approved.len(),
            rejected: decided - approved.len(),
            pending: self.scores.len() - decided,
            precision_vs_truth: truths.filter(|_| !approved.is_empty()).map(|t| {
                approved.iter().filter(|p| t.contains(**p)).count() as f64 / approved.len() as f64
            }),
        }
    }

    /// Truth links of the project's query, when the dataset has any.
    pub fn truths(&self) -> Option<BTreeSet<PairId>> {
        let t = self.dataset.truths(&self.meta.query_id);
        (!t.is_empty()).then_some(t)
    }

    pub fn summary(&self) -> ProjectSummary {
        ProjectSummary {
            meta: self.meta.clone(),
            current_scorer: self.scorer.name.clone(),
            candidate_count: self.scores.len(),
            log_entries: self.last_seq,
            vetted_metrics: self.vetted_metrics(self.truths().as_ref()),
        }
    }

    /// Replaces the scores of pairs that are still pending. Decided pairs keep
    /// their scores and states. Nothing changes if the scores file cannot be
    /// written.
    pub fn apply_rescore(
        &mut self,
        scorer: ScorerSpec,
        scored: &[ScoredCandidate],
    ) -> Result<(), ReviewError> {
        let mut scores = self.scores.clone();
        for c in scored {
            let pair = c.pair();
            match scores.get_mut(&pair) {
                Some(s) if !self.states.contains_key(&pair) => *s = c.score,
                Some(_) => {}
                None => return Err(ReviewError::UnknownPair(pair)),
            }
        }
        let file = ScoresFile {
            scorer: scorer.clone(),
            scores: scores_vec(&self.meta.query_id, &scores),
        };
        write_json_atomic(&self.dir.join(SCORES_FILE), &file)?;
        self.scores = scores;
        self.scorer = scorer;
        Ok(())
    }

    /// Scores the pending pairs with `scorer` and applies the result.
    pub fn rescore(&mut self, scorer: ScorerSpec, mode: Parallelism) -> Result<(), ReviewError> {
        let scored = score_pairs(
            &scorer,
            &self.dataset,
            &self.meta.query_id,
            &self.pending(),
            mode,
        )?;
        self.apply_rescore(scorer, &scored)
    }
}

fn scores_vec(query_id: &str, scores: &BTreeMap<PairId, f64>) -> Vec<ScoredCandidate> {
    scores
        .iter()
        .map(|(p, &score)| ScoredCandidate {
            query_id: query_id.to_string(),
            source_id: p.source_id.clone(),
            target_id: p.target_id.clone(),
            score,
        })
        .collect()
}

/// What to create a project from.
#[derive(Clone, Debug)]
pub struct NewProject {
    /// Defaults to the dataset name.
    pub id: Option<String>,
    pub dataset: Dataset,
    /// Required when the dataset has more than one query.
    pub query_id: Option<String>,
    pub scorer: ScorerSpec,
}

pub fn valid_project_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

pub type SharedProject = Arc<RwLock<Project>>;

/// Directory of review projects. Each opened project is cached behind a
/// lock: one writer at a time, any number of readers.
#[derive(Debug)]
pub struct ReviewStore {
    root: PathBuf,
    snapshot_every: u64,
    open: Mutex<HashMap<String, SharedProject>>,
}

static STAGING_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ReviewStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ReviewError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(ReviewStore {
            root,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            open: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Scores every candidate, then publishes the project directory with a
    /// single rename so a failed or concurrent creation leaves nothing behind.
    pub fn create_project(
        &self,
        new: NewProject,
        mode: Parallelism,
    ) -> Result<SharedProject, ReviewError> {
        let id = new.id.clone().unwrap_or_else(|| slug(new.dataset.name()));
        if !valid_project_id(&id) {
            return Err(ReviewError::InvalidId(id));
        }
        let final_dir = self.root.join(&id);
        if final_dir.exists() {
            return Err(ReviewError::ProjectExists(id));
        }
        let query_id = match new.query_id {
            Some(q) => new.dataset.require_query(&q)?.id.clone(),
            None => match new.dataset.queries() {
                [q] => q.id.clone(),
                qs => return Err(ReviewError::AmbiguousQuery(qs.len())),
            },
        };
        generate_candidates(&new.dataset, &query_id)?;
        let scored = score_candidates(&new.scorer, &new.dataset, &query_id, mode)?;

        let staging = self.root.join(format!(
            ".staging-{id}-{}-{}",
            std::process::id(),
            STAGING_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir(&staging).map_err(io_err(&staging))?;
        let result = (|| {
            let meta = ProjectMeta {
                id: id.clone(),
                dataset: new.dataset.name().to_string(),
                query_id: query_id.clone(),
                scorer: new.scorer.clone(),
                created_at: now_millis(),
                snapshot_every: self.snapshot_every,
            };
            write_json_atomic(&staging.join(META_FILE), &meta)?;
            write_json_atomic(&staging.join(DATASET_FILE), &new.dataset)?;
            write_json_atomic(
                &staging.join(SCORES_FILE),
                &ScoresFile {
                    scorer: new.scorer.clone(),
                    scores: scored,
                },
            )?;
            let log = staging.join(LOG_FILE);
            File::create(&log)
                .and_then(|f| f.sync_all())
                .map_err(io_err(&log))?;
            Ok(())
        })();
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        if let Err(e) = fs::rename(&staging, &final_dir) {
            let _ = fs::remove_dir_all(&staging);
            return Err(if final_dir.exists() {
                ReviewError::ProjectExists(id)
            } else {
                io_err(&final_dir)(e)
            });
        }
        sync_dir(&self.root);
        self.project(&id)
    }

    pub fn project(&self, id: &str) -> Result<SharedProject, ReviewError> {
        if !valid_project_id(id) {
            return Err(ReviewError::NotFound(id.to_string()));
        }
        let mut open = self.open.lock().expect("store lock");
        if let Some(p) = open.get(id) {
            return Ok(p.clone());
        }
        let dir = self.root.join(id);
        if !dir.join(META_FILE).is_file() {
            return Err(ReviewError::NotFound(id.to_string()));
        }
        let project = Arc::new(RwLock::new(Project::open(&dir)?));
        open.insert(id.to_string(), project.clone());
        Ok(project)
    }

    /// Metadata of every project, ordered by id.
    pub fn list(&self) -> Result<Vec<ProjectMeta>, ReviewError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !valid_project_id(&name) {
                continue;
            }
            let meta_path = entry.path().join(META_FILE);
            if meta_path.is_file() {
                out.push(read_json::<ProjectMeta>(&meta_path)?);
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '-') {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    let s = s.trim_matches('-').to_string();
    if s.is_empty() {
        "project".into()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        Artifact, DatasetParts, Layer, LayerKind, LinkLabel, TraceLink, TraceQuery,
    };
    use proptest::prelude::*;

    fn dataset(n_src: usize, n_tgt: usize) -> Dataset {
        let mut artifacts = Vec::new();
        for i in 0..n_src {
            artifacts.push(Artifact {
                id: format!("S{i}"),
                layer_id: "src".into(),
                body: format!("pump alarm controller term{i} shared{}", i % 3),
                title: None,
            });
        }
        for j in 0..n_tgt {
            artifacts.push(Artifact {
                id: format!("T{j}"),
                layer_id: "tgt".into(),
                body: format!("alarm handler term{j} shared{}", j % 2),
                title: None,
            });
        }
        let true_links = (0..n_src.min(n_tgt))
            .map(|i| TraceLink {
                query_id: "q".into(),
                source_id: format!("S{i}"),
                target_id: format!("T{i}"),
                label: LinkLabel::TrueLink,
            })
            .collect();
        Dataset::from_parts(DatasetParts {
            name: "Demo Set".into(),
            layers: vec![
                Layer {
                    id: "src".into(),
                    name: "Requirements".into(),
                    kind: LayerKind::NaturalLanguage,
                },
                Layer {
                    id: "tgt".into(),
                    name: "Design".into(),
                    kind: LayerKind::NaturalLanguage,
                },
            ],
            artifacts,
            queries: vec![TraceQuery {
                id: "q".into(),
                source_layer_id: "src".into(),
                target_layer_id: "tgt".into(),
            }],
            true_links,
        })
        .unwrap()
        .0
    }

    fn new_project(d: Dataset) -> NewProject {
        NewProject {
            id: None,
            dataset: d,
            query_id: None,
            scorer: ScorerSpec::vsm(),
        }
    }

    fn store(dir: &Path) -> ReviewStore {
        ReviewStore::open(dir).unwrap().with_snapshot_every(4)
    }

    #[test]
    fn create_and_reopen() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let p = s
            .create_project(new_project(dataset(4, 5)), Parallelism::Sequential)
            .unwrap();
        let p = p.read().unwrap();
        assert_eq!(p.meta().id, "demo-set");
        assert_eq!(p.candidate_count(), 20);
        assert_eq!(p.pending().len(), 20);
        assert!(matches!(
            s.create_project(new_project(dataset(1, 1)), Parallelism::Sequential),
            Err(ReviewError::ProjectExists(id)) if id == "demo-set"
        ));
        assert_eq!(s.list().unwrap().len(), 1);
        assert!(matches!(s.project("nope"), Err(ReviewError::NotFound(_))));
        assert!(matches!(s.project("../x"), Err(ReviewError::NotFound(_))));
        let leftovers: Vec<_> = fs::read_dir(tmp.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with('.')
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn empty_dataset_has_no_items() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let p = s
            .create_project(new_project(dataset(0, 3)), Parallelism::Sequential)
            .unwrap();
        let p = p.read().unwrap();
        assert_eq!(p.candidate_count(), 0);
        assert!(p.next_batch(5).unwrap().is_empty());
        assert_eq!(p.export_training(), "source_id,target_id\n");
    }

    #[test]
    fn batch_order_and_exclusion() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let shared = s
            .create_project(new_project(dataset(3, 3)), Parallelism::Sequential)
            .unwrap();
        let mut p = shared.write().unwrap();
        let top = p.next_batch(100).unwrap();
        assert_eq!(top.len(), 9);
        for w in top.windows(2) {
            assert!(
                w[0].score > w[1].score
                    || (w[0].score == w[1].score && w[0].pair_id < w[1].pair_id)
            );
        }
        assert!(top[0].overlapping_terms.contains(&"alarm".to_string()));
        assert!(matches!(
            p.next_batch(0),
            Err(ReviewError::InvalidBatchSize)
        ));

        p.record_decision(&top[0].pair_id, Verdict::Approve, "ana")
            .unwrap();
        let next = p.next_batch(2).unwrap();
        assert_eq!(next[0].pair_id, top[1].pair_id);
        assert_eq!(next[1].pair_id, top[2].pair_id);
    }

    #[test]
    fn decisions_latest_wins_and_export() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let shared = s
            .create_project(new_project(dataset(3, 3)), Parallelism::Sequential)
            .unwrap();
        let mut p = shared.write().unwrap();
        let a = PairId::new("S0", "T0");
        let b = PairId::new("S1", "T1");
        p.record_decision(&a, Verdict::Reject, "r").unwrap();
        p.record_decision(&a, Verdict::Approve, "r").unwrap();
        p.record_decision(&b, Verdict::Approve, "r").unwrap();
        p.record_decision(&b, Verdict::Reject, "r").unwrap();
        assert_eq!(p.state(&a), Some(ItemState::Approved));
        assert_eq!(p.state(&b), Some(ItemState::Rejected));
        assert_eq!(p.read_log().unwrap().len(), 4);
        assert_eq!(p.export_training(), "source_id,target_id\nS0,T0\n");
        assert_eq!(p.export_training(), p.export_training());

        let before = p.read_log().unwrap();
        assert!(matches!(
            p.record_decision(&PairId::new("S9", "T0"), Verdict::Approve, "r"),
            Err(ReviewError::UnknownPair(_))
        ));
        assert_eq!(p.read_log().unwrap(), before);
        let seqs: Vec<u64> = before.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4]);
        assert!(before[0].timestamp.ends_with('Z'));
    }

    #[test]
    fn vetted_metrics_precision() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let shared = s
            .create_project(new_project(dataset(4, 4)), Parallelism::Sequential)
            .unwrap();
        let mut p = shared.write().unwrap();
        assert_eq!(
            p.vetted_metrics(p.truths().as_ref()).precision_vs_truth,
            None
        );
        // 6 approvals (5 true under the custom truth set), 4 rejections.
        let all: Vec<PairId> = p.pending();
        let truths: BTreeSet<PairId> = all[..5].iter().cloned().collect();
        for pair in &all[..6] {
            p.record_decision(pair, Verdict::Approve, "r").unwrap();
        }
        for pair in &all[6..10] {
            p.record_decision(pair, Verdict::Reject, "r").unwrap();
        }
        let m = p.vetted_metrics(Some(&truths));
        assert_eq!(
            (m.decided, m.approved, m.rejected, m.pending),
            (10, 6, 4, 6)
        );
        assert!((m.precision_vs_truth.unwrap() - 0.8333).abs() < 1e-4);
        assert_eq!(p.vetted_metrics(None).precision_vs_truth, None);
    }

    #[test]
    fn restart_replays_log_and_snapshot() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let shared = s
            .create_project(new_project(dataset(4, 4)), Parallelism::Sequential)
            .unwrap();
        let expected = {
            let mut p = shared.write().unwrap();
            for (i, pair) in p.pending().into_iter().enumerate().take(10) {
                let v = if i % 3 == 0 {
                    Verdict::Reject
                } else {
                    Verdict::Approve
                };
                p.record_decision(&pair, v, "r").unwrap();
            }
            assert!(p.dir().join(SNAPSHOT_FILE).exists());
            assert_eq!(replay(&p.read_log().unwrap()), *p.decisions());
            p.decisions().clone()
        };
        drop(shared);
        let dir = tmp.path().join("demo-set");
        let reopened = Project::open(&dir).unwrap();
        assert_eq!(*reopened.decisions(), expected);
        assert_eq!(reopened.last_seq(), 10);

        fs::remove_file(dir.join(SNAPSHOT_FILE)).unwrap();
        let full = Project::open(&dir).unwrap();
        assert_eq!(*full.decisions(), expected);
    }

    #[test]
    fn torn_trailing_line_is_truncated() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let shared = s
            .create_project(new_project(dataset(2, 2)), Parallelism::Sequential)
            .unwrap();
        let dir = shared.read().unwrap().dir().to_path_buf();
        shared
            .write()
            .unwrap()
            .record_decision(&PairId::new("S0", "T0"), Verdict::Approve, "r")
            .unwrap();
        drop(shared);
        let log = dir.join(LOG_FILE);
        let good = fs::read(&log).unwrap();
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"seq\":2,\"pair_id\":{\"sour").unwrap();
        drop(f);

        let mut p = Project::open(&dir).unwrap();
        assert_eq!(fs::read(&log).unwrap(), good);
        assert_eq!(p.last_seq(), 1);
        let e = p
            .record_decision(&PairId::new("S1", "T1"), Verdict::Reject, "r")
            .unwrap();
        assert_eq!(e.seq, 2);
        assert_eq!(Project::open(&dir).unwrap().read_log().unwrap().len(), 2);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let shared = s
            .create_project(new_project(dataset(2, 2)), Parallelism::Sequential)
            .unwrap();
        let dir = shared.read().unwrap().dir().to_path_buf();
        drop(shared);
        fs::write(dir.join(LOG_FILE), "garbage\n").unwrap();
        assert!(matches!(
            Project::open(&dir),
            Err(ReviewError::CorruptLog { line: 1, .. })
        ));
    }

    #[test]
    fn rescore_keeps_decisions() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let shared = s
            .create_project(new_project(dataset(3, 4)), Parallelism::Sequential)
            .unwrap();
        let mut p = shared.write().unwrap();
        let order: Vec<PairId> = p
            .next_batch(100)
            .unwrap()
            .into_iter()
            .map(|i| i.pair_id)
            .collect();
        p.rescore(ScorerSpec::vsm(), Parallelism::Parallel).unwrap();
        let again: Vec<PairId> = p
            .next_batch(100)
            .unwrap()
            .into_iter()
            .map(|i| i.pair_id)
            .collect();
        assert_eq!(order, again);

        let top = order[0].clone();
        let top_score = p.score(&top).unwrap();
        p.record_decision(&top, Verdict::Approve, "r").unwrap();
        let zeros: Vec<ScoredCandidate> = p
            .pending()
            .iter()
            .map(|pair| ScoredCandidate {
                query_id: "q".into(),
                source_id: pair.source_id.clone(),
                target_id: pair.target_id.clone(),
                score: 0.0,
            })
            .collect();
        p.apply_rescore(ScorerSpec::vsm(), &zeros).unwrap();
        let batch = p.next_batch(100).unwrap();
        assert!(batch.iter().all(|i| i.score == 0.0));
        assert!(batch.iter().all(|i| i.pair_id != top));
        assert_eq!(p.state(&top), Some(ItemState::Approved));
        assert_eq!(p.score(&top), Some(top_score));

        let dir = p.dir().to_path_buf();
        drop(p);
        let reopened = Project::open(&dir).unwrap();
        assert!(reopened
            .next_batch(100)
            .unwrap()
            .iter()
            .all(|i| i.score == 0.0));
    }

    #[test]
    fn ambiguous_query_and_bad_ids() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let mut parts = dataset(1, 1).into_parts();
        parts.queries.push(TraceQuery {
            id: "q2".into(),
            source_layer_id: "tgt".into(),
            target_layer_id: "src".into(),
        });
        let (d, _) = Dataset::from_parts(parts).unwrap();
        assert!(matches!(
            s.create_project(new_project(d.clone()), Parallelism::Sequential),
            Err(ReviewError::AmbiguousQuery(2))
        ));
        let named = NewProject {
            id: Some("two".into()),
            query_id: Some("q2".into()),
            ..new_project(d.clone())
        };
        assert_eq!(
            s.create_project(named, Parallelism::Sequential)
                .unwrap()
                .read()
                .unwrap()
                .meta()
                .query_id,
            "q2"
        );
        let bad = NewProject {
            id: Some("../escape".into()),
            ..new_project(d)
        };
        assert!(matches!(
            s.create_project(bad, Parallelism::Sequential),
            Err(ReviewError::InvalidId(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn states_partition_and_replay(ops in proptest::collection::vec((0usize..12, any::<bool>()), 0..30), k in 1usize..5) {
            let tmp = tempfile::tempdir().unwrap();
            let s = store(tmp.path());
            let shared = s.create_project(new_project(dataset(3, 4)), Parallelism::Sequential).unwrap();
            let mut p = shared.write().unwrap();
            let all: Vec<PairId> = p.pending();
            for (i, approve) in &ops {
                let v = if *approve { Verdict::Approve } else { Verdict::Reject };
                p.record_decision(&all[*i], v, "prop").unwrap();
            }
            let m = p.vetted_metrics(None);
            prop_assert_eq!(m.approved + m.rejected + m.pending, all.len());
            prop_assert_eq!(replay(&p.read_log().unwrap()), p.decisions().clone());

            // Successive batches, with each batch rejected, walk the pending
            // queue in score order without repeats.
            let expected: Vec<PairId> = p.next_batch(all.len().max(1)).unwrap().into_iter().map(|i| i.pair_id).collect();
            let mut walked = Vec::new();
            loop {
                let batch = p.next_batch(k).unwrap();
                if batch.is_empty() { break; }
                for item in batch {
                    prop_assert_eq!(item.state, ItemState::Pending);
                    p.record_decision(&item.pair_id, Verdict::Reject, "prop").unwrap();
                    walked.push(item.pair_id);
                }
            }
            prop_assert_eq!(walked, expected);

            let dir = p.dir().to_path_buf();
            let states = p.decisions().clone();
            drop(p);
            prop_assert_eq!(Project::open(&dir).unwrap().decisions().clone(), states);
        }
    }
}
