//! Similarity scorers behind one contract: every candidate pair of a query
//! gets a score in `[0, 1]`.
//!
//! [`VsmModel`] is a TF-IDF vector space model with raw term counts, smooth
//! idf `ln((1 + N) / (1 + df)) + 1` and L2-normalized document vectors;
//! pairs are scored by cosine. External scorers (fine-tuned transformers and
//! the like) are reached through a batch protocol, see [`external_score`].

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_candidates, Artifact, CorpusError, Dataset, PairId};
use crate::exec::{self, Parallelism};
use crate::textpipe::{BagOfWords, TextError, Tokenizer, TokenizerProfile};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("duplicate document {0:?}")]
    DuplicateDocument(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("external scorer timed out after {}s on batch {batch}", after.as_secs_f64())]
    Timeout { batch: usize, after: Duration },
    #[error("length mismatch: batch {batch} sent {expected} pairs, received {got} scores")]
    LengthMismatch {
        batch: usize,
        expected: usize,
        got: usize,
    },
    #[error("score out of range at pair #{index} ({source_id} -> {target_id}): {score}")]
    OutOfRange {
        index: usize,
        source_id: String,
        target_id: String,
        score: f64,
    },
    #[error("malformed response to batch {batch}: {detail}")]
    Malformed { batch: usize, detail: String },
    #[error("external scorer transport failure: {0}")]
    Transport(String),
    #[error("cannot start external scorer {program:?}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
}

/// Sparse vector with entries sorted by term index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector(Vec<(u32, f64)>);

impl SparseVector {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut sum = 0.0;
        while i < self.0.len() && j < other.0.len() {
            let (a, wa) = self.0[i];
            let (b, wb) = other.0[j];
            match a.cmp(&b) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    sum += wa * wb;
                    i += 1;
                    j += 1;
                }
            }
        }
        sum
    }
}

/// Fitted TF-IDF model over a fixed set of documents.
#[derive(Clone, Debug)]
pub struct VsmModel<K = String> {
    vocabulary: BTreeMap<String, u32>,
    idf: Vec<f64>,
    vectors: HashMap<K, SparseVector>,
}

impl<K: Eq + Hash + Clone + std::fmt::Debug> VsmModel<K> {
    /// Fits on pre-tokenized documents. An empty corpus gives an empty model.
    pub fn fit_bags<I>(documents: I) -> Result<Self, ScoringError>
    where
        I: IntoIterator<Item = (K, BagOfWords)>,
    {
        let documents: Vec<(K, BagOfWords)> = documents.into_iter().collect();
        let mut df: BTreeMap<&str, u64> = BTreeMap::new();
        for (_, bag) in &documents {
            for term in bag.terms() {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        let n = documents.len() as f64;
        let mut vocabulary = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (term, &count)) in df.iter().enumerate() {
            vocabulary.insert(term.to_string(), i as u32);
            idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
        }

        let mut vectors = HashMap::with_capacity(documents.len());
        for (key, bag) in &documents {
            let mut entries: Vec<(u32, f64)> = bag
                .iter()
                .map(|(term, tf)| {
                    let idx = vocabulary[term];
                    (idx, f64::from(tf) * idf[idx as usize])
                })
                .collect();
            let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (_, w) in &mut entries {
                    *w /= norm;
                }
            } else {
                entries.clear();
            }
            if vectors.insert(key.clone(), SparseVector(entries)).is_some() {
                return Err(ScoringError::DuplicateDocument(format!("{key:?}")));
            }
        }
        Ok(VsmModel {
            vocabulary,
            idf,
            vectors,
        })
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&i| self.idf[i as usize])
    }

    pub fn vector(&self, key: &K) -> Option<&SparseVector> {
        self.vectors.get(key)
    }

    /// Cosine of the two stored unit vectors; 0 when either is the zero vector.
    pub fn score_pair(&self, a: &K, b: &K) -> Result<f64, ScoringError> {
        let va = self
            .vectors
            .get(a)
            .ok_or_else(|| ScoringError::UnknownDocument(format!("{a:?}")))?;
        let vb = self
            .vectors
            .get(b)
            .ok_or_else(|| ScoringError::UnknownDocument(format!("{b:?}")))?;
        Ok(va.dot(vb).clamp(0.0, 1.0))
    }
}

impl VsmModel<String> {
    pub fn score(&self, a: &str, b: &str) -> Result<f64, ScoringError> {
        self.score_pair(&a.to_string(), &b.to_string())
    }
}

/// Fits a model on `(id, text)` documents tokenized with one profile.
pub fn fit_vsm<S: AsRef<str>>(
    documents: &[(S, S)],
    tokenizer: &Tokenizer,
) -> Result<VsmModel<String>, ScoringError> {
    VsmModel::fit_bags(
        documents
            .iter()
            .map(|(id, text)| (id.as_ref().to_string(), tokenizer.bag(text.as_ref()))),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub query_id: String,
    pub source_id: String,
    pub target_id: String,
    pub score: f64,
}

impl ScoredCandidate {
    pub fn pair(&self) -> crate::corpus::PairId {
        crate::corpus::PairId::new(&self.source_id, &self.target_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "kebab-case")]
pub enum Endpoint {
    /// A long-running child process speaking the protocol on stdin/stdout.
    Command { program: String, args: Vec<String> },
    /// HTTP POST of one request object per batch.
    Http { url: String },
}

impl Endpoint {
    /// `http://...` and `https://...` are URLs; anything else is a command
    /// line split on whitespace.
    pub fn parse(s: &str) -> Option<Endpoint> {
        let s = s.trim();
        if s.starts_with("http://") || s.starts_with("https://") {
            return Some(Endpoint::Http { url: s.to_string() });
        }
        let mut words = s.split_whitespace().map(str::to_string);
        let program = words.next()?;
        Some(Endpoint::Command {
            program,
            args: words.collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalScorer {
    pub endpoint: Endpoint,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

impl ExternalScorer {
    pub fn new(endpoint: Endpoint) -> Self {
        ExternalScorer {
            endpoint,
            batch_size: DEFAULT_BATCH_SIZE,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScorerKind {
    /// `profile: None` tokenizes each layer with its kind's VSM profile.
    Vsm {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        profile: Option<TokenizerProfile>,
    },
    External(ExternalScorer),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ScorerKind,
}

impl ScorerSpec {
    pub fn vsm() -> Self {
        ScorerSpec {
            name: "VSM".into(),
            kind: ScorerKind::Vsm { profile: None },
        }
    }

    pub fn external(name: impl Into<String>, endpoint: Endpoint) -> Self {
        ScorerSpec {
            name: name.into(),
            kind: ScorerKind::External(ExternalScorer::new(endpoint)),
        }
    }

    /// Parses `vsm`, `external:<endpoint>`, optionally prefixed by `NAME=`.
    pub fn parse(s: &str) -> Option<ScorerSpec> {
        let (name, body) = match s.split_once('=') {
            Some((n, b)) if !n.contains(':') && !n.is_empty() => (Some(n), b),
            _ => (None, s),
        };
        let mut spec = if body.eq_ignore_ascii_case("vsm") {
            ScorerSpec::vsm()
        } else {
            ScorerSpec::external(
                "external",
                Endpoint::parse(body.strip_prefix("external:")?)?,
            )
        };
        if let Some(n) = name {
            spec.name = n.to_string();
        }
        Some(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Side {
    Source,
    Target,
}

/// Scores every candidate pair of `query_id` in canonical order. The VSM is
/// fit on all artifacts of the query's two layers.
pub fn score_candidates(
    spec: &ScorerSpec,
    dataset: &Dataset,
    query_id: &str,
    mode: Parallelism,
) -> Result<Vec<ScoredCandidate>, ScoringError> {
    let candidates = generate_candidates(dataset, query_id)?;
    score_pairs(spec, dataset, query_id, &candidates, mode)
}

/// Scores the given pairs of `query_id`, in the given order. The VSM is still
/// fit on every artifact of the two layers, so a pair's score does not depend
/// on which other pairs are requested.
pub fn score_pairs(
    spec: &ScorerSpec,
    dataset: &Dataset,
    query_id: &str,
    candidates: &[PairId],
    mode: Parallelism,
) -> Result<Vec<ScoredCandidate>, ScoringError> {
    let query = dataset.require_query(query_id)?;
    let body = |layer: &str, id: &str| -> Result<&str, ScoringError> {
        dataset
            .artifact(layer, id)
            .map(|a| a.body.as_str())
            .ok_or_else(|| ScoringError::UnknownDocument(format!("{layer}/{id}")))
    };
    for p in candidates {
        body(&query.source_layer_id, &p.source_id)?;
        body(&query.target_layer_id, &p.target_id)?;
    }
    let sources = dataset.layer_artifacts(&query.source_layer_id);
    let targets = dataset.layer_artifacts(&query.target_layer_id);

    let scores = match &spec.kind {
        ScorerKind::Vsm { profile } => {
            let tokenizer_for = |layer_id: &str| -> Result<Tokenizer, ScoringError> {
                let p = match profile {
                    Some(p) => p.clone(),
                    None => dataset
                        .layer(layer_id)
                        .map(|l| l.vsm_profile())
                        .ok_or_else(|| ScoringError::UnknownDocument(layer_id.to_string()))?,
                };
                Ok(Tokenizer::new(p)?)
            };
            let src_tok = tokenizer_for(&query.source_layer_id)?;
            let tgt_tok = tokenizer_for(&query.target_layer_id)?;
            let bag = |tok: &Tokenizer, a: &Artifact| tok.bag(&a.body);
            let src_bags = exec::map(sources, mode, |a| bag(&src_tok, a));
            let tgt_bags = exec::map(targets, mode, |a| bag(&tgt_tok, a));
            let model = VsmModel::fit_bags(
                sources
                    .iter()
                    .zip(src_bags)
                    .map(|(a, b)| ((Side::Source, a.id.clone()), b))
                    .chain(
                        targets
                            .iter()
                            .zip(tgt_bags)
                            .map(|(a, b)| ((Side::Target, a.id.clone()), b)),
                    ),
            )?;
            exec::try_map(candidates, mode, |p| {
                model.score_pair(
                    &(Side::Source, p.source_id.clone()),
                    &(Side::Target, p.target_id.clone()),
                )
            })?
        }
        ScorerKind::External(ext) => {
            let pairs: Vec<PairText<'_>> = candidates
                .iter()
                .map(|p| PairText {
                    source_id: &p.source_id,
                    target_id: &p.target_id,
                    source_text: body(&query.source_layer_id, &p.source_id).expect("checked above"),
                    target_text: body(&query.target_layer_id, &p.target_id).expect("checked above"),
                })
                .collect();
            external_score(ext, &pairs)?
        }
    };

    Ok(candidates
        .iter()
        .zip(scores)
        .map(|(p, score)| ScoredCandidate {
            query_id: query_id.to_string(),
            source_id: p.source_id.clone(),
            target_id: p.target_id.clone(),
            score,
        })
        .collect())
}

/// One pair in an external scoring request.
#[derive(Clone, Debug, Serialize)]
pub struct PairText<'a> {
    pub source_id: &'a str,
    pub target_id: &'a str,
    pub source_text: &'a str,
    pub target_text: &'a str,
}

#[derive(Serialize)]
struct ScoreRequest<'a, 'b> {
    pairs: &'b [PairText<'a>],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<serde_json::Value>,
}

trait Transport {
    fn exchange(&mut self, batch: usize, request: &str) -> Result<String, ScoringError>;
}

struct ChildTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl ChildTransport {
    fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, ScoringError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| ScoringError::Spawn {
                program: program.to_string(),
                source,
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ChildTransport {
            child,
            stdin,
            lines: rx,
            timeout,
        })
    }
}

impl Transport for ChildTransport {
    fn exchange(&mut self, batch: usize, request: &str) -> Result<String, ScoringError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| ScoringError::Transport("scorer stdin closed".into()))?;
        stdin
            .write_all(request.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush())
            .map_err(|e| ScoringError::Transport(format!("writing batch {batch}: {e}")))?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ScoringError::Transport(format!(
                "reading batch {batch}: {e}"
            ))),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ScoringError::Timeout {
                batch,
                after: self.timeout,
            }),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ScoringError::Malformed {
                batch,
                detail: "scorer exited without responding".into(),
            }),
        }
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    timeout: Duration,
}

impl Transport for HttpTransport {
    fn exchange(&mut self, batch: usize, request: &str) -> Result<String, ScoringError> {
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => ScoringError::Timeout {
                batch,
                after: self.timeout,
            },
            other => ScoringError::Transport(format!("batch {batch}: {other}")),
        };
        let mut response = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(request)
            .map_err(map_err)?;
        response.body_mut().read_to_string().map_err(map_err)
    }
}

/// Scores `pairs` through an external endpoint in batches of at most
/// `batch_size`, one batch in flight at a time. Scores come back in request
/// order; any score outside `[0, 1]` aborts the whole call.
pub fn external_score(
    scorer: &ExternalScorer,
    pairs: &[PairText<'_>],
) -> Result<Vec<f64>, ScoringError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let timeout = Duration::from_secs(scorer.timeout_secs);
    let mut transport: Box<dyn Transport> = match &scorer.endpoint {
        Endpoint::Command { program, args } => {
            Box::new(ChildTransport::spawn(program, args, timeout)?)
        }
        Endpoint::Http { url } => {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(true)
                .build()
                .into();
            Box::new(HttpTransport {
                agent,
                url: url.clone(),
                timeout,
            })
        }
    };

    let batch_size = scorer.batch_size.max(1);
    let mut scores = Vec::with_capacity(pairs.len());
    for (batch, chunk) in pairs.chunks(batch_size).enumerate() {
        let request =
            serde_json::to_string(&ScoreRequest { pairs: chunk }).expect("request serializes");
        let line = transport.exchange(batch, &request)?;
        let response: ScoreResponse =
            serde_json::from_str(line.trim()).map_err(|e| ScoringError::Malformed {
                batch,
                detail: e.to_string(),
            })?;
        if response.scores.len() != chunk.len() {
            return Err(ScoringError::LengthMismatch {
                batch,
                expected: chunk.len(),
                got: response.scores.len(),
            });
        }
        for (offset, value) in response.scores.iter().enumerate() {
            let index = batch * batch_size + offset;
            let pair = &chunk[offset];
            let score = value.as_f64().ok_or_else(|| ScoringError::Malformed {
                batch,
                detail: format!("non-numeric score at pair #{index}: {value}"),
            })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(ScoringError::OutOfRange {
                    index,
                    source_id: pair.source_id.to_string(),
                    target_id: pair.target_id.to_string(),
                    score,
                });
            }
            scores.push(score);
        }
    }
    Ok(scores)
}
