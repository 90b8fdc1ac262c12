//! Multi-layer traceability datasets: artifacts grouped in layers, trace
//! queries between two layers and the ground-truth answer matrix of each
//! query.
//!
//! Datasets are read from a JSON manifest that points at per-layer artifact
//! files and per-query answer files:
//!
//! ```json
//! {"name": "CM1",
//!  "layers": [{"id": "high", "name": "High-level requirements",
//!              "kind": "natural-language", "path": "high.csv"}, ...],
//!  "queries": [{"id": "high-low", "source": "high", "target": "low",
//!               "answers": "answers.csv"}]}
//! ```
//!
//! A layer path is either a directory of `*.txt` files (file stem = artifact
//! id) or a CSV with header `id,body[,title]`. Answer files are CSVs with
//! header `source_id,target_id`. Relative paths resolve against the manifest
//! directory. Ids are opaque strings compared byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::textpipe::TokenizerProfile;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {}: {source}", path.display())]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed CSV {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: expected CSV header {expected}", path.display())]
    Header {
        path: PathBuf,
        expected: &'static str,
    },
    #[error("duplicate layer id {0:?}")]
    DuplicateLayer(String),
    #[error("duplicate query id {0:?}")]
    DuplicateQuery(String),
    #[error("duplicate artifact id {id:?} in layer {layer:?}")]
    DuplicateArtifact { layer: String, id: String },
    #[error("empty artifact id in layer {0:?}")]
    EmptyArtifactId(String),
    #[error("artifact {id:?} belongs to unknown layer {layer:?}")]
    ArtifactLayer { layer: String, id: String },
    #[error("query {query:?} references unknown layer {layer:?}")]
    UnknownLayer { query: String, layer: String },
    #[error("query {0:?} traces a layer to itself")]
    SameLayer(String),
    #[error("unknown artifact in answer file of query {query:?}: {}", refs.join(", "))]
    UnknownArtifacts { query: String, refs: Vec<String> },
    #[error("trace link references unknown query {0:?}")]
    LinkQuery(String),
    #[error("unknown query {0:?}")]
    UnknownQuery(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    NaturalLanguage,
    SourceCode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn vsm_profile(&self) -> TokenizerProfile {
        TokenizerProfile::vsm(self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub id: String,
    pub layer_id: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceQuery {
    pub id: String,
    pub source_layer_id: String,
    pub target_layer_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkLabel {
    TrueLink,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceLink {
    pub query_id: String,
    pub source_id: String,
    pub target_id: String,
    pub label: LinkLabel,
}

impl TraceLink {
    pub fn pair(&self) -> PairId {
        PairId::new(&self.source_id, &self.target_id)
    }
}

/// A candidate (source, target) pair within one query. The derived order
/// (source id, then target id, byte-lexicographic) is the canonical order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairId {
    pub source_id: String,
    pub target_id: String,
}

impl PairId {
    pub fn new(source_id: impl Into<String>, target_id: impl Into<String>) -> Self {
        PairId {
            source_id: source_id.into(),
            target_id: target_id.into(),
        }
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.source_id, self.target_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub layer_id: String,
    pub id: String,
}

/// Unvalidated dataset contents, as found in an inline JSON dataset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetParts {
    pub name: String,
    pub layers: Vec<Layer>,
    pub artifacts: Vec<Artifact>,
    pub queries: Vec<TraceQuery>,
    #[serde(default)]
    pub true_links: Vec<TraceLink>,
}

/// A validated dataset. Artifacts are held sorted by (layer, id) and true
/// links by (query, source, target).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DatasetParts")]
pub struct Dataset {
    name: String,
    layers: Vec<Layer>,
    artifacts: Vec<Artifact>,
    queries: Vec<TraceQuery>,
    true_links: Vec<TraceLink>,
}

impl TryFrom<DatasetParts> for Dataset {
    type Error = CorpusError;

    fn try_from(parts: DatasetParts) -> Result<Self, Self::Error> {
        Dataset::from_parts(parts).map(|(d, _)| d)
    }
}

impl Dataset {
    /// Validates `parts`. Duplicate true links collapse into one; the
    /// collapsed extras are returned alongside the dataset.
    pub fn from_parts(parts: DatasetParts) -> Result<(Dataset, Vec<TraceLink>), CorpusError> {
        let DatasetParts {
            name,
            layers,
            mut artifacts,
            queries,
            true_links,
        } = parts;

        let mut layer_ids = BTreeSet::new();
        for layer in &layers {
            if !layer_ids.insert(layer.id.as_str()) {
                return Err(CorpusError::DuplicateLayer(layer.id.clone()));
            }
        }

        artifacts.sort_by(|a, b| (&a.layer_id, &a.id).cmp(&(&b.layer_id, &b.id)));
        for (i, a) in artifacts.iter().enumerate() {
            if !layer_ids.contains(a.layer_id.as_str()) {
                return Err(CorpusError::ArtifactLayer {
                    layer: a.layer_id.clone(),
                    id: a.id.clone(),
                });
            }
            if a.id.is_empty() {
                return Err(CorpusError::EmptyArtifactId(a.layer_id.clone()));
            }
            if i > 0 && artifacts[i - 1].layer_id == a.layer_id && artifacts[i - 1].id == a.id {
                return Err(CorpusError::DuplicateArtifact {
                    layer: a.layer_id.clone(),
                    id: a.id.clone(),
                });
            }
        }

        let mut query_ids = BTreeSet::new();
        for q in &queries {
            if !query_ids.insert(q.id.as_str()) {
                return Err(CorpusError::DuplicateQuery(q.id.clone()));
            }
            for layer in [&q.source_layer_id, &q.target_layer_id] {
                if !layer_ids.contains(layer.as_str()) {
                    return Err(CorpusError::UnknownLayer {
                        query: q.id.clone(),
                        layer: layer.clone(),
                    });
                }
            }
            if q.source_layer_id == q.target_layer_id {
                return Err(CorpusError::SameLayer(q.id.clone()));
            }
        }

        let mut dataset = Dataset {
            name,
            layers,
            artifacts,
            queries,
            true_links: Vec::new(),
        };

        let mut links: BTreeMap<(String, String, String), TraceLink> = BTreeMap::new();
        let mut collapsed = Vec::new();
        let mut unknown: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for link in true_links {
            let Some(q) = dataset.query(&link.query_id) else {
                return Err(CorpusError::LinkQuery(link.query_id));
            };
            let mut known = true;
            if dataset
                .artifact(&q.source_layer_id, &link.source_id)
                .is_none()
            {
                unknown
                    .entry(q.id.clone())
                    .or_default()
                    .push(link.source_id.clone());
                known = false;
            }
            if dataset
                .artifact(&q.target_layer_id, &link.target_id)
                .is_none()
            {
                unknown
                    .entry(q.id.clone())
                    .or_default()
                    .push(link.target_id.clone());
                known = false;
            }
            if !known {
                continue;
            }
            let key = (
                link.query_id.clone(),
                link.source_id.clone(),
                link.target_id.clone(),
            );
            let link = TraceLink {
                label: LinkLabel::TrueLink,
                ..link
            };
            match links.entry(key) {
                std::collections::btree_map::Entry::Occupied(_) => collapsed.push(link),
                std::collections::btree_map::Entry::Vacant(slot) => {
                    slot.insert(link);
                }
            }
        }
        if let Some((query, mut refs)) = unknown.into_iter().next() {
            refs.sort();
            refs.dedup();
            return Err(CorpusError::UnknownArtifacts { query, refs });
        }
        dataset.true_links = links.into_values().collect();
        Ok((dataset, collapsed))
    }

    pub fn into_parts(self) -> DatasetParts {
        DatasetParts {
            name: self.name,
            layers: self.layers,
            artifacts: self.artifacts,
            queries: self.queries,
            true_links: self.true_links,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    pub fn queries(&self) -> &[TraceQuery] {
        &self.queries
    }

    pub fn query(&self, id: &str) -> Option<&TraceQuery> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn require_query(&self, id: &str) -> Result<&TraceQuery, CorpusError> {
        self.query(id)
            .ok_or_else(|| CorpusError::UnknownQuery(id.to_string()))
    }

    pub fn true_links(&self) -> &[TraceLink] {
        &self.true_links
    }

    /// Artifacts of one layer, sorted by id.
    pub fn layer_artifacts(&self, layer_id: &str) -> &[Artifact] {
        let start = self
            .artifacts
            .partition_point(|a| a.layer_id.as_str() < layer_id);
        let end = self
            .artifacts
            .partition_point(|a| a.layer_id.as_str() <= layer_id);
        &self.artifacts[start..end]
    }

    pub fn artifact(&self, layer_id: &str, id: &str) -> Option<&Artifact> {
        let layer = self.layer_artifacts(layer_id);
        layer
            .binary_search_by(|a| a.id.as_str().cmp(id))
            .ok()
            .map(|i| &layer[i])
    }

    pub fn query_links(&self, query_id: &str) -> &[TraceLink] {
        let start = self
            .true_links
            .partition_point(|l| l.query_id.as_str() < query_id);
        let end = self
            .true_links
            .partition_point(|l| l.query_id.as_str() <= query_id);
        &self.true_links[start..end]
    }

    /// The answer matrix of one query as a pair set.
    pub fn truths(&self, query_id: &str) -> BTreeSet<PairId> {
        self.query_links(query_id)
            .iter()
            .map(TraceLink::pair)
            .collect()
    }

    /// The id of the only query, when there is exactly one.
    pub fn sole_query(&self) -> Option<&TraceQuery> {
        match self.queries.as_slice() {
            [q] => Some(q),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Artifacts kept with an empty body.
    pub empty_bodies: Vec<ArtifactRef>,
    /// Answer rows that repeated an earlier row and were collapsed.
    pub collapsed_duplicate_links: Vec<TraceLink>,
    /// `.txt` artifacts whose bytes were not valid UTF-8 and were decoded lossily.
    pub lossy_utf8: Vec<ArtifactRef>,
}

impl IngestReport {
    pub fn is_clean(&self) -> bool {
        self.empty_bodies.is_empty()
            && self.collapsed_duplicate_links.is_empty()
            && self.lossy_utf8.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub layers: Vec<ManifestLayer>,
    #[serde(default)]
    pub queries: Vec<ManifestQuery>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub id: String,
    pub name: String,
    pub kind: LayerKind,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestQuery {
    pub id: String,
    pub source: String,
    pub target: String,
    pub answers: PathBuf,
}

pub fn load_dataset(manifest_path: &Path) -> Result<(Dataset, IngestReport), CorpusError> {
    let raw = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|source| CorpusError::Manifest {
            path: manifest_path.to_path_buf(),
            source,
        })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut report = IngestReport::default();
    let mut artifacts = Vec::new();
    let mut layers = Vec::new();
    for ml in &manifest.layers {
        let path = base.join(&ml.path);
        let mut layer_artifacts = if path.is_dir() {
            read_txt_layer(&path, &ml.id, &mut report)?
        } else {
            read_csv_layer(&path, &ml.id)?
        };
        // Duplicates inside one layer file are reported by from_parts, which
        // needs them adjacent; sort here so the first offender is stable.
        layer_artifacts.sort_by(|a, b| a.id.cmp(&b.id));
        artifacts.append(&mut layer_artifacts);
        layers.push(Layer {
            id: ml.id.clone(),
            name: ml.name.clone(),
            kind: ml.kind,
        });
    }

    let mut queries = Vec::new();
    let mut true_links = Vec::new();
    for mq in &manifest.queries {
        queries.push(TraceQuery {
            id: mq.id.clone(),
            source_layer_id: mq.source.clone(),
            target_layer_id: mq.target.clone(),
        });
        for (source_id, target_id) in read_answers(&base.join(&mq.answers))? {
            true_links.push(TraceLink {
                query_id: mq.id.clone(),
                source_id,
                target_id,
                label: LinkLabel::TrueLink,
            });
        }
    }

    let (dataset, collapsed) = Dataset::from_parts(DatasetParts {
        name: manifest.name,
        layers,
        artifacts,
        queries,
        true_links,
    })?;
    report.collapsed_duplicate_links = collapsed;
    report.empty_bodies = dataset
        .artifacts()
        .iter()
        .filter(|a| a.body.trim().is_empty())
        .map(|a| ArtifactRef {
            layer_id: a.layer_id.clone(),
            id: a.id.clone(),
        })
        .collect();
    report.lossy_utf8.sort();
    Ok((dataset, report))
}

fn read_txt_layer(
    dir: &Path,
    layer_id: &str,
    report: &mut IngestReport,
) -> Result<Vec<Artifact>, CorpusError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.is_file() || path.extension().is_none_or(|e| e != "txt") {
            continue;
        }
        let Some(id) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let body = match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => {
                report.lossy_utf8.push(ArtifactRef {
                    layer_id: layer_id.to_string(),
                    id: id.clone(),
                });
                String::from_utf8_lossy(e.as_bytes()).into_owned()
            }
        };
        out.push(Artifact {
            id,
            layer_id: layer_id.to_string(),
            body,
            title: None,
        });
    }
    Ok(out)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file))
}

fn read_csv_layer(path: &Path, layer_id: &str) -> Result<Vec<Artifact>, CorpusError> {
    const EXPECTED: &str = "id,body[,title]";
    let csv_err = |source| CorpusError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let has_title = match headers.iter().collect::<Vec<_>>().as_slice() {
        ["id", "body"] => false,
        ["id", "body", "title"] => true,
        _ => {
            return Err(CorpusError::Header {
                path: path.to_path_buf(),
                expected: EXPECTED,
            })
        }
    };
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let title = if has_title {
            record.get(2).filter(|t| !t.is_empty()).map(str::to_string)
        } else {
            None
        };
        out.push(Artifact {
            id: record[0].to_string(),
            layer_id: layer_id.to_string(),
            body: record[1].to_string(),
            title,
        });
    }
    Ok(out)
}

fn read_answers(path: &Path) -> Result<Vec<(String, String)>, CorpusError> {
    let csv_err = |source| CorpusError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(csv_err)?;
    if headers.iter().collect::<Vec<_>>() != ["source_id", "target_id"] {
        return Err(CorpusError::Header {
            path: path.to_path_buf(),
            expected: "source_id,target_id",
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        out.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(out)
}

/// Renders pairs in the answer-file format (`source_id,target_id` header).
pub fn answers_csv<'a, I>(pairs: I) -> String
where
    I: IntoIterator<Item = &'a PairId>,
{
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["source_id", "target_id"])
        .expect("in-memory write");
    for p in pairs {
        writer
            .write_record([p.source_id.as_str(), p.target_id.as_str()])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn file_stem_for(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:02}-{clean}")
}

/// Writes `dataset` as a manifest plus CSV layer and answer files under
/// `dir`, returning the manifest path.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf, CorpusError> {
    fs::create_dir_all(dir.join("layers")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("answers")).map_err(io_err(dir))?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Csv { path, source }
    };

    let mut layers = Vec::new();
    for (i, layer) in dataset.layers().iter().enumerate() {
        let rel = PathBuf::from("layers").join(format!("{}.csv", file_stem_for(i, &layer.id)));
        let path = dir.join(&rel);
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["id", "body", "title"])
            .map_err(csv_err(&path))?;
        for a in dataset.layer_artifacts(&layer.id) {
            w.write_record([
                a.id.as_str(),
                a.body.as_str(),
                a.title.as_deref().unwrap_or(""),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        layers.push(ManifestLayer {
            id: layer.id.clone(),
            name: layer.name.clone(),
            kind: layer.kind,
            path: rel,
        });
    }

    let mut queries = Vec::new();
    for (i, q) in dataset.queries().iter().enumerate() {
        let rel = PathBuf::from("answers").join(format!("{}.csv", file_stem_for(i, &q.id)));
        let path = dir.join(&rel);
        let truths = dataset.truths(&q.id);
        fs::write(&path, answers_csv(&truths)).map_err(io_err(&path))?;
        queries.push(ManifestQuery {
            id: q.id.clone(),
            source: q.source_layer_id.clone(),
            target: q.target_layer_id.clone(),
            answers: rel,
        });
    }

    let manifest = Manifest {
        name: dataset.name().to_string(),
        layers,
        queries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(path)
}

/// Full cross product of a query's layers in canonical order.
pub fn generate_candidates(dataset: &Dataset, query_id: &str) -> Result<Vec<PairId>, CorpusError> {
    let q = dataset.require_query(query_id)?;
    let sources = dataset.layer_artifacts(&q.source_layer_id);
    let targets = dataset.layer_artifacts(&q.target_layer_id);
    let mut out = Vec::with_capacity(sources.len() * targets.len());
    for s in sources {
        for t in targets {
            out.push(PairId::new(&s.id, &t.id));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub query_id: String,
    pub source_count: usize,
    pub target_count: usize,
    pub candidate_count: usize,
    pub true_count: usize,
}

pub fn dataset_summary(dataset: &Dataset) -> Vec<QuerySummary> {
    dataset
        .queries()
        .iter()
        .map(|q| {
            let source_count = dataset.layer_artifacts(&q.source_layer_id).len();
            let target_count = dataset.layer_artifacts(&q.target_layer_id).len();
            QuerySummary {
                query_id: q.id.clone(),
                source_count,
                target_count,
                candidate_count: source_count * target_count,
                true_count: dataset.query_links(&q.id).len(),
            }
        })
        .collect()
}
