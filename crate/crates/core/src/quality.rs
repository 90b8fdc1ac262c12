//! Dataset-quality analyses: orphan artifacts, readability, frequency
//! bands, out-of-vocabulary terms, features of mis-predicted links and
//! cross-run agreement.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, Dataset, DatasetParts, Layer, PairId, TraceQuery};
use crate::exec::{self, Parallelism};
use crate::experiment::{classify_at, ExperimentError, RunRecord};
use crate::textpipe::{
    count_sentences, count_syllables, read_word_list, TextError, Tokenizer, TokenizerProfile,
    VocabularyStats,
};

pub const DEFAULT_LOW_THRESHOLD: f64 = 0.001;
pub const DEFAULT_HIGH_THRESHOLD: f64 = 0.01;
/// Bundled synonym/antonym lexicon (`data/lexicon_en.tsv`).
pub const BUNDLED_LEXICON: &str = include_str!("../data/lexicon_en.tsv");

#[derive(Debug, thiserror::Error)]
pub enum QualityError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("readability needs at least one non-blank text")]
    BlankInput,
    #[error("frequency thresholds must satisfy 0 < low <= high < 1, got low={low} high={high}")]
    InvalidThresholds { low: f64, high: f64 },
    #[error("cannot read {}: {source}", path.display())]
    Resource {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon line {line}: {detail}")]
    Lexicon { line: usize, detail: String },
    #[error("pair {0} is not a candidate of the query")]
    UnknownPair(PairId),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrphanSides {
    #[default]
    Both,
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOrphans {
    pub query_id: String,
    pub source_orphans: Vec<String>,
    pub target_orphans: Vec<String>,
}

impl QueryOrphans {
    pub fn count(&self) -> usize {
        self.source_orphans.len() + self.target_orphans.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrphanReport {
    pub sides: OrphanSides,
    pub queries: Vec<QueryOrphans>,
    pub total: usize,
}

impl OrphanReport {
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

fn query_orphans(dataset: &Dataset, q: &TraceQuery, sides: OrphanSides) -> QueryOrphans {
    let links = dataset.query_links(&q.id);
    let linked_sources: HashSet<&str> = links.iter().map(|l| l.source_id.as_str()).collect();
    let linked_targets: HashSet<&str> = links.iter().map(|l| l.target_id.as_str()).collect();
    let unlinked = |layer: &str, linked: &HashSet<&str>| -> Vec<String> {
        dataset
            .layer_artifacts(layer)
            .iter()
            .filter(|a| !linked.contains(a.id.as_str()))
            .map(|a| a.id.clone())
            .collect()
    };
    QueryOrphans {
        query_id: q.id.clone(),
        source_orphans: if sides == OrphanSides::Target {
            Vec::new()
        } else {
            unlinked(&q.source_layer_id, &linked_sources)
        },
        target_orphans: if sides == OrphanSides::Source {
            Vec::new()
        } else {
            unlinked(&q.target_layer_id, &linked_targets)
        },
    }
}

/// Artifacts of the query's layers that appear in none of its true links.
pub fn detect_orphans(
    dataset: &Dataset,
    query_id: &str,
    sides: OrphanSides,
) -> Result<OrphanReport, QualityError> {
    let q = dataset.require_query(query_id)?;
    let qo = query_orphans(dataset, q, sides);
    Ok(OrphanReport {
        sides,
        total: qo.count(),
        queries: vec![qo],
    })
}

pub fn detect_all_orphans(dataset: &Dataset, sides: OrphanSides) -> OrphanReport {
    let queries: Vec<QueryOrphans> = dataset
        .queries()
        .iter()
        .map(|q| query_orphans(dataset, q, sides))
        .collect();
    OrphanReport {
        sides,
        total: queries.iter().map(QueryOrphans::count).sum(),
        queries,
    }
}

/// Removes the query's orphans (and so their candidate pairs). A layer that
/// another query also traces is not edited in place: the query is pointed at
/// a copy named `<layer>@<query>` holding the surviving artifacts.
pub fn prune_orphans(
    dataset: &Dataset,
    query_id: &str,
    sides: OrphanSides,
) -> Result<Dataset, QualityError> {
    let q = dataset.require_query(query_id)?.clone();
    let orphans = query_orphans(dataset, &q, sides);
    if orphans.count() == 0 {
        return Ok(dataset.clone());
    }
    let mut parts: DatasetParts = dataset.clone().into_parts();
    let shared = |layer: &str| {
        dataset
            .queries()
            .iter()
            .any(|o| o.id != q.id && (o.source_layer_id == layer || o.target_layer_id == layer))
    };

    let mut new_query = q.clone();
    for (layer_id, removed, is_source) in [
        (&q.source_layer_id, &orphans.source_orphans, true),
        (&q.target_layer_id, &orphans.target_orphans, false),
    ] {
        if removed.is_empty() {
            continue;
        }
        let removed: HashSet<&str> = removed.iter().map(String::as_str).collect();
        if shared(layer_id) {
            let mut copy_id = format!("{layer_id}@{}", q.id);
            while parts.layers.iter().any(|l| l.id == copy_id) {
                copy_id.push('_');
            }
            let original = dataset.layer(layer_id).expect("query layer exists");
            parts.layers.push(Layer {
                id: copy_id.clone(),
                name: original.name.clone(),
                kind: original.kind,
            });
            let copies: Vec<_> = dataset
                .layer_artifacts(layer_id)
                .iter()
                .filter(|a| !removed.contains(a.id.as_str()))
                .map(|a| crate::corpus::Artifact {
                    layer_id: copy_id.clone(),
                    ..a.clone()
                })
                .collect();
            parts.artifacts.extend(copies);
            if is_source {
                new_query.source_layer_id = copy_id;
            } else {
                new_query.target_layer_id = copy_id;
            }
        } else {
            parts
                .artifacts
                .retain(|a| a.layer_id != *layer_id || !removed.contains(a.id.as_str()));
        }
    }
    for existing in &mut parts.queries {
        if existing.id == q.id {
            *existing = new_query.clone();
        }
    }
    let (pruned, _) = Dataset::from_parts(parts)?;
    Ok(pruned)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadabilityCounts {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
}

pub fn readability_counts<S: AsRef<str>>(texts: &[S]) -> ReadabilityCounts {
    let mut c = ReadabilityCounts::default();
    for text in texts {
        let text = text.as_ref();
        c.sentences += count_sentences(text);
        for word in text
            .split_whitespace()
            .filter(|w| w.chars().any(char::is_alphabetic))
        {
            c.words += 1;
            c.syllables += count_syllables(word);
        }
    }
    c
}

/// Flesch-Kincaid grade level,
/// `0.39·(words/sentences) + 11.8·(syllables/words) − 15.59`, over all texts.
pub fn readability<S: AsRef<str>>(texts: &[S]) -> Result<f64, QualityError> {
    let c = readability_counts(texts);
    if c.words == 0 || c.sentences == 0 {
        return Err(QualityError::BlankInput);
    }
    Ok(
        0.39 * (c.words as f64 / c.sentences as f64) + 11.8 * (c.syllables as f64 / c.words as f64)
            - 15.59,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBands {
    /// Share of distinct terms whose token-mass share is below the low threshold.
    pub low_prop: f64,
    /// Share of distinct terms whose token-mass share is above the high threshold.
    pub high_prop: f64,
    pub distinct_terms: usize,
    pub total_tokens: u64,
}

fn check_thresholds(low: f64, high: f64) -> Result<(), QualityError> {
    if low > 0.0 && low <= high && high < 1.0 {
        Ok(())
    } else {
        Err(QualityError::InvalidThresholds { low, high })
    }
}

pub fn frequency_bands(
    stats: &VocabularyStats,
    low: f64,
    high: f64,
) -> Result<FrequencyBands, QualityError> {
    check_thresholds(low, high)?;
    let distinct = stats.terms.len();
    if distinct == 0 || stats.total_token_count == 0 {
        return Ok(FrequencyBands {
            low_prop: 0.0,
            high_prop: 0.0,
            distinct_terms: 0,
            total_tokens: 0,
        });
    }
    let total = stats.total_token_count as f64;
    let (mut n_low, mut n_high) = (0usize, 0usize);
    for s in stats.terms.values() {
        let share = s.collection_frequency as f64 / total;
        if share < low {
            n_low += 1;
        }
        if share > high {
            n_high += 1;
        }
    }
    Ok(FrequencyBands {
        low_prop: n_low as f64 / distinct as f64,
        high_prop: n_high as f64 / distinct as f64,
        distinct_terms: distinct,
        total_tokens: stats.total_token_count,
    })
}

fn layer_vocabulary(dataset: &Dataset, layer: &Layer) -> Result<VocabularyStats, QualityError> {
    let tok = Tokenizer::new(TokenizerProfile::analysis(layer.kind))?;
    let mut stats = VocabularyStats::default();
    for a in dataset.layer_artifacts(&layer.id) {
        stats.add_bag(&tok.bag(&a.body));
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFrequency {
    pub layer_id: String,
    #[serde(flatten)]
    pub bands: FrequencyBands,
}

/// Frequency bands per layer, on analysis-profile tokens (stopwords removed).
pub fn frequency_profile(
    dataset: &Dataset,
    low: f64,
    high: f64,
) -> Result<Vec<LayerFrequency>, QualityError> {
    check_thresholds(low, high)?;
    dataset
        .layers()
        .iter()
        .map(|layer| {
            Ok(LayerFrequency {
                layer_id: layer.id.clone(),
                bands: frequency_bands(&layer_vocabulary(dataset, layer)?, low, high)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OovReport {
    pub layer_id: String,
    pub count: usize,
    pub terms: Vec<String>,
}

pub fn read_resource(path: &Path) -> Result<BTreeSet<String>, QualityError> {
    read_word_list(path).map_err(|e| match e {
        TextError::WordList { path, source } => QualityError::Resource { path, source },
    })
}

/// Layer vocabulary (analysis profile) minus `vocab`, per layer.
pub fn oov_report(
    dataset: &Dataset,
    vocab: &BTreeSet<String>,
) -> Result<Vec<OovReport>, QualityError> {
    dataset
        .layers()
        .iter()
        .map(|layer| {
            let stats = layer_vocabulary(dataset, layer)?;
            let terms: Vec<String> = stats
                .terms
                .keys()
                .filter(|t| !vocab.contains(*t))
                .cloned()
                .collect();
            Ok(OovReport {
                layer_id: layer.id.clone(),
                count: terms.len(),
                terms,
            })
        })
        .collect()
}

pub fn oov_report_file(
    dataset: &Dataset,
    vocab_file: &Path,
) -> Result<Vec<OovReport>, QualityError> {
    oov_report(dataset, &read_resource(vocab_file)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthConfig {
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub stopwords: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHealth {
    pub layer_id: String,
    /// `None` when the layer has no readable text.
    pub fk_grade: Option<f64>,
    #[serde(flatten)]
    pub bands: FrequencyBands,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oov: Option<OovReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub dataset: String,
    pub config: HealthConfig,
    pub layers: Vec<LayerHealth>,
}

pub fn health_report(
    dataset: &Dataset,
    low: f64,
    high: f64,
    vocab_file: Option<&Path>,
) -> Result<HealthReport, QualityError> {
    let bands = frequency_profile(dataset, low, high)?;
    let oov = match vocab_file {
        Some(path) => Some(oov_report_file(dataset, path)?),
        None => None,
    };
    let layers = dataset
        .layers()
        .iter()
        .zip(bands)
        .enumerate()
        .map(|(i, (layer, freq))| {
            let bodies: Vec<&str> = dataset
                .layer_artifacts(&layer.id)
                .iter()
                .map(|a| a.body.as_str())
                .collect();
            LayerHealth {
                layer_id: layer.id.clone(),
                fk_grade: readability(&bodies).ok(),
                bands: freq.bands,
                oov: oov.as_ref().map(|o| o[i].clone()),
            }
        })
        .collect();
    Ok(HealthReport {
        dataset: dataset.name().to_string(),
        config: HealthConfig {
            low_threshold: low,
            high_threshold: high,
            stopwords: "bundled-english".into(),
            vocab_file: vocab_file.map(Path::to_path_buf),
        },
        layers,
    })
}

/// False positives and false negatives of a run's eval part at `threshold`.
pub fn misprediction_set(
    run: &RunRecord,
    truths: &BTreeSet<PairId>,
    threshold: f64,
) -> Result<BTreeSet<PairId>, QualityError> {
    let eval = run.eval_scored()?;
    let cls = classify_at(eval.iter().copied(), truths, threshold);
    let mut out: BTreeSet<PairId> = cls
        .positives
        .iter()
        .filter(|p| !truths.contains(*p))
        .cloned()
        .collect();
    out.extend(
        eval.iter()
            .map(|c| c.pair())
            .filter(|p| truths.contains(p) && !cls.positives.contains(p)),
    );
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Syn,
    Ant,
}

/// Symmetric synonym/antonym relation table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    relations: HashSet<(String, String, Relation)>,
}

impl Lexicon {
    /// Parses `term<TAB>syn|ant<TAB>term` lines; blank lines and `#` comments
    /// are skipped.
    pub fn parse(content: &str) -> Result<Self, QualityError> {
        let mut lex = Lexicon::default();
        for (i, line) in content.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [a, rel, b] = fields.as_slice() else {
                return Err(QualityError::Lexicon {
                    line: i + 1,
                    detail: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            };
            let rel = match *rel {
                "syn" => Relation::Syn,
                "ant" => Relation::Ant,
                other => {
                    return Err(QualityError::Lexicon {
                        line: i + 1,
                        detail: format!("unknown relation {other:?}"),
                    })
                }
            };
            lex.insert(a.trim(), b.trim(), rel);
        }
        Ok(lex)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is well-formed")
    }

    pub fn read(path: &Path) -> Result<Self, QualityError> {
        let content = fs::read_to_string(path).map_err(|source| QualityError::Resource {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&content)
    }

    pub fn insert(&mut self, a: &str, b: &str, rel: Relation) {
        let (a, b) = (a.to_lowercase(), b.to_lowercase());
        self.relations.insert((a.clone(), b.clone(), rel));
        self.relations.insert((b, a, rel));
    }

    pub fn related(&self, a: &str, b: &str, rel: Relation) -> bool {
        self.relations
            .contains(&(a.to_string(), b.to_string(), rel))
    }

    pub fn len(&self) -> usize {
        self.relations.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }
}

/// External word resources for link features.
#[derive(Clone, Debug, Default)]
pub struct LinkResources {
    pub lexicon: Lexicon,
    pub dictionary: BTreeSet<String>,
    pub model_vocab: BTreeSet<String>,
}

impl LinkResources {
    pub fn load(lexicon: &Path, dictionary: &Path, vocab: &Path) -> Result<Self, QualityError> {
        Ok(LinkResources {
            lexicon: Lexicon::read(lexicon)?,
            dictionary: read_resource(dictionary)?,
            model_vocab: read_resource(vocab)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkFeatureReport {
    pub pair: PairId,
    pub overlap_count: usize,
    pub synonym_pair_count: usize,
    pub antonym_pair_count: usize,
    pub misspelled_count: usize,
    pub oov_count: usize,
}

/// Terms occurring at least this often across the dataset count as project
/// vocabulary and are never reported as misspelled.
pub const JARGON_RECURRENCE: u64 = 2;

/// Tokenized artifacts and project vocabulary shared by many feature calls.
pub struct LinkFeatureContext<'a> {
    dataset: &'a Dataset,
    resources: &'a LinkResources,
    project_terms: BTreeMap<String, u64>,
    tokenizers: BTreeMap<String, Tokenizer>,
}

impl<'a> LinkFeatureContext<'a> {
    pub fn new(dataset: &'a Dataset, resources: &'a LinkResources) -> Result<Self, QualityError> {
        let mut tokenizers = BTreeMap::new();
        let mut project_terms: BTreeMap<String, u64> = BTreeMap::new();
        for layer in dataset.layers() {
            let tok = Tokenizer::new(TokenizerProfile::analysis(layer.kind))?;
            for a in dataset.layer_artifacts(&layer.id) {
                for t in tok.tokenize(&a.body) {
                    *project_terms.entry(t).or_insert(0) += 1;
                }
            }
            tokenizers.insert(layer.id.clone(), tok);
        }
        Ok(LinkFeatureContext {
            dataset,
            resources,
            project_terms,
            tokenizers,
        })
    }

    fn distinct_terms(
        &self,
        layer_id: &str,
        id: &str,
        pair: &PairId,
    ) -> Result<BTreeSet<String>, QualityError> {
        let artifact = self
            .dataset
            .artifact(layer_id, id)
            .ok_or_else(|| QualityError::UnknownPair(pair.clone()))?;
        Ok(self.tokenizers[layer_id]
            .tokenize(&artifact.body)
            .into_iter()
            .collect())
    }

    pub fn features(
        &self,
        query_id: &str,
        pair: &PairId,
    ) -> Result<LinkFeatureReport, QualityError> {
        let q = self.dataset.require_query(query_id)?;
        let a = self.distinct_terms(&q.source_layer_id, &pair.source_id, pair)?;
        let b = self.distinct_terms(&q.target_layer_id, &pair.target_id, pair)?;
        Ok(features_of_terms(
            pair.clone(),
            &a,
            &b,
            self.resources,
            &self.project_terms,
        ))
    }

    pub fn features_many(
        &self,
        query_id: &str,
        pairs: &[PairId],
        mode: Parallelism,
    ) -> Result<Vec<LinkFeatureReport>, QualityError> {
        exec::try_map(pairs, mode, |p| self.features(query_id, p))
    }
}

/// Feature counts from the two artifacts' distinct analysis terms.
pub fn features_of_terms(
    pair: PairId,
    a: &BTreeSet<String>,
    b: &BTreeSet<String>,
    resources: &LinkResources,
    project_terms: &BTreeMap<String, u64>,
) -> LinkFeatureReport {
    let mut synonyms = 0;
    let mut antonyms = 0;
    for x in a {
        for y in b {
            if resources.lexicon.related(x, y, Relation::Syn) {
                synonyms += 1;
            }
            if resources.lexicon.related(x, y, Relation::Ant) {
                antonyms += 1;
            }
        }
    }
    let union: BTreeSet<&String> = a.union(b).collect();
    let misspelled = union
        .iter()
        .filter(|t| t.chars().any(char::is_alphabetic))
        .filter(|t| !resources.dictionary.contains(t.as_str()))
        .filter(|t| project_terms.get(t.as_str()).copied().unwrap_or(0) < JARGON_RECURRENCE)
        .count();
    let oov = union
        .iter()
        .filter(|t| !resources.model_vocab.contains(t.as_str()))
        .count();
    LinkFeatureReport {
        pair,
        overlap_count: a.intersection(b).count(),
        synonym_pair_count: synonyms,
        antonym_pair_count: antonyms,
        misspelled_count: misspelled,
        oov_count: oov,
    }
}

pub fn link_features(
    dataset: &Dataset,
    query_id: &str,
    pair: &PairId,
    resources: &LinkResources,
) -> Result<LinkFeatureReport, QualityError> {
    LinkFeatureContext::new(dataset, resources)?.features(query_id, pair)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub size_a: usize,
    pub size_b: usize,
    pub intersection: usize,
    pub union: usize,
    pub jaccard: f64,
}

/// Intersection and Jaccard index of two pair sets (1 when both are empty).
pub fn agreement<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> AgreementReport {
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    AgreementReport {
        size_a: a.len(),
        size_b: b.len(),
        intersection,
        union,
        jaccard: if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        },
    }
}
