//! Deterministic synthetic datasets for smoke tests and benchmarks.
//!
//! Artifacts are drawn from topic vocabularies plus a shared background
//! vocabulary; true links join sources and targets of the same topic, so
//! lexical scorers do better than chance but not perfectly.

use crate::corpus::{
    Artifact, Dataset, DatasetParts, Layer, LayerKind, LinkLabel, TraceLink, TraceQuery,
};
use crate::experiment::SplitMix64;

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ra", "te", "su", "no", "vi", "da", "pe", "zu", "ho", "ri", "ma", "to", "le",
    "fa", "gi", "so", "ne", "bu", "ki", "po", "ya",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub name: String,
    pub sources: usize,
    pub targets: usize,
    pub topics: usize,
    pub words_per_artifact: usize,
    /// Upper bound on true links per linked source.
    pub links_per_source: usize,
    /// The last this-many sources get no true link.
    pub orphan_sources: usize,
    pub target_kind: LayerKind,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(name: impl Into<String>, sources: usize, targets: usize, seed: u64) -> Self {
        SyntheticSpec {
            name: name.into(),
            sources,
            targets,
            topics: (sources / 3).max(2),
            words_per_artifact: 12,
            links_per_source: 3,
            orphan_sources: 0,
            target_kind: LayerKind::NaturalLanguage,
            seed,
        }
    }
}

struct Rng(SplitMix64);

impl Rng {
    fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n.max(1) as u64) as usize
    }

    fn chance(&mut self, percent: usize) -> bool {
        self.below(100) < percent
    }
}

fn pseudo_word(rng: &mut Rng) -> String {
    let n = 2 + rng.below(2);
    (0..n)
        .map(|_| SYLLABLES[rng.below(SYLLABLES.len())])
        .collect()
}

fn vocabulary(rng: &mut Rng, n: usize) -> Vec<String> {
    let mut words: Vec<String> = Vec::with_capacity(n);
    while words.len() < n {
        let w = pseudo_word(rng);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn body(rng: &mut Rng, topic: &[String], background: &[String], n: usize, code: bool) -> String {
    let words: Vec<String> = (0..n)
        .map(|_| {
            if rng.chance(55) {
                topic[rng.below(topic.len())].clone()
            } else {
                background[rng.below(background.len())].clone()
            }
        })
        .collect();
    if !code {
        return format!("{}.", words.join(" "));
    }
    // Pair words into camelCase identifiers.
    words
        .chunks(2)
        .map(|c| {
            let mut id = c[0].clone();
            for w in &c[1..] {
                let mut chars = w.chars();
                if let Some(first) = chars.next() {
                    id.push(first.to_ascii_uppercase());
                    id.extend(chars);
                }
            }
            format!("{id}();")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Dataset {
    let mut rng = Rng(SplitMix64::new(spec.seed));
    let topics = spec.topics.max(1);
    let background = vocabulary(&mut rng, 40);
    let topic_words: Vec<Vec<String>> = (0..topics).map(|_| vocabulary(&mut rng, 8)).collect();
    let code = spec.target_kind == LayerKind::SourceCode;

    let source_topic: Vec<usize> = (0..spec.sources).map(|_| rng.below(topics)).collect();
    let target_topic: Vec<usize> = (0..spec.targets).map(|_| rng.below(topics)).collect();
    let width = |n: usize| n.max(1).to_string().len();
    let sid = |i: usize| format!("S{:0w$}", i, w = width(spec.sources));
    let tid = |j: usize| format!("T{:0w$}", j, w = width(spec.targets));

    let mut artifacts = Vec::new();
    for (i, &t) in source_topic.iter().enumerate() {
        artifacts.push(Artifact {
            id: sid(i),
            layer_id: "source".into(),
            body: body(
                &mut rng,
                &topic_words[t],
                &background,
                spec.words_per_artifact,
                false,
            ),
            title: None,
        });
    }
    for (j, &t) in target_topic.iter().enumerate() {
        artifacts.push(Artifact {
            id: tid(j),
            layer_id: "target".into(),
            body: body(
                &mut rng,
                &topic_words[t],
                &background,
                spec.words_per_artifact,
                code,
            ),
            title: None,
        });
    }

    let mut true_links = Vec::new();
    let linked_sources = spec.sources.saturating_sub(spec.orphan_sources);
    if spec.targets > 0 {
        for (i, &topic) in source_topic.iter().enumerate().take(linked_sources) {
            let same: Vec<usize> = (0..spec.targets)
                .filter(|&j| target_topic[j] == topic)
                .collect();
            let want = 1 + rng.below(spec.links_per_source.max(1));
            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..want {
                // Mostly same-topic targets, occasionally an unrelated one.
                let j = if !same.is_empty() && rng.chance(85) {
                    same[rng.below(same.len())]
                } else {
                    rng.below(spec.targets)
                };
                if !chosen.contains(&j) {
                    chosen.push(j);
                }
            }
            for j in chosen {
                true_links.push(TraceLink {
                    query_id: "trace".into(),
                    source_id: sid(i),
                    target_id: tid(j),
                    label: LinkLabel::TrueLink,
                });
            }
        }
    }

    Dataset::from_parts(DatasetParts {
        name: spec.name.clone(),
        layers: vec![
            Layer {
                id: "source".into(),
                name: "Requirements".into(),
                kind: LayerKind::NaturalLanguage,
            },
            Layer {
                id: "target".into(),
                name: if code { "Code".into() } else { "Design".into() },
                kind: spec.target_kind,
            },
        ],
        artifacts,
        queries: vec![TraceQuery {
            id: "trace".into(),
            source_layer_id: "source".into(),
            target_layer_id: "target".into(),
        }],
        true_links,
    })
    .expect("synthetic dataset is valid")
    .0
}
