//! Trace-link recovery toolkit: dataset ingestion, tokenization, TF-IDF and
//! external scorers, the split/metric evaluation protocol, dataset-quality
//! analyses and the persistent review store used to vet predicted links.

pub mod corpus;
pub mod exec;
pub mod experiment;
pub mod quality;
pub mod review;
pub mod scoring;
pub mod synth;
pub mod textpipe;

pub use corpus::{Artifact, Dataset, Layer, LayerKind, PairId, TraceLink, TraceQuery};
pub use exec::Parallelism;
pub use scoring::{ScoredCandidate, ScorerSpec};
