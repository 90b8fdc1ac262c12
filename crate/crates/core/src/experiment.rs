//! Evaluation protocol: seeded 35/10/55 splits of the candidate set,
//! per-source MAP and global max-F2 on the eval part, classification at a
//! fixed threshold, and aggregation across seeds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_candidates, CorpusError, Dataset, PairId};
use crate::exec::{self, Parallelism};
use crate::scoring::{score_candidates, ScoredCandidate, ScorerSpec, ScoringError};
use crate::textpipe::TokenizerProfile;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("split fractions must be non-negative and sum to 1, got {0}, {1}, {2}")]
    InvalidSplit(f64, f64, f64),
    #[error("no score for eval pair {0}")]
    MissingScore(PairId),
    #[error("partition does not match candidate set: {0}")]
    PartitionMismatch(String),
    #[error("cannot aggregate zero reports")]
    EmptyAggregate,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// splitmix64 generator (Vigna). Drives the split shuffle so any
/// implementation can reproduce a partition from its seed.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec {
            train_fraction: 0.35,
            val_fraction: 0.10,
            eval_fraction: 0.55,
            seed,
        }
    }

    pub fn with_fractions(
        train: f64,
        val: f64,
        eval: f64,
        seed: u64,
    ) -> Result<Self, ExperimentError> {
        let valid = [train, val, eval]
            .iter()
            .all(|f| f.is_finite() && *f >= 0.0)
            && (train + val + eval - 1.0).abs() < 1e-9;
        if !valid {
            return Err(ExperimentError::InvalidSplit(train, val, eval));
        }
        Ok(SplitSpec {
            train_fraction: train,
            val_fraction: val,
            eval_fraction: eval,
            seed,
        })
    }

    /// `(floor(train·n), floor(val·n), remainder)`. A 1e-9 slack absorbs
    /// binary rounding of the decimal fractions (0.35·60 must floor to 21).
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let part = |f: f64| ((f * n as f64 + 1e-9).floor() as usize).min(n);
        let train = part(self.train_fraction);
        let val = part(self.val_fraction).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: BTreeSet<PairId>,
    pub val: BTreeSet<PairId>,
    pub eval: BTreeSet<PairId>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.eval.len())
    }

    /// Checks that the three parts are disjoint and cover exactly `candidates`.
    pub fn validate(&self, candidates: &[PairId]) -> Result<(), ExperimentError> {
        if self.len() != candidates.len() {
            return Err(ExperimentError::PartitionMismatch(format!(
                "partition holds {} pairs, candidate set has {}",
                self.len(),
                candidates.len()
            )));
        }
        for c in candidates {
            let hits = [&self.train, &self.val, &self.eval]
                .iter()
                .filter(|part| part.contains(c))
                .count();
            if hits != 1 {
                return Err(ExperimentError::PartitionMismatch(format!(
                    "pair {c} appears in {hits} parts"
                )));
            }
        }
        Ok(())
    }
}

/// Fisher-Yates shuffle of the canonically sorted candidates, drawing
/// `j = next_u64() mod (i + 1)` for `i = n-1 .. 1`; the first
/// `floor(train·n)` pairs train, the next `floor(val·n)` validate, the rest
/// evaluate.
pub fn split_candidates(candidates: &[PairId], spec: &SplitSpec) -> Partition {
    let mut order: Vec<&PairId> = candidates.iter().collect();
    order.sort();
    let mut rng = SplitMix64::new(spec.seed);
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let (train, val, _) = spec.sizes(order.len());
    let mut p = Partition::default();
    for (k, pair) in order.into_iter().enumerate() {
        let part = if k < train {
            &mut p.train
        } else if k < train + val {
            &mut p.val
        } else {
            &mut p.eval
        };
        part.insert(pair.clone());
    }
    p
}

/// Partition file written by `split` and read by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub dataset: String,
    pub query_id: String,
    pub split: SplitSpec,
    #[serde(flatten)]
    pub partition: Partition,
}

/// Mean of precision@r over the ranks r holding a relevant item; `None`
/// when nothing is relevant.
pub fn average_precision(ranked: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &relevant) in ranked.iter().enumerate() {
        if relevant {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn by_rank(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| (&a.source_id, &a.target_id).cmp(&(&b.source_id, &b.target_id)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: Option<f64>,
    pub evaluated_sources: usize,
    pub excluded_sources: usize,
}

/// Per-source MAP over `scored` (already restricted to the eval part).
/// Each source ranks its own targets by descending score with ties in
/// canonical order; sources without a true link are excluded.
pub fn mean_average_precision(scored: &[&ScoredCandidate], truths: &BTreeSet<PairId>) -> MapResult {
    let mut per_source: BTreeMap<&str, Vec<&ScoredCandidate>> = BTreeMap::new();
    for c in scored {
        per_source.entry(c.source_id.as_str()).or_default().push(c);
    }
    let mut aps = Vec::new();
    let mut excluded = 0;
    for (_, mut list) in per_source {
        list.sort_by(|a, b| by_rank(a, b));
        let ranked: Vec<bool> = list.iter().map(|c| truths.contains(&c.pair())).collect();
        match average_precision(&ranked) {
            Some(ap) => aps.push(ap),
            None => excluded += 1,
        }
    }
    MapResult {
        map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        evaluated_sources: aps.len(),
        excluded_sources: excluded,
    }
}

/// F2 from confusion counts: `5PR / (4P + R)`, written as
/// `5tp / (4·(tp+fn) + (tp+fp))`; 0 when nothing is predicted or relevant.
pub fn f2_from_counts(tp: usize, predicted: usize, relevant: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    5.0 * tp as f64 / (4.0 * relevant as f64 + predicted as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub value: f64,
}

/// Sweeps thresholds `t` over the distinct scores and 0.5, predicting
/// `score >= t` globally. A threshold is reported as the lowest score it
/// admits, so 0.5 and the next score above it are one cut. Ties in F2 go to
/// the smaller threshold. `None` when no item is relevant.
pub fn max_f2(scored: &[(f64, bool)]) -> Option<ThresholdPoint> {
    let relevant = scored.iter().filter(|(_, t)| *t).count();
    if relevant == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut best: Option<ThresholdPoint> = None;
    let mut consider = |threshold: f64, value: f64| {
        let better = match best {
            None => true,
            Some(b) => value > b.value || (value == b.value && threshold < b.threshold),
        };
        if better {
            best = Some(ThresholdPoint { threshold, value });
        }
    };
    // The 0.5 cut admits nothing only when every score is below it.
    if sorted.first().is_none_or(|(s, _)| *s < DEFAULT_THRESHOLD) {
        consider(DEFAULT_THRESHOLD, 0.0);
    }
    let mut tp = 0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            }
            i += 1;
        }
        consider(score, f2_from_counts(tp, i, relevant));
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        let predicted = self.tp + self.fp;
        if predicted == 0 {
            0.0
        } else {
            self.tp as f64 / predicted as f64
        }
    }

    pub fn recall(&self) -> Option<f64> {
        let relevant = self.tp + self.fn_;
        (relevant > 0).then(|| self.tp as f64 / relevant as f64)
    }

    pub fn f2(&self) -> f64 {
        f2_from_counts(self.tp, self.tp + self.fp, self.tp + self.fn_)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub positives: BTreeSet<PairId>,
    pub confusion: Confusion,
}

/// Predicts `score >= threshold` as a link and counts outcomes against `truths`.
pub fn classify_at<'a, I>(scored: I, truths: &BTreeSet<PairId>, threshold: f64) -> Classification
where
    I: IntoIterator<Item = &'a ScoredCandidate>,
{
    let mut positives = BTreeSet::new();
    let mut confusion = Confusion::default();
    for c in scored {
        let pair = c.pair();
        let truth = truths.contains(&pair);
        let predicted = c.score >= threshold;
        match (predicted, truth) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, true) => confusion.fn_ += 1,
            (false, false) => confusion.tn += 1,
        }
        if predicted {
            positives.insert(pair);
        }
    }
    Classification {
        positives,
        confusion,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtThreshold {
    pub threshold: f64,
    pub precision: f64,
    pub recall: Option<f64>,
    pub f2: f64,
    pub confusion: Confusion,
}

/// Metrics for one (scorer, seed) run on the eval part. `None` marks a
/// metric that is undefined for the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: Option<f64>,
    pub max_f2: Option<f64>,
    pub max_f2_threshold: Option<f64>,
    pub at_threshold: AtThreshold,
    pub evaluated_sources: usize,
    pub excluded_query_sources: usize,
    pub eval_pairs: usize,
    pub eval_true_links: usize,
}

/// Restricts `scored` to the eval part, failing if an eval pair is unscored.
pub fn eval_subset<'a>(
    scored: &'a [ScoredCandidate],
    partition: &Partition,
) -> Result<Vec<&'a ScoredCandidate>, ExperimentError> {
    let subset: Vec<&ScoredCandidate> = scored
        .iter()
        .filter(|c| partition.eval.contains(&c.pair()))
        .collect();
    if subset.len() != partition.eval.len() {
        let seen: BTreeSet<PairId> = subset.iter().map(|c| c.pair()).collect();
        let missing = partition
            .eval
            .iter()
            .find(|p| !seen.contains(*p))
            .cloned()
            .unwrap_or_else(|| PairId::new("?", "?"));
        return Err(ExperimentError::MissingScore(missing));
    }
    Ok(subset)
}

pub fn evaluate(
    scored: &[ScoredCandidate],
    partition: &Partition,
    truths: &BTreeSet<PairId>,
    threshold: f64,
) -> Result<MetricsReport, ExperimentError> {
    let eval = eval_subset(scored, partition)?;
    let map = mean_average_precision(&eval, truths);
    let labelled: Vec<(f64, bool)> = eval
        .iter()
        .map(|c| (c.score, truths.contains(&c.pair())))
        .collect();
    let best = max_f2(&labelled);
    let cls = classify_at(eval.iter().copied(), truths, threshold);
    Ok(MetricsReport {
        map: map.map,
        max_f2: best.map(|b| b.value),
        max_f2_threshold: best.map(|b| b.threshold),
        at_threshold: AtThreshold {
            threshold,
            precision: cls.confusion.precision(),
            recall: cls.confusion.recall(),
            f2: cls.confusion.f2(),
            confusion: cls.confusion,
        },
        evaluated_sources: map.evaluated_sources,
        excluded_query_sources: map.excluded_sources,
        eval_pairs: eval.len(),
        eval_true_links: labelled.iter().filter(|(_, t)| *t).count(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Runs where the metric was undefined and left out.
    pub excluded: usize,
}

impl MetricSummary {
    fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(v) => defined.push(v),
                None => excluded += 1,
            }
        }
        if defined.is_empty() {
            return MetricSummary {
                mean: None,
                min: None,
                max: None,
                excluded,
            };
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
        let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        MetricSummary {
            mean: Some(mean.clamp(min, max)),
            min: Some(min),
            max: Some(max),
            excluded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub map: MetricSummary,
    pub max_f2: MetricSummary,
    pub precision_at_threshold: MetricSummary,
    pub recall_at_threshold: MetricSummary,
    pub f2_at_threshold: MetricSummary,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport, ExperimentError> {
    if reports.is_empty() {
        return Err(ExperimentError::EmptyAggregate);
    }
    Ok(AggregateReport {
        runs: reports.len(),
        map: MetricSummary::of(reports.iter().map(|r| r.map)),
        max_f2: MetricSummary::of(reports.iter().map(|r| r.max_f2)),
        precision_at_threshold: MetricSummary::of(
            reports.iter().map(|r| Some(r.at_threshold.precision)),
        ),
        recall_at_threshold: MetricSummary::of(reports.iter().map(|r| r.at_threshold.recall)),
        f2_at_threshold: MetricSummary::of(reports.iter().map(|r| Some(r.at_threshold.f2))),
    })
}

/// Everything needed to re-derive one (scorer, seed) run's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub query_id: String,
    pub scorer: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer_profile: Option<TokenizerProfile>,
    pub partition: Partition,
    pub scored: Vec<ScoredCandidate>,
}

impl RunRecord {
    pub fn eval_scored(&self) -> Result<Vec<&ScoredCandidate>, ExperimentError> {
        eval_subset(&self.scored, &self.partition)
    }

    pub fn evaluate(
        &self,
        truths: &BTreeSet<PairId>,
        threshold: f64,
    ) -> Result<MetricsReport, ExperimentError> {
        evaluate(&self.scored, &self.partition, truths, threshold)
    }
}

/// Run manifest: what `run` executed, recorded next to its results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: String,
    pub query_id: String,
    pub scorers: Vec<ScorerSpec>,
    pub seeds: Vec<u64>,
    pub split: [f64; 3],
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub scorer: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerAggregate {
    pub dataset: String,
    pub scorer: String,
    pub aggregate: AggregateReport,
}

/// Machine-readable results of a run matrix. Contains no timings, so
/// identical inputs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub manifest: RunManifest,
    pub runs: Vec<SeedResult>,
    pub aggregates: Vec<ScorerAggregate>,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub results: ResultsFile,
    /// Wall time spent fitting and scoring, per scorer.
    pub fit_score_time: Vec<(String, Duration)>,
    pub records: Vec<RunRecord>,
}

/// Scores the query once per scorer (scores do not depend on the split),
/// then evaluates every (scorer, seed) cell.
pub fn run_matrix(
    dataset: &Dataset,
    query_id: &str,
    scorers: &[ScorerSpec],
    seeds: &[u64],
    fractions: [f64; 3],
    threshold: f64,
    mode: Parallelism,
) -> Result<MatrixOutcome, ExperimentError> {
    let candidates = generate_candidates(dataset, query_id)?;
    let truths = dataset.truths(query_id);
    let [train, val, eval] = fractions;
    let partitions = seeds
        .iter()
        .map(|&seed| {
            let spec = SplitSpec::with_fractions(train, val, eval, seed)?;
            Ok((seed, split_candidates(&candidates, &spec)))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let mut fit_score_time = Vec::new();
    let mut scored_by_scorer = HashMap::new();
    for spec in scorers {
        let start = Instant::now();
        let scored = score_candidates(spec, dataset, query_id, mode)?;
        fit_score_time.push((spec.name.clone(), start.elapsed()));
        scored_by_scorer.insert(spec.name.clone(), scored);
    }

    let cells: Vec<(&ScorerSpec, &(u64, Partition))> = scorers
        .iter()
        .flat_map(|s| partitions.iter().map(move |p| (s, p)))
        .collect();
    let runs = exec::try_map(&cells, mode, |(spec, (seed, partition))| {
        let metrics = evaluate(&scored_by_scorer[&spec.name], partition, &truths, threshold)?;
        Ok::<_, ExperimentError>(SeedResult {
            scorer: spec.name.clone(),
            seed: *seed,
            metrics,
        })
    })?;

    let mut aggregates = Vec::new();
    for spec in scorers {
        let reports: Vec<MetricsReport> = runs
            .iter()
            .filter(|r| r.scorer == spec.name)
            .map(|r| r.metrics.clone())
            .collect();
        if reports.is_empty() {
            continue;
        }
        aggregates.push(ScorerAggregate {
            dataset: dataset.name().to_string(),
            scorer: spec.name.clone(),
            aggregate: aggregate(&reports)?,
        });
    }

    let records = cells
        .iter()
        .map(|(spec, (seed, partition))| RunRecord {
            dataset: dataset.name().to_string(),
            query_id: query_id.to_string(),
            scorer: spec.name.clone(),
            seed: *seed,
            tokenizer_profile: match &spec.kind {
                crate::scoring::ScorerKind::Vsm { profile } => profile.clone(),
                _ => None,
            },
            partition: partition.clone(),
            scored: scored_by_scorer[&spec.name].clone(),
        })
        .collect();

    Ok(MatrixOutcome {
        results: ResultsFile {
            manifest: RunManifest {
                dataset: dataset.name().to_string(),
                query_id: query_id.to_string(),
                scorers: scorers.to_vec(),
                seeds: seeds.to_vec(),
                split: fractions,
                threshold,
            },
            runs,
            aggregates,
        },
        fit_score_time,
        records,
    })
}
