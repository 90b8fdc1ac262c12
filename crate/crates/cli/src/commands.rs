use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tracekit::corpus::{dataset_summary, load_dataset, write_manifest, Dataset, PairId};
use tracekit::exec::{self, Parallelism};
use tracekit::experiment::{
    run_matrix, split_candidates, PartitionFile, ResultsFile, RunRecord, SplitSpec,
};
use tracekit::quality::{self, Lexicon, LinkFeatureContext, LinkResources, OrphanSides};
use tracekit::review::ReviewStore;
use tracekit::scoring::{score_candidates, ScoredCandidate, ScorerSpec};

use crate::table::{render_table, TableRow};
use crate::{
    AgreementArgs, AnalyzeCommand, Command, DatasetArgs, EvalArgs, HealthArgs, IngestArgs,
    MispredictionArgs, OrphanArgs, RunArgs, ScoreArgs, ServeArgs, SidesArg, SplitArgs, UsageError,
};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Score(a) => score(a),
        Command::Split(a) => split(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
        Command::Orphans(a) => orphans(a),
        Command::Analyze(AnalyzeCommand::Health(a)) => health(a),
        Command::Analyze(AnalyzeCommand::Mispredictions(a)) => mispredictions(a),
        Command::Analyze(AnalyzeCommand::Agreement(a)) => agreement(a),
        Command::Serve(a) => serve(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn mode_for(jobs: usize) -> Parallelism {
    if jobs == 1 {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

fn load(path: &Path) -> Result<Dataset> {
    let (dataset, report) =
        load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    for a in &report.empty_bodies {
        eprintln!("warning: empty body: {}/{}", a.layer_id, a.id);
    }
    for l in &report.collapsed_duplicate_links {
        eprintln!(
            "warning: duplicate link collapsed: {} {} -> {}",
            l.query_id, l.source_id, l.target_id
        );
    }
    for a in &report.lossy_utf8 {
        eprintln!("warning: invalid UTF-8 replaced: {}/{}", a.layer_id, a.id);
    }
    Ok(dataset)
}

fn query_id(dataset: &Dataset, requested: &Option<String>) -> Result<String> {
    match requested {
        Some(q) => Ok(dataset.require_query(q)?.id.clone()),
        None => match dataset.sole_query() {
            Some(q) => Ok(q.id.clone()),
            None => Err(usage(format!(
                "dataset {} has {} queries; choose one with --query",
                dataset.name(),
                dataset.queries().len()
            ))),
        },
    }
}

fn load_with_query(args: &DatasetArgs) -> Result<(Dataset, String)> {
    let dataset = load(&args.dataset)?;
    let q = query_id(&dataset, &args.query)?;
    Ok((dataset, q))
}

fn parse_scorer(s: &str) -> Result<ScorerSpec> {
    ScorerSpec::parse(s).ok_or_else(|| {
        usage(format!(
            "unknown scorer {s:?}; use vsm or external:<endpoint>"
        ))
    })
}

fn write_output(path: Option<&Path>, content: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, content).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn scores_csv(scored: &[ScoredCandidate]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in scored {
        w.serialize(c).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn read_scores(path: &Path) -> Result<Vec<ScoredCandidate>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<ScoredCandidate>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let dataset = load(&a.data.dataset)?;
    let summary = dataset_summary(&dataset);
    let mut out = format!("Dataset {}\n\n| Query | Sources | Targets | Candidates | True links |\n|---|---:|---:|---:|---:|\n", dataset.name());
    for s in &summary {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            s.query_id, s.source_count, s.target_count, s.candidate_count, s.true_count
        ));
    }
    print!("{out}");
    if let Some(path) = &a.out {
        write_output(Some(path), &to_json(&summary))?;
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let (dataset, q) = load_with_query(&a.data)?;
    let spec = parse_scorer(&a.scorer)?;
    let scored = exec::with_threads(a.jobs, || {
        score_candidates(&spec, &dataset, &q, mode_for(a.jobs))
    })?;
    write_output(a.out.as_deref(), &scores_csv(&scored))
}

fn partition_file(dataset: &Dataset, q: &str, seed: u64, split: [f64; 3]) -> Result<PartitionFile> {
    let spec = SplitSpec::with_fractions(split[0], split[1], split[2], seed)?;
    let candidates = tracekit::corpus::generate_candidates(dataset, q)?;
    Ok(PartitionFile {
        dataset: dataset.name().to_string(),
        query_id: q.to_string(),
        partition: split_candidates(&candidates, &spec),
        split: spec,
    })
}

fn split(a: SplitArgs) -> Result<()> {
    let (dataset, q) = load_with_query(&a.data)?;
    let file = partition_file(&dataset, &q, a.seed, a.split)?;
    write_output(a.out.as_deref(), &to_json(&file))
}

fn run_record(dataset: &Dataset, q: &str, scores: &Path, partition: &Path) -> Result<RunRecord> {
    let scored: Vec<ScoredCandidate> = read_scores(scores)?
        .into_iter()
        .filter(|c| c.query_id == q)
        .collect();
    let file: PartitionFile = read_json(partition)?;
    let candidates = tracekit::corpus::generate_candidates(dataset, q)?;
    file.partition.validate(&candidates)?;
    Ok(RunRecord {
        dataset: dataset.name().to_string(),
        query_id: q.to_string(),
        scorer: scores.display().to_string(),
        seed: file.split.seed,
        tokenizer_profile: None,
        partition: file.partition,
        scored,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let (dataset, q) = load_with_query(&a.data)?;
    let record = run_record(&dataset, &q, &a.scores, &a.partition)?;
    let report = record.evaluate(&dataset.truths(&q), a.threshold)?;
    write_output(a.out.as_deref(), &to_json(&report))
}

#[derive(Serialize, Deserialize)]
pub struct RunResults {
    pub datasets: Vec<ResultsFile>,
}

#[derive(Serialize)]
struct Timing {
    dataset: String,
    query_id: String,
    scorer: String,
    fit_score_seconds: f64,
}

#[derive(Serialize)]
struct RunMetadata {
    tool: String,
    started_at: String,
    finished_at: String,
    jobs: usize,
    datasets: Vec<PathBuf>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn run(a: RunArgs) -> Result<()> {
    let started_at = now();
    let scorers: Vec<ScorerSpec> = a
        .scorers
        .iter()
        .map(|s| parse_scorer(s))
        .collect::<Result<_>>()?;
    let names: BTreeSet<&str> = scorers.iter().map(|s| s.name.as_str()).collect();
    if names.len() != scorers.len() {
        return Err(usage(
            "scorer names must be distinct; prefix with NAME= to rename",
        ));
    }
    if a.seeds.is_empty() {
        return Err(usage("at least one seed is needed"));
    }
    let mode = mode_for(a.jobs);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut results = Vec::new();
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for path in &a.datasets {
        let dataset = load(path)?;
        let queries: Vec<String> = match &a.query {
            Some(q) => vec![dataset.require_query(q)?.id.clone()],
            None => dataset.queries().iter().map(|q| q.id.clone()).collect(),
        };
        for q in queries {
            let outcome = exec::with_threads(a.jobs, || {
                run_matrix(&dataset, &q, &scorers, &a.seeds, a.split, a.threshold, mode)
            })?;
            let label = if dataset.queries().len() > 1 {
                format!("{}:{}", dataset.name(), q)
            } else {
                dataset.name().to_string()
            };
            let stem = label.replace([':', '/', ' '], "_");
            for (scorer, t) in &outcome.fit_score_time {
                timing.push(Timing {
                    dataset: dataset.name().to_string(),
                    query_id: q.clone(),
                    scorer: scorer.clone(),
                    fit_score_seconds: t.as_secs_f64(),
                });
            }
            for agg in &outcome.results.aggregates {
                rows.push(TableRow {
                    dataset: label.clone(),
                    scorer: agg.scorer.clone(),
                    aggregate: agg.aggregate.clone(),
                    fit_score_time: outcome
                        .fit_score_time
                        .iter()
                        .find(|(n, _)| *n == agg.scorer)
                        .map(|(_, t)| *t),
                });
            }
            let mut written = BTreeSet::new();
            for r in &outcome.records {
                if written.insert(r.scorer.clone()) {
                    let name = r.scorer.replace(['/', ' '], "_");
                    write_output(
                        Some(&a.out.join("scores").join(format!("{stem}-{name}.csv"))),
                        &scores_csv(&r.scored),
                    )?;
                }
            }
            for &seed in &a.seeds {
                let file = partition_file(&dataset, &q, seed, a.split)?;
                write_output(
                    Some(
                        &a.out
                            .join("partitions")
                            .join(format!("{stem}-seed{seed}.json")),
                    ),
                    &to_json(&file),
                )?;
            }
            results.push(outcome.results);
        }
    }

    let table = render_table(&rows);
    write_output(
        Some(&a.out.join("results.json")),
        &to_json(&RunResults { datasets: results }),
    )?;
    write_output(Some(&a.out.join("table.md")), table.as_bytes())?;
    write_output(Some(&a.out.join("timing.json")), &to_json(&timing))?;
    write_output(
        Some(&a.out.join("run-manifest.json")),
        &to_json(&RunMetadata {
            tool: format!("tracekit {}", env!("CARGO_PKG_VERSION")),
            started_at,
            finished_at: now(),
            jobs: a.jobs,
            datasets: a.datasets.clone(),
        }),
    )?;
    print!("{table}");
    Ok(())
}

fn sides(s: SidesArg) -> OrphanSides {
    match s {
        SidesArg::Both => OrphanSides::Both,
        SidesArg::Source => OrphanSides::Source,
        SidesArg::Target => OrphanSides::Target,
    }
}

fn orphans(a: OrphanArgs) -> Result<()> {
    let dataset = load(&a.data.dataset)?;
    let sides = sides(a.sides);
    let report = match &a.data.query {
        Some(q) => quality::detect_orphans(&dataset, q, sides)?,
        None => quality::detect_all_orphans(&dataset, sides),
    };
    println!("{} orphan artifacts", report.total);
    for q in &report.queries {
        println!(
            "  {}: {} source, {} target",
            q.query_id,
            q.source_orphans.len(),
            q.target_orphans.len()
        );
    }
    if a.prune {
        let dir = a
            .out
            .as_ref()
            .ok_or_else(|| usage("--prune needs --out DIR"))?;
        let mut pruned = dataset.clone();
        for q in &report.queries {
            pruned = quality::prune_orphans(&pruned, &q.query_id, sides)?;
        }
        let manifest = write_manifest(&pruned, dir)?;
        println!("pruned manifest: {}", manifest.display());
    } else if let Some(path) = &a.out {
        write_output(Some(path), &to_json(&report))?;
    }
    Ok(())
}

fn health(a: HealthArgs) -> Result<()> {
    let dataset = load(&a.dataset)?;
    let report = quality::health_report(&dataset, a.low, a.high, a.vocab.as_deref())?;
    println!("| Layer | FK grade | Low-frequency | High-frequency | Distinct terms | OOV |");
    println!("|---|---:|---:|---:|---:|---:|");
    for l in &report.layers {
        println!(
            "| {} | {} | {:.3} | {:.3} | {} | {} |",
            l.layer_id,
            l.fk_grade.map_or("—".to_string(), |g| format!("{g:.2}")),
            l.bands.low_prop,
            l.bands.high_prop,
            l.bands.distinct_terms,
            l.oov
                .as_ref()
                .map_or("—".to_string(), |o| o.count.to_string())
        );
    }
    if let Some(path) = &a.out {
        write_output(Some(path), &to_json(&report))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct MispredictionFile {
    pub dataset: String,
    pub query_id: String,
    pub seed: u64,
    pub threshold: f64,
    pub pairs: Vec<PairId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<quality::LinkFeatureReport>>,
}

fn mispredictions(a: MispredictionArgs) -> Result<()> {
    let (dataset, q) = load_with_query(&a.data)?;
    let record = run_record(&dataset, &q, &a.scores, &a.partition)?;
    let set = quality::misprediction_set(&record, &dataset.truths(&q), a.threshold)?;
    let pairs: Vec<PairId> = set.into_iter().collect();
    let features = match (&a.dictionary, &a.vocab) {
        (None, None) => None,
        (Some(dict), Some(vocab)) => {
            let resources = LinkResources {
                lexicon: match &a.lexicon {
                    Some(p) => Lexicon::read(p)?,
                    None => Lexicon::bundled(),
                },
                dictionary: quality::read_resource(dict)?,
                model_vocab: quality::read_resource(vocab)?,
            };
            let ctx = LinkFeatureContext::new(&dataset, &resources)?;
            Some(exec::with_threads(a.jobs, || {
                ctx.features_many(&q, &pairs, mode_for(a.jobs))
            })?)
        }
        _ => return Err(usage("--dictionary and --vocab go together")),
    };
    eprintln!("{} mispredicted links", pairs.len());
    let file = MispredictionFile {
        dataset: dataset.name().to_string(),
        query_id: q,
        seed: record.seed,
        threshold: a.threshold,
        pairs,
        features,
    };
    write_output(a.out.as_deref(), &to_json(&file))
}

/// Reads a pair set from misprediction JSON or an answer CSV.
fn read_pair_set(path: &Path) -> Result<BTreeSet<PairId>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        let file: MispredictionFile = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", path.display()))?;
        return Ok(file.pairs.into_iter().collect());
    }
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let headers = r.headers()?.clone();
    if headers.get(0) != Some("source_id") || headers.get(1) != Some("target_id") {
        bail!(
            "{}: expected misprediction JSON or a source_id,target_id CSV",
            path.display()
        );
    }
    r.records()
        .map(|row| {
            let row = row?;
            Ok(PairId::new(&row[0], &row[1]))
        })
        .collect()
}

fn agreement(a: AgreementArgs) -> Result<()> {
    let report = quality::agreement(&read_pair_set(&a.a)?, &read_pair_set(&a.b)?);
    println!(
        "|A| = {}, |B| = {}, intersection = {}, Jaccard = {:.4}",
        report.size_a, report.size_b, report.intersection, report.jaccard
    );
    if let Some(path) = &a.out {
        write_output(Some(path), &to_json(&report))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let store = ReviewStore::open(&a.home)
        .with_context(|| format!("opening store {}", a.home.display()))?;
    let state = tracekit_server::AppState::new(store, mode_for(a.jobs));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        tokio::select! {
            r = tracekit_server::serve(listener, state) => r.context("serving")?,
            _ = tokio::signal::ctrl_c() => eprintln!("shutting down"),
        }
        Ok(())
    })
}
