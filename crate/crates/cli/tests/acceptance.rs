//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Dataset criteria read converted manifests from `$TRACEKIT_DATA`
//! (`cm1.json`, `mip.json`, `dnl.json`, `dpl.json`, `itrust.json`). Without
//! them those criteria print FAIL with the reason; the process exits non-zero
//! only when a criterion that could run failed, or when
//! `TRACEKIT_ACCEPTANCE_STRICT=1` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tracekit::corpus::LayerKind;
use tracekit::corpus::{
    answers_csv, generate_candidates, load_dataset, write_manifest, Dataset, PairId,
};
use tracekit::exec::Parallelism;
use tracekit::experiment::{
    average_precision, classify_at, evaluate, max_f2, mean_average_precision, run_matrix,
    split_candidates, RunRecord, SplitMix64, SplitSpec,
};
use tracekit::quality::{agreement, detect_orphans, misprediction_set, readability, OrphanSides};
use tracekit::review::{replay, DecisionLogEntry, Verdict};
use tracekit::scoring::{
    fit_vsm, score_candidates, Endpoint, ExternalScorer, ScoredCandidate, ScorerKind, ScorerSpec,
    ScoringError,
};
use tracekit::synth::{synthetic_dataset, SyntheticSpec};
use tracekit::textpipe::{Tokenizer, TokenizerProfile};

const TRACEKIT: &str = env!("CARGO_BIN_EXE_tracekit");
const MOCK: &str = env!("CARGO_BIN_EXE_tracekit-mock-scorer");

enum Outcome {
    Pass(String),
    Fail(String),
    /// The criterion needs data that is not present.
    Unavailable(String),
}

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("TRACEKIT_DATA").map(PathBuf::from)
}

/// Loads `$TRACEKIT_DATA/<file>`, or explains why it cannot.
fn real_dataset(file: &str) -> Result<(Dataset, PathBuf), String> {
    let dir = data_dir().ok_or("TRACEKIT_DATA is not set")?;
    let path = dir.join(file);
    if !path.is_file() {
        return Err(format!("{} not found", path.display()));
    }
    let (d, _) = load_dataset(&path).map_err(err)?;
    Ok((d, path))
}

fn sole_query(d: &Dataset) -> Result<String, String> {
    d.sole_query()
        .map(|q| q.id.clone())
        .ok_or_else(|| format!("{} must hold exactly one query", d.name()))
}

// ---------------------------------------------------------------- VSM table

struct Target {
    label: &'static str,
    file: &'static str,
    map: f64,
    f2: f64,
}

const TARGETS: [Target; 5] = [
    Target {
        label: "CM1",
        file: "cm1.json",
        map: 71.4,
        f2: 46.4,
    },
    Target {
        label: "MIP",
        file: "mip.json",
        map: 100.0,
        f2: 38.9,
    },
    Target {
        label: "D-NL",
        file: "dnl.json",
        map: 78.0,
        f2: 58.7,
    },
    Target {
        label: "D-PL",
        file: "dpl.json",
        map: 21.6,
        f2: 14.4,
    },
    Target {
        label: "iTrust",
        file: "itrust.json",
        map: 28.4,
        f2: 24.7,
    },
];

fn vsm_row(t: &Target) -> Outcome {
    let (d, _) = match real_dataset(t.file) {
        Ok(x) => x,
        Err(why) => return Outcome::Unavailable(why),
    };
    let check = || -> Check {
        let q = sole_query(&d)?;
        let out = run_matrix(
            &d,
            &q,
            &[ScorerSpec::vsm()],
            &[1, 2, 3],
            [0.35, 0.10, 0.55],
            0.5,
            Parallelism::Parallel,
        )
        .map_err(err)?;
        let agg = &out.results.aggregates[0].aggregate;
        let map = agg.map.mean.ok_or("MAP undefined")? * 100.0;
        let f2 = agg.max_f2.mean.ok_or("max-F2 undefined")? * 100.0;
        let time = out.fit_score_time[0].1;
        let detail = format!(
            "MAP {map:.1} (target {:.1} ±5), F2 {f2:.1} (target {:.1} ±8), fit+score {:.2}s",
            t.map,
            t.f2,
            time.as_secs_f64()
        );
        ensure(
            (map - t.map).abs() <= 5.0
                && (f2 - t.f2).abs() <= 8.0
                && time < Duration::from_secs(10),
            || detail.clone(),
        )?;
        Ok(detail)
    };
    outcome(check())
}

// ------------------------------------------------------------------ orphans

fn orphan_fixture() -> Outcome {
    let mut lines = Vec::new();
    let mut missing = Vec::new();
    let mut failures = Vec::new();
    for (label, file, pred) in [
        (
            "CM1",
            "cm1.json",
            (|n: usize| n == 26) as fn(usize) -> bool,
            "= 26",
        ),
        ("D-PL", "dpl.json", |n: usize| n >= 300, ">= 300"),
    ]
    .map(|(l, f, p, want)| (l, f, (p, want)))
    {
        let (d, _) = match real_dataset(file) {
            Ok(x) => x,
            Err(why) => {
                missing.push(format!("{label}: {why}"));
                continue;
            }
        };
        let q = match sole_query(&d) {
            Ok(q) => q,
            Err(e) => {
                failures.push(e);
                continue;
            }
        };
        let start = Instant::now();
        let total = detect_orphans(&d, &q, OrphanSides::Both).map(|r| r.total);
        let elapsed = start.elapsed();
        match total {
            Ok(n) => {
                let mut line = format!(
                    "{label} {n} orphans (want {}) in {:.3}s",
                    pred.1,
                    elapsed.as_secs_f64()
                );
                if let (Ok(s), Ok(t)) = (
                    detect_orphans(&d, &q, OrphanSides::Source),
                    detect_orphans(&d, &q, OrphanSides::Target),
                ) {
                    line.push_str(&format!(
                        " [source-only {}, target-only {}]",
                        s.total, t.total
                    ));
                }
                if !(pred.0)(n) || elapsed >= Duration::from_secs(1) {
                    failures.push(line);
                } else {
                    lines.push(line);
                }
            }
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    if !failures.is_empty() {
        failures.extend(missing);
        Outcome::Fail(failures.join("; "))
    } else if !missing.is_empty() {
        Outcome::Unavailable(missing.join("; "))
    } else {
        Outcome::Pass(lines.join("; "))
    }
}

// ------------------------------------------------------------ metric oracle

fn oracle_f2(items: &[(f64, bool)]) -> Option<f64> {
    let relevant = items.iter().filter(|(_, t)| *t).count();
    if relevant == 0 {
        return None;
    }
    let mut best: f64 = 0.0;
    for &(t, _) in items {
        let predicted: Vec<&(f64, bool)> = items.iter().filter(|(s, _)| *s >= t).collect();
        let tp = predicted.iter().filter(|(_, truth)| *truth).count() as f64;
        let p = tp / predicted.len() as f64;
        let r = tp / relevant as f64;
        if p + r > 0.0 {
            best = best.max(5.0 * p * r / (4.0 * p + r));
        }
    }
    Some(best)
}

fn dense_cosines(docs: &[Vec<String>]) -> Vec<Vec<f64>> {
    let vocab: Vec<&String> = docs
        .iter()
        .flatten()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> = vocab
        .iter()
        .map(|term| {
            let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
            ((1.0 + n) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let vectors: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| {
            let v: Vec<f64> = vocab
                .iter()
                .zip(&idf)
                .map(|(term, idf)| d.iter().filter(|t| t == term).count() as f64 * idf)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter()
                .map(|x| if norm > 0.0 { x / norm } else { 0.0 })
                .collect()
        })
        .collect();
    vectors
        .iter()
        .map(|a| {
            vectors
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

fn random_scored(
    rng: &mut SplitMix64,
    sources: usize,
    targets: usize,
) -> (Vec<ScoredCandidate>, BTreeSet<PairId>) {
    let mut scored = Vec::new();
    let mut truths = BTreeSet::new();
    for s in 0..sources {
        for t in 0..targets {
            let (sid, tid) = (format!("s{s}"), format!("t{t}"));
            // Coarse scores so ties occur.
            let score = (rng.next_u64() % 11) as f64 / 10.0;
            if rng.next_u64().is_multiple_of(3) {
                truths.insert(PairId::new(&sid, &tid));
            }
            scored.push(ScoredCandidate {
                query_id: "q".into(),
                source_id: sid,
                target_id: tid,
                score,
            });
        }
    }
    (scored, truths)
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = SplitMix64::new(20240601);

    // (a) max-F2 against exhaustive enumeration.
    for case in 0..200 {
        let n = 1 + (rng.next_u64() % 12) as usize;
        let items: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                (
                    (rng.next_u64() % 8) as f64 / 7.0,
                    rng.next_u64().is_multiple_of(2),
                )
            })
            .collect();
        let got = max_f2(&items).map(|p| p.value);
        let want = oracle_f2(&items);
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) if (g - w).abs() < 1e-12 => {}
            _ => {
                return Err(format!(
                    "max-F2 instance {case}: {got:?} vs oracle {want:?} on {items:?}"
                ))
            }
        }
    }

    // (b) average precision fixtures.
    for (ranked, want) in [
        (vec![true, false, true], 0.8333),
        (vec![true, true], 1.0),
        (vec![false, true], 0.5),
    ] {
        let ap = average_precision(&ranked).ok_or("AP undefined")?;
        ensure((ap - want).abs() < 1e-4, || {
            format!("AP {ranked:?} = {ap}, want {want}")
        })?;
    }

    // (c) cosine: hand value, then the dense oracle.
    let tok = Tokenizer::new(TokenizerProfile::vsm(LayerKind::NaturalLanguage)).map_err(err)?;
    let m = fit_vsm(&[("d1", "alpha beta"), ("d2", "beta gamma")], &tok).map_err(err)?;
    let c = m.score("d1", "d2").map_err(err)?;
    ensure((c - 0.3361).abs() < 1e-4, || format!("cosine fixture {c}"))?;
    const WORDS: [&str; 7] = ["pump", "alarm", "valve", "sensor", "dose", "rate", "log"];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let docs: Vec<String> = (0..2 + rng.next_u64() % 5)
            .map(|_| {
                (0..rng.next_u64() % 6)
                    .map(|_| WORDS[(rng.next_u64() % WORDS.len() as u64) as usize])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let keyed: Vec<(String, String)> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("d{i}"), d.clone()))
            .collect();
        let model = fit_vsm(&keyed, &tok).map_err(err)?;
        let dense = dense_cosines(&docs.iter().map(|d| tok.tokenize(d)).collect::<Vec<_>>());
        for i in 0..docs.len() {
            for j in 0..docs.len() {
                let got = model.score(&keyed[i].0, &keyed[j].0).map_err(err)?;
                worst = worst.max((got - dense[i][j].clamp(0.0, 1.0)).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || {
        format!("cosine deviates from dense oracle by {worst:e}")
    })?;

    // (d) invariance under score -> score^2.
    for case in 0..100 {
        let (scored, truths) = random_scored(&mut rng, 1 + case % 4, 1 + case % 7);
        let squared: Vec<ScoredCandidate> = scored
            .iter()
            .map(|c| ScoredCandidate {
                score: c.score * c.score,
                ..c.clone()
            })
            .collect();
        let refs = |v: &[ScoredCandidate]| -> Vec<(f64, bool)> {
            v.iter()
                .map(|c| (c.score, truths.contains(&c.pair())))
                .collect()
        };
        let map_a = mean_average_precision(&scored.iter().collect::<Vec<_>>(), &truths).map;
        let map_b = mean_average_precision(&squared.iter().collect::<Vec<_>>(), &truths).map;
        let f2_a = max_f2(&refs(&scored)).map(|p| p.value);
        let f2_b = max_f2(&refs(&squared)).map(|p| p.value);
        ensure(map_a == map_b && f2_a == f2_b, || {
            format!("case {case}: MAP {map_a:?}/{map_b:?}, F2 {f2_a:?}/{f2_b:?}")
        })?;
    }

    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {:.2}s", elapsed.as_secs_f64())
    })?;
    Ok(format!(
        "max cosine error {worst:.1e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// -------------------------------------------------------------- determinism

fn tracekit(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(TRACEKIT).args(args).output().map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "tracekit {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out)
}

fn stand_in(dir: &Path) -> Result<PathBuf, String> {
    let mut spec = SyntheticSpec::new("stand-in", 22, 53, 11);
    spec.orphan_sources = 3;
    write_manifest(&synthetic_dataset(&spec), &dir.join("stand-in")).map_err(err)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let manifest = match real_dataset("cm1.json") {
        Ok((_, p)) => p,
        Err(_) => stand_in(tmp.path())?,
    };
    let m = manifest.to_str().ok_or("non-UTF-8 path")?;
    let dir = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();

    tracekit(&[
        "split",
        "--dataset",
        m,
        "--seed",
        "1",
        "--out",
        &dir("p1.json"),
    ])?;
    tracekit(&[
        "split",
        "--dataset",
        m,
        "--seed",
        "1",
        "--out",
        &dir("p2.json"),
    ])?;
    let p1 = std::fs::read(dir("p1.json")).map_err(err)?;
    ensure(p1 == std::fs::read(dir("p2.json")).map_err(err)?, || {
        "partition files differ".into()
    })?;

    tracekit(&[
        "run",
        "--dataset",
        m,
        "--seeds",
        "1,2,3",
        "--out",
        &dir("r1"),
    ])?;
    tracekit(&[
        "run",
        "--dataset",
        m,
        "--seeds",
        "1,2,3",
        "--jobs",
        "1",
        "--out",
        &dir("r2"),
    ])?;
    let r1 = std::fs::read(tmp.path().join("r1/results.json")).map_err(err)?;
    let r2 = std::fs::read(tmp.path().join("r2/results.json")).map_err(err)?;
    ensure(r1 == r2, || "results.json differs between runs".into())?;

    let candidates: Vec<PairId> = (0..22)
        .flat_map(|s| (0..53).map(move |t| PairId::new(format!("S{s:02}"), format!("T{t:02}"))))
        .collect();
    let sizes = split_candidates(&candidates, &SplitSpec::new(1)).sizes();
    ensure(sizes == (408, 116, 642), || {
        format!("sizes for n=1166: {sizes:?}")
    })?;
    let spec_sizes = SplitSpec::new(7).sizes(1166);
    ensure(spec_sizes == (408, 116, 642), || {
        format!("SplitSpec sizes: {spec_sizes:?}")
    })?;
    let source = if manifest.ends_with("cm1.json") {
        "CM1"
    } else {
        "synthetic 22x53 stand-in"
    };
    Ok(format!(
        "{source}; partition and results byte-identical; n=1166 -> {sizes:?}"
    ))
}

// -------------------------------------------------------------- review loop

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(home: &Path) -> Result<Server, String> {
        let mut child = Command::new(TRACEKIT)
            .args(["serve", "--addr", "127.0.0.1:0", "--home"])
            .arg(home)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(err)?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().ok_or("no stdout")?)
            .read_line(&mut line)
            .map_err(err)?;
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| format!("unexpected banner {line:?}"))?
            .to_string();
        Ok(Server { child, base })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn get(&self, path: &str) -> Result<String, String> {
        let mut resp = ureq::get(format!("{}{path}", self.base))
            .call()
            .map_err(err)?;
        resp.body_mut().read_to_string().map_err(err)
    }

    fn get_json(&self, path: &str) -> Result<Value, String> {
        serde_json::from_str(&self.get(path)?).map_err(err)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, String> {
        let mut resp = ureq::post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body.to_string())
            .map_err(err)?;
        serde_json::from_str(&resp.body_mut().read_to_string().map_err(err)?).map_err(err)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn review_loop() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let home = tmp.path().join("home");
    let (manifest, source) = match real_dataset("cm1.json") {
        Ok((_, p)) => (p, "CM1"),
        Err(_) => (
            stand_in(tmp.path())?,
            "synthetic 22x53 stand-in, CM1 unavailable",
        ),
    };

    let server = Server::start(&home)?;
    let created = server.post(
        "/projects",
        &json!({ "id": "loop", "dataset_manifest_path": manifest }),
    )?;
    ensure(created["candidate_count"] == 1166, || {
        format!("created {created}")
    })?;
    let summary = server.get_json("/projects/loop")?;
    ensure(summary["vetted_metrics"]["pending"] == 1166, || {
        format!("summary {summary}")
    })?;

    // 50 decisions: mostly fresh pairs from the top of the queue, some
    // revisions of earlier ones. Kill the server after every decision.
    let mut rng = SplitMix64::new(5);
    let mut expected: BTreeMap<PairId, Verdict> = BTreeMap::new();
    let mut decided: Vec<PairId> = Vec::new();
    let mut server = server;
    for i in 0..50 {
        let pair = if !decided.is_empty() && rng.next_u64().is_multiple_of(5) {
            decided[(rng.next_u64() % decided.len() as u64) as usize].clone()
        } else {
            let batch = server.get_json("/projects/loop/batch?k=1")?;
            serde_json::from_value(batch["items"][0]["pair_id"].clone()).map_err(err)?
        };
        let verdict = if rng.next_u64().is_multiple_of(2) {
            Verdict::Approve
        } else {
            Verdict::Reject
        };
        server.post(
            "/projects/loop/decisions",
            &json!({ "pair_id": pair, "verdict": verdict, "reviewer": "acceptance" }),
        )?;
        if !expected.contains_key(&pair) {
            decided.push(pair.clone());
        }
        expected.insert(pair, verdict);

        server.kill();
        server = Server::start(&home)?;
        let log = server.get_json("/projects/loop/decisions?limit=1000")?;
        ensure(log["total"] == i + 1, || {
            format!(
                "after decision {} and restart, log holds {}",
                i + 1,
                log["total"]
            )
        })?;
    }

    let lines = std::fs::read_to_string(home.join("loop/decisions.jsonl")).map_err(err)?;
    let entries: Vec<DecisionLogEntry> = lines
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(err)?;
    ensure(entries.len() == 50, || {
        format!("log has {} lines", entries.len())
    })?;
    ensure(replay(&entries) == expected, || {
        "log replay disagrees with the scripted decisions".into()
    })?;

    let summary = server.get_json("/projects/loop")?;
    let approved: BTreeSet<PairId> = expected
        .iter()
        .filter(|(_, v)| **v == Verdict::Approve)
        .map(|(p, _)| p.clone())
        .collect();
    let vm = &summary["vetted_metrics"];
    ensure(
        vm["decided"] == expected.len()
            && vm["approved"] == approved.len()
            && vm["pending"] == 1166 - expected.len(),
        || format!("summary after replay {vm}"),
    )?;

    let export = server.get("/projects/loop/export")?;
    ensure(export == answers_csv(&approved), || {
        format!("export mismatch:\n{export}")
    })?;
    Ok(format!(
        "{source}; 50 decisions over {} pairs, {} approved, restart after each",
        expected.len(),
        approved.len()
    ))
}

// ------------------------------------------------------------------ quality

fn quality_fixtures() -> Check {
    let r = readability(&["The cat sat."]).map_err(err)?;
    ensure((r - -2.62).abs() <= 0.01, || format!("readability {r}"))?;

    let d = synthetic_dataset(&SyntheticSpec::new("q", 8, 8, 4));
    let texts: Vec<&str> = d.artifacts().iter().map(|a| a.body.as_str()).collect();
    let doubled: Vec<&str> = texts.iter().chain(texts.iter()).copied().collect();
    let (once, twice) = (
        readability(&texts).map_err(err)?,
        readability(&doubled).map_err(err)?,
    );
    ensure((once - twice).abs() < 1e-9, || {
        format!("duplication changed readability {once} -> {twice}")
    })?;

    let a: BTreeSet<&str> = ["a", "b", "c"].into();
    let b: BTreeSet<&str> = ["b", "c", "d"].into();
    let ag = agreement(&a, &b);
    ensure(ag.intersection == 2 && ag.jaccard == 0.5, || {
        format!("agreement {ag:?}")
    })?;

    let mut rng = SplitMix64::new(99);
    for run in 0..100u64 {
        let (scored, truths) =
            random_scored(&mut rng, 3 + (run % 4) as usize, 4 + (run % 5) as usize);
        let candidates: Vec<PairId> = scored.iter().map(|c| c.pair()).collect();
        let partition = split_candidates(&candidates, &SplitSpec::new(run));
        let record = RunRecord {
            dataset: "random".into(),
            query_id: "q".into(),
            scorer: "random".into(),
            seed: run,
            tokenizer_profile: None,
            partition,
            scored,
        };
        let set = misprediction_set(&record, &truths, 0.5).map_err(err)?;
        let eval = record.eval_scored().map_err(err)?;
        let c = classify_at(eval.iter().copied(), &truths, 0.5).confusion;
        ensure(set.len() == c.fp + c.fn_, || {
            format!("run {run}: {} vs FP+FN {}", set.len(), c.fp + c.fn_)
        })?;
    }
    Ok(format!("readability {r:.2}, Jaccard {}", ag.jaccard))
}

// -------------------------------------------------------------- mock scorer

fn mock(args: &[&str]) -> ScorerSpec {
    ScorerSpec {
        name: "mock".into(),
        kind: ScorerKind::External(ExternalScorer {
            endpoint: Endpoint::Command {
                program: MOCK.into(),
                args: args.iter().map(|s| s.to_string()).collect(),
            },
            batch_size: 64,
            timeout_secs: 30,
        }),
    }
}

fn mock_scorer() -> Check {
    let d = synthetic_dataset(&SyntheticSpec::new("mock", 12, 20, 8));
    let truths = d.truths("trace");
    let candidates = generate_candidates(&d, "trace").map_err(err)?;

    let constant = score_candidates(
        &mock(&["constant", "0.5"]),
        &d,
        "trace",
        Parallelism::Sequential,
    )
    .map_err(err)?;
    ensure(
        constant.len() == 240 && constant.iter().all(|c| c.score == 0.5),
        || "constant scorer".into(),
    )?;

    let tmp = tempfile::tempdir().map_err(err)?;
    let answers = tmp.path().join("answers.csv");
    std::fs::write(&answers, answers_csv(&truths)).map_err(err)?;
    let oracle = score_candidates(
        &mock(&["oracle", answers.to_str().ok_or("non-UTF-8 path")?]),
        &d,
        "trace",
        Parallelism::Sequential,
    )
    .map_err(err)?;
    for seed in [1, 2, 3] {
        let m = evaluate(
            &oracle,
            &split_candidates(&candidates, &SplitSpec::new(seed)),
            &truths,
            0.5,
        )
        .map_err(err)?;
        ensure(m.map == Some(1.0) && m.max_f2 == Some(1.0), || {
            format!("oracle seed {seed}: {m:?}")
        })?;
    }

    match score_candidates(
        &mock(&["out-of-range", "--at", "100"]),
        &d,
        "trace",
        Parallelism::Sequential,
    ) {
        Err(ScoringError::OutOfRange {
            index: 100,
            source_id,
            target_id,
            ..
        }) if PairId::new(&source_id, &target_id) == candidates[100] => {}
        other => {
            return Err(format!(
                "out-of-range scorer gave {:?}",
                other.map(|v| v.len())
            ))
        }
    }
    Ok("constant, oracle MAP=F2=1, out-of-range rejected at pair #100".into())
}

// ---------------------------------------------------------------------- main

fn outcome(c: Check) -> Outcome {
    match c {
        Ok(detail) => Outcome::Pass(detail),
        Err(why) => Outcome::Fail(why),
    }
}

fn main() {
    // `cargo test` passes harness flags; a name filter other than ours skips the run.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let strict = std::env::var("TRACEKIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut results: Vec<(String, Outcome)> = Vec::new();
    for t in &TARGETS {
        results.push((format!("VSM reproduction {}", t.label), vsm_row(t)));
    }
    results.push((
        "orphan fixture (CM1 = 26, D-PL >= 300)".into(),
        orphan_fixture(),
    ));
    results.push(("metric oracle suite".into(), outcome(metric_oracles())));
    results.push(("determinism suite".into(), outcome(determinism())));
    results.push(("review loop via HTTP API".into(), outcome(review_loop())));
    results.push((
        "quality-analysis fixtures".into(),
        outcome(quality_fixtures()),
    ));
    results.push(("mock external scorer".into(), outcome(mock_scorer())));

    let mut hard = 0;
    let mut unavailable = 0;
    for (name, o) in &results {
        match o {
            Outcome::Pass(d) => println!("PASS  {name}: {d}"),
            Outcome::Fail(d) => {
                hard += 1;
                println!("FAIL  {name}: {d}");
            }
            Outcome::Unavailable(d) => {
                unavailable += 1;
                println!("FAIL  {name}: dataset unavailable ({d})");
            }
        }
    }
    let passed = results.len() - hard - unavailable;
    println!(
        "\n{passed} passed, {} failed ({unavailable} for missing data)",
        hard + unavailable
    );
    if hard > 0 || (strict && unavailable > 0) {
        std::process::exit(1);
    }
}
