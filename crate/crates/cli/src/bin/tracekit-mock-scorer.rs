//! Stand-in external scorer for protocol tests. Reads one JSON request per
//! line on stdin (or serves HTTP POST with `--http`) and answers with
//! scores chosen by the mode.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(about = "Mock external scorer speaking the tracekit NDJSON protocol")]
struct Args {
    /// Serve HTTP POST on this address instead of stdin/stdout.
    #[arg(long)]
    http: Option<String>,
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Subcommand, Clone)]
enum Mode {
    /// The same score for every pair.
    Constant { value: f64 },
    /// 1 for pairs listed in an answer CSV, 0 otherwise.
    Oracle { answers: PathBuf },
    /// Jaccard overlap of the lowercased word sets.
    Overlap,
    /// Valid scores except `value` at global pair index `at`.
    OutOfRange {
        #[arg(long)]
        at: usize,
        #[arg(long, default_value_t = 1.5)]
        value: f64,
    },
    /// One score fewer than requested.
    Short,
    /// A response that is not JSON.
    Garbage,
    /// Waits before answering with 0.5.
    Sleep { secs: f64 },
}

#[derive(Deserialize)]
struct Request {
    pairs: Vec<Pair>,
}

#[derive(Deserialize)]
struct Pair {
    source_id: String,
    target_id: String,
    source_text: String,
    target_text: String,
}

struct Scorer {
    mode: Mode,
    answers: HashSet<(String, String)>,
    seen: usize,
}

fn words(s: &str) -> HashSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Scorer {
    fn new(mode: Mode) -> Result<Self> {
        let mut answers = HashSet::new();
        if let Mode::Oracle { answers: path } = &mode {
            let mut reader = csv::Reader::from_path(path)
                .with_context(|| format!("reading {}", path.display()))?;
            for row in reader.records() {
                let row = row?;
                answers.insert((row[0].to_string(), row[1].to_string()));
            }
        }
        Ok(Scorer {
            mode,
            answers,
            seen: 0,
        })
    }

    fn respond(&mut self, line: &str) -> Result<String> {
        if let Mode::Garbage = self.mode {
            return Ok("this is not json".into());
        }
        let request: Request = serde_json::from_str(line).context("parsing request")?;
        let mut scores: Vec<f64> = Vec::with_capacity(request.pairs.len());
        for p in &request.pairs {
            let index = self.seen;
            self.seen += 1;
            scores.push(match &self.mode {
                Mode::Constant { value } => *value,
                Mode::Oracle { .. } => {
                    let hit = self
                        .answers
                        .contains(&(p.source_id.clone(), p.target_id.clone()));
                    if hit {
                        1.0
                    } else {
                        0.0
                    }
                }
                Mode::Overlap => {
                    let (a, b) = (words(&p.source_text), words(&p.target_text));
                    let union = a.union(&b).count();
                    if union == 0 {
                        0.0
                    } else {
                        a.intersection(&b).count() as f64 / union as f64
                    }
                }
                Mode::OutOfRange { at, value } => {
                    if index == *at {
                        *value
                    } else {
                        0.5
                    }
                }
                Mode::Short | Mode::Sleep { .. } => 0.5,
                Mode::Garbage => unreachable!(),
            });
        }
        if let Mode::Short = self.mode {
            scores.pop();
        }
        if let Mode::Sleep { secs } = self.mode {
            std::thread::sleep(Duration::from_secs_f64(secs));
        }
        Ok(serde_json::json!({ "scores": scores }).to_string())
    }
}

fn serve_stdio(mut scorer: Scorer) -> Result<()> {
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = scorer.respond(&line)?;
        writeln!(stdout, "{reply}")?;
        stdout.flush()?;
    }
    Ok(())
}

fn read_http_body(stream: &mut TcpStream) -> Result<String> {
    let mut reader = BufReader::new(stream);
    let mut length = None;
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if !line.starts_with("POST ") {
        bail!("expected POST, got {line:?}");
    }
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = Some(value.trim().parse::<usize>()?);
            }
        }
    }
    let mut body = vec![0; length.context("missing content-length")?];
    reader.read_exact(&mut body)?;
    Ok(String::from_utf8(body)?)
}

fn serve_http(mut scorer: Scorer, addr: &str) -> Result<()> {
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    println!("listening on http://{}", listener.local_addr()?);
    std::io::stdout().flush()?;
    for stream in listener.incoming() {
        let mut stream = stream?;
        let (status, reply) =
            match read_http_body(&mut stream).and_then(|body| scorer.respond(&body)) {
                Ok(reply) => ("200 OK", reply),
                Err(e) => ("400 Bad Request", e.to_string()),
            };
        let head = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
            reply.len()
        );
        stream.write_all(head.as_bytes())?;
        stream.write_all(reply.as_bytes())?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let args = Args::parse();
    let scorer = Scorer::new(args.mode)?;
    match args.http {
        Some(addr) => serve_http(scorer, &addr),
        None => serve_stdio(scorer),
    }
}
