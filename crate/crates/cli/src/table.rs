use std::fmt::Write as _;
use std::time::Duration;

use tracekit::experiment::{AggregateReport, MetricSummary};

pub const UNDEFINED: &str = "—";

/// One table row: a scorer's aggregate over seeds on one dataset.
#[derive(Clone, Debug)]
pub struct TableRow {
    pub dataset: String,
    pub scorer: String,
    pub aggregate: AggregateReport,
    /// Wall time to fit the scorer and score every candidate.
    pub fit_score_time: Option<Duration>,
}

fn pct(v: Option<f64>) -> Option<String> {
    v.map(|v| format!("{:.1}", v * 100.0))
}

fn mean_cell(m: &MetricSummary) -> String {
    pct(m.mean).unwrap_or_else(|| UNDEFINED.to_string())
}

fn range_cell(m: &MetricSummary) -> String {
    match (pct(m.min), pct(m.max)) {
        (Some(lo), Some(hi)) => format!("{lo}-{hi}"),
        _ => UNDEFINED.to_string(),
    }
}

pub fn time_cell(t: Option<Duration>) -> String {
    match t {
        None => UNDEFINED.to_string(),
        Some(t) if t < Duration::from_secs(1) => "<1s".to_string(),
        Some(t) => format!("{:.1}s", t.as_secs_f64()),
    }
}

/// Markdown table with MAP and max-F2 as percentages (mean over seeds, one
/// decimal) and their min-max ranges. Undefined metrics render as `—` and
/// add a footnote.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    out.push_str("| Dataset | Model | MAP | MAP range | F2 | F2 range | Fit+score time |\n");
    out.push_str("|---|---|---:|---:|---:|---:|---:|\n");
    let mut undefined = false;
    for r in rows {
        let a = &r.aggregate;
        let cells = [
            mean_cell(&a.map),
            range_cell(&a.map),
            mean_cell(&a.max_f2),
            range_cell(&a.max_f2),
        ];
        undefined |= cells.iter().any(|c| c == UNDEFINED);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.dataset,
            r.scorer,
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            time_cell(r.fit_score_time)
        );
    }
    if undefined {
        out.push_str(
            "\n— undefined in every seed: the eval part held no true link \
             (MAP also needs a source with a true link among its eval pairs).\n",
        );
    }
    out
}
