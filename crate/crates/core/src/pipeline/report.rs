//! Text table and CSV files for a [`BenchReport`].

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchReport, BenchRow, PipelineError, Trace};

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub scenario: String,
    pub estimator: String,
    pub nu: Option<f64>,
    pub mean_time: Option<f64>,
    pub status: String,
    pub solved: usize,
    pub failed: usize,
    pub params: Option<usize>,
}

impl From<&BenchRow> for SummaryLine {
    fn from(r: &BenchRow) -> Self {
        SummaryLine {
            scenario: r.scenario.clone(),
            estimator: r.estimator.to_string(),
            nu: r.nu,
            mean_time: r.mean_time,
            status: r.status.to_string(),
            solved: r.solved,
            failed: r.failed,
            params: r.params,
        }
    }
}

/// Fixed-width table; failed estimators show `-` in place of accuracy.
pub fn format_table(rows: &[BenchRow]) -> String {
    let header = ["scenario", "estimator", "nu", "mean_time_s", "status"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.scenario.clone(),
                r.estimator.to_string(),
                r.nu.map_or("-".into(), |v| format!("{v:.4e}")),
                r.mean_time.map_or("-".into(), |t| format!("{t:.3e}")),
                r.status.to_string(),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        let parts: Vec<String> = row.iter().zip(width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    line(&mut out, &width.map(|w| "-".repeat(w)).iter().map(String::as_str).collect::<Vec<_>>());
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn summary_csv(rows: &[BenchRow]) -> Result<String, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(SummaryLine::from(r))?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<SummaryLine>, PipelineError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

/// Columns `estimator,bus,phase,v_true,v_est` for the traces of one scenario.
pub fn trace_csv(traces: &[&Trace]) -> Result<String, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["estimator", "bus", "phase", "v_true", "v_est"])?;
    for t in traces {
        for ((bus, phase), (v, e)) in t.slots.iter().zip(t.truth.iter().zip(&t.estimate)) {
            w.write_record([
                t.estimator.to_string(),
                bus.to_string(),
                phase.to_string(),
                v.to_string(),
                e.to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

/// Writes `bench.json`, `table.txt`, `summary.csv` and per scenario a
/// `trace-<name>.csv` and `per-bus-<name>.csv`. Output depends only on
/// `report`, so rewriting the same report reproduces the same files.
pub fn write_report(dir: &Path, report: &BenchReport, bus_labels: &[u32]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("bench.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("table.txt"), format_table(&report.rows))?;
    fs::write(dir.join("summary.csv"), summary_csv(&report.rows)?)?;
    for sc in &report.scenarios {
        let traces: Vec<&Trace> = report.traces.iter().filter(|t| t.scenario == sc.name).collect();
        fs::write(dir.join(format!("trace-{}.csv", sc.name)), trace_csv(&traces)?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["estimator", "bus", "mse"])?;
        for r in report.rows.iter().filter(|r| r.scenario == sc.name) {
            for (b, e) in r.per_bus.iter().enumerate() {
                let label = bus_labels.get(b).copied().unwrap_or(b as u32);
                w.write_record([r.estimator.to_string(), label.to_string(), e.to_string()])?;
            }
        }
        fs::write(dir.join(format!("per-bus-{}.csv", sc.name)), w.into_inner().map_err(|e| e.into_error())?)?;
    }
    Ok(())
}
