//! Plot data from a finished run directory.
//!
//! Writes `plot_data.csv` (every step record in long form), `curves.csv`
//! (per-step medians across seeds) and `medians.csv`, after checking that
//! `summary.json` agrees with the final records in the JSONL files.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;

use crate::error::{CliError, CliResult};
use crate::metrics::{median, read_jsonl, seed_dir, MetricsRecord, RecordKind, Summary};

#[derive(Debug)]
pub struct ReportOutcome {
    pub summary: Summary,
    pub step_rows: usize,
}

pub fn report(out: &Path) -> CliResult<ReportOutcome> {
    let summary = Summary::load(out)?;
    let mut logs: Vec<(u64, Vec<MetricsRecord>)> = Vec::new();
    for &seed in &summary.seeds {
        let path = seed_dir(out, seed).join("metrics.jsonl");
        logs.push((seed, read_jsonl(&path)?));
    }
    check_consistency(&summary, &logs)?;

    let mut w = csv::Writer::from_path(out.join("plot_data.csv")).context("creating plot_data.csv")?;
    w.write_record(["run_id", "seed", "step", "phase", "metric", "value"]).context("writing plot_data.csv")?;
    let mut rows = 0;
    let mut by_step: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for (seed, recs) in &logs {
        for r in recs.iter().filter(|r| r.kind == RecordKind::Step) {
            for (k, v) in &r.fields {
                w.write_record([
                    r.run_id.clone(),
                    seed.to_string(),
                    r.step.to_string(),
                    r.phase.clone().unwrap_or_default(),
                    k.clone(),
                    v.to_string(),
                ])
                .context("writing plot_data.csv")?;
                by_step.entry((k.clone(), r.step)).or_default().push(*v);
                rows += 1;
            }
        }
    }
    w.flush().context("writing plot_data.csv")?;

    let mut w = csv::Writer::from_path(out.join("curves.csv")).context("creating curves.csv")?;
    w.write_record(["metric", "step", "median", "seeds"]).context("writing curves.csv")?;
    for ((k, step), vals) in &by_step {
        w.write_record([k.clone(), step.to_string(), median(vals).to_string(), vals.len().to_string()])
            .context("writing curves.csv")?;
    }
    w.flush().context("writing curves.csv")?;

    let mut w = csv::Writer::from_path(out.join("medians.csv")).context("creating medians.csv")?;
    let mut header = vec!["metric".to_string(), "median".to_string()];
    header.extend(summary.seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&header).context("writing medians.csv")?;
    for (k, vals) in &summary.per_seed {
        let mut row = vec![k.clone(), summary.median[k].to_string()];
        row.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&row).context("writing medians.csv")?;
    }
    w.flush().context("writing medians.csv")?;

    Ok(ReportOutcome { summary, step_rows: rows })
}

/// Recomputes per-seed values and medians from the final JSONL records.
pub fn check_consistency(summary: &Summary, logs: &[(u64, Vec<MetricsRecord>)]) -> CliResult<()> {
    let mut problems = Vec::new();
    let mut finals = Vec::new();
    for (seed, recs) in logs {
        let f: Vec<&MetricsRecord> = recs.iter().filter(|r| r.kind == RecordKind::Final).collect();
        if f.len() != 1 {
            problems.push(format!("seed {seed}: expected one final record, found {}", f.len()));
            continue;
        }
        if recs.last().map(|r| r.kind) != Some(RecordKind::Final) {
            problems.push(format!("seed {seed}: final record is not last"));
        }
        if recs.windows(2).any(|w| w[0].kind == RecordKind::Step && w[1].kind == RecordKind::Step && w[1].step <= w[0].step) {
            problems.push(format!("seed {seed}: steps not increasing"));
        }
        finals.push(f[0]);
    }
    if problems.is_empty() {
        for (k, vals) in &summary.per_seed {
            if vals.len() != finals.len() {
                problems.push(format!("{k}: {} per-seed values for {} seeds", vals.len(), finals.len()));
                continue;
            }
            let raw: Option<Vec<f64>> = finals.iter().map(|r| r.fields.get(k).copied()).collect();
            match raw {
                None => problems.push(format!("{k}: missing from some final records")),
                Some(raw) => {
                    for ((seed, v), s) in summary.seeds.iter().zip(&raw).zip(vals) {
                        if v.to_bits() != s.to_bits() {
                            problems.push(format!("{k}: seed {seed} has {v} in metrics, {s} in summary"));
                        }
                    }
                    let m = median(&raw);
                    match summary.median.get(k) {
                        Some(sm) if sm.to_bits() == m.to_bits() => {}
                        Some(sm) => problems.push(format!("{k}: median {sm} in summary, {m} recomputed")),
                        None => problems.push(format!("{k}: median missing")),
                    }
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Inconsistent(problems))
    }
}
