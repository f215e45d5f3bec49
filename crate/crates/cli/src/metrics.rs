//! JSONL metrics and the cross-seed summary.
//!
//! Each seed writes `seed-<s>/metrics.jsonl`: one `step` record per epoch or
//! iteration, then a single `final` record whose fields are the values that
//! go into the summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_FORMAT_VERSION: u32 = 1;

pub type Fields = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub kind: RecordKind,
    /// Epoch or iteration index; on the final record, the last step.
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    pub fields: Fields,
}

impl MetricsRecord {
    fn check(&self) -> anyhow::Result<()> {
        if self.schema_version != METRICS_SCHEMA_VERSION {
            bail!("unsupported metrics schema_version {}", self.schema_version);
        }
        if let Some((k, v)) = self.fields.iter().find(|(_, v)| !v.is_finite()) {
            bail!("field `{k}` is not finite ({v})");
        }
        Ok(())
    }
}

/// Collects the records of one seed and enforces monotone steps.
pub struct SeedLog {
    run_id: String,
    seed: u64,
    records: Vec<MetricsRecord>,
}

impl SeedLog {
    pub fn new(run_id: &str, seed: u64) -> Self {
        SeedLog {
            run_id: run_id.to_string(),
            seed,
            records: Vec::new(),
        }
    }

    pub fn step(&mut self, step: usize, phase: Option<&str>, fields: Fields) -> anyhow::Result<()> {
        if let Some(prev) = self.records.last() {
            if step <= prev.step {
                bail!("step {step} after step {}", prev.step);
            }
        }
        self.push(RecordKind::Step, step, phase, fields)
    }

    pub fn finish(mut self, fields: Fields) -> anyhow::Result<(Vec<MetricsRecord>, Fields)> {
        let last = self.records.last().map_or(0, |r| r.step);
        self.push(RecordKind::Final, last, None, fields.clone())?;
        Ok((self.records, fields))
    }

    fn push(&mut self, kind: RecordKind, step: usize, phase: Option<&str>, fields: Fields) -> anyhow::Result<()> {
        let rec = MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            seed: self.seed,
            kind,
            step,
            phase: phase.map(str::to_string),
            fields,
        };
        rec.check()?;
        self.records.push(rec);
        Ok(())
    }
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> anyhow::Result<Vec<MetricsRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let rec: MetricsRecord =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        rec.check().with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub run_id: String,
    pub task: String,
    pub seeds: Vec<u64>,
    /// Per metric, one value per seed in `seeds` order.
    pub per_seed: BTreeMap<String, Vec<f64>>,
    pub median: BTreeMap<String, f64>,
}

impl Summary {
    /// Only metrics reported by every seed are summarised.
    pub fn build(run_id: &str, task: &str, results: &[(u64, Fields)]) -> Self {
        let mut per_seed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        if let Some((_, first)) = results.first() {
            for key in first.keys() {
                if let Some(vals) = results.iter().map(|(_, f)| f.get(key).copied()).collect::<Option<Vec<f64>>>() {
                    per_seed.insert(key.clone(), vals);
                }
            }
        }
        let median = per_seed.iter().map(|(k, v)| (k.clone(), median(v))).collect();
        Summary {
            format_version: SUMMARY_FORMAT_VERSION,
            run_id: run_id.to_string(),
            task: task.to_string(),
            seeds: results.iter().map(|(s, _)| *s).collect(),
            per_seed,
            median,
        }
    }

    pub fn save(&self, out: &Path) -> anyhow::Result<()> {
        let path = out.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(out: &Path) -> anyhow::Result<Self> {
        let path = out.join("summary.json");
        let s = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let summary: Summary = serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))?;
        if summary.format_version != SUMMARY_FORMAT_VERSION {
            return Err(anyhow!("unsupported summary format_version {}", summary.format_version));
        }
        Ok(summary)
    }
}
