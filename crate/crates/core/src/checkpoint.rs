//! JSON checkpoint documents.
//!
//! Segment values are stored as nested arrays following the segment shape,
//! so a `[3, 2]` weight becomes `[[a, b], [c, d], [e, f]]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acdc::{OptimizerConfig, PhaseSchedule};
use crate::error::{Error, Result};
use crate::numeric::{ParamSet, Segment, SeededRng, RNG_ALGORITHM};
use crate::sparsity::Mask;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngHeader {
    pub algorithm: String,
    pub seed: u64,
}

impl From<&SeededRng> for RngHeader {
    fn from(rng: &SeededRng) -> Self {
        RngHeader {
            algorithm: rng.algorithm().to_string(),
            seed: rng.seed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SegmentDoc {
    name: String,
    shape: Vec<usize>,
    prunable: bool,
    values: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    rng: RngHeader,
    segments: Vec<SegmentDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Mask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<PhaseSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerConfig>,
    epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub rng: RngHeader,
    pub params: ParamSet,
    pub mask: Option<Mask>,
    pub schedule: Option<PhaseSchedule>,
    pub optimizer: Option<OptimizerConfig>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(params: ParamSet, rng: &SeededRng, epoch: usize) -> Self {
        Checkpoint {
            rng: rng.into(),
            params,
            mask: None,
            schedule: None,
            optimizer: None,
            epoch,
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_schedule(mut self, schedule: PhaseSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerConfig) -> Self {
        self.optimizer = Some(optimizer);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointDoc {
            format_version: FORMAT_VERSION,
            rng: self.rng.clone(),
            segments: self
                .params
                .segments()
                .iter()
                .map(|s| SegmentDoc {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    prunable: s.prunable,
                    values: nest(&s.shape, &s.values),
                })
                .collect(),
            mask: self.mask.clone(),
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(s)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {}",
                doc.format_version
            )));
        }
        if doc.rng.algorithm != RNG_ALGORITHM {
            return Err(Error::Format(format!("unknown rng algorithm `{}`", doc.rng.algorithm)));
        }
        let segments = doc
            .segments
            .into_iter()
            .map(|s| {
                let mut flat = Vec::with_capacity(s.shape.iter().product());
                flatten(&s.shape, &s.values, &mut flat).map_err(|e| Error::Format(format!("segment `{}`: {e}", s.name)))?;
                Ok(Segment::new(s.name, s.shape, flat, s.prunable))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ParamSet::new(segments)?;
        if let Some(m) = &doc.mask {
            if m.len() != params.prunable_count() {
                return Err(Error::Format(format!(
                    "mask covers {} coordinates, parameters have {} prunable",
                    m.len(),
                    params.prunable_count()
                )));
            }
        }
        if let Some(s) = &doc.schedule {
            s.validate()?;
        }
        Ok(Checkpoint {
            rng: doc.rng,
            params,
            mask: doc.mask,
            schedule: doc.schedule,
            optimizer: doc.optimizer,
            epoch: doc.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?)
            .map_err(|e| Error::Format(format!("writing {}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Format(format!("reading {}: {e}", path.as_ref().display())))?;
        Self::from_json(&s)
    }
}

fn nest(shape: &[usize], values: &[f64]) -> Value {
    match shape.split_first() {
        None => values.first().copied().map(Value::from).unwrap_or(Value::Null),
        Some((_, [])) => Value::from(values.to_vec()),
        Some((&n, rest)) => {
            let stride: usize = rest.iter().product();
            Value::Array(
                (0..n)
                    .map(|i| nest(rest, &values[i * stride..(i + 1) * stride]))
                    .collect(),
            )
        }
    }
}

fn flatten(shape: &[usize], v: &Value, out: &mut Vec<f64>) -> std::result::Result<(), String> {
    match shape.split_first() {
        None => {
            out.push(v.as_f64().ok_or("expected a number")?);
            Ok(())
        }
        Some((&n, rest)) => {
            let items = v.as_array().ok_or("expected an array")?;
            if items.len() != n {
                return Err(format!("expected {n} entries, found {}", items.len()));
            }
            items.iter().try_for_each(|item| flatten(rest, item, out))
        }
    }
}
