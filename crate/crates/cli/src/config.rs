//! Experiment configuration.
//!
//! A config is one JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "name": "desk",
//!   "seeds": [0, 1, 2],
//!   "out": "runs/desk",
//!   "task": "train-acdc",
//!   "data": { "generate": { "features": 20, "classes": 5, "samples": 5000, "spread": 2.5 } },
//!   "hidden": [64],
//!   "schedule": { "total_epochs": 60, "warmup": 6, "compressed": 5, "decompressed": 5,
//!                 "final_decompressed": 8, "finetune": 11 },
//!   "optimizer": { "lr": 0.05, "lr_schedule": { "kind": "cosine", "warmup_epochs": 2.0 },
//!                  "momentum": 0.9, "weight_decay": 0.0001 },
//!   "pattern": { "global_top_k": { "keep": { "fraction": 0.1 } } },
//!   "batch_size": 64
//! }
//! ```
//!
//! The `task` tag selects which of the task bodies below the remaining
//! fields are read as.

use std::path::{Path, PathBuf};

use acdc_core::acdc::{build_schedule, OptimizerConfig, PhaseSchedule};
use acdc_core::data::BlobSpec;
use acdc_core::iht::{IhtMode, PlantedSpec, PolishConfig, StepSize};
use acdc_core::SparsityPattern;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, FieldError};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(flatten)]
    pub task: Task,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum Task {
    Generate(GenerateTask),
    RunIht(IhtTask),
    TrainAcdc(TrainTask),
    Flops(FlopsTask),
    Diagnose(DiagnoseTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Generate(_) => "generate",
            Task::RunIht(_) => "run-iht",
            Task::TrainAcdc(_) => "train-acdc",
            Task::Flops(_) => "flops",
            Task::Diagnose(_) => "diagnose",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Regression(PlantedSpec),
    Classification(BlobSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateTask {
    pub dataset: GeneratorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionData {
    Generate(PlantedSpec),
    /// Numeric CSV with the response in column `target`. `theta_star` points
    /// at a provenance sidecar written by `generate`.
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default)]
        theta_star: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IhtTask {
    pub data: RegressionData,
    /// Kept coordinates per iterate.
    pub k: usize,
    pub iterations: usize,
    #[serde(default = "auto_step")]
    pub step: StepSize,
    #[serde(default = "deterministic")]
    pub mode: IhtMode,
    #[serde(default)]
    pub stop_tol: f64,
    #[serde(default)]
    pub polish: Option<PolishConfig>,
}

fn auto_step() -> StepSize {
    StepSize::Auto
}

fn deterministic() -> IhtMode {
    IhtMode::Deterministic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassData {
    Generate(BlobSpec),
    Csv { path: PathBuf, label: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub total_epochs: usize,
    pub warmup: usize,
    pub compressed: usize,
    pub decompressed: usize,
    pub final_decompressed: usize,
    pub finetune: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> acdc_core::Result<PhaseSchedule> {
        build_schedule(
            self.total_epochs,
            self.warmup,
            self.compressed,
            self.decompressed,
            self.final_decompressed,
            self.finetune,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTask {
    pub data: ClassData,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Hidden layer widths; empty gives multinomial logistic regression.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerConfig,
    pub pattern: SparsityPattern,
    pub batch_size: usize,
    /// Dense fine-tuning epochs from the best dense checkpoint; 0 skips it.
    #[serde(default)]
    pub dense_finetune_epochs: usize,
}

fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseTask {
    #[serde(flatten)]
    pub train: TrainTask,
    /// Fraction of training labels replaced with a different class.
    #[serde(default = "default_corrupt_fraction")]
    pub corrupt_fraction: f64,
}

fn default_corrupt_fraction() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTask {
    /// Built-in manifest name (`resnet50`, `mobilenet_v1`) or a JSON path.
    pub manifest: String,
    pub epochs: usize,
    pub samples_per_epoch: u64,
    /// Without a schedule every epoch runs at the decompressed density.
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default = "one")]
    pub compressed_density: f64,
    #[serde(default = "one")]
    pub decompressed_density: f64,
}

fn one() -> f64 {
    1.0
}

impl ExperimentConfig {
    /// Parses and validates; type errors carry the JSON path of the field.
    pub fn from_json(s: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "config".to_string() } else { path };
            CliError::field(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CliError::field("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn run_id(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.task.name().to_string())
    }

    pub fn validate(&self) -> CliResult<()> {
        let mut errs = Vec::new();
        if self.format_version != CONFIG_FORMAT_VERSION {
            errs.push(FieldError::new(
                "format_version",
                format!("unsupported version {}, expected {CONFIG_FORMAT_VERSION}", self.format_version),
            ));
        }
        if self.seeds.is_empty() {
            errs.push(FieldError::new("seeds", "must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            errs.push(FieldError::new("seeds", "must not repeat"));
        }
        match &self.task {
            Task::Generate(t) => validate_generator(&t.dataset, "dataset", &mut errs),
            Task::RunIht(t) => validate_iht(t, &mut errs),
            Task::TrainAcdc(t) => validate_train(t, &mut errs),
            Task::Diagnose(t) => {
                validate_train(&t.train, &mut errs);
                if !(t.corrupt_fraction > 0.0 && t.corrupt_fraction < 1.0) {
                    errs.push(FieldError::new("corrupt_fraction", "must lie in (0, 1)"));
                }
            }
            Task::Flops(t) => validate_flops(t, &mut errs),
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(errs))
        }
    }
}

fn validate_generator(g: &GeneratorSpec, scope: &str, errs: &mut Vec<FieldError>) {
    match g {
        GeneratorSpec::Regression(p) => validate_planted(p, scope, errs),
        GeneratorSpec::Classification(b) => validate_blobs(b, scope, errs),
    }
}

fn validate_planted(p: &PlantedSpec, scope: &str, errs: &mut Vec<FieldError>) {
    if p.dim == 0 {
        errs.push(FieldError::new(format!("{scope}.dim"), "must be positive"));
    }
    if p.samples == 0 {
        errs.push(FieldError::new(format!("{scope}.samples"), "must be positive"));
    }
    if p.k_star == 0 || p.k_star > p.dim {
        errs.push(FieldError::new(format!("{scope}.k_star"), format!("must lie in [1, {}]", p.dim)));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
        errs.push(FieldError::new(format!("{scope}.noise_sigma"), "must be finite and non-negative"));
    }
}

fn validate_blobs(b: &BlobSpec, scope: &str, errs: &mut Vec<FieldError>) {
    if b.features == 0 {
        errs.push(FieldError::new(format!("{scope}.features"), "must be positive"));
    }
    if b.classes < 2 {
        errs.push(FieldError::new(format!("{scope}.classes"), "need at least two classes"));
    }
    if b.samples < b.classes {
        errs.push(FieldError::new(format!("{scope}.samples"), "need at least one sample per class"));
    }
    if !(b.spread >= 0.0 && b.spread.is_finite()) {
        errs.push(FieldError::new(format!("{scope}.spread"), "must be finite and non-negative"));
    }
}

fn validate_iht(t: &IhtTask, errs: &mut Vec<FieldError>) {
    match &t.data {
        RegressionData::Generate(p) => {
            validate_planted(p, "data.generate", errs);
            if t.k > p.dim {
                errs.push(FieldError::new("k", format!("exceeds dimension {}", p.dim)));
            }
        }
        RegressionData::Csv { path, theta_star, .. } => {
            if !path.is_file() {
                errs.push(FieldError::new("data.csv.path", format!("{} does not exist", path.display())));
            }
            if let Some(p) = theta_star {
                if !p.is_file() {
                    errs.push(FieldError::new("data.csv.theta_star", format!("{} does not exist", p.display())));
                }
            }
        }
    }
    if t.k == 0 {
        errs.push(FieldError::new("k", "must be positive"));
    }
    if t.iterations == 0 {
        errs.push(FieldError::new("iterations", "must be positive"));
    }
    if let StepSize::Fixed(eta) = t.step {
        if !(eta > 0.0 && eta.is_finite()) {
            errs.push(FieldError::new("step.fixed", "must be positive"));
        }
    }
    if let IhtMode::Stochastic { batch_size: 0, .. } = t.mode {
        errs.push(FieldError::new("mode.stochastic.batch_size", "must be positive"));
    }
    if !t.stop_tol.is_finite() {
        errs.push(FieldError::new("stop_tol", "must be finite"));
    }
    if let Some(p) = &t.polish {
        if !(p.eps > 0.0) {
            errs.push(FieldError::new("polish.eps", "must be positive"));
        }
    }
}

fn validate_schedule(s: &ScheduleSpec, errs: &mut Vec<FieldError>) {
    if let Err(e) = s.build() {
        let fields = [
            ("total_epochs", s.total_epochs),
            ("warmup", s.warmup),
            ("compressed", s.compressed),
            ("decompressed", s.decompressed),
            ("final_decompressed", s.final_decompressed),
            ("finetune", s.finetune),
        ];
        let listed: Vec<String> = fields.iter().map(|(n, v)| format!("schedule.{n}={v}")).collect();
        errs.push(FieldError::new("schedule", format!("{e} ({})", listed.join(", "))));
    }
}

fn validate_train(t: &TrainTask, errs: &mut Vec<FieldError>) {
    match &t.data {
        ClassData::Generate(b) => validate_blobs(b, "data.generate", errs),
        ClassData::Csv { path, .. } => {
            if !path.is_file() {
                errs.push(FieldError::new("data.csv.path", format!("{} does not exist", path.display())));
            }
        }
    }
    if !(t.eval_fraction > 0.0 && t.eval_fraction < 1.0) {
        errs.push(FieldError::new("eval_fraction", "must lie in (0, 1)"));
    }
    if t.hidden.contains(&0) {
        errs.push(FieldError::new("hidden", "widths must be positive"));
    }
    validate_schedule(&t.schedule, errs);
    if let Err(acdc_core::Error::InvalidArgument { name, reason }) = t.optimizer.validate() {
        errs.push(FieldError::new(format!("optimizer.{name}"), reason));
    }
    match &t.pattern {
        SparsityPattern::GlobalTopK {
            keep: acdc_core::Keep::Fraction(f),
        }
        | SparsityPattern::UniformPerLayer { fraction: f, .. } => {
            if !(*f > 0.0 && *f <= 1.0) {
                errs.push(FieldError::new("pattern", "kept fraction must lie in (0, 1]"));
            }
        }
        SparsityPattern::SemiStructured { n, m } => {
            if *m == 0 || *n > *m {
                errs.push(FieldError::new("pattern", "need 0 <= n <= m and m > 0"));
            }
        }
        SparsityPattern::GlobalTopK { .. } => {}
    }
    if t.batch_size == 0 {
        errs.push(FieldError::new("batch_size", "must be positive"));
    }
}

fn validate_flops(t: &FlopsTask, errs: &mut Vec<FieldError>) {
    if acdc_core::flops::builtin_manifest_json(&t.manifest).is_none() && !Path::new(&t.manifest).is_file() {
        errs.push(FieldError::new(
            "manifest",
            format!("`{}` is neither a built-in manifest nor an existing file", t.manifest),
        ));
    }
    if t.epochs == 0 {
        errs.push(FieldError::new("epochs", "must be positive"));
    }
    if t.samples_per_epoch == 0 {
        errs.push(FieldError::new("samples_per_epoch", "must be positive"));
    }
    if let Some(s) = &t.schedule {
        validate_schedule(s, errs);
        if s.total_epochs != t.epochs {
            errs.push(FieldError::new("schedule.total_epochs", format!("must equal epochs = {}", t.epochs)));
        }
    }
    for (name, d) in [("compressed_density", t.compressed_density), ("decompressed_density", t.decompressed_density)] {
        if !(0.0..=1.0).contains(&d) {
            errs.push(FieldError::new(name, "must lie in [0, 1]"));
        }
    }
}
