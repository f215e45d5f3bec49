//! Alternating compressed/decompressed training.
//!
//! Training starts with a dense warm-up, then alternates compressed phases
//! (weights truncated to the sparsity pattern on entry, mask frozen for the
//! phase) with decompressed phases (all weights trainable, momentum reset
//! on entry), and always ends on a compressed fine-tuning phase.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::MaskHistory;
use crate::error::{Error, Result};
use crate::numeric::{ParamSet, SeededRng};
use crate::objectives::Mlp;
use crate::sparsity::{apply_pattern, mask_params, Mask, SparsityPattern};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Compressed,
    Decompressed,
}

/// Half-open epoch range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub start: usize,
    pub end: usize,
    pub kind: PhaseKind,
}

impl Phase {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, epoch: usize) -> bool {
        (self.start..self.end).contains(&epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub total_epochs: usize,
    pub warmup: usize,
    pub compressed: usize,
    pub decompressed: usize,
    pub final_decompressed: usize,
    pub finetune: usize,
    phases: Vec<Phase>,
}

/// Lays out `[warm-up D] [C D]… [C D_final] [C finetune]`.
///
/// The middle section must tile exactly: `n·Δc + (n−1)·Δd + Δ_D` epochs for
/// some `n ≥ 1`, or be empty. Zero-length phases are dropped and adjacent
/// phases of the same kind merged.
pub fn build_schedule(
    total: usize,
    warmup: usize,
    compressed: usize,
    decompressed: usize,
    final_decompressed: usize,
    finetune: usize,
) -> Result<PhaseSchedule> {
    if warmup == 0 {
        return Err(Error::InfeasibleSchedule("warm-up must be at least one epoch".into()));
    }
    if finetune == 0 {
        return Err(Error::InfeasibleSchedule("training must end on a compressed phase; finetune must be >= 1".into()));
    }
    if warmup + finetune > total {
        return Err(Error::InfeasibleSchedule(format!(
            "warm-up {warmup} + finetune {finetune} exceed total {total}"
        )));
    }
    let middle = total - warmup - finetune;
    let alternations = if middle == 0 {
        0
    } else {
        if compressed == 0 {
            return Err(Error::InfeasibleSchedule(format!(
                "{middle} epochs between warm-up and finetune but compressed length is 0"
            )));
        }
        let period = compressed + decompressed;
        let numerator = (middle + decompressed) as i64 - final_decompressed as i64;
        if numerator < period as i64 {
            return Err(Error::InfeasibleSchedule(format!(
                "middle section of {middle} epochs is shorter than one compressed phase plus the final decompressed phase; residual {}",
                middle as i64 - (compressed + final_decompressed) as i64
            )));
        }
        let numerator = numerator as usize;
        let n = numerator / period;
        let residual = numerator - n * period;
        if residual != 0 {
            return Err(Error::InfeasibleSchedule(format!(
                "{n} alternations of Δc={compressed}, Δd={decompressed} with Δ_D={final_decompressed} leave a residual of {residual} epoch(s) out of total {total}"
            )));
        }
        n
    };

    let mut raw = vec![(warmup, PhaseKind::Decompressed)];
    for i in 0..alternations {
        raw.push((compressed, PhaseKind::Compressed));
        let d = if i + 1 == alternations { final_decompressed } else { decompressed };
        raw.push((d, PhaseKind::Decompressed));
    }
    raw.push((finetune, PhaseKind::Compressed));

    let mut phases: Vec<Phase> = Vec::new();
    let mut start = 0;
    for (len, kind) in raw.into_iter().filter(|(len, _)| *len > 0) {
        match phases.last_mut() {
            Some(last) if last.kind == kind => last.end += len,
            _ => phases.push(Phase {
                start,
                end: start + len,
                kind,
            }),
        }
        start += len;
    }
    debug_assert_eq!(start, total);

    Ok(PhaseSchedule {
        total_epochs: total,
        warmup,
        compressed,
        decompressed,
        final_decompressed,
        finetune,
        phases,
    })
}

impl PhaseSchedule {
    /// Dense training for `total - finetune` epochs, one magnitude
    /// truncation, then sparse fine-tuning: the one-shot pruning baseline.
    pub fn one_shot(total: usize, finetune: usize) -> Result<Self> {
        build_schedule(total, total.saturating_sub(finetune), 1, 0, 0, finetune)
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn phase_at(&self, epoch: usize) -> Option<&Phase> {
        self.phases.iter().find(|p| p.contains(epoch))
    }

    pub fn kind_at(&self, epoch: usize) -> Option<PhaseKind> {
        self.phase_at(epoch).map(|p| p.kind)
    }

    pub fn ranges(&self, kind: PhaseKind) -> Vec<(usize, usize)> {
        self.phases.iter().filter(|p| p.kind == kind).map(|p| (p.start, p.end)).collect()
    }

    pub fn epochs_of(&self, kind: PhaseKind) -> usize {
        self.phases.iter().filter(|p| p.kind == kind).map(Phase::len).sum()
    }

    /// Re-derives the layout from the scalar fields and checks it matches.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = build_schedule(
            self.total_epochs,
            self.warmup,
            self.compressed,
            self.decompressed,
            self.final_decompressed,
            self.finetune,
        )?;
        if rebuilt.phases != self.phases {
            return Err(Error::InfeasibleSchedule("phase list inconsistent with scalar fields".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear ramp over `warmup_epochs`, then cosine decay to zero at the
    /// last epoch.
    Cosine { warmup_epochs: f64 },
    /// Multiply by `factor` every `every` epochs.
    StepDecay { every: usize, factor: f64 },
}

impl LrSchedule {
    /// Learning rate at fractional epoch `t` of a run lasting `total`.
    pub fn at(&self, base: f64, t: f64, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup_epochs } => {
                if t < warmup_epochs {
                    base * (t + 1.0).min(warmup_epochs) / warmup_epochs
                } else {
                    let span = (total as f64 - warmup_epochs).max(1e-12);
                    let p = ((t - warmup_epochs) / span).clamp(0.0, 1.0);
                    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
            LrSchedule::StepDecay { every, factor } => base * factor.powi((t as usize / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Also zero the momentum buffer when entering compressed phases.
    #[serde(default)]
    pub reset_momentum_on_compression: bool,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// `v ← μv + g + wd·θ`, `θ ← θ − lr·v`
pub fn sgd_momentum_step(theta: &mut [f64], g: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    assert!(theta.len() == g.len() && g.len() == velocity.len(), "shape mismatch");
    for ((t, gi), v) in theta.iter_mut().zip(g).zip(velocity.iter_mut()) {
        *v = momentum * *v + gi + weight_decay * *t;
        *t -= lr * *v;
    }
}

/// SGD with momentum over a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub config: OptimizerConfig,
    buffer: ParamSet,
}

impl SgdMomentum {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        SgdMomentum {
            config,
            buffer: params.zeros_like(),
        }
    }

    pub fn buffer(&self) -> &ParamSet {
        &self.buffer
    }

    pub fn reset(&mut self) {
        self.buffer.fill(0.0);
    }

    /// Zeros the momentum of masked-out prunable coordinates.
    pub fn mask(&mut self, mask: &Mask) -> Result<()> {
        mask_params(&mut self.buffer, mask)
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) -> Result<()> {
        if !params.same_layout(grad) || !params.same_layout(&self.buffer) {
            return Err(Error::invalid("grad", "layout does not match parameters"));
        }
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in params
            .segments_mut()
            .iter_mut()
            .zip(grad.segments())
            .zip(self.buffer.segments_mut())
        {
            sgd_momentum_step(&mut p.values, &g.values, &mut v.values, lr, mu, wd);
        }
        if params.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("sgd step"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: PhaseSchedule,
    pub optimizer: OptimizerConfig,
    pub pattern: SparsityPattern,
    pub batch_size: usize,
    /// Keep the best end-of-decompressed-phase snapshot by eval accuracy.
    #[serde(default = "yes")]
    pub select_best_dense: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: PhaseKind,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    /// Fraction of zero prunable coordinates at epoch end.
    pub sparsity: f64,
    pub mask_id: u64,
    /// Nonzero fraction of each prunable segment at epoch end.
    pub layer_density: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseCheckpoint {
    pub params: ParamSet,
    pub epoch: usize,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub sparse_params: ParamSet,
    pub mask: Mask,
    pub best_dense: Option<DenseCheckpoint>,
    pub metrics: Vec<EpochMetrics>,
    pub mask_history: MaskHistory,
}

/// State visible to observers on entry into a phase, after the phase's
/// mask and momentum handling have been applied.
pub struct PhaseEntry<'a> {
    pub epoch: usize,
    pub kind: PhaseKind,
    /// Parameters just before the phase's truncation.
    pub params_before: &'a ParamSet,
    pub params: &'a ParamSet,
    pub mask: &'a Mask,
    pub momentum: &'a ParamSet,
}

pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub kind: PhaseKind,
    pub params: &'a ParamSet,
    pub mask: &'a Mask,
    pub momentum: &'a ParamSet,
}

/// Hooks into the training loop; all methods default to no-ops.
pub trait TrainObserver {
    fn on_phase_entry(&mut self, _entry: &PhaseEntry<'_>) {}

    fn on_step(&mut self, _event: &StepEvent<'_>) {}

    fn on_epoch_end(&mut self, _epoch: usize, _kind: PhaseKind, _params: &ParamSet) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

fn layer_density(params: &ParamSet) -> Vec<f64> {
    params
        .segments()
        .iter()
        .filter(|s| s.prunable)
        .map(|s| s.values.nnz() as f64 / s.values.len().max(1) as f64)
        .collect()
}

fn prunable_sparsity(params: &ParamSet) -> f64 {
    let n = params.prunable_count();
    if n == 0 {
        0.0
    } else {
        1.0 - params.prunable_nnz() as f64 / n as f64
    }
}

/// Runs AC/DC on `model`. Parameters are initialised from `rng.fork(1)` and
/// mini-batches shuffled from `rng.fork(2)`.
pub fn acdc_train(
    model: &Mlp,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &SeededRng,
    observer: &mut dyn TrainObserver,
) -> Result<TrainResult> {
    let params = model.init_params(&mut rng.fork(1));
    acdc_train_from(model, params, train, eval, cfg, rng, observer)
}

/// As [`acdc_train`], starting from given parameters.
pub fn acdc_train_from(
    model: &Mlp,
    mut params: ParamSet,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    rng: &SeededRng,
    observer: &mut dyn TrainObserver,
) -> Result<TrainResult> {
    cfg.schedule.validate()?;
    cfg.optimizer.validate()?;
    cfg.pattern.validate(&params)?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    if train.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    if cfg.select_best_dense && eval.is_none() {
        return Err(Error::Missing("evaluation split for best-dense selection"));
    }

    let mut shuffle_rng = rng.fork(2);
    let mut opt = SgdMomentum::new(cfg.optimizer.clone(), &params);
    let mut mask = Mask::ones(params.prunable_count());
    let mut history = MaskHistory::default();
    let mut best: Option<DenseCheckpoint> = None;
    let mut metrics = Vec::with_capacity(cfg.schedule.total_epochs);
    let total = cfg.schedule.total_epochs;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);

    for epoch in 0..total {
        let phase = *cfg.schedule.phase_at(epoch).expect("schedule partitions all epochs");
        if phase.start == epoch {
            let before = params.clone();
            match phase.kind {
                PhaseKind::Compressed => {
                    mask = apply_pattern(&params, &cfg.pattern)?;
                    mask_params(&mut params, &mask)?;
                    opt.mask(&mask)?;
                    if cfg.optimizer.reset_momentum_on_compression {
                        opt.reset();
                    }
                    history.push(epoch, mask.clone())?;
                }
                PhaseKind::Decompressed => {
                    mask = Mask::ones(params.prunable_count());
                    opt.reset();
                }
            }
            observer.on_phase_entry(&PhaseEntry {
                epoch,
                kind: phase.kind,
                params_before: &before,
                params: &params,
                mask: &mask,
                momentum: opt.buffer(),
            });
        }

        let order = shuffle_rng.permutation(train.len());
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grad) = model.value_grad(&params, train, batch)?;
            if phase.kind == PhaseKind::Compressed {
                mask_params(&mut grad, &mask)?;
            }
            let t = epoch as f64 + step as f64 / batches_per_epoch as f64;
            let lr = cfg.optimizer.lr_schedule.at(cfg.optimizer.lr, t, total);
            opt.step(&mut params, &grad, lr)?;
            loss_sum += loss;
            observer.on_step(&StepEvent {
                epoch,
                step,
                kind: phase.kind,
                params: &params,
                mask: &mask,
                momentum: opt.buffer(),
            });
        }

        let eval_accuracy = eval.map(|d| model.accuracy(&params, d)).transpose()?;
        metrics.push(EpochMetrics {
            epoch,
            phase: phase.kind,
            lr: cfg.optimizer.lr_schedule.at(cfg.optimizer.lr, epoch as f64 + 1.0, total),
            train_loss: loss_sum / batches_per_epoch as f64,
            eval_accuracy,
            sparsity: prunable_sparsity(&params),
            mask_id: mask.fingerprint(),
            layer_density: layer_density(&params),
        });

        if phase.kind == PhaseKind::Decompressed && epoch + 1 == phase.end {
            if let Some(acc) = eval_accuracy {
                // ties go to the later, longer-trained snapshot
                if best.as_ref().is_none_or(|b| acc >= b.eval_accuracy) {
                    best = Some(DenseCheckpoint {
                        params: params.clone(),
                        epoch,
                        eval_accuracy: acc,
                    });
                }
            }
        }
        observer.on_epoch_end(epoch, phase.kind, &params);
    }

    Ok(TrainResult {
        sparse_params: params,
        mask,
        best_dense: if cfg.select_best_dense { best } else { None },
        metrics,
        mask_history: history,
    })
}

/// Continues dense training from the best dense checkpoint for `epochs`
/// epochs with a fresh optimizer and its own learning-rate curve.
pub fn dense_finetune(
    result: &TrainResult,
    model: &Mlp,
    train: &Dataset,
    epochs: usize,
    optimizer: &OptimizerConfig,
    batch_size: usize,
    rng: &SeededRng,
) -> Result<ParamSet> {
    let ckpt = result.best_dense.as_ref().ok_or(Error::Missing("best dense checkpoint"))?;
    let mut params = ckpt.params.clone();
    if epochs == 0 {
        return Ok(params);
    }
    optimizer.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    let mut opt = SgdMomentum::new(optimizer.clone(), &params);
    let mut shuffle_rng = rng.fork(3);
    let batches_per_epoch = train.len().div_ceil(batch_size);
    for epoch in 0..epochs {
        let order = shuffle_rng.permutation(train.len());
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let (_, grad) = model.value_grad(&params, train, batch)?;
            let t = epoch as f64 + step as f64 / batches_per_epoch as f64;
            opt.step(&mut params, &grad, optimizer.lr_schedule.at(optimizer.lr, t, epochs))?;
        }
    }
    Ok(params)
}
