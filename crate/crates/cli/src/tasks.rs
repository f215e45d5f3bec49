//! Per-task execution. Every task runs once per seed, each seed writing
//! into its own `seed-<s>` directory; the summary is assembled afterwards.

use std::path::{Path, PathBuf};

use acdc_core::acdc::{acdc_train, dense_finetune, NoopObserver, PhaseKind, TrainConfig, TrainResult};
use acdc_core::checkpoint::Checkpoint;
use acdc_core::data::gaussian_blobs;
use acdc_core::diagnostics::{
    agreement, corrupt_labels, dead_weights, memorization_track, FittedMlp, MemorizationObserver, MemorizationReport,
};
use acdc_core::flops::{
    dense_forward_flops, forward_flops, train_flops, DensityTrajectory, LayerManifest,
};
use acdc_core::iht::{run_iht, IhtConfig, PlantedProblem, PlantedSpec};
use acdc_core::objectives::{LeastSquares, Mlp, Objective};
use acdc_core::{Dataset, Mask, ParamSet, SeededRng, SparsityPattern, Vector};
use anyhow::Context;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ClassData, ExperimentConfig, FlopsTask, GenerateTask, GeneratorSpec, IhtTask, RegressionData, Task, TrainTask};
use crate::csvio::{export_csv, export_regression_csv, ingest_csv, ingest_regression_csv, LabelMapping};
use crate::error::{from_core, CliError, CliResult};
use crate::metrics::{seed_dir, write_jsonl, Fields, MetricsRecord, SeedLog, Summary};

pub const PROVENANCE_FORMAT_VERSION: u32 = 1;

/// Sidecar written next to every generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format_version: u32,
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub rng_algorithm: String,
    /// Planted coefficients, regression only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelMapping>,
}

impl Provenance {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
    }
}

type SeedOutput = (Vec<MetricsRecord>, Fields);

/// Runs every seed, then writes metrics and `summary.json` under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> CliResult<Summary> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    std::fs::write(cfg.out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let run_id = cfg.run_id();
    let outputs = for_each_seed(&cfg.seeds, |seed| {
        let dir = seed_dir(&cfg.out, seed);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        info!("{run_id}: seed {seed} starting");
        let out = match &cfg.task {
            Task::Generate(t) => generate_seed(t, seed, &dir, &run_id)?,
            Task::RunIht(t) => iht_seed(t, seed, &dir, &run_id)?,
            Task::TrainAcdc(t) => train_seed(t, None, seed, &dir, &run_id)?,
            Task::Diagnose(t) => train_seed(&t.train, Some(t.corrupt_fraction), seed, &dir, &run_id)?,
            Task::Flops(t) => flops_seed(t, seed, &run_id)?,
        };
        write_jsonl(&dir.join("metrics.jsonl"), &out.0)?;
        info!("{run_id}: seed {seed} done");
        Ok(out.1)
    });
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for (seed, out) in cfg.seeds.iter().zip(outputs) {
        results.push((*seed, out?));
    }
    let summary = Summary::build(&run_id, cfg.task.name(), &results);
    summary.save(&cfg.out)?;
    Ok(summary)
}

#[cfg(feature = "parallel")]
fn for_each_seed<F>(seeds: &[u64], f: F) -> Vec<CliResult<Fields>>
where
    F: Fn(u64) -> CliResult<Fields> + Sync + Send,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[cfg(not(feature = "parallel"))]
fn for_each_seed<F>(seeds: &[u64], f: F) -> Vec<CliResult<Fields>>
where
    F: Fn(u64) -> CliResult<Fields>,
{
    seeds.iter().map(|&s| f(s)).collect()
}

fn data_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed).fork(0)
}

fn save_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn generate_seed(t: &GenerateTask, seed: u64, dir: &Path, run_id: &str) -> CliResult<SeedOutput> {
    let mut rng = data_rng(seed);
    let mut fields = Fields::new();
    let mut prov = Provenance {
        format_version: PROVENANCE_FORMAT_VERSION,
        spec: t.dataset.clone(),
        seed,
        rng_algorithm: rng.algorithm().to_string(),
        theta_star: None,
        labels: None,
    };
    match &t.dataset {
        GeneratorSpec::Regression(spec) => {
            let p = PlantedProblem::generate(spec, &mut rng).map_err(|e| from_core(e, "dataset", seed))?;
            export_regression_csv(&p.a, &p.b, &dir.join("data.csv"))?;
            let resid = p.a.matvec(&p.theta_star).map_err(|e| from_core(e, "dataset", seed))?.sub(&p.b).norm();
            fields.insert("residual_norm".into(), resid);
            fields.insert("theta_star_norm".into(), p.theta_star.norm());
            prov.theta_star = Some(p.theta_star.into_inner());
        }
        GeneratorSpec::Classification(spec) => {
            let d = gaussian_blobs(spec, &mut rng).map_err(|e| from_core(e, "dataset", seed))?;
            let mapping: LabelMapping = (0..d.classes()).map(|c| c.to_string()).collect();
            export_csv(&d, &mapping, &dir.join("data.csv"))?;
            fields.insert("samples".into(), d.len() as f64);
            fields.insert("classes".into(), d.classes() as f64);
            prov.labels = Some(mapping);
        }
    }
    save_json(&dir.join("provenance.json"), &prov)?;
    Ok(SeedLog::new(run_id, seed).finish(fields)?)
}

fn iht_seed(t: &IhtTask, seed: u64, dir: &Path, run_id: &str) -> CliResult<SeedOutput> {
    let (obj, theta_star) = match &t.data {
        RegressionData::Generate(spec) => planted_objective(spec, seed)?,
        RegressionData::Csv { path, target, theta_star } => {
            let (a, b) = ingest_regression_csv(path, target)?;
            let star = match theta_star {
                Some(p) => Some(Vector::from(
                    Provenance::load(p)?
                        .theta_star
                        .ok_or_else(|| CliError::field("data.csv.theta_star", "sidecar has no theta_star"))?,
                )),
                None => None,
            };
            let obj = LeastSquares::new(a, b).map_err(|e| from_core(e, "data", seed))?;
            if let Some(s) = &star {
                if s.len() != obj.dim() {
                    return Err(CliError::field("data.csv.theta_star", "length differs from the feature count"));
                }
            }
            (obj, star)
        }
    };
    let cfg = IhtConfig {
        step: t.step,
        mode: t.mode,
        stop_tol: t.stop_tol,
        polish: t.polish,
        ..IhtConfig::deterministic(SparsityPattern::global_count(t.k), t.iterations)
    };
    let theta0 = vec![0.0; obj.dim()];
    let run_rng = SeededRng::new(seed).fork(1);
    let traj = run_iht(&obj, &cfg, &theta0, theta_star.as_deref(), &mut run_rng.clone())
        .map_err(|e| from_core(e, "iht", seed))?;

    let f_star = obj.optimum_value();
    let star_norm = theta_star.as_ref().map(|s| s.norm().max(f64::MIN_POSITIVE));
    let mut log = SeedLog::new(run_id, seed);
    for r in &traj.records {
        let mut f = Fields::from([
            ("f".into(), r.f),
            ("grad_norm".into(), r.grad_norm),
            ("max_abs".into(), r.max_abs),
        ]);
        if let Some(fs) = f_star {
            f.insert("f_minus_fstar".into(), r.f - fs);
        }
        if let (Some(d), Some(n)) = (r.dist_to_star, star_norm) {
            f.insert("relative_error".into(), d / n);
        }
        log.step(r.iteration, None, f)?;
    }

    let last = traj.records.last().expect("at least the initial record");
    let mut fin = Fields::from([
        ("final_f".into(), obj.value(&traj.theta).map_err(|e| from_core(e, "iht", seed))?),
        ("iterations".into(), last.iteration as f64),
        ("step_size".into(), traj.step_size),
        ("nnz".into(), traj.theta.nnz() as f64),
    ]);
    if let Some(b) = traj.beta_hat {
        fin.insert("beta_hat".into(), b);
    }
    if let (Some(star), Some(n)) = (&theta_star, star_norm) {
        fin.insert("relative_error".into(), traj.theta.sub(star).norm() / n);
        let k_star = star.nnz();
        let top = acdc_core::sparsity::top_k_global(&traj.theta, k_star).map_err(|e| from_core(e, "iht", seed))?;
        let recovered = top.indices() == Mask::support_of(star).indices();
        fin.insert("support_recovered".into(), f64::from(u8::from(recovered)));
    }
    if let Some(p) = &traj.polish {
        fin.insert("polish_grad_inf".into(), p.grad_inf);
        fin.insert("polish_converged".into(), f64::from(u8::from(p.converged)));
    }
    Checkpoint::new(ParamSet::single(&traj.theta), &run_rng, last.iteration)
        .with_mask(Mask::support_of(&traj.theta))
        .save(dir.join("theta.ckpt.json"))
        .map_err(|e| from_core(e, "checkpoint", seed))?;
    Ok(log.finish(fin)?)
}

fn planted_objective(spec: &PlantedSpec, seed: u64) -> CliResult<(LeastSquares, Option<Vector>)> {
    let p = PlantedProblem::generate(spec, &mut data_rng(seed)).map_err(|e| from_core(e, "data.generate", seed))?;
    let obj = p.objective().map_err(|e| from_core(e, "data.generate", seed))?;
    Ok((obj, Some(p.theta_star)))
}

fn load_class_data(data: &ClassData, seed: u64, dir: &Path) -> CliResult<Dataset> {
    match data {
        ClassData::Generate(spec) => gaussian_blobs(spec, &mut data_rng(seed)).map_err(|e| from_core(e, "data.generate", seed)),
        ClassData::Csv { path, label } => {
            let (d, mapping) = ingest_csv(path, label)?;
            save_json(&dir.join("labels.json"), &mapping)?;
            Ok(d)
        }
    }
}

fn train_seed(t: &TrainTask, corrupt: Option<f64>, seed: u64, dir: &Path, run_id: &str) -> CliResult<SeedOutput> {
    let data = load_class_data(&t.data, seed, dir)?;
    let (train, eval) = data
        .split(t.eval_fraction, &mut SeededRng::new(seed).fork(1))
        .map_err(|e| from_core(e, "eval_fraction", seed))?;
    let mut widths = vec![train.feature_dim()];
    widths.extend(&t.hidden);
    widths.push(train.classes());
    let model = Mlp::new(widths.clone()).map_err(|e| from_core(e, "hidden", seed))?;
    let schedule = t.schedule.build().map_err(|e| from_core(e, "schedule", seed))?;
    let cfg = TrainConfig {
        schedule: schedule.clone(),
        optimizer: t.optimizer.clone(),
        pattern: t.pattern.clone(),
        batch_size: t.batch_size,
        select_best_dense: true,
    };
    let rng = SeededRng::new(seed).fork(2);

    let corrupted = match corrupt {
        Some(frac) => {
            let count = ((frac * train.len() as f64).round() as usize).max(1);
            Some(corrupt_labels(&train, count, train.classes(), &mut SeededRng::new(seed).fork(3)).map_err(|e| from_core(e, "corrupt_fraction", seed))?)
        }
        None => None,
    };
    let (train_set, result, memo) = match &corrupted {
        Some((noisy, record)) => {
            let mut obs = MemorizationObserver::new(&model, noisy, record);
            let r = acdc_train(&model, noisy, Some(&eval), &cfg, &rng, &mut obs).map_err(|e| from_core(e, "train", seed))?;
            let report = memorization_track(&obs.snapshots, record).map_err(|e| from_core(e, "diagnose", seed))?;
            (noisy, r, Some(report))
        }
        None => {
            let r = acdc_train(&model, &train, Some(&eval), &cfg, &rng, &mut NoopObserver).map_err(|e| from_core(e, "train", seed))?;
            (&train, r, None)
        }
    };
    finish_train(t, &model, train_set, &eval, result, memo, seed, dir, run_id, &rng)
}

#[allow(clippy::too_many_arguments)]
fn finish_train(
    t: &TrainTask,
    model: &Mlp,
    train: &Dataset,
    eval: &Dataset,
    r: TrainResult,
    memo: Option<MemorizationReport>,
    seed: u64,
    dir: &Path,
    run_id: &str,
    rng: &SeededRng,
) -> CliResult<SeedOutput> {
    let schedule = t.schedule.build().map_err(|e| from_core(e, "schedule", seed))?;
    let manifest = LayerManifest::from_mlp(model.widths());
    let traj = DensityTrajectory {
        epochs: r.metrics.iter().map(|m| m.layer_density.clone()).collect(),
    };
    let flops = train_flops(&manifest, &schedule, &traj, train.len() as u64).map_err(|e| from_core(e, "flops", seed))?;
    let changes: std::collections::BTreeMap<usize, f64> = r.mask_history.changes().into_iter().collect();

    let mut log = SeedLog::new(run_id, seed);
    let mut cum = 0.0;
    for (i, m) in r.metrics.iter().enumerate() {
        cum += flops.per_epoch[i] * train.len() as f64;
        let mut f = Fields::from([
            ("loss".into(), m.train_loss),
            ("lr".into(), m.lr),
            ("sparsity".into(), m.sparsity),
            ("flops_cum".into(), cum),
        ]);
        if let Some(a) = m.eval_accuracy {
            f.insert("accuracy".into(), a);
        }
        if let Some(c) = changes.get(&m.epoch) {
            f.insert("mask_change".into(), *c);
        }
        if let Some(p) = memo.as_ref().and_then(|rep| rep.points.iter().find(|p| p.epoch == m.epoch)) {
            f.insert("acc_true".into(), p.acc_true);
            f.insert("acc_corrupted".into(), p.acc_corrupted);
        }
        log.step(m.epoch, Some(phase_name(m.phase)), f)?;
    }

    let best = r.best_dense.as_ref().ok_or_else(|| CliError::Other(anyhow::anyhow!("no dense checkpoint recorded")))?;
    let sparse_acc = model.accuracy(&r.sparse_params, eval).map_err(|e| from_core(e, "eval", seed))?;
    let mut fin = Fields::from([
        ("sparse_accuracy".into(), sparse_acc),
        ("dense_accuracy".into(), best.eval_accuracy),
        ("dense_epoch".into(), best.epoch as f64),
        ("sparsity".into(), r.metrics.last().map_or(0.0, |m| m.sparsity)),
        ("dense_dead_weights".into(), dead_weights(&best.params)),
        ("train_gflops".into(), flops.total / 1e9),
    ]);
    if let Some(rep) = &memo {
        let tail = rep.final_compressed();
        let n = tail.len().max(1) as f64;
        fin.insert("acc_true".into(), tail.iter().map(|p| p.acc_true).sum::<f64>() / n);
        fin.insert("acc_corrupted".into(), tail.iter().map(|p| p.acc_corrupted).sum::<f64>() / n);
        let dense = FittedMlp { model, params: &best.params };
        let sparse = FittedMlp {
            model,
            params: &r.sparse_params,
        };
        let ag = agreement(&dense, &sparse, eval).map_err(|e| from_core(e, "diagnose", seed))?;
        fin.insert("agreement_top1".into(), ag.top1_agreement);
        fin.insert("agreement_cross_entropy".into(), ag.mean_cross_entropy);
    }

    let last_epoch = t.schedule.total_epochs - 1;
    Checkpoint::new(r.sparse_params.clone(), rng, last_epoch)
        .with_mask(r.mask.clone())
        .with_schedule(schedule.clone())
        .with_optimizer(t.optimizer.clone())
        .save(dir.join("sparse.ckpt.json"))
        .map_err(|e| from_core(e, "checkpoint", seed))?;
    Checkpoint::new(best.params.clone(), rng, best.epoch)
        .with_schedule(schedule)
        .with_optimizer(t.optimizer.clone())
        .save(dir.join("dense.ckpt.json"))
        .map_err(|e| from_core(e, "checkpoint", seed))?;
    if t.dense_finetune_epochs > 0 {
        let tuned = dense_finetune(&r, model, train, t.dense_finetune_epochs, &t.optimizer, t.batch_size, rng)
            .map_err(|e| from_core(e, "dense_finetune", seed))?;
        fin.insert("finetuned_accuracy".into(), model.accuracy(&tuned, eval).map_err(|e| from_core(e, "eval", seed))?);
        fin.insert("finetuned_dead_weights".into(), dead_weights(&tuned));
        Checkpoint::new(tuned, rng, last_epoch + t.dense_finetune_epochs)
            .with_optimizer(t.optimizer.clone())
            .save(dir.join("finetuned.ckpt.json"))
            .map_err(|e| from_core(e, "checkpoint", seed))?;
    }
    Ok(log.finish(fin)?)
}

fn phase_name(k: PhaseKind) -> &'static str {
    match k {
        PhaseKind::Compressed => "compressed",
        PhaseKind::Decompressed => "decompressed",
    }
}

pub fn load_manifest(name: &str) -> CliResult<LayerManifest> {
    let json = match acdc_core::flops::builtin_manifest_json(name) {
        Some(s) => s.to_string(),
        None => std::fs::read_to_string(PathBuf::from(name)).with_context(|| format!("reading manifest {name}"))?,
    };
    LayerManifest::from_json(&json).map_err(|e| CliError::field("manifest", e.to_string()))
}

fn flops_seed(t: &FlopsTask, seed: u64, run_id: &str) -> CliResult<SeedOutput> {
    let m = load_manifest(&t.manifest)?;
    let n = m.layers.len();
    let dense = dense_forward_flops(&m);
    let samples = t.samples_per_epoch as f64;
    let mut log = SeedLog::new(run_id, seed);
    let mut fin = Fields::from([
        ("forward_gflops".into(), dense / 1e9),
        ("backward_gflops".into(), 2.0 * dense / 1e9),
    ]);
    let (per_epoch, compressed, decompressed) = match &t.schedule {
        Some(spec) => {
            let s = spec.build().map_err(|e| from_core(e, "schedule", seed))?;
            let traj = DensityTrajectory::by_phase(&s, vec![t.compressed_density; n], vec![t.decompressed_density; n]);
            let r = train_flops(&m, &s, &traj, t.samples_per_epoch).map_err(|e| from_core(e, "flops", seed))?;
            (r.per_epoch, r.compressed_total, r.decompressed_total)
        }
        None => {
            // every epoch decompressed: sparse forward and input-gradient pass, dense weight gradient
            let f = forward_flops(&m, &vec![t.decompressed_density; n]).map_err(|e| from_core(e, "decompressed_density", seed))?;
            let per = vec![2.0 * f + dense; t.epochs];
            let total = per.iter().sum::<f64>() * samples;
            (per, 0.0, total)
        }
    };
    let mut cum = 0.0;
    for (e, p) in per_epoch.iter().enumerate() {
        cum += p * samples;
        log.step(e, None, Fields::from([("flops_cum".into(), cum)]))?;
    }
    let compressed_forward = forward_flops(&m, &vec![t.compressed_density; n]).map_err(|e| from_core(e, "compressed_density", seed))?;
    fin.insert("forward_gflops_compressed".into(), compressed_forward / 1e9);
    fin.insert("train_eflops".into(), cum / 1e18);
    fin.insert("compressed_eflops".into(), compressed / 1e18);
    fin.insert("decompressed_eflops".into(), decompressed / 1e18);
    Ok(log.finish(fin)?)
}
