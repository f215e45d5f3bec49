//! Instruments for sparse/dense model pairs: mask dynamics, prediction
//! agreement, inactive weights, and the corrupted-label memorization probe.

use serde::{Deserialize, Serialize};

use crate::acdc::{PhaseKind, TrainObserver};
use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::numeric::{ParamSet, SeededRng};
use crate::objectives::{argmax, Mlp};
use crate::sparsity::Mask;

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Fraction of `next`'s support that was not in `prev`.
pub fn mask_change(prev: &Mask, next: &Mask) -> Result<f64> {
    check_len(prev.len(), next.len())?;
    let new = next.popcount() - next.intersection_count(prev);
    Ok(new as f64 / next.popcount().max(1) as f64)
}

/// `|prev Δ next| / (|prev| + |next|)`
pub fn symmetric_mask_change(prev: &Mask, next: &Mask) -> Result<f64> {
    check_len(prev.len(), next.len())?;
    let denom = prev.popcount() + next.popcount();
    if denom == 0 {
        return Ok(0.0);
    }
    let common = prev.intersection_count(next);
    Ok((denom - 2 * common) as f64 / denom as f64)
}

/// Masks captured at each compressed-phase entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskHistory {
    entries: Vec<(usize, Mask)>,
}

impl MaskHistory {
    pub fn push(&mut self, epoch: usize, mask: Mask) -> Result<()> {
        if let Some((last, m)) = self.entries.last() {
            if epoch <= *last {
                return Err(Error::invalid("epoch", "mask history epochs must increase"));
            }
            check_len(m.len(), mask.len())?;
        }
        self.entries.push((epoch, mask));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, Mask)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(epoch, mask_change)` for each consecutive pair.
    pub fn changes(&self) -> Vec<(usize, f64)> {
        self.entries
            .windows(2)
            .map(|w| (w[1].0, mask_change(&w[0].1, &w[1].1).expect("lengths checked on push")))
            .collect()
    }
}

/// Anything that maps an input to class probabilities.
pub trait Predictor: Sync {
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// An [`Mlp`] with concrete parameters.
pub struct FittedMlp<'a> {
    pub model: &'a Mlp,
    pub params: &'a ParamSet,
}

impl Predictor for FittedMlp<'_> {
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.predict_proba(self.params, x)
    }
}

/// Adapter for closures.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.0)(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub top1_agreement: f64,
    /// Mean of `−Σ_c p_a(c) ln p_b(c)`, with `a` the reference model.
    pub mean_cross_entropy: f64,
}

/// Compares `reference` (the dense model) with `other` (the sparse one).
pub fn agreement(reference: &dyn Predictor, other: &dyn Predictor, data: &Dataset) -> Result<AgreementReport> {
    if data.is_empty() {
        return Err(Error::invalid("data", "empty dataset"));
    }
    let mut agree = 0usize;
    let mut ce = 0.0;
    for i in 0..data.len() {
        let pa = reference.predict_proba(data.x(i))?;
        let pb = other.predict_proba(data.x(i))?;
        check_len(pa.len(), pb.len())?;
        if argmax(&pa) == argmax(&pb) {
            agree += 1;
        }
        ce -= pa.iter().zip(&pb).map(|(a, b)| a * b.max(PROB_FLOOR).ln()).sum::<f64>();
    }
    let n = data.len() as f64;
    Ok(AgreementReport {
        top1_agreement: agree as f64 / n,
        mean_cross_entropy: ce / n,
    })
}

/// Fraction of prunable coordinates exactly equal to zero.
pub fn dead_weights(params: &ParamSet) -> f64 {
    let n = params.prunable_count();
    if n == 0 {
        return 0.0;
    }
    1.0 - params.prunable_nnz() as f64 / n as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub indices: Vec<usize>,
    pub original: Vec<usize>,
    pub replacement: Vec<usize>,
    pub seed: u64,
}

/// Replaces the labels of `count` uniformly chosen samples with a label
/// drawn uniformly from the other classes.
pub fn corrupt_labels(data: &Dataset, count: usize, classes: usize, rng: &mut SeededRng) -> Result<(Dataset, CorruptionRecord)> {
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least two classes"));
    }
    if classes != data.classes() {
        return Err(Error::invalid("classes", "does not match the dataset"));
    }
    if count > data.len() {
        return Err(Error::invalid("count", format!("{count} exceeds {} samples", data.len())));
    }
    let mut indices = rng.sample_indices(data.len(), count);
    indices.sort_unstable();
    let mut labels = data.labels().to_vec();
    let mut record = CorruptionRecord {
        seed: rng.seed(),
        ..Default::default()
    };
    for &i in &indices {
        let orig = labels[i];
        let mut repl = rng.below(classes);
        while repl == orig {
            repl = rng.below(classes);
        }
        labels[i] = repl;
        record.original.push(orig);
        record.replacement.push(repl);
    }
    record.indices = indices;
    Ok((data.with_labels(labels)?, record))
}

/// Predictions on the corrupted subset at the end of one epoch, in record
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPredictions {
    pub epoch: usize,
    pub phase: PhaseKind,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationPoint {
    pub epoch: usize,
    pub phase: PhaseKind,
    /// Accuracy w.r.t. the corrupted labels the model was trained on.
    pub acc_corrupted: f64,
    /// Accuracy w.r.t. the original labels.
    pub acc_true: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub points: Vec<MemorizationPoint>,
}

impl MemorizationReport {
    /// Epochs of the final compressed phase.
    pub fn final_compressed(&self) -> &[MemorizationPoint] {
        let tail = self
            .points
            .iter()
            .rev()
            .take_while(|p| p.phase == PhaseKind::Compressed)
            .count();
        &self.points[self.points.len() - tail..]
    }
}

pub fn memorization_track(snapshots: &[EpochPredictions], record: &CorruptionRecord) -> Result<MemorizationReport> {
    if snapshots.is_empty() {
        return Err(Error::Missing("per-epoch prediction snapshots"));
    }
    let n = record.indices.len();
    let mut points = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        check_len(n, s.predictions.len())?;
        let (mut hit_c, mut hit_t) = (0usize, 0usize);
        for ((p, c), t) in s.predictions.iter().zip(&record.replacement).zip(&record.original) {
            hit_c += usize::from(p == c);
            hit_t += usize::from(p == t);
        }
        let denom = n.max(1) as f64;
        points.push(MemorizationPoint {
            epoch: s.epoch,
            phase: s.phase,
            acc_corrupted: hit_c as f64 / denom,
            acc_true: hit_t as f64 / denom,
        });
    }
    Ok(MemorizationReport { points })
}

/// Records predictions on the corrupted samples after every epoch.
pub struct MemorizationObserver<'a> {
    model: &'a Mlp,
    data: &'a Dataset,
    indices: Vec<usize>,
    pub snapshots: Vec<EpochPredictions>,
}

impl<'a> MemorizationObserver<'a> {
    pub fn new(model: &'a Mlp, data: &'a Dataset, record: &CorruptionRecord) -> Self {
        MemorizationObserver {
            model,
            data,
            indices: record.indices.clone(),
            snapshots: Vec::new(),
        }
    }
}

impl TrainObserver for MemorizationObserver<'_> {
    fn on_epoch_end(&mut self, epoch: usize, kind: PhaseKind, params: &ParamSet) {
        let predictions = self
            .indices
            .iter()
            .map(|&i| self.model.predict(params, self.data.x(i)).expect("layout fixed by the training loop"))
            .collect();
        self.snapshots.push(EpochPredictions {
            epoch,
            phase: kind,
            predictions,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_blobs, BlobSpec};
    use crate::numeric::Segment;

    fn blobs() -> Dataset {
        gaussian_blobs(
            &BlobSpec {
                features: 3,
                classes: 4,
                samples: 40,
                spread: 1.0,
                center_scale: 1.0,
            },
            &mut SeededRng::new(1),
        )
        .unwrap()
    }

    #[test]
    fn mask_change_examples() {
        let a = Mask::new(vec![true, true, false, false]);
        let b = Mask::new(vec![false, false, true, true]);
        let c = Mask::new(vec![true, false, true, false]);
        assert_eq!(mask_change(&a, &a).unwrap(), 0.0);
        assert_eq!(mask_change(&a, &b).unwrap(), 1.0);
        assert_eq!(mask_change(&a, &c).unwrap(), 0.5);
        assert_eq!(symmetric_mask_change(&a, &a).unwrap(), 0.0);
        assert_eq!(symmetric_mask_change(&a, &b).unwrap(), 1.0);
        assert_eq!(symmetric_mask_change(&a, &c).unwrap(), 0.5);
        assert!(mask_change(&a, &Mask::ones(3)).is_err());
    }

    #[test]
    fn history_requires_increasing_epochs() {
        let mut h = MaskHistory::default();
        h.push(3, Mask::ones(2)).unwrap();
        assert!(h.push(3, Mask::ones(2)).is_err());
        h.push(5, Mask::new(vec![true, false])).unwrap();
        assert_eq!(h.changes(), vec![(5, 0.0)]);
    }

    #[test]
    fn self_agreement_is_total_with_entropy() {
        let data = blobs();
        let mlp = Mlp::new(vec![3, 6, 4]).unwrap();
        let p = mlp.init_params(&mut SeededRng::new(3));
        let m = FittedMlp { model: &mlp, params: &p };
        let r = agreement(&m, &m, &data).unwrap();
        assert_eq!(r.top1_agreement, 1.0);
        let entropy: f64 = (0..data.len())
            .map(|i| {
                let q = mlp.predict_proba(&p, data.x(i)).unwrap();
                -q.iter().map(|v| v * v.ln()).sum::<f64>()
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!((r.mean_cross_entropy - entropy).abs() < 1e-9);
    }

    #[test]
    fn one_hot_stubs_have_bounded_ce() {
        let data = blobs();
        let hot = FnPredictor(|x: &[f64]| {
            let mut p = vec![0.0; 4];
            p[usize::from(x[0] > 0.0)] = 1.0;
            p
        });
        let r = agreement(&hot, &hot, &data).unwrap();
        assert_eq!(r.top1_agreement, 1.0);
        assert!(r.mean_cross_entropy <= -(1.0 - 3.0 * PROB_FLOOR).ln());
        assert!(data.subset(&[]).is_err());
    }

    #[test]
    fn dead_weight_fractions() {
        let mlp = Mlp::new(vec![3, 5, 2]).unwrap();
        assert_eq!(dead_weights(&mlp.param_template()), 1.0);
        assert_eq!(dead_weights(&mlp.init_params(&mut SeededRng::new(0))), 0.0);
        let a = ParamSet::new(vec![
            Segment::new("x", vec![2], vec![0.0, 1.0], true),
            Segment::new("y", vec![2], vec![0.0, 0.0], true),
        ])
        .unwrap();
        let b = ParamSet::new(vec![
            Segment::new("y", vec![2], vec![0.0, 0.0], true),
            Segment::new("x", vec![2], vec![0.0, 1.0], true),
        ])
        .unwrap();
        assert_eq!(dead_weights(&a), dead_weights(&b));
    }

    #[test]
    fn corruption_contract() {
        let data = blobs();
        let (same, rec) = corrupt_labels(&data, 0, 4, &mut SeededRng::new(1)).unwrap();
        assert_eq!(same, data);
        assert!(rec.indices.is_empty());

        let (c1, r1) = corrupt_labels(&data, 10, 4, &mut SeededRng::new(9)).unwrap();
        let (c2, r2) = corrupt_labels(&data, 10, 4, &mut SeededRng::new(9)).unwrap();
        assert_eq!((c1.clone(), r1.clone()), (c2, r2));
        for ((i, o), r) in r1.indices.iter().zip(&r1.original).zip(&r1.replacement) {
            assert_ne!(o, r);
            assert_eq!(c1.label(*i), *r);
            assert_eq!(data.label(*i), *o);
        }
        assert!(corrupt_labels(&data, 10, 1, &mut SeededRng::new(1)).is_err());
        assert!(corrupt_labels(&data, 41, 4, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn memorization_stubs() {
        let record = CorruptionRecord {
            indices: vec![0, 1, 2],
            original: vec![0, 1, 2],
            replacement: vec![1, 2, 0],
            seed: 0,
        };
        let truthful = EpochPredictions {
            epoch: 0,
            phase: PhaseKind::Compressed,
            predictions: vec![0, 1, 2],
        };
        let r = memorization_track(&[truthful], &record).unwrap();
        assert_eq!((r.points[0].acc_true, r.points[0].acc_corrupted), (1.0, 0.0));
        assert!(memorization_track(&[], &record).is_err());
    }

    #[test]
    fn memorization_uniform_model_at_chance() {
        // a constant model predicting class 0 hits each label type at its frequency
        let data = gaussian_blobs(
            &BlobSpec {
                features: 2,
                classes: 4,
                samples: 4000,
                spread: 1.0,
                center_scale: 1.0,
            },
            &mut SeededRng::new(5),
        )
        .unwrap();
        let (_, rec) = corrupt_labels(&data, 2000, 4, &mut SeededRng::new(6)).unwrap();
        let mlp = Mlp::new(vec![2, 4]).unwrap();
        let zero = mlp.param_template();
        let preds = rec.indices.iter().map(|&i| mlp.predict(&zero, data.x(i)).unwrap()).collect();
        let r = memorization_track(
            &[EpochPredictions {
                epoch: 0,
                phase: PhaseKind::Decompressed,
                predictions: preds,
            }],
            &rec,
        )
        .unwrap();
        let p = r.points[0];
        assert!((p.acc_true - 0.25).abs() < 0.04, "{p:?}");
        assert!((p.acc_corrupted - 0.25).abs() < 0.04, "{p:?}");
        assert!(p.acc_true + p.acc_corrupted <= 1.0);
    }
}
