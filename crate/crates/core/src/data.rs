//! Labelled classification datasets and the synthetic Gaussian-blob generator.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numeric::{Matrix, SeededRng};

/// Samples × features matrix with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        check_len(features.rows(), labels.len())?;
        if classes == 0 {
            return Err(Error::invalid("classes", "must be positive"));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::invalid("labels", format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copy with the given labels replaced; shapes unchanged.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(self.features.clone(), labels, self.classes)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let cols = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        let features = Matrix::new(indices.len(), cols, data)?;
        Dataset::new(features, indices.iter().map(|&i| self.labels[i]).collect(), self.classes)
    }

    /// Random split into `(train, eval)` with `eval_fraction` of the samples
    /// held out.
    pub fn split(&self, eval_fraction: f64, rng: &mut SeededRng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::invalid("eval_fraction", "must lie in [0, 1)"));
        }
        let perm = rng.permutation(self.len());
        let n_eval = (eval_fraction * self.len() as f64).round() as usize;
        let (eval, train) = perm.split_at(n_eval);
        Ok((self.subset(train)?, self.subset(eval)?))
    }
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub features: usize,
    pub classes: usize,
    pub samples: usize,
    /// Standard deviation of each cluster around its centre.
    pub spread: f64,
    /// Standard deviation of the centre coordinates.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
}

fn default_center_scale() -> f64 {
    1.0
}

/// Draws class centres `N(0, center_scale²)`, then assigns labels round-robin
/// and adds `N(0, spread²)` noise to each sample.
pub fn gaussian_blobs(spec: &BlobSpec, rng: &mut SeededRng) -> Result<Dataset> {
    if spec.features == 0 || spec.samples == 0 {
        return Err(Error::invalid("blobs", "features and samples must be positive"));
    }
    if spec.classes < 2 {
        return Err(Error::invalid("classes", "need at least two classes"));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::invalid("spread", "must be finite and non-negative"));
    }
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.features).map(|_| spec.center_scale * rng.normal()).collect())
        .collect();
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(spec.samples * spec.features);
    for &y in &labels {
        for c in &centers[y] {
            data.push(c + spec.spread * rng.normal());
        }
    }
    Dataset::new(Matrix::new(spec.samples, spec.features, data)?, labels, spec.classes)
}
