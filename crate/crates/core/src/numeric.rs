//! Dense 64-bit vectors and matrices, named parameter sets and the seeded
//! generator every experiment draws from.

use std::collections::HashSet;
use std::ops::{Deref, DerefMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Fixed-length vector of reals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn nnz(&self) -> usize {
        self.0.iter().filter(|x| **x != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        assert_eq!(self.len(), other.len(), "axpy length mismatch");
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        assert_eq!(self.len(), other.len(), "sub length mismatch");
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|x| alpha * x).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("shape", "matrix dimensions must be positive"));
        }
        check_len(rows * cols, data.len())?;
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        check_len(self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `Aᵀ y`
    pub fn t_matvec(&self, y: &[f64]) -> Result<Vector> {
        check_len(self.rows, y.len())?;
        let mut out = Vector::zeros(self.cols);
        for (i, yi) in y.iter().enumerate() {
            if *yi != 0.0 {
                out.axpy(*yi, self.row(i));
            }
        }
        Ok(out)
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, j).powi(2)).sum::<f64>().sqrt()
    }
}

/// Draws a `rows × cols` matrix with i.i.d. `N(0, scale²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("shape", "rows and cols must be at least 1"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("scale", format!("must be positive, got {scale}")));
    }
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::new(rows, cols, data)
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vector,
    pub prunable: bool,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>, prunable: bool) -> Self {
        Segment {
            name: name.into(),
            shape,
            values: values.into(),
            prunable,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, prunable: bool) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n], prunable)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Location of one prunable segment inside the flat prunable view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub segment: usize,
    pub start: usize,
    pub len: usize,
}

/// Index map between the flat prunable view and `(segment, offset)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunableLayout {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl PrunableLayout {
    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Maps a flat prunable index to `(segment index, offset in segment)`.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        if flat >= self.len {
            return None;
        }
        let pos = self.entries.partition_point(|e| e.start + e.len <= flat);
        let e = self.entries[pos];
        Some((e.segment, flat - e.start))
    }

    /// Inverse of [`locate`](Self::locate).
    pub fn flat_index(&self, segment: usize, offset: usize) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.segment == segment)
            .filter(|e| offset < e.len)
            .map(|e| e.start + offset)
    }
}

/// Ordered collection of named parameter segments.
///
/// Weights are prunable; biases are conventionally not. Sparsity is always
/// measured over the prunable coordinates only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    segments: Vec<Segment>,
}

impl ParamSet {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &segments {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::invalid("segments", format!("duplicate segment name `{}`", s.name)));
            }
            check_len(s.numel(), s.values.len())?;
        }
        Ok(ParamSet { segments })
    }

    /// A single prunable segment holding `v`; lets flat vectors reuse the
    /// pattern machinery.
    pub fn single(v: &[f64]) -> Self {
        ParamSet {
            segments: vec![Segment::new("theta", vec![v.len()], v.to_vec(), true)],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.segments.iter().filter(|s| s.prunable).map(|s| s.values.len()).sum()
    }

    pub fn layout(&self) -> PrunableLayout {
        let mut entries = Vec::new();
        let mut start = 0;
        for (i, s) in self.segments.iter().enumerate().filter(|(_, s)| s.prunable) {
            entries.push(LayoutEntry {
                segment: i,
                start,
                len: s.values.len(),
            });
            start += s.values.len();
        }
        PrunableLayout { entries, len: start }
    }

    /// Concatenates the prunable segments in declaration order.
    pub fn flatten_prunable(&self) -> (Vector, PrunableLayout) {
        let v = self
            .segments
            .iter()
            .filter(|s| s.prunable)
            .flat_map(|s| s.values.iter().copied())
            .collect();
        (v, self.layout())
    }

    /// Writes a flat prunable view back into the segments.
    pub fn scatter_prunable(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.prunable_count(), flat.len())?;
        let mut off = 0;
        for s in self.segments.iter_mut().filter(|s| s.prunable) {
            let n = s.values.len();
            s.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Concatenation of every segment, prunable or not.
    pub fn flatten_all(&self) -> Vector {
        self.segments.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub fn scatter_all(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.total_len(), flat.len())?;
        let mut off = 0;
        for s in &mut self.segments {
            let n = s.values.len();
            s.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            segments: self
                .segments
                .iter()
                .map(|s| Segment::zeros(s.name.clone(), s.shape.clone(), s.prunable))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.prunable == b.prunable)
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|s| s.values.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.segments.iter().map(|s| s.values.norm_sq()).sum()
    }

    /// Number of nonzero prunable coordinates.
    pub fn prunable_nnz(&self) -> usize {
        self.segments.iter().filter(|s| s.prunable).map(|s| s.values.nnz()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for s in &mut self.segments {
            s.values.iter_mut().for_each(|x| *x = value);
        }
    }
}

/// Name of the generator behind [`SeededRng`], recorded in checkpoints.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded ChaCha8 stream. Identical seed and call sequence give identical
/// draws on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        SeededRng { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `count` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, count).into_vec()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
