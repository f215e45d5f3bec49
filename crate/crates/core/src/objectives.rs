//! Objectives with exact full-batch and mini-batch gradient oracles, and
//! sampling estimators for the landscape constants IHT step sizes depend on.
//!
//! Per-sample losses are scaled so that `f` is the *mean* over samples;
//! a uniformly drawn mini-batch gradient is then an unbiased estimate of
//! `∇f`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::numeric::{dot, norm_sq, Matrix, ParamSet, Segment, SeededRng, Vector};
use crate::par::{self, Exec};
use crate::sparsity::{mask_in_place, Mask};

/// Samples per work unit in batched gradient reductions. Fixed so the
/// summation order never depends on the thread count.
pub const GRAD_CHUNK: usize = 64;

pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn sample_count(&self) -> usize;

    fn value(&self, theta: &[f64]) -> Result<f64>;

    fn gradient(&self, theta: &[f64]) -> Result<Vector>;

    /// Mean of the per-sample gradients over `batch`.
    fn stochastic_gradient(&self, theta: &[f64], batch: &[usize]) -> Result<Vector>;

    /// `f*`, when known analytically.
    fn optimum_value(&self) -> Option<f64> {
        None
    }
}

fn check_batch(batch: &[usize], samples: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    if let Some(i) = batch.iter().find(|i| **i >= samples) {
        return Err(Error::invalid("batch", format!("index {i} out of range for {samples} samples")));
    }
    Ok(())
}

fn finite(v: Vector, what: &'static str) -> Result<Vector> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

fn finite_scalar(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `f(θ) = ‖b − Aθ‖²`, decomposed as the mean of `m·(bᵢ − Aᵢθ)²`.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    a: Matrix,
    b: Vector,
    optimum: Option<f64>,
}

impl LeastSquares {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        check_len(a.rows(), b.len())?;
        Ok(LeastSquares { a, b, optimum: None })
    }

    pub fn with_optimum(mut self, f_star: f64) -> Self {
        self.optimum = Some(f_star);
        self
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// `b − Aθ`
    pub fn residual(&self, theta: &[f64]) -> Result<Vector> {
        let ax = self.a.matvec(theta)?;
        Ok(self.b.sub(&ax))
    }

    pub fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vector)> {
        let r = self.residual(theta)?;
        let value = finite_scalar(r.norm_sq(), "LeastSquares::value")?;
        let grad = self.a.t_matvec(&r)?.scaled(-2.0);
        Ok((value, finite(grad, "LeastSquares::gradient")?))
    }
}

impl Objective for LeastSquares {
    fn dim(&self) -> usize {
        self.a.cols()
    }

    fn sample_count(&self) -> usize {
        self.a.rows()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        finite_scalar(self.residual(theta)?.norm_sq(), "LeastSquares::value")
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vector> {
        Ok(self.value_grad(theta)?.1)
    }

    fn stochastic_gradient(&self, theta: &[f64], batch: &[usize]) -> Result<Vector> {
        check_len(self.dim(), theta.len())?;
        check_batch(batch, self.sample_count())?;
        let mut g = Vector::zeros(self.dim());
        for &i in batch {
            let row = self.a.row(i);
            let r = self.b[i] - dot(row, theta);
            g.axpy(r, row);
        }
        let scale = -2.0 * self.sample_count() as f64 / batch.len() as f64;
        finite(g.scaled(scale), "LeastSquares::stochastic_gradient")
    }

    fn optimum_value(&self) -> Option<f64> {
        self.optimum
    }
}

/// `f(θ) = cᵀθ` with a single sample.
#[derive(Clone, Debug)]
pub struct Linear {
    pub c: Vector,
}

impl Objective for Linear {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn sample_count(&self) -> usize {
        1
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.dim(), theta.len())?;
        Ok(dot(&self.c, theta))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vector> {
        check_len(self.dim(), theta.len())?;
        Ok(self.c.clone())
    }

    fn stochastic_gradient(&self, theta: &[f64], batch: &[usize]) -> Result<Vector> {
        check_batch(batch, 1)?;
        self.gradient(theta)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    let mut sum = 0.0;
    for x in z.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in z.iter_mut() {
        *x /= sum;
    }
}

/// `logsumexp(z) − z[y]`
fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - z[y]
}

/// Multinomial logistic regression with an L2 penalty on the weights.
///
/// Parameters are laid out as the `classes × features` weight matrix
/// (row-major) followed by the per-class biases.
#[derive(Clone, Debug)]
pub struct LogisticMulti {
    data: Dataset,
    l2: f64,
}

impl LogisticMulti {
    pub fn new(data: Dataset, l2: f64) -> Result<Self> {
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::invalid("l2", "must be finite and non-negative"));
        }
        Ok(LogisticMulti { data, l2 })
    }

    fn weights_len(&self) -> usize {
        self.data.classes() * self.data.feature_dim()
    }

    fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.data.feature_dim();
        let (w, b) = theta.split_at(self.weights_len());
        (0..self.data.classes())
            .map(|c| dot(&w[c * d..(c + 1) * d], x) + b[c])
            .collect()
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        0.5 * self.l2 * norm_sq(&theta[..self.weights_len()])
    }
}

impl Objective for LogisticMulti {
    fn dim(&self) -> usize {
        self.weights_len() + self.data.classes()
    }

    fn sample_count(&self) -> usize {
        self.data.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.dim(), theta.len())?;
        let n = self.data.len();
        let ce: f64 = (0..n)
            .map(|i| cross_entropy(&self.logits(theta, self.data.x(i)), self.data.label(i)))
            .sum();
        finite_scalar(ce / n as f64 + self.penalty(theta), "LogisticMulti::value")
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vector> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.stochastic_gradient(theta, &all)
    }

    fn stochastic_gradient(&self, theta: &[f64], batch: &[usize]) -> Result<Vector> {
        check_len(self.dim(), theta.len())?;
        check_batch(batch, self.sample_count())?;
        let d = self.data.feature_dim();
        let wl = self.weights_len();
        let mut g = Vector::zeros(self.dim());
        for &i in batch {
            let x = self.data.x(i);
            let mut p = self.logits(theta, x);
            softmax_in_place(&mut p);
            p[self.data.label(i)] -= 1.0;
            for (c, pc) in p.iter().enumerate() {
                for (gw, xj) in g[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *gw += pc * xj;
                }
                g[wl + c] += pc;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for (k, gk) in g.iter_mut().enumerate() {
            *gk *= inv;
            if k < wl {
                *gk += self.l2 * theta[k];
            }
        }
        finite(g, "LogisticMulti::gradient")
    }
}

/// Feed-forward ReLU network with a softmax cross-entropy head.
///
/// `widths = [inputs, hidden…, classes]`. Layer `l` owns a prunable
/// `layer{l}.weight` of shape `[out, in]` and a non-prunable
/// `layer{l}.bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
}

impl Mlp {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("widths", "need at least input and output widths, all positive"));
        }
        Ok(Mlp { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_template(&self) -> ParamSet {
        let mut segs = Vec::with_capacity(2 * self.layers());
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            segs.push(Segment::zeros(format!("layer{l}.weight"), vec![o, i], true));
            segs.push(Segment::zeros(format!("layer{l}.bias"), vec![o], false));
        }
        ParamSet::new(segs).expect("generated names are unique")
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamSet {
        let mut p = self.param_template();
        for (l, pair) in p.segments_mut().chunks_mut(2).enumerate() {
            let std = (2.0 / self.widths[l] as f64).sqrt();
            for w in pair[0].values.iter_mut() {
                *w = std * rng.normal();
            }
        }
        p
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.same_layout(&self.param_template()) {
            Ok(())
        } else {
            Err(Error::invalid("params", "layout does not match the network widths"))
        }
    }

    /// Pre-activations of every layer for one input; the last entry holds
    /// the logits.
    fn forward(&self, params: &ParamSet, x: &[f64]) -> Vec<Vec<f64>> {
        let segs = params.segments();
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let (w, b) = (&segs[2 * l].values, &segs[2 * l + 1].values);
            let input_dim = self.widths[l];
            let z: Vec<f64> = (0..self.widths[l + 1])
                .map(|o| {
                    let row = &w[o * input_dim..(o + 1) * input_dim];
                    let s = match zs.last() {
                        None => dot(row, x),
                        Some(prev) => row.iter().zip(prev).map(|(wi, zi)| wi * zi.max(0.0)).sum(),
                    };
                    s + b[o]
                })
                .collect();
            zs.push(z);
        }
        zs
    }

    pub fn logits(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        check_len(self.inputs(), x.len())?;
        Ok(self.forward(params, x).pop().unwrap())
    }

    pub fn predict_proba(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.logits(params, x)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Accumulates the summed loss and gradient of `batch` into `grad`.
    fn backprop_chunk(&self, params: &ParamSet, data: &Dataset, batch: &[usize]) -> (f64, Vec<f64>) {
        let segs = params.segments();
        let offsets: Vec<usize> = segs
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s.values.len();
                Some(o)
            })
            .collect();
        let mut grad = vec![0.0; params.total_len()];
        let mut loss = 0.0;
        for &i in batch {
            let x = data.x(i);
            let zs = self.forward(params, x);
            let logits = zs.last().unwrap();
            let y = data.label(i);
            loss += cross_entropy(logits, y);
            let mut delta = logits.clone();
            softmax_in_place(&mut delta);
            delta[y] -= 1.0;
            for l in (0..self.layers()).rev() {
                let input_dim = self.widths[l];
                let (wo, bo) = (offsets[2 * l], offsets[2 * l + 1]);
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    grad[bo + o] += d;
                    let g = &mut grad[wo + o * input_dim..wo + (o + 1) * input_dim];
                    if l == 0 {
                        for (gj, xj) in g.iter_mut().zip(x) {
                            *gj += d * xj;
                        }
                    } else {
                        for (gj, zj) in g.iter_mut().zip(&zs[l - 1]) {
                            *gj += d * zj.max(0.0);
                        }
                    }
                }
                if l > 0 {
                    let w = &segs[2 * l].values;
                    let prev = &zs[l - 1];
                    // ReLU subgradient at 0 is taken as 0.
                    delta = (0..input_dim)
                        .map(|j| {
                            if prev[j] > 0.0 {
                                delta.iter().enumerate().map(|(o, d)| d * w[o * input_dim + j]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        (loss, grad)
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn value_grad(&self, params: &ParamSet, data: &Dataset, batch: &[usize]) -> Result<(f64, ParamSet)> {
        self.value_grad_exec(Exec::default(), params, data, batch)
    }

    pub fn value_grad_exec(
        &self,
        exec: Exec,
        params: &ParamSet,
        data: &Dataset,
        batch: &[usize],
    ) -> Result<(f64, ParamSet)> {
        self.check_params(params)?;
        check_len(self.inputs(), data.feature_dim())?;
        if data.classes() != self.classes() {
            return Err(Error::invalid("data", "class count does not match the output width"));
        }
        check_batch(batch, data.len())?;
        let parts = par::map_chunks(exec, batch, GRAD_CHUNK, |chunk| self.backprop_chunk(params, data, chunk));
        let mut loss = 0.0;
        let mut flat = vec![0.0; params.total_len()];
        for (l, g) in parts {
            loss += l;
            for (a, b) in flat.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        flat.iter_mut().for_each(|g| *g *= inv);
        let mut grad = params.zeros_like();
        grad.scatter_all(&flat)?;
        let loss = finite_scalar(loss * inv, "Mlp::value")?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("Mlp::gradient"));
        }
        Ok((loss, grad))
    }

    pub fn value(&self, params: &ParamSet, data: &Dataset) -> Result<f64> {
        let all: Vec<usize> = (0..data.len()).collect();
        self.check_params(params)?;
        let parts = par::map_chunks(Exec::default(), &all, GRAD_CHUNK, |chunk| {
            chunk
                .iter()
                .map(|&i| cross_entropy(self.forward(params, data.x(i)).last().unwrap(), data.label(i)))
                .sum::<f64>()
        });
        finite_scalar(parts.into_iter().sum::<f64>() / data.len() as f64, "Mlp::value")
    }

    /// Argmax prediction, ties to the lowest class index.
    pub fn predict(&self, params: &ParamSet, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(params, x)?))
    }

    pub fn predict_all(&self, params: &ParamSet, data: &Dataset) -> Result<Vec<usize>> {
        self.check_params(params)?;
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(par::map_slice(Exec::default(), &all, |&i| {
            argmax(self.forward(params, data.x(i)).last().unwrap())
        }))
    }

    pub fn accuracy(&self, params: &ParamSet, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("data", "empty dataset"));
        }
        let preds = self.predict_all(params, data)?;
        let hits = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// An [`Mlp`] bound to a dataset, exposed as an [`Objective`] over the
/// concatenation of all parameter segments.
#[derive(Clone, Debug)]
pub struct MlpObjective {
    model: Mlp,
    data: Dataset,
    template: ParamSet,
}

impl MlpObjective {
    pub fn new(model: Mlp, data: Dataset) -> Self {
        let template = model.param_template();
        MlpObjective { model, data, template }
    }

    pub fn params_from_flat(&self, theta: &[f64]) -> Result<ParamSet> {
        let mut p = self.template.clone();
        p.scatter_all(theta)?;
        Ok(p)
    }
}

impl Objective for MlpObjective {
    fn dim(&self) -> usize {
        self.template.total_len()
    }

    fn sample_count(&self) -> usize {
        self.data.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.model.value(&self.params_from_flat(theta)?, &self.data)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vector> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.stochastic_gradient(theta, &all)
    }

    fn stochastic_gradient(&self, theta: &[f64], batch: &[usize]) -> Result<Vector> {
        let p = self.params_from_flat(theta)?;
        Ok(self.model.value_grad(&p, &self.data, batch)?.1.flatten_all())
    }
}

/// Mini-batch gradient restricted to the support of `mask`; coordinates
/// off the mask are exactly zero.
pub fn restricted_gradient(obj: &dyn Objective, theta: &[f64], mask: &Mask, batch: &[usize]) -> Result<Vector> {
    check_len(obj.dim(), mask.len())?;
    let mut g = obj.stochastic_gradient(theta, batch)?;
    mask_in_place(&mut g, mask)?;
    Ok(g)
}

/// Which reading of the concentrated PL inequality to certify.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CplNorm {
    /// `‖T_r(∇f)‖² ≥ (α/2)(f − f*)`
    #[default]
    Squared,
    /// `‖T_r(∇f)‖ ≥ (α/2)(f − f*)`
    Unsquared,
}

/// Squared norm of the `r` largest-magnitude entries.
pub fn top_r_norm_sq(g: &[f64], r: usize) -> f64 {
    let mut sq: Vec<f64> = g.iter().map(|x| x * x).collect();
    let r = r.min(sq.len());
    if r == 0 {
        return 0.0;
    }
    if r < sq.len() {
        sq.select_nth_unstable_by(r - 1, |a, b| b.total_cmp(a));
    }
    sq[..r].iter().sum()
}

/// Largest `α` for which the `r`-concentrated PL inequality holds at `θ`.
pub fn cpl_estimate(obj: &dyn Objective, theta: &[f64], r: usize, f_star: f64, norm: CplNorm) -> Result<f64> {
    if r == 0 || r > obj.dim() {
        return Err(Error::invalid("r", format!("need 1 <= r <= {}, got {r}", obj.dim())));
    }
    let gap = obj.value(theta)? - f_star;
    if gap <= 0.0 {
        return Err(Error::invalid("theta", "f(θ) must exceed f* for the CPL ratio"));
    }
    let g = obj.gradient(theta)?;
    let top = top_r_norm_sq(&g, r);
    let lhs = match norm {
        CplNorm::Squared => top,
        CplNorm::Unsquared => top.sqrt(),
    };
    finite_scalar(2.0 * lhs / gap, "cpl_estimate")
}

/// Empirical restricted smoothness: the largest
/// `‖∇f(θ+δ) − ∇f(θ)‖ / ‖δ‖` over `trials` unit-norm `t`-sparse `δ`.
///
/// Supports are taken as consecutive windows of a random permutation, so
/// `⌈dim / t⌉` trials touch every coordinate.
pub fn smoothness_estimate(obj: &dyn Objective, theta: &[f64], t: usize, trials: usize, rng: &mut SeededRng) -> Result<f64> {
    let dim = obj.dim();
    if t == 0 || t > dim {
        return Err(Error::invalid("t", format!("need 1 <= t <= {dim}, got {t}")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    check_len(dim, theta.len())?;
    let g0 = obj.gradient(theta)?;
    let mut perm = rng.permutation(dim);
    let mut cursor = 0;
    let mut best = 0.0f64;
    for _ in 0..trials {
        if cursor + t > dim {
            perm = rng.permutation(dim);
            cursor = 0;
        }
        let support = &perm[cursor..cursor + t];
        cursor += t;
        let mut delta = vec![0.0; dim];
        for &i in support {
            delta[i] = rng.normal();
        }
        let n = norm_sq(&delta).sqrt();
        if n == 0.0 {
            continue;
        }
        delta.iter_mut().for_each(|d| *d /= n);
        let shifted: Vec<f64> = theta.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let g1 = obj.gradient(&shifted)?;
        // ‖δ‖ recomputed from the realised shift
        let dn = shifted.iter().zip(theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        best = best.max(g1.sub(&g0).norm() / dn);
    }
    finite_scalar(best, "smoothness_estimate")
}

/// Largest gradient norm over `trials` points drawn by `sampler`.
pub fn lipschitz_estimate<F>(obj: &dyn Objective, mut sampler: F, trials: usize, rng: &mut SeededRng) -> Result<f64>
where
    F: FnMut(&mut SeededRng) -> Vector,
{
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    let mut best = 0.0f64;
    for _ in 0..trials {
        let theta = sampler(rng);
        best = best.max(obj.gradient(&theta)?.norm());
    }
    finite_scalar(best, "lipschitz_estimate")
}

/// Uniform sampler over the box `[-radius, radius]^dim`.
pub fn box_sampler(dim: usize, radius: f64) -> impl FnMut(&mut SeededRng) -> Vector {
    move |rng| (0..dim).map(|_| radius * (2.0 * rng.uniform() - 1.0)).collect()
}

/// Exact `E‖gᵢ − ∇f‖²` over single-sample gradients.
pub fn per_sample_variance(obj: &dyn Objective, theta: &[f64]) -> Result<f64> {
    let g = obj.gradient(theta)?;
    let n = obj.sample_count();
    let parts = par::map_range(Exec::default(), n, |i| {
        obj.stochastic_gradient(theta, &[i]).map(|gi| gi.sub(&g).norm_sq())
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / n as f64)
}

/// Monte-Carlo estimate of `E‖g_B − ∇f‖²` for uniformly drawn batches
/// (without replacement within a batch).
pub fn sigma2_estimate(obj: &dyn Objective, theta: &[f64], batch_size: usize, trials: usize, rng: &mut SeededRng) -> Result<f64> {
    let n = obj.sample_count();
    if batch_size == 0 || batch_size > n || trials == 0 {
        return Err(Error::invalid("batch_size", "need 1 <= batch_size <= samples and trials >= 1"));
    }
    let g = obj.gradient(theta)?;
    let mut total = 0.0;
    for _ in 0..trials {
        let batch = rng.sample_indices(n, batch_size);
        total += obj.stochastic_gradient(theta, &batch)?.sub(&g).norm_sq();
    }
    Ok(total / trials as f64)
}

/// Landscape constants measured at a point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeEstimates {
    pub beta_hat: f64,
    pub alpha_hat: f64,
    pub sigma2_hat: f64,
    pub lipschitz_hat: f64,
}

impl LandscapeEstimates {
    /// `β̂ / α̂`
    pub fn kappa(&self) -> f64 {
        self.beta_hat / self.alpha_hat
    }

    /// Target sparsity `k*·(multiplier·κ² + 1)` implied by the convergence
    /// analysis; `multiplier` is 96 for deterministic and 384 for stochastic
    /// IHT.
    pub fn implied_sparsity(&self, k_star: usize, multiplier: f64) -> f64 {
        k_star as f64 * (multiplier * self.kappa().powi(2) + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian_matrix;

    fn toy_ls() -> LeastSquares {
        LeastSquares::new(Matrix::identity(2), vec![1.0, 2.0].into()).unwrap()
    }

    #[test]
    fn least_squares_hand_values() {
        let (v, g) = toy_ls().value_grad(&[0.0, 0.0]).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.as_slice(), &[-2.0, -4.0]);
        let (v, g) = toy_ls().value_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        assert!(toy_ls().value(&[1.0]).is_err());
    }

    #[test]
    fn stochastic_full_batch_matches_gradient() {
        let mut rng = SeededRng::new(3);
        let a = gaussian_matrix(20, 50, 1.0, &mut rng).unwrap();
        let b: Vector = (0..20).map(|_| rng.normal()).collect();
        let obj = LeastSquares::new(a, b).unwrap();
        let theta: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let all: Vec<usize> = (0..20).collect();
        let g = obj.gradient(&theta).unwrap();
        let s = obj.stochastic_gradient(&theta, &all).unwrap();
        assert!(s.sub(&g).norm() <= 1e-12 * g.norm());
        assert!(obj.stochastic_gradient(&theta, &[]).is_err());
        assert!(obj.stochastic_gradient(&theta, &[20]).is_err());
    }

    #[test]
    fn restricted_gradient_edges() {
        let obj = toy_ls();
        let theta = [0.0, 0.0];
        let full = obj.stochastic_gradient(&theta, &[0, 1]).unwrap();
        assert_eq!(restricted_gradient(&obj, &theta, &Mask::ones(2), &[0, 1]).unwrap(), full);
        assert_eq!(
            restricted_gradient(&obj, &theta, &Mask::zeros(2), &[0, 1]).unwrap().as_slice(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn cpl_on_isotropic_quadratic_is_eight() {
        let theta_star = vec![1.0, -2.0, 0.5];
        let obj = LeastSquares::new(Matrix::identity(3), theta_star.clone().into()).unwrap();
        for theta in [[0.0, 0.0, 0.0], [3.0, 1.0, -1.0]] {
            let a = cpl_estimate(&obj, &theta, 3, 0.0, CplNorm::Squared).unwrap();
            assert!((a - 8.0).abs() < 1e-12, "{a}");
        }
        // deviation on a single coordinate: r = 1 suffices
        let theta = [1.0, -2.0, 4.0];
        let a = cpl_estimate(&obj, &theta, 1, 0.0, CplNorm::Squared).unwrap();
        assert!((a - 8.0).abs() < 1e-12);
        assert!(cpl_estimate(&obj, &theta_star, 1, 0.0, CplNorm::Squared).is_err());
        assert!(cpl_estimate(&obj, &theta, 0, 0.0, CplNorm::Squared).is_err());
    }

    #[test]
    fn cpl_unsquared_reading() {
        let obj = LeastSquares::new(Matrix::identity(1), vec![1.0].into()).unwrap();
        // f(0) = 1, ∇f = -2, ‖∇f‖ = 2 → α = 2·2/1
        assert_eq!(cpl_estimate(&obj, &[0.0], 1, 0.0, CplNorm::Unsquared).unwrap(), 4.0);
        assert_eq!(cpl_estimate(&obj, &[0.0], 1, 0.0, CplNorm::Squared).unwrap(), 8.0);
    }

    #[test]
    fn smoothness_on_identity_is_two() {
        let mut rng = SeededRng::new(1);
        let obj = LeastSquares::new(Matrix::identity(6), (0..6).map(|i| i as f64).collect()).unwrap();
        for t in 1..=6 {
            let b = smoothness_estimate(&obj, &[0.3; 6], t, 5, &mut rng).unwrap();
            assert!((b - 2.0).abs() < 1e-12, "t={t}: {b}");
        }
    }

    #[test]
    fn smoothness_single_coordinate_on_diagonal() {
        let diag = [0.5, -3.0, 1.5, 2.0];
        let obj = LeastSquares::new(Matrix::from_diag(&diag), vec![0.0; 4].into()).unwrap();
        let b = smoothness_estimate(&obj, &[1.0; 4], 1, 4, &mut SeededRng::new(9)).unwrap();
        assert!((b - 2.0 * 9.0).abs() < 1e-12, "{b}");
    }

    #[test]
    fn lipschitz_linear_and_zero() {
        let c: Vector = vec![3.0, 4.0].into();
        let lin = Linear { c };
        let mut rng = SeededRng::new(0);
        assert_eq!(lipschitz_estimate(&lin, box_sampler(2, 1.0), 10, &mut rng).unwrap(), 5.0);
        let zero = Linear { c: Vector::zeros(3) };
        assert_eq!(lipschitz_estimate(&zero, box_sampler(3, 1.0), 10, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn mlp_zero_weights_give_log_c() {
        let mlp = Mlp::new(vec![3, 5, 4]).unwrap();
        let data = crate::data::gaussian_blobs(
            &crate::data::BlobSpec {
                features: 3,
                classes: 4,
                samples: 12,
                spread: 1.0,
                center_scale: 1.0,
            },
            &mut SeededRng::new(2),
        )
        .unwrap();
        let p = mlp.param_template();
        let all: Vec<usize> = (0..12).collect();
        let (loss, _) = mlp.value_grad(&p, &data, &all).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mlp_rejects_wrong_layout() {
        let mlp = Mlp::new(vec![2, 3]).unwrap();
        let other = Mlp::new(vec![2, 4]).unwrap().param_template();
        assert!(mlp.logits(&other, &[0.0, 0.0]).is_err());
        assert!(Mlp::new(vec![3]).is_err());
    }

    #[test]
    fn top_r_norm() {
        assert_eq!(top_r_norm_sq(&[1.0, -3.0, 2.0], 2), 13.0);
        assert_eq!(top_r_norm_sq(&[1.0, -3.0, 2.0], 5), 14.0);
    }
}
