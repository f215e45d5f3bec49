//! Iterative hard thresholding: deterministic and stochastic variants, the
//! support-polishing refinement, and trajectory instrumentation.

use std::io::Write;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numeric::{gaussian_matrix, Matrix, ParamSet, SeededRng, Vector};
use crate::objectives::{smoothness_estimate, LeastSquares, Objective};
use crate::sparsity::{apply_mask, mask_in_place, Mask, SparsityPattern};

/// Multiplier applied to `β̂` before forming the step size, so that the
/// sampled under-estimate does not push `η` past its theoretical value.
pub const BETA_SAFETY: f64 = 1.1;

const STOP_WINDOW: usize = 10;
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Fixed(f64),
    /// `1/β̂` for deterministic and `1/(2β̂)` for stochastic IHT.
    Auto,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchScheme {
    /// Reshuffled partition of the samples every epoch.
    #[default]
    ShuffledPartition,
    /// Independent uniform draws with replacement.
    WithReplacement,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IhtMode {
    Deterministic,
    Stochastic {
        batch_size: usize,
        #[serde(default)]
        scheme: BatchScheme,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolishConfig {
    pub eps: f64,
    pub max_inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IhtConfig {
    pub step: StepSize,
    pub pattern: SparsityPattern,
    pub max_iters: usize,
    /// Relative f-decrease over a 10-iteration window below which the run
    /// stops. Non-positive disables early stopping.
    #[serde(default)]
    pub stop_tol: f64,
    pub mode: IhtMode,
    #[serde(default)]
    pub polish: Option<PolishConfig>,
    /// Random directions used when estimating `β̂` for [`StepSize::Auto`].
    #[serde(default = "default_smoothness_trials")]
    pub smoothness_trials: usize,
}

fn default_smoothness_trials() -> usize {
    50
}

impl IhtConfig {
    pub fn deterministic(pattern: SparsityPattern, max_iters: usize) -> Self {
        IhtConfig {
            step: StepSize::Auto,
            pattern,
            max_iters,
            stop_tol: 0.0,
            mode: IhtMode::Deterministic,
            polish: None,
            smoothness_trials: default_smoothness_trials(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StepSize::Fixed(eta) = self.step {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid("step_size", format!("must be positive, got {eta}")));
            }
        }
        if let IhtMode::Stochastic { batch_size: 0, .. } = self.mode {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.smoothness_trials == 0 {
            return Err(Error::invalid("smoothness_trials", "must be at least 1"));
        }
        if let Some(p) = &self.polish {
            if !(p.eps > 0.0) {
                return Err(Error::invalid("polish.eps", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub f: f64,
    pub grad_norm: f64,
    pub support_hash: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist_to_star: Option<f64>,
    /// Running maximum of `‖θ‖∞` over the iterates so far.
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<IterRecord>,
    pub step_size: f64,
    pub beta_hat: Option<f64>,
    pub theta: Vector,
    pub stopped_early: bool,
    pub polish: Option<PolishResult>,
}

impl Trajectory {
    pub fn final_value(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.f)
    }

    /// One JSON object per iteration.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }
}

/// One IHT update `T(θ − η g)` under `pattern`; also returns the mask.
pub fn iht_step_with_mask(theta: &[f64], g: &[f64], eta: f64, pattern: &SparsityPattern) -> Result<(Vector, Mask)> {
    check_len(theta.len(), g.len())?;
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", "step size must be positive"));
    }
    let moved: Vector = theta.iter().zip(g).map(|(t, gi)| t - eta * gi).collect();
    if !moved.is_finite() {
        return Err(Error::NonFinite("iht_step"));
    }
    let mask = pattern.mask_for_vector(&moved)?;
    Ok((apply_mask(&moved, &mask)?, mask))
}

pub fn iht_step(theta: &[f64], g: &[f64], eta: f64, pattern: &SparsityPattern) -> Result<Vector> {
    Ok(iht_step_with_mask(theta, g, eta, pattern)?.0)
}

struct BatchSampler {
    n: usize,
    batch: usize,
    scheme: BatchScheme,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, scheme: BatchScheme) -> Self {
        BatchSampler {
            n,
            batch: batch.min(n),
            scheme,
            perm: Vec::new(),
            cursor: n,
        }
    }

    fn next(&mut self, rng: &mut SeededRng) -> Vec<usize> {
        match self.scheme {
            BatchScheme::WithReplacement => (0..self.batch).map(|_| rng.below(self.n)).collect(),
            BatchScheme::ShuffledPartition => {
                if self.cursor >= self.n {
                    self.perm = rng.permutation(self.n);
                    self.cursor = 0;
                }
                let end = (self.cursor + self.batch).min(self.n);
                let out = self.perm[self.cursor..end].to_vec();
                self.cursor = end;
                out
            }
        }
    }
}

/// Runs IHT from `theta0`. When `theta_star` is given, the distance to it
/// is recorded at every iteration.
pub fn run_iht(
    obj: &dyn Objective,
    cfg: &IhtConfig,
    theta0: &[f64],
    theta_star: Option<&[f64]>,
    rng: &mut SeededRng,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_len(obj.dim(), theta0.len())?;
    if let Some(s) = theta_star {
        check_len(obj.dim(), s.len())?;
    }
    let k = cfg.pattern.expected_popcount(&ParamSet::single(theta0))?;

    let (eta, beta_hat) = match cfg.step {
        StepSize::Fixed(eta) => (eta, None),
        StepSize::Auto => {
            let t = (3 * k).clamp(1, obj.dim());
            let beta = BETA_SAFETY * smoothness_estimate(obj, theta0, t, cfg.smoothness_trials, rng)?;
            if beta <= 0.0 {
                return Err(Error::invalid("step_size", "estimated smoothness is zero; pass a fixed step"));
            }
            let eta = match cfg.mode {
                IhtMode::Deterministic => 1.0 / beta,
                IhtMode::Stochastic { .. } => 1.0 / (2.0 * beta),
            };
            debug!("auto step: beta_hat = {beta:.6e} (t = {t}), eta = {eta:.6e}");
            (eta, Some(beta))
        }
    };

    let mut sampler = match cfg.mode {
        IhtMode::Stochastic { batch_size, scheme } => Some(BatchSampler::new(obj.sample_count(), batch_size, scheme)),
        IhtMode::Deterministic => None,
    };

    let mut theta = Vector::from(theta0.to_vec());
    let mut grad = obj.gradient(&theta)?;
    let f0 = obj.value(&theta)?;
    let limit = DIVERGENCE_FACTOR * f0.abs().max(f64::MIN_POSITIVE);
    let mut max_abs = theta.norm_inf();
    let mut mask = Mask::support_of(&theta);

    let record = |iteration: usize, f: f64, grad: &Vector, mask: &Mask, theta: &Vector, max_abs: f64| IterRecord {
        iteration,
        f,
        grad_norm: grad.norm(),
        support_hash: mask.fingerprint(),
        dist_to_star: theta_star.map(|s| theta.sub(s).norm()),
        max_abs,
    };

    let mut records = Vec::with_capacity(cfg.max_iters + 1);
    records.push(record(0, f0, &grad, &mask, &theta, max_abs));
    let mut stopped_early = false;

    for t in 1..=cfg.max_iters {
        let step_grad = match sampler.as_mut() {
            None => grad.clone(),
            Some(s) => {
                let batch = s.next(rng);
                obj.stochastic_gradient(&theta, &batch)?
            }
        };
        let (next, next_mask) = iht_step_with_mask(&theta, &step_grad, eta, &cfg.pattern)?;
        theta = next;
        mask = next_mask;
        let f = obj.value(&theta)?;
        if f > limit {
            return Err(Error::Diverged {
                iteration: t,
                value: f,
                limit,
            });
        }
        grad = obj.gradient(&theta)?;
        max_abs = max_abs.max(theta.norm_inf());
        records.push(record(t, f, &grad, &mask, &theta, max_abs));

        if cfg.stop_tol > 0.0 && t >= STOP_WINDOW {
            let before = records[t - STOP_WINDOW].f;
            if before - f <= cfg.stop_tol * before.abs() {
                stopped_early = true;
                break;
            }
        }
    }

    let polish = match &cfg.polish {
        Some(p) => {
            let res = iht_polish(obj, &theta, &mask, p.eps, p.max_inner)?;
            theta = res.theta.clone();
            Some(res)
        }
        None => None,
    };

    Ok(Trajectory {
        records,
        step_size: eta,
        beta_hat,
        theta,
        stopped_early,
        polish,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolishResult {
    pub theta: Vector,
    pub inner_steps: usize,
    /// Whether `‖∇f(θ)_S‖∞ ≤ eps` was reached.
    pub converged: bool,
    pub grad_inf: f64,
    pub grad_l2: f64,
    pub step_size: f64,
    /// `f` before the first and after every inner step.
    pub f_history: Vec<f64>,
}

/// Largest eigenvalue of the Hessian restricted to the support of `mask`,
/// by power iteration on gradient differences.
fn support_smoothness(obj: &dyn Objective, theta: &[f64], mask: &Mask, iters: usize) -> Result<f64> {
    let g0 = obj.gradient(theta)?;
    let mut v: Vector = mask.bits().iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let mut norm = v.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        v.iter_mut().for_each(|x| *x /= norm);
        let shifted: Vec<f64> = theta.iter().zip(v.iter()).map(|(a, d)| a + d).collect();
        let mut hv = obj.gradient(&shifted)?.sub(&g0);
        mask_in_place(&mut hv, mask)?;
        norm = hv.norm();
        if norm == 0.0 {
            break;
        }
        lambda = norm;
        v = hv;
    }
    Ok(lambda)
}

/// Gradient descent over the support of `mask` until the restricted
/// gradient's `∞`-norm drops to `eps`. Never grows the support, and never
/// increases `f`: a step that would is halved until it does not.
pub fn iht_polish(obj: &dyn Objective, theta: &[f64], mask: &Mask, eps: f64, max_inner: usize) -> Result<PolishResult> {
    check_len(obj.dim(), theta.len())?;
    check_len(obj.dim(), mask.len())?;
    if theta.iter().zip(mask.bits()).any(|(x, b)| !*b && *x != 0.0) {
        return Err(Error::invalid("theta", "must be supported on the mask"));
    }
    let mut theta = Vector::from(theta.to_vec());
    let mut f = obj.value(&theta)?;
    let mut g = obj.gradient(&theta)?;
    mask_in_place(&mut g, mask)?;
    let mut f_history = vec![f];

    let beta = BETA_SAFETY * support_smoothness(obj, &theta, mask, 30)?;
    let eta = if beta > 0.0 { 1.0 / beta } else { 1.0 };
    let mut steps = 0;

    while g.norm_inf() > eps && steps < max_inner {
        // backtrack from the base step each time; near the optimum a
        // rejection is usually rounding noise in f rather than a bad step
        let mut accepted = None;
        let mut local = eta;
        for _ in 0..60 {
            let cand = theta.sub(&g.scaled(local));
            let fc = obj.value(&cand)?;
            if fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            local *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            // no descent at any representable step: numerically stationary
            break;
        };
        theta = cand;
        f = fc;
        g = obj.gradient(&theta)?;
        mask_in_place(&mut g, mask)?;
        f_history.push(f);
        steps += 1;
    }

    Ok(PolishResult {
        converged: g.norm_inf() <= eps,
        grad_inf: g.norm_inf(),
        grad_l2: g.norm(),
        theta,
        inner_steps: steps,
        step_size: eta,
        f_history,
    })
}

/// Per-iteration ratios `(f_{t+1} − f*) / (f_t − f*)`. A zero gap in the
/// denominator gives ratio 1.
pub fn contraction_rate(t: &Trajectory, f_star: f64) -> Result<Vec<f64>> {
    if t.records.is_empty() {
        return Err(Error::invalid("trajectory", "empty"));
    }
    Ok(t.records
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].f - f_star, w[1].f - f_star);
            if a <= 0.0 {
                1.0
            } else {
                (b / a).max(0.0)
            }
        })
        .collect())
}

/// Geometric mean of ratios; zero ratios are floored at `1e-300`.
pub fn geometric_mean(ratios: &[f64]) -> f64 {
    if ratios.is_empty() {
        return f64::NAN;
    }
    let s: f64 = ratios.iter().map(|r| r.max(1e-300).ln()).sum();
    (s / ratios.len() as f64).exp()
}

/// Sparse regression instance `b = Aθ* + noise` with a `k*`-sparse `θ*`.
#[derive(Clone, Debug)]
pub struct PlantedProblem {
    pub a: Matrix,
    pub b: Vector,
    pub theta_star: Vector,
    pub k_star: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    /// Ambient dimension `N`.
    pub dim: usize,
    /// Number of measurements `m`.
    pub samples: usize,
    pub k_star: usize,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl PlantedProblem {
    /// `A` has i.i.d. `N(0, 1/m)` entries, `θ*` has `k*` standard normal
    /// entries on a uniformly random support.
    pub fn generate(spec: &PlantedSpec, rng: &mut SeededRng) -> Result<Self> {
        if spec.k_star == 0 || spec.k_star > spec.dim {
            return Err(Error::invalid("k_star", format!("need 1 <= k* <= {}", spec.dim)));
        }
        if !(spec.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be non-negative"));
        }
        let a = gaussian_matrix(spec.samples, spec.dim, 1.0 / (spec.samples as f64).sqrt(), rng)?;
        let mut theta_star = Vector::zeros(spec.dim);
        let mut support = rng.sample_indices(spec.dim, spec.k_star);
        support.sort_unstable();
        for i in support {
            let mut v = rng.normal();
            while v == 0.0 {
                v = rng.normal();
            }
            theta_star[i] = v;
        }
        let mut b = a.matvec(&theta_star)?;
        if spec.noise_sigma > 0.0 {
            for bi in b.iter_mut() {
                *bi += spec.noise_sigma * rng.normal();
            }
        }
        Ok(PlantedProblem {
            a,
            b,
            theta_star,
            k_star: spec.k_star,
            noise_sigma: spec.noise_sigma,
        })
    }

    /// Least-squares objective; `f* = 0` is attached in the noiseless case.
    pub fn objective(&self) -> Result<LeastSquares> {
        let obj = LeastSquares::new(self.a.clone(), self.b.clone())?;
        Ok(if self.noise_sigma == 0.0 { obj.with_optimum(0.0) } else { obj })
    }

    pub fn support(&self) -> Vec<usize> {
        Mask::support_of(&self.theta_star).indices()
    }

    /// Best objective value over vectors supported on `supp(θ*)`, from the
    /// restricted normal equations.
    pub fn support_optimum(&self) -> Result<(f64, Vector)> {
        let s = self.support();
        let cols: Vec<Vec<f64>> = s.iter().map(|&j| (0..self.a.rows()).map(|i| self.a.get(i, j)).collect()).collect();
        let k = s.len();
        let mut gram = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for p in 0..k {
            rhs[p] = crate::numeric::dot(&cols[p], &self.b);
            for q in 0..k {
                gram[p * k + q] = crate::numeric::dot(&cols[p], &cols[q]);
            }
        }
        let coef = cholesky_solve(&gram, &rhs, k)?;
        let mut theta = Vector::zeros(self.a.cols());
        for (p, &j) in s.iter().enumerate() {
            theta[j] = coef[p];
        }
        let f = self.objective()?.value(&theta)?;
        Ok((f, theta))
    }
}

/// Solves `G x = r` for symmetric positive definite `G` (row-major `k × k`).
pub fn cholesky_solve(g: &[f64], r: &[f64], k: usize) -> Result<Vec<f64>> {
    check_len(k * k, g.len())?;
    check_len(k, r.len())?;
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i * k + p] * l[j * k + p]).sum();
            if i == j {
                let d = g[i * k + i] - s;
                if d <= 0.0 {
                    return Err(Error::invalid("gram", "matrix is not positive definite"));
                }
                l[i * k + i] = d.sqrt();
            } else {
                l[i * k + j] = (g[i * k + j] - s) / l[j * k + j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        let s: f64 = (0..i).map(|p| l[i * k + p] * y[p]).sum();
        y[i] = (r[i] - s) / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|p| l[p * k + i] * x[p]).sum();
        x[i] = (y[i] - s) / l[i * k + i];
    }
    Ok(x)
}
