use acdc_core::data::{gaussian_blobs, BlobSpec};
use acdc_core::objectives::{
    per_sample_variance, restricted_gradient, sigma2_estimate, LeastSquares, LogisticMulti, Mlp, MlpObjective,
    Objective,
};
use acdc_core::{Dataset, Mask, Matrix, SeededRng, Vector};
use proptest::prelude::*;

fn random_ls(rows: usize, cols: usize, seed: u64) -> LeastSquares {
    let mut rng = SeededRng::new(seed);
    let a = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap();
    let b: Vector = (0..rows).map(|_| rng.normal()).collect();
    LeastSquares::new(a, b).unwrap()
}

fn blobs(features: usize, classes: usize, samples: usize, seed: u64) -> Dataset {
    let spec = BlobSpec {
        features,
        classes,
        samples,
        spread: 1.0,
        center_scale: 1.0,
    };
    gaussian_blobs(&spec, &mut SeededRng::new(seed)).unwrap()
}

fn random_theta(dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..dim).map(|_| scale * rng.normal()).collect()
}

/// Central differences with step `1e-5`; returns the largest relative error
/// over coordinates where either derivative exceeds `1e-8`.
fn max_fd_error(obj: &dyn Objective, theta: &[f64]) -> f64 {
    let g = obj.gradient(theta).unwrap();
    let mut x = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let h = 1e-5;
        x[i] = theta[i] + h;
        let fp = obj.value(&x).unwrap();
        x[i] = theta[i] - h;
        let fm = obj.value(&x).unwrap();
        x[i] = theta[i];
        let fd = (fp - fm) / (2.0 * h);
        let scale = g[i].abs().max(fd.abs());
        if scale > 1e-8 {
            worst = worst.max((g[i] - fd).abs() / scale.max(1e-3));
        }
    }
    worst
}

#[test]
fn least_squares_matches_finite_differences() {
    let obj = random_ls(20, 50, 1);
    let theta = random_theta(50, 1.0, 2);
    assert!(max_fd_error(&obj, &theta) < 1e-6);
}

#[test]
fn logistic_matches_finite_differences() {
    let obj = LogisticMulti::new(blobs(4, 3, 30, 3), 0.05).unwrap();
    let theta = random_theta(obj.dim(), 0.5, 4);
    assert!(max_fd_error(&obj, &theta) < 1e-5);
}

#[test]
fn small_mlp_matches_finite_differences() {
    let obj = MlpObjective::new(Mlp::new(vec![2, 8, 3]).unwrap(), blobs(2, 3, 16, 5));
    for seed in 0..5 {
        let theta = random_theta(obj.dim(), 0.8, 10 + seed);
        let err = max_fd_error(&obj, &theta);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn deeper_mlp_matches_finite_differences() {
    let obj = MlpObjective::new(Mlp::new(vec![3, 6, 5, 4]).unwrap(), blobs(3, 4, 12, 6));
    let theta = random_theta(obj.dim(), 0.8, 7);
    assert!(max_fd_error(&obj, &theta) < 1e-5);
}

#[test]
fn single_layer_mlp_is_logistic_regression() {
    let data = blobs(5, 4, 40, 8);
    let logistic = LogisticMulti::new(data.clone(), 0.0).unwrap();
    let mlp = MlpObjective::new(Mlp::new(vec![5, 4]).unwrap(), data);
    assert_eq!(logistic.dim(), mlp.dim());
    for seed in 0..3 {
        let theta = random_theta(mlp.dim(), 1.0, 20 + seed);
        let (fl, fm) = (logistic.value(&theta).unwrap(), mlp.value(&theta).unwrap());
        assert!((fl - fm).abs() <= 1e-10 * fl.abs().max(1.0));
        let (gl, gm) = (logistic.gradient(&theta).unwrap(), mlp.gradient(&theta).unwrap());
        assert!(gl.sub(&gm).norm_inf() <= 1e-10);
    }
}

#[test]
fn mc_variance_of_single_samples_matches_enumeration() {
    let obj = random_ls(50, 8, 9);
    let theta = random_theta(8, 0.5, 10);
    let exact = per_sample_variance(&obj, &theta).unwrap();
    let mc = sigma2_estimate(&obj, &theta, 1, 10_000, &mut SeededRng::new(11)).unwrap();
    assert!((mc / exact - 1.0).abs() < 0.05, "mc {mc} exact {exact}");
}

#[test]
fn empty_and_out_of_range_batches_rejected() {
    let obj = random_ls(5, 3, 12);
    assert!(obj.stochastic_gradient(&[0.0; 3], &[]).is_err());
    assert!(obj.stochastic_gradient(&[0.0; 3], &[5]).is_err());
    assert!(obj.value(&[0.0; 4]).is_err());
}

fn partition_gap(obj: &dyn Objective, theta: &[f64], order: &[usize], cuts: &[usize]) -> f64 {
    let n = obj.sample_count();
    let full = obj.gradient(theta).unwrap();
    let mut avg = Vector::zeros(theta.len());
    let mut start = 0;
    for &end in cuts.iter().chain(std::iter::once(&n)) {
        if end > start {
            let g = obj.stochastic_gradient(theta, &order[start..end]).unwrap();
            avg.axpy((end - start) as f64 / n as f64, &g);
            start = end;
        }
    }
    avg.sub(&full).norm_inf() / full.norm_inf().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partition_average_is_full_gradient(seed in 0u64..1000, mut cuts in prop::collection::vec(1usize..24, 0..6)) {
        let mut rng = SeededRng::new(seed);
        let order = rng.permutation(24);
        cuts.sort_unstable();
        let data = blobs(3, 3, 24, seed);
        let ls = random_ls(24, 6, seed);
        let logistic = LogisticMulti::new(data.clone(), 0.1).unwrap();
        let mlp = MlpObjective::new(Mlp::new(vec![3, 4, 3]).unwrap(), data);
        let objs: [&dyn Objective; 3] = [&ls, &logistic, &mlp];
        for obj in objs {
            let theta = random_theta(obj.dim(), 0.7, seed + 1);
            prop_assert!(partition_gap(obj, &theta, &order, &cuts) <= 1e-12);
        }
    }

    #[test]
    fn restricted_gradient_is_masked_stochastic_gradient(seed in 0u64..1000, bits in prop::collection::vec(any::<bool>(), 6)) {
        let obj = random_ls(10, 6, seed);
        let theta = random_theta(6, 1.0, seed + 1);
        let batch = [1, 4, 7];
        let mask = Mask::new(bits);
        let r = restricted_gradient(&obj, &theta, &mask, &batch).unwrap();
        let g = obj.stochastic_gradient(&theta, &batch).unwrap();
        for i in 0..6 {
            let want = if mask.get(i) { g[i] } else { 0.0 };
            prop_assert_eq!(r[i].to_bits(), want.to_bits());
        }
    }
}
