use acdc_core::iht::{contraction_rate, geometric_mean, iht_step, run_iht, IhtConfig, PlantedProblem, PlantedSpec};
use acdc_core::objectives::{
    box_sampler, cpl_estimate, lipschitz_estimate, smoothness_estimate, CplNorm, LandscapeEstimates, LeastSquares,
    Objective,
};
use acdc_core::{Matrix, SeededRng, SparsityPattern, Vector};

fn random_ls(rows: usize, cols: usize, seed: u64) -> LeastSquares {
    let mut rng = SeededRng::new(seed);
    let a = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap();
    let b: Vector = (0..rows).map(|_| rng.normal()).collect();
    LeastSquares::new(a, b).unwrap()
}

/// Largest eigenvalue of `AᵀA` by power iteration.
fn lambda_max(a: &Matrix) -> f64 {
    let mut v = vec![1.0; a.cols()];
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w = a.t_matvec(&a.matvec(&v).unwrap()).unwrap();
        lambda = w.norm() / Vector::from(v.clone()).norm();
        let n = w.norm();
        v = w.iter().map(|x| x / n).collect();
    }
    lambda
}

/// Spectral norm of `A`.
fn op_norm(a: &Matrix) -> f64 {
    lambda_max(a).sqrt()
}

#[test]
fn smoothness_bounded_by_hessian_spectrum() {
    for seed in 0..4 {
        let obj = random_ls(15, 10, seed);
        let bound = 2.0 * lambda_max(obj.a());
        let theta = vec![0.3; 10];
        for t in [1, 3, 10] {
            let beta = smoothness_estimate(&obj, &theta, t, 200, &mut SeededRng::new(seed + 100)).unwrap();
            assert!(beta <= bound + 1e-9, "t={t}: {beta} > {bound}");
        }
    }
}

#[test]
fn smoothness_approaches_spectrum_on_full_support() {
    let obj = random_ls(6, 3, 42);
    let bound = 2.0 * lambda_max(obj.a());
    let beta = smoothness_estimate(&obj, &[0.0; 3], 3, 20_000, &mut SeededRng::new(1)).unwrap();
    assert!(beta <= bound + 1e-9);
    assert!(beta >= 0.99 * bound, "{beta} vs {bound}");
}

#[test]
fn lipschitz_within_box_bound() {
    let radius = 2.0;
    for seed in 0..4 {
        let obj = random_ls(12, 5, seed);
        let a = obj.a();
        let bound = 2.0 * op_norm(a) * (op_norm(a) * radius * (5f64).sqrt() + obj.b().norm());
        let l = lipschitz_estimate(&obj, box_sampler(5, radius), 500, &mut SeededRng::new(seed)).unwrap();
        assert!(l > 0.0 && l <= bound, "{l} > {bound}");
    }
}

#[test]
fn cpl_non_decreasing_in_r() {
    for seed in 0..5 {
        let obj = random_ls(30, 12, seed);
        let theta: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut prev = 0.0;
        for r in 1..=12 {
            let a = cpl_estimate(&obj, &theta, r, 0.0, CplNorm::Squared).unwrap();
            assert!(a >= prev && a >= 0.0);
            prev = a;
        }
    }
}

#[test]
fn cpl_rejects_optimum_and_bad_r() {
    let obj = LeastSquares::new(Matrix::identity(2), vec![1.0, 2.0].into()).unwrap();
    assert!(cpl_estimate(&obj, &[1.0, 2.0], 1, 0.0, CplNorm::Squared).is_err());
    assert!(cpl_estimate(&obj, &[0.0, 0.0], 0, 0.0, CplNorm::Squared).is_err());
    assert!(cpl_estimate(&obj, &[0.0, 0.0], 3, 0.0, CplNorm::Squared).is_err());
}

#[test]
fn planted_rate_beats_loose_condition_number_bound() {
    for seed in 0..5 {
        let spec = PlantedSpec {
            dim: 300,
            samples: 200,
            k_star: 5,
            noise_sigma: 0.0,
        };
        let p = PlantedProblem::generate(&spec, &mut SeededRng::new(seed)).unwrap();
        let obj = p.objective().unwrap();
        let cfg = IhtConfig::deterministic(SparsityPattern::global_count(15), 60);
        let t = run_iht(&obj, &cfg, &vec![0.0; 300], None, &mut SeededRng::new(seed)).unwrap();
        let ratios = contraction_rate(&t, 0.0).unwrap();
        let rate = geometric_mean(&ratios[..40]);

        // smallest CPL constant certified along the first iterates
        let mut theta = Vector::zeros(300);
        let mut alpha = f64::INFINITY;
        for _ in 0..10 {
            alpha = alpha.min(cpl_estimate(&obj, &theta, p.k_star, 0.0, CplNorm::Squared).unwrap());
            let g = obj.gradient(&theta).unwrap();
            theta = iht_step(&theta, &g, t.step_size, &cfg.pattern).unwrap();
        }
        let est = LandscapeEstimates {
            beta_hat: t.beta_hat.unwrap(),
            alpha_hat: alpha,
            sigma2_hat: 0.0,
            lipschitz_hat: 0.0,
        };
        let kappa = est.kappa();
        assert!(rate < 1.0 - 1.0 / (40.0 * kappa), "seed {seed}: rate {rate}, kappa {kappa}");
        assert!(est.implied_sparsity(p.k_star, 1.0) >= p.k_star as f64);
    }
}
