use acdc_core::iht::{
    cholesky_solve, iht_polish, iht_step, run_iht, BatchScheme, IhtConfig, IhtMode, PlantedProblem, PlantedSpec,
    PolishConfig, StepSize,
};
use acdc_core::objectives::LeastSquares;
use acdc_core::{Error, Mask, Matrix, SeededRng, SparsityPattern, Vector};
use proptest::prelude::*;

fn random_ls(rows: usize, cols: usize, seed: u64) -> LeastSquares {
    let mut rng = SeededRng::new(seed);
    let a = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap();
    let b: Vector = (0..rows).map(|_| rng.normal()).collect();
    LeastSquares::new(a, b).unwrap()
}

fn planted(seed: u64, noise_sigma: f64) -> PlantedProblem {
    let spec = PlantedSpec {
        dim: 200,
        samples: 120,
        k_star: 5,
        noise_sigma,
    };
    PlantedProblem::generate(&spec, &mut SeededRng::new(seed)).unwrap()
}

/// Minimiser of `‖b − Aθ‖²` over vectors supported on `support`.
fn restricted_optimum(obj: &LeastSquares, support: &[usize]) -> Vec<f64> {
    let a = obj.a();
    let k = support.len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for (p, &jp) in support.iter().enumerate() {
        rhs[p] = (0..a.rows()).map(|i| a.get(i, jp) * obj.b()[i]).sum();
        for (q, &jq) in support.iter().enumerate() {
            gram[p * k + q] = (0..a.rows()).map(|i| a.get(i, jp) * a.get(i, jq)).sum();
        }
    }
    let coef = cholesky_solve(&gram, &rhs, k).unwrap();
    let mut theta = vec![0.0; a.cols()];
    for (c, &j) in coef.iter().zip(support) {
        theta[j] = *c;
    }
    theta
}

#[test]
fn full_cardinality_is_gradient_descent() {
    let obj = random_ls(30, 8, 1);
    let eta = 0.004;
    let mut cfg = IhtConfig::deterministic(SparsityPattern::global_count(8), 50);
    cfg.step = StepSize::Fixed(eta);
    let theta0 = vec![0.5; 8];
    let t = run_iht(&obj, &cfg, &theta0, None, &mut SeededRng::new(0)).unwrap();

    // reference gradient descent with its own residual arithmetic
    let (a, b) = (obj.a(), obj.b());
    let mut theta = theta0.clone();
    for (i, rec) in t.records.iter().enumerate() {
        let r: Vec<f64> = (0..a.rows()).map(|row| b[row] - (0..8).map(|j| a.get(row, j) * theta[j]).sum::<f64>()).collect();
        let f: f64 = r.iter().map(|x| x * x).sum();
        assert!((rec.f - f).abs() <= 1e-12 * f.max(1.0), "iteration {i}");
        if i + 1 < t.records.len() {
            for j in 0..8 {
                let g = -2.0 * (0..a.rows()).map(|row| a.get(row, j) * r[row]).sum::<f64>();
                theta[j] -= eta * g;
            }
        }
    }
    for j in 0..8 {
        assert!((t.theta[j] - theta[j]).abs() <= 1e-12 * theta[j].abs().max(1.0));
    }
}

#[test]
fn running_max_is_monotone_and_iterates_respect_pattern() {
    let p = planted(3, 0.05);
    let obj = p.objective().unwrap();
    let mut cfg = IhtConfig::deterministic(SparsityPattern::global_count(15), 80);
    cfg.mode = IhtMode::Stochastic {
        batch_size: 20,
        scheme: BatchScheme::WithReplacement,
    };
    let t = run_iht(&obj, &cfg, &vec![0.0; 200], Some(&p.theta_star), &mut SeededRng::new(3)).unwrap();
    assert_eq!(t.records.len(), 81);
    assert!(t.records.windows(2).all(|w| w[1].max_abs >= w[0].max_abs));
    assert!(t.records.iter().all(|r| r.dist_to_star.is_some()));
    assert!(t.theta.nnz() <= 15);
}

#[test]
fn runs_replay_bit_exactly() {
    let p = planted(4, 0.1);
    let obj = p.objective().unwrap();
    let mut cfg = IhtConfig::deterministic(SparsityPattern::global_count(15), 40);
    cfg.mode = IhtMode::Stochastic {
        batch_size: 8,
        scheme: BatchScheme::ShuffledPartition,
    };
    let run = || run_iht(&obj, &cfg, &vec![0.0; 200], None, &mut SeededRng::new(9)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.records, b.records);
    assert_eq!(a.theta, b.theta);
}

#[test]
fn oversized_step_trips_divergence_guard() {
    let obj = random_ls(20, 10, 5);
    let mut cfg = IhtConfig::deterministic(SparsityPattern::global_count(5), 200);
    cfg.step = StepSize::Fixed(10.0);
    match run_iht(&obj, &cfg, &[0.1; 10], None, &mut SeededRng::new(0)) {
        Err(Error::Diverged { value, limit, .. }) => assert!(value > limit),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn stop_tol_ends_converged_runs_early() {
    let p = planted(6, 0.0);
    let obj = p.objective().unwrap();
    let mut cfg = IhtConfig::deterministic(SparsityPattern::global_count(15), 5000);
    cfg.stop_tol = 1e-3;
    let t = run_iht(&obj, &cfg, &vec![0.0; 200], None, &mut SeededRng::new(6)).unwrap();
    assert!(t.stopped_early);
    assert!(t.records.len() < 5001);
}

#[test]
fn trajectory_jsonl_has_one_line_per_iteration() {
    let obj = random_ls(10, 6, 7);
    let cfg = IhtConfig::deterministic(SparsityPattern::global_count(3), 12);
    let t = run_iht(&obj, &cfg, &[0.0; 6], None, &mut SeededRng::new(7)).unwrap();
    let mut buf = Vec::new();
    t.write_jsonl(&mut buf).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[12]["iteration"], 12);
    assert_eq!(lines[3]["f"].as_f64().unwrap(), t.records[3].f);
}

#[test]
fn polish_with_full_mask_reaches_unconstrained_optimum() {
    for seed in 0..5 {
        let obj = random_ls(25, 6, seed);
        let support: Vec<usize> = (0..6).collect();
        let opt = restricted_optimum(&obj, &support);
        let r = iht_polish(&obj, &[0.0; 6], &Mask::ones(6), 1e-6, 100_000).unwrap();
        assert!(r.converged, "seed {seed}: {}", r.grad_inf);
        for j in 0..6 {
            assert!((r.theta[j] - opt[j]).abs() < 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn polish_below_rounding_floor_is_flagged() {
    // f is about 10 here, so descent cannot certify gradients near 1e-12
    let obj = random_ls(25, 6, 0);
    let r = iht_polish(&obj, &[0.0; 6], &Mask::ones(6), 1e-12, 100_000).unwrap();
    assert!(!r.converged);
    assert!(r.grad_inf > 1e-12 && r.grad_inf < 1e-5);
    assert!(r.f_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn polish_on_half_mask_of_separable_quadratic() {
    let d = [1.0, 2.0, 0.5, 3.0, 1.5, 0.8];
    let b = [1.0, -1.0, 2.0, 0.5, -0.3, 4.0];
    let obj = LeastSquares::new(Matrix::from_diag(&d), b.to_vec().into()).unwrap();
    let mask = Mask::from_indices(6, &[0, 2, 4]);
    let theta0 = [0.3, 0.0, -0.2, 0.0, 0.9, 0.0];
    let r = iht_polish(&obj, &theta0, &mask, 1e-12, 100_000).unwrap();
    for j in 0..6 {
        let want = if mask.get(j) { b[j] / d[j] } else { 0.0 };
        assert!((r.theta[j] - want).abs() < 1e-8, "coordinate {j}");
    }
    assert!(r.f_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn polish_after_iht_lands_on_support_optimum() {
    let p = planted(8, 0.05);
    let obj = p.objective().unwrap();
    let mut cfg = IhtConfig::deterministic(SparsityPattern::global_count(5), 100);
    cfg.polish = Some(PolishConfig {
        eps: 1e-8,
        max_inner: 50_000,
    });
    let t = run_iht(&obj, &cfg, &vec![0.0; 200], None, &mut SeededRng::new(8)).unwrap();
    let polish = t.polish.as_ref().unwrap();
    assert!(polish.converged && polish.grad_inf <= 1e-8);
    assert!(polish.grad_l2 >= polish.grad_inf);
    let support = Mask::support_of(&t.theta).indices();
    let opt = restricted_optimum(&obj, &support);
    assert!(Vector::from(opt).sub(&t.theta).norm_inf() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn step_output_satisfies_pattern(
        theta in prop::collection::vec(-5.0f64..5.0, 16),
        g in prop::collection::vec(-5.0f64..5.0, 16),
        eta in 0.01f64..1.0,
        k in 0usize..=16,
    ) {
        let out = iht_step(&theta, &g, eta, &SparsityPattern::global_count(k)).unwrap();
        prop_assert!(out.nnz() <= k);
        let nm = SparsityPattern::SemiStructured { n: 2, m: 4 };
        let out = iht_step(&theta, &g, eta, &nm).unwrap();
        for block in out.chunks(4) {
            prop_assert!(block.iter().filter(|v| **v != 0.0).count() <= 2);
        }
    }
}
