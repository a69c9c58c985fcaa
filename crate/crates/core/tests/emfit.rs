use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use switchode::ctmc::RateMatrix;
use switchode::denoise::{compute_psi_features, PsiFeatures};
use switchode::emfit::{
    e_step_statistics, fit, fit_grouped, forward_backward, init_params, kkt_residuals, m_step_theta,
    truncated_posterior, FitConfig, GroupMember, InnerSolver, ModelParams,
};
use switchode::rng::rng_from_seed;
use switchode::simulate::{dgp2, simulate_benchmark, AdditiveOdeModel, BasisFamily, Benchmark};

fn random_problem(seed: u64, n: usize, k: usize, p: usize) -> (Array2<f64>, PsiFeatures, ModelParams) {
    let mut rng = rng_from_seed(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let y = Array2::from_shape_simple_fn((n + 1, p), &mut normal);
    let psi = Array3::from_shape_simple_fn((n, p, 1), &mut normal);
    let theta = Array4::from_shape_simple_fn((k, p, p, 1), || 0.5 * normal());
    let q = RateMatrix::from_off_diagonal(k, |i, j| 0.3 + 0.2 * (i + 2 * j) as f64).unwrap();
    (y, PsiFeatures::new(psi, 0.5).unwrap(), ModelParams::new(q, theta, 0.8).unwrap())
}

#[test]
fn posterior_marginals_and_pairs_agree() {
    let (y, psi, params) = random_problem(1, 60, 3, 4);
    let post = forward_backward(&y, &psi, &params).unwrap();
    for t in 0..60 {
        assert!((post.w.row(t).sum() - 1.0).abs() < 1e-12);
        for j in 0..3 {
            let from_pairs: f64 = (0..3).map(|i| post.pair[[t, i, j]]).sum();
            assert!((from_pairs - post.w[[t, j]]).abs() < 1e-12);
        }
        for i in 0..3 {
            let prev = if t == 0 { post.initial[i] } else { post.w[[t - 1, i]] };
            let out: f64 = (0..3).map(|j| post.pair[[t, i, j]]).sum();
            assert!((out - prev).abs() < 1e-12);
        }
    }
    let stats = e_step_statistics(&post, &params.q, psi.h).unwrap();
    assert!((stats.tau_hat.iter().sum::<f64>() - 60.0 * 0.5).abs() < 1e-9);
}

#[test]
fn wide_window_truncation_matches_full_smoother() {
    let (y, psi, params) = random_problem(2, 40, 2, 3);
    let full = forward_backward(&y, &psi, &params).unwrap();
    let wide = truncated_posterior(&y, &psi, &params, 40).unwrap();
    for (a, b) in full.w.iter().zip(wide.w.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn m_step_satisfies_kkt_across_penalties() {
    let mut rng = rng_from_seed(3);
    for lambda in [0.0, 1e-3, 1e-2, 1e-1, 1.0] {
        let (y, psi, _) = random_problem(4, 80, 2, 5);
        let w = Array2::from_shape_simple_fn((80, 2), || rng.random::<f64>());
        let init = Array4::zeros((2, 5, 5, 1));
        let step = m_step_theta(&y, &psi, &w, lambda, &init, &InnerSolver::default()).unwrap();
        let kkt = kkt_residuals(&y, &psi, &w, lambda, &step.theta, &step.frozen).unwrap();
        assert!(kkt.stationarity < 1e-6, "lambda {lambda}: {kkt:?}");
        assert!(kkt.zero_ratio <= 1.0 + 1e-6, "lambda {lambda}: {kkt:?}");
    }
}

#[test]
fn em_objective_never_decreases() {
    let bench = dgp2();
    let (_, obs) = simulate_benchmark(&bench, 40.0, 100, 0.01, 11).unwrap();
    let x = obs.y.clone();
    let psi = compute_psi_features(&x, BasisFamily::monomial(1), obs.h()).unwrap();
    for seed in 0..3 {
        let init = init_params(2, 20, 1, seed).unwrap();
        let result = fit(&obs.y, &psi, &init, &FitConfig::default().with_lambda(0.01)).unwrap();
        for w in result.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0), "{:?}", result.loglik_trace);
        }
    }
}

#[test]
fn grouped_fit_separates_switching_rates() {
    // Two groups share the drift of DGP2 and differ four-fold in rates.
    let base = dgp2();
    let slow = RateMatrix::from_rows(&[vec![-0.1, 0.1], vec![0.1, -0.1]]).unwrap();
    let fast = RateMatrix::from_rows(&[vec![-0.4, 0.4], vec![0.4, -0.4]]).unwrap();
    let mut data = Vec::new();
    for (seq, q) in [&slow, &slow, &fast, &fast].into_iter().enumerate() {
        let bench = Benchmark {
            model: AdditiveOdeModel::new(base.model.theta.clone(), BasisFamily::monomial(1)).unwrap(),
            q: q.clone(),
            x0: base.x0.clone(),
        };
        let (traj, obs) = simulate_benchmark(&bench, 40.0, 200, 0.01, 20 + seq as u64).unwrap();
        let psi = traj.exact_features(BasisFamily::monomial(1), 200).unwrap();
        data.push((obs.y, psi, seq / 2));
    }
    let members: Vec<GroupMember<'_>> =
        data.iter().map(|(y, psi, g)| GroupMember { y, psi, group: *g }).collect();
    let mut init = init_params(2, 20, 1, 5).unwrap();
    init.q = RateMatrix::from_rows(&[vec![-0.2, 0.2], vec![0.2, -0.2]]).unwrap();
    let result = fit_grouped(&members, &init, &FitConfig::default().with_lambda(1e-3)).unwrap();
    let total_rate = |q: &RateMatrix| q.rate(0, 1) + q.rate(1, 0);
    assert!(total_rate(&result.q[1]) > total_rate(&result.q[0]), "{:?}", result.q);
    for w in result.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
    }
    let dwell = switchode::eval::dwell_times(&result);
    for row in &dwell {
        assert!((row.iter().sum::<f64>() - 40.0).abs() < 1e-6);
    }
}
