use std::collections::BTreeSet;

use ndarray::Array4;
use switchode::ctmc::RateMatrix;
use switchode::denoise::compute_psi_features;
use switchode::emfit::{edge_set, init_params, lambda_path_fit, FitConfig, ModelParams};
use switchode::eval::{auc, match_states, param_distance, roc_from_params, roc_from_thetas, rates};
use switchode::select::{active_blocks, active_coefficients, bic, grid_search, SelectionGrid};
use switchode::simulate::{dgp1, dgp2, simulate_benchmark, BasisFamily};

#[test]
fn bic_counts_rates_and_nonzero_coefficients() {
    let (_, obs) = simulate_benchmark(&dgp2(), 40.0, 60, 0.01, 1).unwrap();
    let psi = compute_psi_features(&obs.y, BasisFamily::monomial(2), obs.h()).unwrap();
    let path = lambda_path_fit(&obs.y, &psi, 2, &[1e9, 1e-3], &FitConfig { restarts: 0, ..FitConfig::default() }, 0)
        .unwrap();
    // Everything is zero under a huge penalty: only the two rates count.
    let empty = &path[0];
    assert_eq!(active_blocks(empty), 0);
    let expected = 2.0 * (60f64).ln() - 2.0 * empty.complete_loglik;
    assert!((bic(empty, 60) - expected).abs() < 1e-9 * expected.abs());
    let full = &path[1];
    let coef = active_coefficients(full);
    assert!(coef <= 2 * active_blocks(full) && coef >= active_blocks(full));
    let expected = (2 + coef) as f64 * (60f64).ln() - 2.0 * full.complete_loglik;
    assert!((bic(full, 60) - expected).abs() < 1e-9 * expected.abs());
}

#[test]
fn selection_winner_matches_recomputed_bic() {
    let (_, obs) = simulate_benchmark(&dgp1(), 40.0, 80, 0.01, 2).unwrap();
    let grid = SelectionGrid { k_candidates: vec![1, 2], m_candidates: vec![1, 3], lambdas: vec![0.05, 0.005] };
    let config = FitConfig { restarts: 1, ..FitConfig::default() };
    let psi = |m| compute_psi_features(&obs.y, BasisFamily::monomial(m), obs.h());
    let one = grid_search(&obs.y, psi, &grid, &config, 3, 1).unwrap();
    let two = grid_search(&obs.y, psi, &grid, &config, 3, 2).unwrap();
    assert_eq!(one.cells, two.cells);
    assert_eq!(one.cells.len(), 8);
    assert!((one.bic - bic(&one.best, 80)).abs() < 1e-9 * one.bic.abs());
    let min = one.cells.iter().map(|c| c.bic).filter(|b| b.is_finite()).fold(f64::INFINITY, f64::min);
    assert_eq!(one.bic, min);
}

#[test]
fn matching_and_distance_properties() {
    let truth = dgp2().truth(0.01);
    let m = match_states(&truth, &truth).unwrap();
    assert_eq!(m.xi1, vec![0, 1]);
    assert!(m.consistent);
    assert_eq!(param_distance(&truth, &truth, &m.xi1).unwrap().total, 0.0);

    let swapped = truth.permuted(&[1, 0]);
    let m = match_states(&swapped, &truth).unwrap();
    assert_eq!(m.xi1, vec![1, 0]);
    assert!(param_distance(&swapped, &truth, &m.xi1).unwrap().total < 1e-15);

    let a = init_params(2, 20, 1, 1).unwrap();
    let b = init_params(2, 20, 1, 2).unwrap();
    let c = init_params(2, 20, 1, 3).unwrap();
    let id = [0, 1];
    let d = |x: &ModelParams, y: &ModelParams| param_distance(x, y, &id).unwrap().total;
    assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-10);
    assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-10);
}

#[test]
fn roc_properties() {
    let truth = dgp2().truth(0.01);
    let roc = roc_from_params(&[(0.1, &truth), (0.01, &truth)], &truth, 1e-6).unwrap();
    for pt in &roc.points {
        assert!(pt.tpr.iter().all(|&v| v == 1.0));
        assert!(pt.fpr.iter().all(|&v| v == 0.0));
    }
    assert_eq!(roc.auc, vec![1.0, 1.0]);

    let points = [(0.1, 0.4), (0.3, 0.8), (0.6, 0.9)];
    let doubled = [points[0], points[0], points[1], points[2], points[2]];
    assert_eq!(auc(&points), auc(&doubled));

    // An all-zero estimate sits at the origin.
    let zero = Array4::zeros(truth.theta.dim());
    let roc = roc_from_thetas(&[1.0], &[zero], &truth, 1e-6).unwrap();
    assert_eq!(roc.auc, vec![0.5, 0.5]);
    let edges = edge_set(&truth, 0.0).unwrap();
    let (tpr, fpr) = rates(&edges, &edges, 20).unwrap();
    assert_eq!((tpr, fpr), (vec![1.0, 1.0], vec![0.0, 0.0]));
    let none: Vec<BTreeSet<_>> = vec![BTreeSet::new(); 2];
    assert_eq!(rates(&none, &edges, 20).unwrap().0, vec![0.0, 0.0]);
}

#[test]
fn rate_matching_disagreement_is_reported() {
    let truth = dgp2().truth(0.01);
    // Drift says identity, rates say swap.
    let mut est = truth.clone();
    est.q = RateMatrix::from_rows(&[vec![-0.18, 0.18], vec![0.27, -0.27]]).unwrap();
    let m = match_states(&est, &truth).unwrap();
    assert!(!m.consistent);
    let roc = roc_from_params(&[(0.1, &est), (0.01, &truth)], &truth, 1e-6).unwrap();
    assert_eq!(roc.dropped, 1);
    assert_eq!(roc.points.len(), 1);
}
