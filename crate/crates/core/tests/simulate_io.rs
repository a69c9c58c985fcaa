use switchode::denoise::{compute_psi_features, denoise_trajectory, dwt, idwt, DenoiseConfig, SigmaMode};
use switchode::io::{params_from_json, params_to_json, Table};
use switchode::simulate::{dgp1, dgp2, simulate_benchmark, BasisFamily, DGP2_X0};

#[test]
fn simulation_is_deterministic_per_seed() {
    let a = simulate_benchmark(&dgp1(), 40.0, 100, 0.01, 5).unwrap();
    let b = simulate_benchmark(&dgp1(), 40.0, 100, 0.01, 5).unwrap();
    let c = simulate_benchmark(&dgp1(), 40.0, 100, 0.01, 6).unwrap();
    assert_eq!(a.1.y, b.1.y);
    assert_ne!(a.1.y, c.1.y);
    assert_eq!(dgp2().x0, DGP2_X0.to_vec());
}

#[test]
fn exact_features_agree_with_sampled_trapezoid_on_fine_grids() {
    let (traj, _) = simulate_benchmark(&dgp1(), 40.0, 64, 0.0, 3).unwrap();
    let coarse = compute_psi_features(&traj.sample_uniform(64), BasisFamily::monomial(3), 40.0 / 64.0).unwrap();
    let exact = traj.exact_features(BasisFamily::monomial(3), 64).unwrap();
    let fine = compute_psi_features(&traj.sample_uniform(4096), BasisFamily::monomial(3), 40.0 / 4096.0).unwrap();
    // Summing 64 fine intervals reproduces each coarse one.
    let mut worst: f64 = 0.0;
    for n in 0..64 {
        for j in 0..10 {
            for b in 0..3 {
                let sum: f64 = (0..64).map(|s| fine.psi[[n * 64 + s, j, b]]).sum();
                worst = worst.max((sum - exact.psi[[n, j, b]]).abs());
            }
        }
    }
    let coarse_err = (&coarse.psi - &exact.psi).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(worst < 0.05 * coarse_err, "fine {worst}, coarse {coarse_err}");
}

#[test]
fn wavelet_transform_is_orthonormal() {
    let series: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin() + 0.01 * i as f64).collect();
    let coeffs = dwt(&series, 3).unwrap();
    let back = idwt(&coeffs);
    for (a, b) in series.iter().zip(&back) {
        assert!((a - b).abs() < 1e-10);
    }
    let energy: f64 = series.iter().map(|v| v * v).sum();
    assert!((coeffs.norm().powi(2) - energy).abs() < 1e-8 * energy);
}

#[test]
fn denoising_keeps_odd_lengths() {
    let series: Vec<f64> = (0..4095).map(|i| ((i as f64) * 0.01).cos()).collect();
    let out = denoise_trajectory(&series, &DenoiseConfig { sigma: SigmaMode::Known(0.0), ..Default::default() }).unwrap();
    assert_eq!(out.values.len(), 4095);
    for (a, b) in series.iter().zip(&out.values) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn files_round_trip() {
    let truth = dgp1().truth(0.01);
    assert_eq!(params_from_json(&params_to_json(&truth).unwrap()).unwrap(), truth);
    let (_, obs) = simulate_benchmark(&dgp2(), 40.0, 30, 0.01, 1).unwrap();
    let table = Table::numbered("time", obs.times(), "x", obs.y.clone()).unwrap();
    assert_eq!(Table::from_csv(&table.to_csv().unwrap()).unwrap(), table);
}
