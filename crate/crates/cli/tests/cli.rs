use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use switchode::io::{read_json, read_params, Table};
use switchode::simulate::dgp2;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switchode")).args(args).env_remove("SWITCHODE_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, dgp: &str, n: &str, sigma: &str, seed: &str) {
    ok(&["simulate", "--dgp", dgp, "--n", n, "--sigma", sigma, "--seed", seed, "--out-dir", p(dir)]);
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, "dgp1", "200", "0.01", "7");
    simulate(&b, "dgp1", "200", "0.01", "7");
    for name in ["observations.csv", "trajectory.csv", "truth.json", "latent_path.json", "metadata.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let obs = Table::read(&a.join("observations.csv")).unwrap();
    assert_eq!(obs.key_name, "time");
    assert_eq!(obs.data.dim(), (201, 10));
}

#[test]
fn zero_noise_observations_equal_trajectory_samples() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "dgp2", "64", "0", "3");
    let obs = Table::read(&tmp.path().join("observations.csv")).unwrap();
    let traj = Table::read(&tmp.path().join("trajectory.csv")).unwrap();
    let stride = (traj.key.len() - 1) / 64;
    for (r, row) in obs.data.rows().into_iter().enumerate() {
        assert_eq!(row, traj.data.row(r * stride));
    }
    assert_eq!(read_params(&tmp.path().join("truth.json")).unwrap(), dgp2().truth(0.0));
}

#[test]
fn denoise_reports_sigma_and_keeps_length() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("obs.csv");
    let mut text = String::from("time,x0\n");
    for i in 0..4095 {
        let t = i as f64 * 0.01;
        text.push_str(&format!("{t},{}\n", (3.0 * t).sin() + if i % 2 == 0 { 0.05 } else { -0.05 }));
    }
    fs::write(&input, text).unwrap();
    let out = tmp.path().join("den");
    ok(&["denoise", "--input", p(&input), "--out-dir", p(&out)]);
    let den = Table::read(&out.join("denoised.csv")).unwrap();
    assert_eq!(den.key.len(), 4095);
    let report: serde_json::Value = read_json(&out.join("noise.json")).unwrap();
    let series: Vec<f64> = Table::read(&input).unwrap().data.column(0).to_vec();
    let expected = switchode::denoise::estimate_noise_sigma(&series).unwrap();
    assert_eq!(report["sigma"][0].as_f64().unwrap(), expected);
}

#[test]
fn zero_noise_denoise_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("obs.csv");
    let mut text = String::from("time,x0\n");
    for i in 0..64 {
        text.push_str(&format!("{i},{}\n", 0.1 * i as f64 - 2.0));
    }
    fs::write(&input, text).unwrap();
    ok(&["denoise", "--input", p(&input), "--sigma", "0", "--out-dir", p(tmp.path())]);
    let den = Table::read(&tmp.path().join("denoised.csv")).unwrap();
    let orig = Table::read(&input).unwrap();
    for (a, b) in den.data.iter().zip(orig.data.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn fit_and_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "dgp2", "120", "0.01", "1");
    let fit = tmp.path().join("fit");
    let obs = sim.join("observations.csv");
    ok(&["fit", "--input", p(&obs), "--sigma", "0.01", "--k", "2", "--lambda-grid", "0.1,0.01,0.001", "--out-dir", p(&fit)]);
    let trace = Table::read(&fit.join("trace.csv")).unwrap();
    for w in trace.data.column(0).to_vec().windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0));
    }
    let post = Table::read(&fit.join("posterior.csv")).unwrap();
    assert_eq!(post.data.dim(), (121, 2));
    for row in post.data.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
    let path: serde_json::Value = read_json(&fit.join("path.json")).unwrap();
    assert_eq!(path["entries"].as_array().unwrap().len(), 3);

    let ev = tmp.path().join("eval");
    ok(&["eval", "--fit", p(&fit.join("path.json")), "--truth", p(&sim.join("truth.json")), "--out-dir", p(&ev)]);
    let auc = Table::read(&ev.join("auc.csv")).unwrap();
    assert_eq!(auc.data.dim(), (2, 1));
    assert_eq!(Table::read(&ev.join("distances.csv")).unwrap().data.nrows(), 3);

    // The truth scores perfectly against itself.
    let self_eval = tmp.path().join("self");
    ok(&["eval", "--fit", p(&sim.join("truth.json")), "--truth", p(&sim.join("truth.json")), "--out-dir", p(&self_eval)]);
    let auc = Table::read(&self_eval.join("auc.csv")).unwrap();
    assert!(auc.data.iter().all(|&v| v == 1.0));
    let dist = Table::read(&self_eval.join("distances.csv")).unwrap();
    assert!(dist.data.row(0).iter().take(4).all(|&v| v == 0.0));
}

#[test]
fn single_state_fit_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "dgp2", "80", "0.01", "2");
    let out = tmp.path().join("fit");
    let obs = sim.join("observations.csv");
    ok(&["fit", "--input", p(&obs), "--sigma", "0.01", "--k", "1", "--lambda", "0.01", "--out-dir", p(&out)]);

    let table = Table::read(&obs).unwrap();
    let y = table.data.clone();
    let cfg = switchode::denoise::DenoiseConfig {
        sigma: switchode::denoise::SigmaMode::Known(0.01),
        ..Default::default()
    };
    let (x_hat, _) = switchode::denoise::denoise_columns(&y, &cfg).unwrap();
    let h = 40.0 / 80.0;
    let psi = switchode::denoise::compute_psi_features(&x_hat, switchode::simulate::BasisFamily::monomial(1), h).unwrap();
    let init = switchode::emfit::init_params(1, 20, 1, 0).unwrap();
    let config = switchode::emfit::FitConfig::default().with_lambda(0.01);
    let expected = switchode::emfit::fit(&y, &psi, &init, &config).unwrap();
    let got = read_params(&out.join("params.json")).unwrap();
    for (a, b) in got.theta.iter().zip(expected.params.theta.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((got.sigma2 - expected.params.sigma2).abs() < 1e-15);
}

#[test]
fn select_single_cell_is_consistent_with_bic() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "dgp1", "80", "0.01", "4");
    let out = tmp.path().join("sel");
    let obs = sim.join("observations.csv");
    ok(&["select", "--input", p(&obs), "--sigma", "0.01", "--k", "2", "--m", "3", "--lambda-grid", "0.01", "--threads", "2", "--out-dir", p(&out)]);
    let sel = Table::read(&out.join("selection.csv")).unwrap();
    assert_eq!(sel.data.nrows(), 1);
    let summary: serde_json::Value = read_json(&out.join("selection.json")).unwrap();
    let fit: serde_json::Value = read_json(&out.join("fit.json")).unwrap();
    assert_eq!(summary["k"], 2);
    assert_eq!(summary["m"], 3);
    assert_eq!(summary["bic"].as_f64().unwrap(), fit["bic"].as_f64().unwrap());
    assert_eq!(sel.data[[0, 2]], fit["bic"].as_f64().unwrap());
}

#[test]
fn thread_count_does_not_change_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim, "dgp1", "60", "0.01", "5");
    let obs = sim.join("observations.csv");
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("sel{threads}"));
        let args = ["select", "--input", p(&obs), "--k", "1,2", "--m", "1,2", "--lambda-grid", "0.05,0.005", "--out-dir", p(&out)];
        let status = Command::new(env!("CARGO_BIN_EXE_switchode"))
            .args(args)
            .env("SWITCHODE_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
        outputs.push(fs::read(out.join("selection.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn grouped_fit_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("time,sequence,group,x0,x1\n");
    for seq in 0..4 {
        let sim = tmp.path().join(format!("sim{seq}"));
        simulate(&sim, "dgp2", "64", "0.01", &seq.to_string());
        let obs = Table::read(&sim.join("observations.csv")).unwrap();
        for (t, row) in obs.key.iter().zip(obs.data.rows()) {
            text.push_str(&format!("{t},{seq},{},{},{}\n", seq % 2 + 10, row[0], row[1]));
        }
    }
    let input = tmp.path().join("grouped.csv");
    fs::write(&input, text).unwrap();
    let out = tmp.path().join("fit");
    ok(&["fit", "--input", p(&input), "--grouped", "--k", "2", "--lambda", "0.01", "--out-dir", p(&out)]);
    let summary: serde_json::Value = read_json(&out.join("grouped.json")).unwrap();
    let groups = summary["groups"].as_array().unwrap();
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0]["group"], 10);
    let post = Table::read(&out.join("posterior.csv")).unwrap();
    assert_eq!(post.data.nrows(), 4 * 65);

    // Ungrouped fitting refuses grouped files.
    let out = run(&["fit", "--input", p(&input), "--lambda", "0.01", "--out-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["simulate", "--dgp", "dgp9", "--seed", "1", "--out-dir", p(tmp.path())]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--dgp", "dgp1", "--out-dir", p(tmp.path())]).status.code(), Some(2));
    assert_eq!(run(&["fit", "--input", "x", "--lambda", "1", "--lambda-grid", "default", "--out-dir", "o"]).status.code(), Some(2));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "time,x0\n0,1\n1,abc\n2,3\n").unwrap();
    assert_eq!(run(&["denoise", "--input", p(&bad), "--out-dir", p(tmp.path())]).status.code(), Some(3));
    let missing = tmp.path().join("missing.csv");
    assert_eq!(run(&["denoise", "--input", p(&missing), "--out-dir", p(tmp.path())]).status.code(), Some(3));

    let sim = tmp.path().join("sim");
    simulate(&sim, "dgp2", "64", "0.01", "1");
    let obs = sim.join("observations.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_switchode"))
        .args(["select", "--input", p(&obs), "--k", "1", "--m", "1", "--lambda-grid", "0.1", "--out-dir", p(tmp.path())])
        .env("SWITCHODE_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
