use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use switchode::emfit::{
    default_lambda_grid, fit_grouped, init_params, lambda_path_fit_lenient, FitConfig, FitResult, GroupMember,
    ModelParams,
};
use switchode::eval::{match_states, param_distance, roc_from_params, RocReport};
use switchode::io::{read_json, write_json, write_params, ParamsFile, Table, Tensor};
use switchode::select::{bic, grid_search, SelectionGrid};
use switchode::simulate::{dgp1, dgp2, simulate_benchmark};
use switchode::Error;

use crate::args::{DenoiseArgs, Dgp, EvalArgs, FitArgs, SelectArgs, SimulateArgs};
use crate::data::{self, node_columns};
use crate::{CliError, CliResult};

const THREADS_ENV: &str = "SWITCHODE_THREADS";

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn write_table(dir: &Path, name: &str, table: &Table) -> CliResult<()> {
    table.write(&dir.join(name))?;
    Ok(())
}

fn series_table(times: &[f64], values: &Array2<f64>) -> CliResult<Table> {
    Ok(Table::new("time", times.to_vec(), node_columns(values.ncols()), values.clone())?)
}

fn parse_lambda_grid(text: &str, seed: u64) -> CliResult<Vec<f64>> {
    if text.trim() == "default" {
        return Ok(default_lambda_grid(seed));
    }
    let mut grid = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad penalty {s:?} in --lambda-grid"))))
        .collect::<CliResult<Vec<_>>>()?;
    if grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(CliError::Usage("penalties must be finite and non-negative".into()));
    }
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    Ok(grid)
}

fn threads(flag: Option<usize>) -> CliResult<usize> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        _ => None,
    };
    match from_env.or(flag) {
        Some(0) => Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn fit_config(trunc_r: Option<usize>) -> FitConfig {
    FitConfig { trunc_r, ..FitConfig::default() }
}

#[derive(Serialize)]
struct SimulationMeta {
    dgp: &'static str,
    seed: u64,
    sigma: f64,
    n: usize,
    t: f64,
    p: usize,
    k: usize,
    m: usize,
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let (name, bench) = match args.dgp {
        Dgp::Dgp1 => ("dgp1", dgp1()),
        Dgp::Dgp2 => ("dgp2", dgp2()),
    };
    if !(args.t > 0.0) || !args.t.is_finite() {
        return Err(CliError::Usage(format!("--t must be positive, got {}", args.t)));
    }
    let (traj, obs) = simulate_benchmark(&bench, args.t, args.n, args.sigma, args.seed)?;
    prepare_out_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    write_table(dir, "observations.csv", &series_table(&obs.times(), &obs.y)?)?;
    write_table(dir, "trajectory.csv", &series_table(&traj.fine_times, &traj.x)?)?;
    write_params(&dir.join("truth.json"), &bench.truth(args.sigma))?;
    write_json(&dir.join("latent_path.json"), &traj.z_path)?;
    let meta = SimulationMeta {
        dgp: name,
        seed: args.seed,
        sigma: args.sigma,
        n: args.n,
        t: args.t,
        p: obs.p(),
        k: bench.model.k(),
        m: bench.model.m(),
    };
    write_json(&dir.join("metadata.json"), &meta)?;
    Ok(())
}

#[derive(Serialize)]
struct NoiseReport {
    delta: f64,
    sigma_known: bool,
    /// Noise level used per column.
    sigma: Vec<f64>,
    /// Soft threshold applied per column.
    threshold: Vec<f64>,
}

pub fn denoise(args: &DenoiseArgs) -> CliResult<()> {
    let (times, obs) = data::read_observations(&args.input)?;
    let config = data::denoise_config(args.delta, args.sigma);
    config.validate()?;
    let (x_hat, sigma, threshold) = data::denoise(&obs.y, &config)?;
    prepare_out_dir(&args.out_dir)?;
    write_table(&args.out_dir, "denoised.csv", &series_table(&times, &x_hat)?)?;
    let report = NoiseReport { delta: args.delta, sigma_known: args.sigma.is_some(), sigma, threshold };
    write_json(&args.out_dir.join("noise.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    k: usize,
    m: usize,
    lambda: f64,
    objective: f64,
    complete_loglik: f64,
    bic: f64,
    converged: bool,
    iterations: usize,
    /// Fitted law of the initial state.
    initial: Vec<f64>,
}

impl FitSummary {
    fn new(fit: &FitResult) -> Self {
        Self {
            k: fit.params.k(),
            m: fit.params.m(),
            lambda: fit.lambda,
            objective: fit.objective(),
            complete_loglik: fit.complete_loglik,
            bic: bic(fit, fit.n()),
            converged: fit.converged,
            iterations: fit.iterations,
            initial: fit.initial.clone(),
        }
    }
}

/// One entry of `path.json`.
#[derive(Serialize, Deserialize)]
struct PathEntry {
    lambda: f64,
    objective: f64,
    bic: f64,
    converged: bool,
    params: ParamsFile,
}

#[derive(Serialize, Deserialize)]
struct PathFile {
    entries: Vec<PathEntry>,
}

fn trace_table(trace: &[f64]) -> CliResult<Table> {
    let key = (0..trace.len()).map(|i| i as f64).collect();
    let data = Array2::from_shape_vec((trace.len(), 1), trace.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Table::new("iteration", key, vec!["objective".into()], data)?)
}

/// Posterior state probabilities at `t_0 .. t_N`.
fn posterior_table(times: &[f64], initial: &Array1<f64>, w: &Array2<f64>) -> CliResult<Table> {
    let k = w.ncols();
    let mut data = Array2::zeros((w.nrows() + 1, k));
    data.row_mut(0).assign(initial);
    data.slice_mut(ndarray::s![1.., ..]).assign(w);
    Ok(Table::numbered("time", times.to_vec(), "state", data)?)
}

fn write_fit(dir: &Path, times: &[f64], fit: &FitResult) -> CliResult<()> {
    write_params(&dir.join("params.json"), &fit.params)?;
    write_table(dir, "trace.csv", &trace_table(&fit.loglik_trace)?)?;
    write_table(dir, "posterior.csv", &posterior_table(times, &fit.posterior.initial, &fit.posterior.w)?)?;
    write_json(&dir.join("fit.json"), &FitSummary::new(fit))?;
    Ok(())
}

pub fn fit(args: &FitArgs) -> CliResult<()> {
    if args.grouped {
        return fit_grouped_cmd(args);
    }
    let (times, obs) = data::read_observations(&args.features.input)?;
    let x_hat = data::x_hat_single(&args.features, &obs.y)?;
    let psi = data::features(&x_hat, args.m, obs.h())?;
    let config = fit_config(args.trunc_r);
    let lambdas = match (args.lambda, &args.lambda_grid) {
        (Some(l), _) => vec![l],
        (None, Some(text)) => parse_lambda_grid(text, args.seed)?,
        (None, None) => default_lambda_grid(args.seed),
    };
    // A single penalty runs one plain fit.
    let config = if lambdas.len() == 1 { FitConfig { restarts: 0, ..config } } else { config };
    let results = lambda_path_fit_lenient(&obs.y, &psi, args.k, &lambdas, &config, args.seed)?;
    let mut fits = Vec::with_capacity(results.len());
    let mut first_error = None;
    for (lambda, r) in lambdas.iter().zip(results) {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => {
                log::warn!("fit at lambda = {lambda:e} failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    if fits.is_empty() {
        return Err(first_error.expect("at least one penalty").into());
    }
    prepare_out_dir(&args.out_dir)?;
    let best = fits
        .iter()
        .min_by(|a, b| bic(a, a.n()).total_cmp(&bic(b, b.n())))
        .expect("non-empty");
    write_fit(&args.out_dir, &times, best)?;
    if lambdas.len() > 1 {
        let entries = fits
            .iter()
            .map(|f| PathEntry {
                lambda: f.lambda,
                objective: f.objective(),
                bic: bic(f, f.n()),
                converged: f.converged,
                params: ParamsFile::from_params(&f.params),
            })
            .collect();
        write_json(&args.out_dir.join("path.json"), &PathFile { entries })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GroupRates {
    group: i64,
    q: Tensor,
    /// Expected dwell time per state, averaged over the group's sequences.
    dwell: Vec<f64>,
}

#[derive(Serialize)]
struct GroupedSummary {
    lambda: f64,
    objective: f64,
    converged: bool,
    iterations: usize,
    groups: Vec<GroupRates>,
}

fn fit_grouped_cmd(args: &FitArgs) -> CliResult<()> {
    let lambda = args.lambda.ok_or_else(|| CliError::Usage("--grouped needs --lambda".into()))?;
    let seqs = data::read_grouped(&args.features.input)?;
    let x_hats = data::x_hat_grouped(&args.features, &seqs)?;
    let mut labels: Vec<i64> = seqs.iter().map(|(_, s)| s.group).collect();
    labels.sort_unstable();
    labels.dedup();
    let psis = seqs
        .iter()
        .zip(&x_hats)
        .map(|((_, s), x)| data::features(x, args.m, s.obs.h()))
        .collect::<CliResult<Vec<_>>>()?;
    let members: Vec<GroupMember<'_>> = seqs
        .iter()
        .zip(&psis)
        .map(|((_, s), psi)| GroupMember {
            y: &s.obs.y,
            psi,
            group: labels.binary_search(&s.group).expect("label collected above"),
        })
        .collect();
    let p = seqs[0].1.obs.p();
    let init = init_params(args.k, p, args.m, args.seed)?;
    let result = fit_grouped(&members, &init, &fit_config(args.trunc_r).with_lambda(lambda))?;

    prepare_out_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    write_params(&dir.join("params.json"), &result.params)?;
    write_table(dir, "trace.csv", &trace_table(&result.loglik_trace)?)?;
    let dwell = switchode::eval::dwell_times(&result);
    let groups = labels
        .iter()
        .enumerate()
        .map(|(g, &group)| GroupRates { group, q: Tensor::from_matrix(result.q[g].matrix()), dwell: dwell[g].clone() })
        .collect();
    let summary = GroupedSummary {
        lambda,
        objective: *result.loglik_trace.last().expect("non-empty trace"),
        converged: result.converged,
        iterations: result.iterations,
        groups,
    };
    write_json(&dir.join("grouped.json"), &summary)?;

    // Posterior of every sequence, stacked with a leading sequence column.
    let k = args.k;
    let mut key = Vec::new();
    let mut rows = Vec::new();
    for ((times, s), post) in seqs.iter().zip(&result.posteriors) {
        let t = posterior_table(times, &post.initial, &post.w)?;
        for (time, row) in t.key.iter().zip(t.data.rows()) {
            key.push(*time);
            rows.push(s.label as f64);
            rows.extend(row.iter());
        }
    }
    let mut columns = vec!["sequence".to_string()];
    columns.extend((0..k).map(|l| format!("state{l}")));
    let data = Array2::from_shape_vec((key.len(), k + 1), rows).map_err(|e| Error::Shape(e.to_string()))?;
    write_table(dir, "posterior.csv", &Table::new("time", key, columns, data)?)?;
    Ok(())
}

#[derive(Serialize)]
struct SelectionSummary {
    k: usize,
    m: usize,
    lambda: f64,
    bic: f64,
    failed_cells: usize,
}

pub fn select(args: &SelectArgs) -> CliResult<()> {
    let (times, obs) = data::read_observations(&args.features.input)?;
    let x_hat = data::x_hat_single(&args.features, &obs.y)?;
    let grid = SelectionGrid {
        k_candidates: args.k.clone(),
        m_candidates: args.m.clone(),
        lambdas: parse_lambda_grid(&args.lambda_grid, args.seed)?,
    };
    let workers = threads(args.threads)?;
    let h = obs.h();
    let report = grid_search(
        &obs.y,
        |m| data::features(&x_hat, m, h).map_err(|e| match e {
            CliError::Lib(e) => e,
            CliError::Usage(msg) => Error::Argument(msg),
        }),
        &grid,
        &fit_config(args.trunc_r),
        args.seed,
        workers,
    )?;

    prepare_out_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    let key = report.cells.iter().map(|c| c.k as f64).collect();
    let data = Array2::from_shape_fn((report.cells.len(), 4), |(r, c)| {
        let cell = &report.cells[r];
        match c {
            0 => cell.m as f64,
            1 => cell.lambda,
            2 => cell.bic,
            _ => f64::from(u8::from(cell.converged)),
        }
    });
    let columns = ["m", "lambda", "bic", "converged"].map(String::from).to_vec();
    write_table(dir, "selection.csv", &Table::new("k", key, columns, data)?)?;
    let summary = SelectionSummary {
        k: report.k,
        m: report.m,
        lambda: report.lambda,
        bic: report.bic,
        failed_cells: report.cells.iter().filter(|c| c.error.is_some()).count(),
    };
    write_json(&dir.join("selection.json"), &summary)?;
    write_fit(dir, &times, &report.best)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    auc: Vec<f64>,
    /// Path entries left out because the two state matchings disagreed.
    dropped: usize,
    entries: usize,
}

/// Fitted parameters keyed by penalty, from `params.json` (with `fit.json`
/// alongside when present) or `path.json`.
fn read_fits(path: &Path) -> CliResult<Vec<(f64, ModelParams)>> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    if let Ok(file) = serde_json::from_str::<PathFile>(&text) {
        return file.entries.into_iter().map(|e| Ok((e.lambda, e.params.to_params()?))).collect();
    }
    let params: ParamsFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let summary: PathBuf = path.with_file_name("fit.json");
    let lambda = read_json::<serde_json::Value>(&summary)
        .ok()
        .and_then(|v| v.get("lambda").and_then(serde_json::Value::as_f64))
        .unwrap_or(0.0);
    Ok(vec![(lambda, params.to_params()?)])
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    if !(args.epsilon_t >= 0.0) {
        return Err(CliError::Usage(format!("--epsilon-t must be non-negative, got {}", args.epsilon_t)));
    }
    let truth = switchode::io::read_params(&args.truth)?;
    let fits = read_fits(&args.fit)?;

    let mut key = Vec::with_capacity(fits.len());
    let mut rows = Vec::with_capacity(fits.len() * 5);
    for (lambda, params) in &fits {
        let matching = match_states(params, &truth)?;
        let d = param_distance(params, &truth, &matching.xi1)?;
        key.push(*lambda);
        rows.extend([d.theta, d.q, d.sigma2, d.total, f64::from(u8::from(matching.consistent))]);
    }
    let columns = ["theta", "q", "sigma2", "total", "consistent"].map(String::from).to_vec();
    let distances = Table::new(
        "lambda",
        key,
        columns,
        Array2::from_shape_vec((fits.len(), 5), rows).map_err(|e| Error::Shape(e.to_string()))?,
    )?;

    let entries: Vec<(f64, &ModelParams)> = fits.iter().map(|(l, p)| (*l, p)).collect();
    let roc: RocReport = roc_from_params(&entries, &truth, args.epsilon_t)?;
    let k = truth.k();
    let mut roc_cols: Vec<String> = (0..k).map(|l| format!("tpr{l}")).collect();
    roc_cols.extend((0..k).map(|l| format!("fpr{l}")));
    let roc_data = Array2::from_shape_fn((roc.points.len(), 2 * k), |(r, c)| {
        let pt = &roc.points[r];
        if c < k {
            pt.tpr[c]
        } else {
            pt.fpr[c - k]
        }
    });
    let roc_table = Table::new("lambda", roc.points.iter().map(|p| p.lambda).collect(), roc_cols, roc_data)?;
    let auc_table = Table::new(
        "state",
        (0..k).map(|l| l as f64).collect(),
        vec!["auc".into()],
        Array2::from_shape_vec((k, 1), roc.auc.clone()).map_err(|e| Error::Shape(e.to_string()))?,
    )?;

    prepare_out_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    write_table(dir, "distances.csv", &distances)?;
    write_table(dir, "roc.csv", &roc_table)?;
    write_table(dir, "auc.csv", &auc_table)?;
    if roc.dropped > 0 {
        log::warn!("dropped {} of {} entries with inconsistent state matching", roc.dropped, fits.len());
    }
    write_json(&dir.join("eval.json"), &EvalSummary { auc: roc.auc, dropped: roc.dropped, entries: fits.len() })?;
    Ok(())
}
