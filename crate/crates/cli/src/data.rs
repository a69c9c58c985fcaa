//! Observation files: a time column, optional `sequence` and `group`
//! columns, then one column per node.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use switchode::denoise::{compute_psi_features, denoise_trajectory, DenoiseConfig, PsiFeatures, SigmaMode};
use switchode::io::Table;
use switchode::simulate::{BasisFamily, ObservationSet};
use switchode::Error;

use crate::args::FeatureArgs;
use crate::{CliError, CliResult};

const SEQUENCE: &str = "sequence";
const GROUP: &str = "group";
/// Relative tolerance on the spacing of the time column.
const SPACING_TOL: f64 = 1e-6;

/// One observed sequence and the group it belongs to.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub label: i64,
    pub group: i64,
    pub obs: ObservationSet,
}

fn data_columns(table: &Table) -> Vec<usize> {
    (0..table.columns.len()).filter(|&c| table.columns[c] != SEQUENCE && table.columns[c] != GROUP).collect()
}

fn label(v: f64, what: &str) -> CliResult<i64> {
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::Parse(format!("{what} label {v} is not an integer")).into());
    }
    Ok(v as i64)
}

fn to_observations(times: &[f64], y: Array2<f64>) -> CliResult<ObservationSet> {
    if times.len() < 3 {
        return Err(Error::Shape(format!("need at least 3 observations, got {}", times.len())).into());
    }
    let horizon = times[times.len() - 1] - times[0];
    let h = horizon / (times.len() - 1) as f64;
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - h).abs() > SPACING_TOL * h.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Parse(format!("time column is not uniformly spaced at row {}", i + 2)).into());
        }
    }
    Ok(ObservationSet::new(y, horizon, None)?)
}

/// Reads a single-sequence observation file.
pub fn read_observations(path: &Path) -> CliResult<(Vec<f64>, ObservationSet)> {
    let table = Table::read(path)?;
    if table.column(SEQUENCE).is_some() || table.column(GROUP).is_some() {
        return Err(CliError::Usage(format!("{} has sequence/group columns; pass --grouped", path.display())));
    }
    let obs = to_observations(&table.key, table.data.clone())?;
    Ok((table.key, obs))
}

/// Reads a grouped observation file, one sequence per `sequence` label in
/// ascending order.
pub fn read_grouped(path: &Path) -> CliResult<Vec<(Vec<f64>, Sequence)>> {
    let table = Table::read(path)?;
    let (Some(seq_col), Some(group_col)) = (table.column(SEQUENCE), table.column(GROUP)) else {
        return Err(CliError::Usage(format!("--grouped needs `{SEQUENCE}` and `{GROUP}` columns in {}", path.display())));
    };
    let cols = data_columns(&table);
    let mut rows: BTreeMap<i64, (i64, Vec<usize>)> = BTreeMap::new();
    for (r, row) in table.data.rows().into_iter().enumerate() {
        let seq = label(row[seq_col], SEQUENCE)?;
        let group = label(row[group_col], GROUP)?;
        let entry = rows.entry(seq).or_insert((group, Vec::new()));
        if entry.0 != group {
            return Err(Error::Parse(format!("sequence {seq} appears in groups {} and {group}", entry.0)).into());
        }
        entry.1.push(r);
    }
    let mut out = Vec::with_capacity(rows.len());
    for (seq, (group, idx)) in rows {
        let times: Vec<f64> = idx.iter().map(|&r| table.key[r]).collect();
        let y = table.data.select(Axis(0), &idx).select(Axis(1), &cols);
        out.push((times.clone(), Sequence { label: seq, group, obs: to_observations(&times, y)? }));
    }
    Ok(out)
}

pub fn denoise_config(delta: f64, sigma: Option<f64>) -> DenoiseConfig {
    DenoiseConfig { delta, sigma: sigma.map_or(SigmaMode::Estimate, SigmaMode::Known), ..DenoiseConfig::default() }
}

/// Denoised columns with the noise level and threshold used for each.
pub fn denoise(y: &Array2<f64>, config: &DenoiseConfig) -> CliResult<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    let mut out = Array2::zeros(y.raw_dim());
    let (mut sigmas, mut thresholds) = (Vec::new(), Vec::new());
    for (col, mut dest) in y.axis_iter(Axis(1)).zip(out.axis_iter_mut(Axis(1))) {
        let d = denoise_trajectory(&col.to_vec(), config)?;
        dest.iter_mut().zip(&d.values).for_each(|(o, &v)| *o = v);
        sigmas.push(d.sigma);
        thresholds.push(d.lambda);
    }
    Ok((out, sigmas, thresholds))
}

/// Trajectory estimate for `y`: the `--x-hat` file when given, else the
/// wavelet estimate.
pub fn trajectory_estimate(args: &FeatureArgs, y: &Array2<f64>, x_hat: Option<Array2<f64>>) -> CliResult<Array2<f64>> {
    match x_hat {
        Some(x) if x.dim() != y.dim() => Err(Error::Shape(format!(
            "trajectory estimate is {:?}, observations are {:?}",
            x.dim(),
            y.dim()
        ))
        .into()),
        Some(x) => Ok(x),
        None => Ok(denoise(y, &denoise_config(args.delta, args.sigma))?.0),
    }
}

/// The `--x-hat` file split like the observations.
pub fn read_x_hat(path: &Path) -> CliResult<Table> {
    Ok(Table::read(path)?)
}

pub fn features(x_hat: &Array2<f64>, m: usize, h: f64) -> CliResult<PsiFeatures> {
    Ok(compute_psi_features(x_hat, BasisFamily::monomial(m), h)?)
}

pub fn x_hat_single(args: &FeatureArgs, y: &Array2<f64>) -> CliResult<Array2<f64>> {
    let given = match &args.x_hat {
        Some(path) => Some(data_only(&read_x_hat(path)?)),
        None => None,
    };
    trajectory_estimate(args, y, given)
}

/// Per-sequence trajectory estimates for grouped data.
pub fn x_hat_grouped(args: &FeatureArgs, seqs: &[(Vec<f64>, Sequence)]) -> CliResult<Vec<Array2<f64>>> {
    let given: Option<BTreeMap<i64, Array2<f64>>> = match &args.x_hat {
        Some(path) => Some(read_grouped(path)?.into_iter().map(|(_, s)| (s.label, s.obs.y)).collect()),
        None => None,
    };
    seqs.iter()
        .map(|(_, s)| {
            let x = match &given {
                Some(map) => Some(
                    map.get(&s.label)
                        .cloned()
                        .ok_or_else(|| Error::Parse(format!("trajectory estimate lacks sequence {}", s.label)))?,
                ),
                None => None,
            };
            trajectory_estimate(args, &s.obs.y, x)
        })
        .collect()
}

fn data_only(table: &Table) -> Array2<f64> {
    table.data.select(Axis(1), &data_columns(table))
}

pub fn node_columns(p: usize) -> Vec<String> {
    (0..p).map(|i| format!("x{i}")).collect()
}
