//! Comparing fits with known truth: state matching, parameter distances,
//! ROC curves along penalty paths, and group dwell times.

use std::collections::BTreeSet;

use ndarray::{s, Array4};

use crate::emfit::{edges_of, Edge, FitResult, GroupedFit, ModelParams};
use crate::error::{Error, Result};

/// Largest `k` for which permutations are searched exhaustively.
pub const MAX_MATCH_STATES: usize = 8;

/// Default edge threshold when sparsity is controlled by the penalty alone.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Alignment of estimated to true states. `xi[l]` is the estimated state
/// matched with true state `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateMatch {
    /// Minimizes the summed drift distance.
    pub xi1: Vec<usize>,
    /// Minimizes the summed off-diagonal rate distance.
    pub xi2: Vec<usize>,
    pub consistent: bool,
}

/// All permutations of `0..k` in lexicographic order.
fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; k];
    fn rec(k: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for v in 0..k {
            if !used[v] {
                used[v] = true;
                current.push(v);
                rec(k, current, used, out);
                current.pop();
                used[v] = false;
            }
        }
    }
    rec(k, &mut current, &mut used, &mut out);
    out
}

fn argmin_perm(perms: &[Vec<usize>], cost: impl Fn(&[usize]) -> f64) -> Vec<usize> {
    let mut best = (f64::INFINITY, 0);
    for (idx, perm) in perms.iter().enumerate() {
        let c = cost(perm);
        if c < best.0 {
            best = (c, idx);
        }
    }
    perms[best.1].clone()
}

fn theta_state_distance(a: &Array4<f64>, sa: usize, b: &Array4<f64>, sb: usize) -> f64 {
    let da = a.slice(s![sa, .., .., ..]);
    let db = b.slice(s![sb, .., .., ..]);
    da.iter().zip(db.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn check_shapes(est: &ModelParams, truth: &ModelParams) -> Result<()> {
    if est.theta.dim() != truth.theta.dim() {
        return Err(Error::Shape(format!(
            "estimate has shape {:?}, truth has {:?}",
            est.theta.dim(),
            truth.theta.dim()
        )));
    }
    Ok(())
}

pub fn match_states(est: &ModelParams, truth: &ModelParams) -> Result<StateMatch> {
    check_shapes(est, truth)?;
    let k = truth.k();
    if k > MAX_MATCH_STATES {
        return Err(Error::Evaluation(format!("exhaustive matching supports k <= {MAX_MATCH_STATES}, got {k}")));
    }
    let perms = permutations(k);
    let xi1 = argmin_perm(&perms, |xi| {
        (0..k).map(|l| theta_state_distance(&est.theta, xi[l], &truth.theta, l)).sum()
    });
    let xi2 = argmin_perm(&perms, |xi| {
        let mut total = 0.0;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    total += (est.q.rate(xi[a], xi[b]) - truth.q.rate(a, b)).abs();
                }
            }
        }
        total
    });
    let consistent = xi1 == xi2;
    Ok(StateMatch { xi1, xi2, consistent })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDistance {
    /// `sum_l sum_i |theta^l_{i.} - theta_bar^l_{i.}|_2`.
    pub theta: f64,
    /// `sum_{l != l'} |q - q_bar|`.
    pub q: f64,
    pub sigma2: f64,
    pub total: f64,
    /// Spectral norm of the generator difference.
    pub q_spectral: f64,
}

/// Distance between `est`, relabeled by `xi`, and `truth`.
pub fn param_distance(est: &ModelParams, truth: &ModelParams, xi: &[usize]) -> Result<ParamDistance> {
    check_shapes(est, truth)?;
    let k = truth.k();
    let mut sorted = xi.to_vec();
    sorted.sort_unstable();
    if sorted != (0..k).collect::<Vec<_>>() {
        return Err(Error::Argument(format!("{xi:?} is not a permutation of 0..{k}")));
    }
    let aligned = est.permuted(xi);
    let (_, p, _, _) = truth.theta.dim();
    let mut theta = 0.0;
    for l in 0..k {
        for i in 0..p {
            let a = aligned.theta.slice(s![l, i, .., ..]);
            let b = truth.theta.slice(s![l, i, .., ..]);
            theta += a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
    }
    let mut q = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                q += (aligned.q.rate(a, b) - truth.q.rate(a, b)).abs();
            }
        }
    }
    let sigma2 = (aligned.sigma2 - truth.sigma2).abs();
    let diff = aligned.q.matrix() - truth.q.matrix();
    let q_spectral = diff.singular_values().iter().copied().fold(0.0, f64::max);
    Ok(ParamDistance { theta, q, sigma2, total: theta + q + sigma2, q_spectral })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub lambda: f64,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

/// Per-state true and false positive rates of `estimated` against `truth`.
pub fn rates(estimated: &[BTreeSet<Edge>], truth: &[BTreeSet<Edge>], p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if estimated.len() != truth.len() {
        return Err(Error::Shape(format!("{} estimated states, {} true", estimated.len(), truth.len())));
    }
    let mut tpr = Vec::with_capacity(truth.len());
    let mut fpr = Vec::with_capacity(truth.len());
    for (est, tru) in estimated.iter().zip(truth) {
        let hits = est.intersection(tru).count() as f64;
        let false_pos = est.difference(tru).count() as f64;
        let negatives = (p * p - tru.len()) as f64;
        tpr.push(if tru.is_empty() { 1.0 } else { hits / tru.len() as f64 });
        fpr.push(if negatives == 0.0 { 0.0 } else { false_pos / negatives });
    }
    Ok((tpr, fpr))
}

/// Trapezoid area under `(fpr, tpr)` points closed by `(0, 0)` and `(1, 1)`.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocReport {
    /// Points sorted by the false positive rate of state 0.
    pub points: Vec<RocPoint>,
    pub auc: Vec<f64>,
    /// Path entries dropped because the two state matchings disagreed.
    pub dropped: usize,
}

/// ROC curve of drift estimates already aligned with the true states.
pub fn roc_from_thetas(lambdas: &[f64], thetas: &[Array4<f64>], truth: &ModelParams, epsilon: f64) -> Result<RocReport> {
    if lambdas.len() != thetas.len() {
        return Err(Error::Shape(format!("{} penalties for {} estimates", lambdas.len(), thetas.len())));
    }
    let true_edges = edges_of(&truth.theta, 0.0)?;
    let p = truth.p();
    let mut points = Vec::with_capacity(thetas.len());
    for (&lambda, theta) in lambdas.iter().zip(thetas) {
        if theta.dim() != truth.theta.dim() {
            return Err(Error::Shape(format!("estimate shape {:?}", theta.dim())));
        }
        let (tpr, fpr) = rates(&edges_of(theta, epsilon)?, &true_edges, p)?;
        points.push(RocPoint { lambda, tpr, fpr });
    }
    finish_roc(points, truth.k(), 0)
}

fn finish_roc(mut points: Vec<RocPoint>, k: usize, dropped: usize) -> Result<RocReport> {
    if points.is_empty() {
        return Err(Error::Evaluation(format!("no eligible ROC points ({dropped} dropped)")));
    }
    points.sort_by(|a, b| a.fpr[0].total_cmp(&b.fpr[0]).then(a.tpr[0].total_cmp(&b.tpr[0])));
    let auc = (0..k)
        .map(|l| auc(&points.iter().map(|pt| (pt.fpr[l], pt.tpr[l])).collect::<Vec<_>>()))
        .collect();
    Ok(RocReport { points, auc, dropped })
}

/// ROC curve over a penalty path. Each entry is aligned by its own state
/// matching; entries whose two matchings disagree are dropped.
pub fn roc_auc(path: &[FitResult], truth: &ModelParams, epsilon: f64) -> Result<RocReport> {
    let entries: Vec<(f64, &ModelParams)> = path.iter().map(|f| (f.lambda, &f.params)).collect();
    roc_from_params(&entries, truth, epsilon)
}

/// [`roc_auc`] over `(lambda, params)` pairs, e.g. read back from disk.
pub fn roc_from_params(path: &[(f64, &ModelParams)], truth: &ModelParams, epsilon: f64) -> Result<RocReport> {
    let true_edges = edges_of(&truth.theta, 0.0)?;
    let p = truth.p();
    let mut points = Vec::with_capacity(path.len());
    let mut dropped = 0;
    for &(lambda, params) in path {
        let matching = match_states(params, truth)?;
        if !matching.consistent {
            dropped += 1;
            continue;
        }
        let aligned = params.permuted(&matching.xi1);
        let (tpr, fpr) = rates(&edges_of(&aligned.theta, epsilon)?, &true_edges, p)?;
        points.push(RocPoint { lambda, tpr, fpr });
    }
    if dropped > 0 {
        log::info!("dropped {dropped} of {} path entries with inconsistent state matching", path.len());
    }
    finish_roc(points, truth.k(), dropped)
}

/// Expected dwell time per group and state, averaged over the group's members.
pub fn dwell_times(fit: &GroupedFit) -> Vec<Vec<f64>> {
    let k = fit.params.k();
    let mut sums = vec![vec![0.0; k]; fit.n_groups()];
    let mut counts = vec![0usize; fit.n_groups()];
    for (stats, &group) in fit.estep.iter().zip(&fit.member_groups) {
        counts[group] += 1;
        for (acc, t) in sums[group].iter_mut().zip(&stats.tau_hat) {
            *acc += t;
        }
    }
    for (row, &c) in sums.iter_mut().zip(&counts) {
        row.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    sums
}

/// Mean and sample standard deviation, as reported in the AUC tables.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::RateMatrix;
    use crate::simulate::dgp2;

    #[test]
    fn permutations_are_lexicographic() {
        assert_eq!(permutations(3)[0], vec![0, 1, 2]);
        assert_eq!(permutations(3)[1], vec![0, 2, 1]);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn matching_examples() {
        let truth = dgp2().truth(0.01);
        let same = match_states(&truth, &truth).unwrap();
        assert_eq!(same.xi1, vec![0, 1]);
        assert!(same.consistent);
        let swapped = match_states(&truth.permuted(&[1, 0]), &truth).unwrap();
        assert_eq!(swapped.xi1, vec![1, 0]);
        assert!(swapped.consistent);

        // Drift favors the identity, rates favor the swap.
        let mut est = truth.clone();
        est.q = RateMatrix::from_rows(&[vec![-0.18, 0.18], vec![0.27, -0.27]]).unwrap();
        let m = match_states(&est, &truth).unwrap();
        assert_eq!(m.xi1, vec![0, 1]);
        assert_eq!(m.xi2, vec![1, 0]);
        assert!(!m.consistent);
    }

    #[test]
    fn distance_examples() {
        let truth = dgp2().truth(0.01);
        let d = param_distance(&truth, &truth, &[0, 1]).unwrap();
        assert_eq!(d.total, 0.0);
        let mut est = truth.clone();
        est.theta[[1, 3, 4, 0]] += 0.3;
        let d = param_distance(&est, &truth, &[0, 1]).unwrap();
        assert!((d.theta - 0.3).abs() < 1e-12);
        assert_eq!(d.q, 0.0);
        assert!(param_distance(&est, &truth, &[0, 0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.0, 1.0)]), 1.0);
        assert_eq!(auc(&[(1.0, 1.0), (0.0, 0.0)]), 0.5);
        assert_eq!(auc(&[]), 0.5);
        let pts = [(0.2, 0.7), (0.5, 0.9)];
        let dup = [(0.2, 0.7), (0.5, 0.9), (0.2, 0.7)];
        assert_eq!(auc(&pts), auc(&dup));
    }

    #[test]
    fn truth_as_estimate_is_perfect() {
        let truth = dgp2().truth(0.01);
        let thetas = vec![truth.theta.clone(); 3];
        let report = roc_from_thetas(&[0.3, 0.2, 0.1], &thetas, &truth, DEFAULT_EPSILON).unwrap();
        for pt in &report.points {
            assert_eq!(pt.tpr, vec![1.0, 1.0]);
            assert_eq!(pt.fpr, vec![0.0, 0.0]);
        }
        assert_eq!(report.auc, vec![1.0, 1.0]);
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
