//! Grid search over the number of states, basis size and penalty with BIC.

use std::collections::BTreeMap;
use std::sync::Mutex;

use ndarray::Array2;

use crate::denoise::PsiFeatures;
use crate::emfit::{block_norm, default_lambda_grid, lambda_path_fit_lenient, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Blocks with Euclidean norm below this count as zero.
pub const ZERO_BLOCK: f64 = 1e-10;

/// Number of non-zero drift blocks across all states.
pub fn active_blocks(fit: &FitResult) -> usize {
    let (k, p, _, _) = fit.params.theta.dim();
    let mut count = 0;
    for l in 0..k {
        for i in 0..p {
            for j in 0..p {
                if block_norm(&fit.params.theta, l, i, j) >= ZERO_BLOCK {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Number of non-zero drift coefficients inside the active blocks, the
/// `sum |theta_ij^l|_0` of the BIC.
pub fn active_coefficients(fit: &FitResult) -> usize {
    let (k, p, _, m) = fit.params.theta.dim();
    let mut count = 0;
    for l in 0..k {
        for i in 0..p {
            for j in 0..p {
                if block_norm(&fit.params.theta, l, i, j) >= ZERO_BLOCK {
                    count += (0..m).filter(|&b| fit.params.theta[[l, i, j, b]] != 0.0).count();
                }
            }
        }
    }
    count
}

/// `(k^2 - k + active coefficients) log N - 2 L(theta_hat | theta_hat)`.
pub fn bic(fit: &FitResult, n: usize) -> f64 {
    let k = fit.params.k();
    let dof = (k * k - k + active_coefficients(fit)) as f64;
    dof * (n as f64).ln() - 2.0 * fit.complete_loglik
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGrid {
    pub k_candidates: Vec<usize>,
    pub m_candidates: Vec<usize>,
    /// Penalties, searched in descending order with warm starts.
    pub lambdas: Vec<f64>,
}

impl SelectionGrid {
    /// States 1..=6, basis sizes 1..=5 and the seeded default penalty grid.
    pub fn standard(seed: u64) -> Self {
        Self { k_candidates: (1..=6).collect(), m_candidates: (1..=5).collect(), lambdas: default_lambda_grid(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_candidates.is_empty() || self.m_candidates.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Argument("selection grid has an empty axis".into()));
        }
        if self.k_candidates.contains(&0) || self.m_candidates.contains(&0) {
            return Err(Error::Argument("state and basis counts must be positive".into()));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Argument("penalty grid must be positive".into()));
        }
        Ok(())
    }

    fn sorted_lambdas(&self) -> Vec<f64> {
        let mut l = self.lambdas.clone();
        l.sort_by(|a, b| b.total_cmp(a));
        l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub k: usize,
    pub m: usize,
    pub lambda: f64,
    /// `NaN` when the fit failed.
    pub bic: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub cells: Vec<CellReport>,
    pub k: usize,
    pub m: usize,
    pub lambda: f64,
    pub bic: f64,
    pub best: FitResult,
}

struct PathOutcome {
    cells: Vec<CellReport>,
    best: Option<(f64, FitResult)>,
}

fn run_path(y: &Array2<f64>, psi: &PsiFeatures, k: usize, lambdas: &[f64], config: &FitConfig, seed: u64) -> PathOutcome {
    let m = psi.m();
    let results = match lambda_path_fit_lenient(y, psi, k, lambdas, config, seed) {
        Ok(r) => r,
        Err(e) => {
            let msg = e.to_string();
            let cells = lambdas
                .iter()
                .map(|&lambda| CellReport { k, m, lambda, bic: f64::NAN, converged: false, error: Some(msg.clone()) })
                .collect();
            return PathOutcome { cells, best: None };
        }
    };
    let mut cells = Vec::with_capacity(lambdas.len());
    let mut best: Option<(f64, FitResult)> = None;
    for (&lambda, result) in lambdas.iter().zip(results) {
        match result {
            Ok(fit) => {
                let score = bic(&fit, fit.n());
                cells.push(CellReport { k, m, lambda, bic: score, converged: fit.converged, error: None });
                if !fit.converged {
                    log::debug!("k = {k}, m = {m}, lambda = {lambda:e} stopped at max_iter");
                }
                if score.is_finite() && best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, fit));
                }
            }
            Err(e) => cells.push(CellReport { k, m, lambda, bic: f64::NAN, converged: false, error: Some(e.to_string()) }),
        }
    }
    PathOutcome { cells, best }
}

/// Two-stage BIC selection.
///
/// Every `(k, m)` pair runs one warm-started path over the penalties with its
/// own derived seed. Stage one picks `k` by the smallest best-BIC over
/// `(m, lambda)`; stage two reports the `(m, lambda)` minimizing BIC for that
/// `k`. Pairs run on up to `threads` workers; results do not depend on the
/// worker count.
pub fn grid_search(
    y: &Array2<f64>,
    psi_for_m: impl Fn(usize) -> Result<PsiFeatures>,
    grid: &SelectionGrid,
    config: &FitConfig,
    seed: u64,
    threads: usize,
) -> Result<SelectionReport> {
    grid.validate()?;
    let lambdas = grid.sorted_lambdas();
    let features: BTreeMap<usize, PsiFeatures> =
        grid.m_candidates.iter().map(|&m| Ok((m, psi_for_m(m)?))).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> =
        grid.k_candidates.iter().flat_map(|&k| grid.m_candidates.iter().map(move |&m| (k, m))).collect();
    let outcomes: Vec<Mutex<Option<PathOutcome>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = {
                    let mut n = next.lock().expect("job counter");
                    let idx = *n;
                    *n += 1;
                    idx
                };
                let Some(&(k, m)) = jobs.get(idx) else { break };
                let cell_seed = derive_seed(seed, ((k as u64) << 32) | m as u64);
                let outcome = run_path(y, &features[&m], k, &lambdas, config, cell_seed);
                *outcomes[idx].lock().expect("outcome slot") = Some(outcome);
            });
        }
    });

    let mut cells = Vec::new();
    // Best (bic, job index, fit) per k, in candidate order.
    let mut per_k: BTreeMap<usize, (f64, FitResult)> = BTreeMap::new();
    for (slot, &(k, _)) in outcomes.into_iter().zip(&jobs) {
        let outcome = slot.into_inner().expect("outcome slot").expect("every job ran");
        cells.extend(outcome.cells);
        if let Some((score, fit)) = outcome.best {
            if per_k.get(&k).is_none_or(|(b, _)| score < *b) {
                per_k.insert(k, (score, fit));
            }
        }
    }
    let mut chosen: Option<(usize, f64, FitResult)> = None;
    for &k in &grid.k_candidates {
        if let Some((score, fit)) = per_k.remove(&k) {
            if chosen.as_ref().is_none_or(|(_, b, _)| score < *b) {
                chosen = Some((k, score, fit));
            }
        }
    }
    let Some((k, score, best)) = chosen else {
        let failures: Vec<String> = cells
            .iter()
            .filter_map(|c| c.error.as_ref().map(|e| format!("k={} m={} lambda={:e}: {e}", c.k, c.m, c.lambda)))
            .take(10)
            .collect();
        return Err(Error::Selection(format!("every fit failed; first failures: {}", failures.join("; "))));
    };
    Ok(SelectionReport { cells, k, m: best.params.m(), lambda: best.lambda, bic: score, best })
}
