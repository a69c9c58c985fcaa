//! E-step sufficient statistics and the closed-form / group-lasso M-steps.
//!
//! The drift subproblem for target node `i` and state `l` is
//!
//! ```text
//! minimize  (2N)^-1 sum_n w_l(t_n) (dy_{n,i} - sum_j <theta_j, psi_{n,j}>)^2
//!           + lambda * sum_j |theta_j|_K
//! ```
//!
//! with `K_j = G_j / N` and `G_j = sum_n psi_{n,j} psi_{n,j}^T`. Multiplying
//! through by `2N` gives the residual sum of squares plus
//! `2 sqrt(N) lambda` times the `G_j`-norms, which is the form solved here
//! (see [`penalty_weight`]). Each block is whitened by the Cholesky
//! factor of `G_j`, which turns the penalty into a plain Euclidean group norm,
//! and the problem is solved by block coordinate descent with a Newton
//! polish on the active blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array4, ArrayView1, Axis};

use super::params::ModelParams;
use super::posterior::{Design, Posterior};
use super::{RATE_FLOOR, SIGMA2_FLOOR};
use crate::ctmc::{EndpointStatistics, RateMatrix, NULL_EVENT_FLOOR};
use crate::denoise::PsiFeatures;
use crate::error::{Error, Result};

/// States whose total posterior weight is below this keep their drift block.
pub const DEGENERATE_WEIGHT: f64 = 1e-8;

/// Coefficient of `sum_j |theta_j|_{G_j}` against the weighted residual sum
/// of squares for a user penalty `lambda` on `n` intervals.
pub fn penalty_weight(lambda: f64, n: usize) -> f64 {
    2.0 * (n as f64).sqrt() * lambda
}

/// Singular values below this fraction of the largest are dropped in the
/// unpenalized solve.
const SVD_RCOND: f64 = 1e-15;

/// Relative ridge added to a singular feature Gram.
const GRAM_RIDGE: f64 = 1e-10;

/// Expected transition counts and dwell times given the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepStats {
    /// `m_hat[(a, b)]`, zero on the diagonal.
    pub m_hat: DMatrix<f64>,
    pub tau_hat: Vec<f64>,
}

/// Aggregates endpoint-conditioned expectations over the smoothed pairwise law.
pub fn e_step_statistics(posterior: &Posterior, q: &RateMatrix, h: f64) -> Result<EStepStats> {
    let k = q.k();
    if posterior.k() != k {
        return Err(Error::Shape(format!("posterior has k = {}, rate matrix has k = {k}", posterior.k())));
    }
    if k == 1 {
        return Ok(EStepStats { m_hat: DMatrix::zeros(1, 1), tau_hat: vec![posterior.n() as f64 * h] });
    }
    let stats = EndpointStatistics::new(q, h)?;
    let trans = stats.transition_probabilities();
    // weight[(i, j)] = sum_n pair[n, i, j] / P_ij(h)
    let summed = posterior.pair.sum_axis(Axis(0));
    let mut weight = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let mass = summed[[i, j]];
            if mass <= 0.0 {
                continue;
            }
            let prob = trans[(i, j)];
            if prob < NULL_EVENT_FLOOR {
                return Err(Error::NullEvent { start: i, end: j, prob });
            }
            weight[(i, j)] = mass / prob;
        }
    }
    let contract = |a: usize, b: usize| stats.integral(a, b).component_mul(&weight).sum();
    let mut m_hat = DMatrix::zeros(k, k);
    let mut tau_hat = vec![0.0; k];
    for a in 0..k {
        tau_hat[a] = contract(a, a).max(0.0);
        for b in 0..k {
            if a != b && q.rate(a, b) > 0.0 {
                m_hat[(a, b)] = (q.rate(a, b) * contract(a, b)).max(0.0);
            }
        }
    }
    Ok(EStepStats { m_hat, tau_hat })
}

/// `q_ab = m_ab / tau_a`, diagonal set to the negative row sum.
pub fn m_step_q(m_hat: &DMatrix<f64>, tau_hat: &[f64]) -> Result<RateMatrix> {
    let k = tau_hat.len();
    if m_hat.nrows() != k || m_hat.ncols() != k {
        return Err(Error::Shape(format!("m_hat is {}x{}, tau_hat has {k} entries", m_hat.nrows(), m_hat.ncols())));
    }
    if let Some(state) = tau_hat.iter().position(|&t| !(t > 0.0)) {
        return Err(Error::DegenerateState { state, iteration: 0 });
    }
    RateMatrix::from_off_diagonal(k, |a, b| m_hat[(a, b)] / tau_hat[a])
}

/// Applies the off-diagonal floor that keeps the fitted chain irreducible.
pub(crate) fn floor_rates(q: &RateMatrix) -> Result<RateMatrix> {
    let k = q.k();
    let floored = (0..k)
        .flat_map(|a| (0..k).map(move |b| (a, b)))
        .any(|(a, b)| a != b && q.rate(a, b) < RATE_FLOOR);
    if floored {
        log::debug!("flooring off-diagonal rates at {RATE_FLOOR:e}");
    }
    RateMatrix::from_off_diagonal(k, |a, b| q.rate(a, b).max(RATE_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolver {
    /// Stop once the optimality conditions hold to `tol * (1 + |2c|_inf)`,
    /// with `c` the cross-product of the whitened features and the increments.
    pub tol: f64,
    /// Budget of coordinate-descent sweeps plus Newton steps per subproblem.
    pub max_sweeps: usize,
}

impl Default for InnerSolver {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct ThetaStep {
    pub theta: Array4<f64>,
    /// States whose weight was degenerate; their blocks were left unchanged.
    pub frozen: Vec<usize>,
    pub max_sweeps_used: usize,
    pub converged: bool,
}

/// Per-block Gram factors shared by every `(target, state)` subproblem.
pub(crate) struct Whitening {
    /// Lower Cholesky factor of each `G_j`.
    chol: Vec<DMatrix<f64>>,
    /// Whitened features `x[:, block j] L_j^{-T}`.
    x: Array2<f64>,
    m: usize,
}

impl Whitening {
    pub(crate) fn new(design: &Design) -> Self {
        let (n, p, m) = (design.n(), design.p, design.m);
        let mut chol = Vec::with_capacity(p);
        let mut x = Array2::zeros((n, p * m));
        for j in 0..p {
            let block = design.x.slice(s![.., j * m..(j + 1) * m]);
            let gram = block.t().dot(&block);
            let mut g = DMatrix::from_fn(m, m, |a, b| gram[[a, b]]);
            let l = match g.clone().cholesky() {
                Some(c) if c.l().diagonal().iter().all(|&d| d > 1e-150) => c.l(),
                _ => {
                    log::warn!("feature Gram of node {j} is singular; adding a ridge");
                    let ridge = GRAM_RIDGE * (n.max(1) as f64) * (1.0 + g.trace() / m as f64);
                    for a in 0..m {
                        g[(a, a)] += ridge;
                    }
                    g.cholesky().expect("ridged Gram is positive definite").l()
                }
            };
            let l_inv = l.clone().try_inverse().expect("triangular factor is invertible");
            // Row vector psi^T L^{-T} = (L^{-1} psi)^T.
            for t in 0..n {
                for a in 0..m {
                    let mut acc = 0.0;
                    for b in 0..=a {
                        acc += l_inv[(a, b)] * design.x[[t, j * m + b]];
                    }
                    x[[t, j * m + a]] = acc;
                }
            }
            chol.push(l);
        }
        Self { chol, x, m }
    }

    fn p(&self) -> usize {
        self.chol.len()
    }

    /// `u_j = L_j^T theta_j`.
    fn to_white(&self, theta_row: ArrayView1<f64>, out: &mut [f64]) {
        let m = self.m;
        for (j, l) in self.chol.iter().enumerate() {
            for a in 0..m {
                let mut acc = 0.0;
                for b in a..m {
                    acc += l[(b, a)] * theta_row[j * m + b];
                }
                out[j * m + a] = acc;
            }
        }
    }

    /// `theta_j = L_j^{-T} u_j`.
    fn unwhiten(&self, u: &[f64], out: &mut [f64]) {
        let m = self.m;
        for (j, l) in self.chol.iter().enumerate() {
            let rhs = DVector::from_column_slice(&u[j * m..(j + 1) * m]);
            let sol = l.transpose().solve_upper_triangular(&rhs).expect("invertible factor");
            out[j * m..(j + 1) * m].copy_from_slice(sol.as_slice());
        }
    }
}

/// Eigen-decomposition of a block's weighted Gram in whitened coordinates.
struct BlockCurvature {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

impl BlockCurvature {
    fn new(a: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(a);
        let top = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
        let floor = 1e-13 * (1.0 + top);
        Self { values: eig.eigenvalues.iter().map(|&d| d.max(floor)).collect(), vectors: eig.eigenvectors }
    }

    /// Minimizer of `u^T A u - 2 b^T u + lambda |u|`.
    fn solve(&self, b: &[f64], lambda: f64, out: &mut [f64]) {
        let m = b.len();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if 2.0 * bnorm <= lambda {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        // Coordinates in the eigenbasis: c_k = 2 (V^T b)_k, curvature a_k = 2 d_k.
        let mut c = vec![0.0; m];
        for k in 0..m {
            let mut acc = 0.0;
            for r in 0..m {
                acc += self.vectors[(r, k)] * b[r];
            }
            c[k] = 2.0 * acc;
        }
        let a: Vec<f64> = self.values.iter().map(|d| 2.0 * d).collect();
        let mu = if lambda == 0.0 { 0.0 } else { secular_root(&a, &c, lambda) };
        for r in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                acc += self.vectors[(r, k)] * c[k] / (a[k] + mu);
            }
            out[r] = acc;
        }
    }
}

/// Root `mu > 0` of `1 / |u(mu)| = mu / lambda` with `u_k(mu) = c_k / (a_k + mu)`.
///
/// The left side is concave in `mu`, so Newton started to the right of the
/// root decreases monotonically onto it.
fn secular_root(a: &[f64], c: &[f64], lambda: f64) -> f64 {
    let cnorm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a_max = a.iter().copied().fold(0.0_f64, f64::max);
    let mut mu = lambda * a_max / (cnorm - lambda) * (1.0 + 1e-12) + f64::MIN_POSITIVE;
    for _ in 0..100 {
        let (mut s2, mut s3) = (0.0, 0.0);
        for (&ak, &ck) in a.iter().zip(c) {
            let d = ak + mu;
            s2 += ck * ck / (d * d);
            s3 += ck * ck / (d * d * d);
        }
        let norm = s2.sqrt();
        let g = 1.0 / norm - mu / lambda;
        let dg = s3 / (norm * norm * norm) - 1.0 / lambda;
        let next = (mu - g / dg).max(0.0);
        if (next - mu).abs() <= 1e-15 * mu.max(f64::MIN_POSITIVE) {
            return next;
        }
        mu = next;
    }
    mu
}

/// Group-lasso drift update for every `(state, target)` pair.
pub fn m_step_theta(
    y: &Array2<f64>,
    psi: &PsiFeatures,
    w: &Array2<f64>,
    lambda: f64,
    theta_init: &Array4<f64>,
    solver: &InnerSolver,
) -> Result<ThetaStep> {
    let design = Design::new(y, psi)?;
    let whitening = Whitening::new(&design);
    m_step_theta_design(&design, &whitening, w, lambda, theta_init, solver)
}

pub(crate) fn m_step_theta_design(
    design: &Design,
    whitening: &Whitening,
    w: &Array2<f64>,
    lambda: f64,
    theta_init: &Array4<f64>,
    solver: &InnerSolver,
) -> Result<ThetaStep> {
    let (k, p, _, m) = theta_init.dim();
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("penalty must be finite and non-negative, got {lambda}")));
    }
    let lambda = penalty_weight(lambda, design.n());
    if w.dim() != (design.n(), k) || p != design.p || m != design.m || whitening.p() != p {
        return Err(Error::Shape(format!(
            "weights {:?}, theta {:?}, design n = {}, p = {}, m = {}",
            w.dim(),
            theta_init.dim(),
            design.n(),
            design.p,
            design.m
        )));
    }
    let pm = p * m;
    let mut theta = theta_init.clone();
    let mut frozen = Vec::new();
    let mut max_sweeps_used = 0;
    let mut converged = true;
    for state in 0..k {
        let weights = w.column(state);
        if weights.sum() < DEGENERATE_WEIGHT {
            frozen.push(state);
            continue;
        }
        let xw = &whitening.x * &weights.insert_axis(Axis(1));
        let gram = xw.t().dot(&whitening.x);
        let cross = xw.t().dot(&design.dy);
        let gram_na = DMatrix::from_fn(pm, pm, |a, b| gram[[a, b]]);

        // Minimum-norm least squares; a state with few weighted rows can
        // leave the Gram singular.
        let direct = if lambda == 0.0 { Some(gram_na.clone().svd(true, true)) } else { None };
        let curvature: Vec<BlockCurvature> = if direct.is_none() {
            (0..p).map(|j| BlockCurvature::new(gram_na.view((j * m, j * m), (m, m)).into_owned())).collect()
        } else {
            Vec::new()
        };

        let mut u = vec![0.0; pm];
        let mut theta_row = vec![0.0; pm];
        for target in 0..p {
            let rhs = cross.column(target);
            if let Some(svd) = &direct {
                let cutoff = SVD_RCOND * svd.singular_values.max();
                let sol = svd.solve(&DVector::from_iterator(pm, rhs.iter().copied()), cutoff).expect("factors were computed");
                u.copy_from_slice(sol.as_slice());
            } else {
                let init = theta.slice(s![state, target, .., ..]);
                let init_flat = init.to_shape(pm).expect("contiguous block").to_owned();
                whitening.to_white(init_flat.view(), &mut u);
                let sweeps = solve_group_lasso(&gram_na, rhs, &curvature, lambda, &mut u, m, solver);
                max_sweeps_used = max_sweeps_used.max(sweeps);
                if sweeps >= solver.max_sweeps {
                    converged = false;
                }
            }
            whitening.unwhiten(&u, &mut theta_row);
            for j in 0..p {
                let zero = u[j * m..(j + 1) * m].iter().all(|&v| v == 0.0);
                for b in 0..m {
                    theta[[state, target, j, b]] = if zero { 0.0 } else { theta_row[j * m + b] };
                }
            }
        }
    }
    if !converged {
        log::warn!("group-lasso inner solver hit {} sweeps without converging", solver.max_sweeps);
    }
    Ok(ThetaStep { theta, frozen, max_sweeps_used, converged })
}

/// Solves `min_u u^T C u - 2 c^T u + lambda sum_j |u_j|` starting from `u`.
///
/// Rounds of exact block coordinate descent settle which blocks are zero;
/// Newton's method on the non-zero blocks, where the penalty is smooth, then
/// polishes them. Stops once the optimality conditions hold to
/// `solver.tol * (1 + |2c|_inf)`. Returns the number of sweeps and Newton
/// steps spent.
fn solve_group_lasso(
    gram: &DMatrix<f64>,
    rhs: ArrayView1<f64>,
    curvature: &[BlockCurvature],
    lambda: f64,
    u: &mut [f64],
    m: usize,
    solver: &InnerSolver,
) -> usize {
    let pm = u.len();
    let p = pm / m;
    let c: Vec<f64> = rhs.to_vec();
    let scale = 1.0 + c.iter().fold(0.0_f64, |a, v| a.max(2.0 * v.abs()));
    let tol = solver.tol * scale;
    // resid = c - C u
    let mut resid: Vec<f64> = (0..pm)
        .map(|a| c[a] - (0..pm).map(|b| gram[(a, b)] * u[b]).sum::<f64>())
        .collect();
    let mut spent = 0;
    let mut b = vec![0.0; m];
    let mut next = vec![0.0; m];
    while spent < solver.max_sweeps {
        // A few coordinate-descent sweeps.
        for _ in 0..4 {
            spent += 1;
            for j in 0..p {
                let off = j * m;
                for a in 0..m {
                    let mut acc = resid[off + a];
                    for cc in 0..m {
                        acc += gram[(off + a, off + cc)] * u[off + cc];
                    }
                    b[a] = acc;
                }
                curvature[j].solve(&b, lambda, &mut next);
                let changed = (0..m).any(|a| next[a] != u[off + a]);
                if changed {
                    for (row, r) in resid.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for a in 0..m {
                            acc += gram[(row, off + a)] * (next[a] - u[off + a]);
                        }
                        *r -= acc;
                    }
                    u[off..off + m].copy_from_slice(&next);
                }
            }
        }
        // Newton polish on the active blocks.
        let active: Vec<usize> = (0..p).filter(|&j| u[j * m..(j + 1) * m].iter().any(|&v| v != 0.0)).collect();
        if !active.is_empty() {
            spent += newton_active(gram, &c, lambda, u, m, &active, tol, solver.max_sweeps.saturating_sub(spent));
            for (a, r) in resid.iter_mut().enumerate() {
                *r = c[a] - (0..pm).map(|bb| gram[(a, bb)] * u[bb]).sum::<f64>();
            }
        }
        if kkt_violation(&resid, u, lambda, m) <= tol {
            break;
        }
    }
    spent
}

/// Largest violation of the optimality conditions in whitened coordinates.
fn kkt_violation(resid: &[f64], u: &[f64], lambda: f64, m: usize) -> f64 {
    let p = u.len() / m;
    let mut worst: f64 = 0.0;
    for j in 0..p {
        let blk = &u[j * m..(j + 1) * m];
        let g: Vec<f64> = resid[j * m..(j + 1) * m].iter().map(|r| -2.0 * r).collect();
        let norm = blk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(gn - lambda);
        } else {
            let st = g.iter().zip(blk).map(|(gi, ui)| (gi + lambda * ui / norm).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(st);
        }
    }
    worst
}

fn objective(gram: &DMatrix<f64>, c: &[f64], lambda: f64, u: &[f64], m: usize) -> f64 {
    let n = u.len();
    let mut quad = 0.0;
    for a in 0..n {
        if u[a] == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for b in 0..n {
            acc += gram[(a, b)] * u[b];
        }
        quad += u[a] * (acc - 2.0 * c[a]);
    }
    let pen: f64 = u.chunks(m).map(|blk| blk.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    quad + lambda * pen
}

/// Damped Newton iterations over the blocks in `active`, others held at zero.
///
/// A block whose Newton direction points back through the origin is cut to
/// zero at the crossing and leaves the active set, provided the objective
/// does not increase. Returns the number of steps taken.
#[allow(clippy::too_many_arguments)]
fn newton_active(
    gram: &DMatrix<f64>,
    c: &[f64],
    lambda: f64,
    u: &mut [f64],
    m: usize,
    active: &[usize],
    tol: f64,
    budget: usize,
) -> usize {
    let mut active = active.to_vec();
    let mut steps = 0;
    let mut f = objective(gram, c, lambda, u, m);
    let mut trial = u.to_vec();
    while steps < budget.min(200) && !active.is_empty() {
        steps += 1;
        let idx: Vec<usize> = active.iter().flat_map(|&j| j * m..(j + 1) * m).collect();
        let na = idx.len();
        let mut grad = DVector::zeros(na);
        let mut hess = DMatrix::zeros(na, na);
        for (r, &a) in idx.iter().enumerate() {
            let mut cu = 0.0;
            for (col, &bb) in idx.iter().enumerate() {
                hess[(r, col)] = 2.0 * gram[(a, bb)];
            }
            for (bb, &ub) in u.iter().enumerate() {
                cu += gram[(a, bb)] * ub;
            }
            grad[r] = 2.0 * (cu - c[a]);
        }
        for (pos, &j) in active.iter().enumerate() {
            let blk = &u[j * m..(j + 1) * m];
            let norm = blk.iter().map(|v| v * v).sum::<f64>().sqrt();
            for a in 0..m {
                grad[pos * m + a] += lambda * blk[a] / norm;
                for bb in 0..m {
                    let eye = if a == bb { 1.0 } else { 0.0 };
                    hess[(pos * m + a, pos * m + bb)] += lambda * (eye / norm - blk[a] * blk[bb] / norm.powi(3));
                }
            }
        }
        if grad.amax() <= tol * 1e-2 {
            break;
        }
        let ridge = 1e-13 * (1.0 + hess.diagonal().amax());
        for r in 0..na {
            hess[(r, r)] += ridge;
        }
        let Some(chol) = hess.cholesky() else { break };
        let dir = -chol.solve(&grad);
        let slope = grad.dot(&dir);
        if !(slope < 0.0) {
            break;
        }

        // First block to cross the origin along the step, if any.
        let mut crossing: Option<(f64, usize)> = None;
        for (pos, &j) in active.iter().enumerate() {
            let blk = &u[j * m..(j + 1) * m];
            let d = &dir.as_slice()[pos * m..(pos + 1) * m];
            let uu: f64 = blk.iter().map(|v| v * v).sum();
            let ud: f64 = blk.iter().zip(d).map(|(x, y)| x * y).sum();
            if ud < 0.0 {
                let at = uu / -ud;
                if at <= 1.0 && crossing.is_none_or(|(best, _)| at < best) {
                    crossing = Some((at, pos));
                }
            }
        }
        if let Some((at, pos)) = crossing {
            trial.copy_from_slice(u);
            for (r, &a) in idx.iter().enumerate() {
                trial[a] = u[a] + at * dir[r];
            }
            let j = active[pos];
            trial[j * m..(j + 1) * m].iter_mut().for_each(|v| *v = 0.0);
            let ft = objective(gram, c, lambda, &trial, m);
            if ft <= f {
                u.copy_from_slice(&trial);
                f = ft;
                active.remove(pos);
                continue;
            }
        }

        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            trial.copy_from_slice(u);
            for (r, &a) in idx.iter().enumerate() {
                trial[a] = u[a] + alpha * dir[r];
            }
            let ft = objective(gram, c, lambda, &trial, m);
            if ft <= f + 1e-4 * alpha * slope {
                moved = ft < f;
                u.copy_from_slice(&trial);
                f = ft;
                break;
            }
            alpha *= 0.5;
        }
        if !moved || alpha < 1e-6 {
            // Stalled; coordinate descent takes over.
            break;
        }
    }
    steps
}

/// `sum_{n, l, i} w[n, l] r_{n,l,i}^2` with residuals `dy - theta^l psi`.
pub(crate) fn weighted_rss(design: &Design, w: &Array2<f64>, theta: &Array4<f64>) -> f64 {
    let k = theta.dim().0;
    let mut total = 0.0;
    for state in 0..k {
        let resid = design.residuals(theta, state);
        let sq: Array1<f64> = resid.mapv(|v| v * v).sum_axis(Axis(1));
        total += sq.dot(&w.column(state));
    }
    total
}

/// Group penalty `sum_{l,i,j} sqrt(sum_n <theta^l_{ij}, psi_{n,j}>^2)` (without `lambda`).
pub(crate) fn group_penalty(design: &Design, theta: &Array4<f64>) -> f64 {
    let (k, p, _, m) = theta.dim();
    let mut total = 0.0;
    for j in 0..p {
        let block = design.x.slice(s![.., j * m..(j + 1) * m]);
        let gram = block.t().dot(&block);
        for state in 0..k {
            for target in 0..p {
                let v = theta.slice(s![state, target, j, ..]);
                let quad = v.dot(&gram.dot(&v));
                total += quad.max(0.0).sqrt();
            }
        }
    }
    total
}

/// Group penalty of `theta` on the given data (without `lambda`).
pub fn penalty(y: &Array2<f64>, psi: &PsiFeatures, theta: &Array4<f64>) -> Result<f64> {
    let design = Design::new(y, psi)?;
    Ok(group_penalty(&design, theta))
}

/// Noise variance update `(weighted RSS + penalty_weight * penalty) / (2 p N)`.
///
/// The penalty shares the residual's `1 / (4 sigma^2)` scale, so it enters
/// the variance update as well; with `lambda = 0` this is the plain weighted
/// residual mean square.
pub fn m_step_sigma(y: &Array2<f64>, psi: &PsiFeatures, w: &Array2<f64>, theta: &Array4<f64>, lambda: f64) -> Result<f64> {
    let design = Design::new(y, psi)?;
    if w.dim() != (design.n(), theta.dim().0) {
        return Err(Error::Shape(format!("weights are {:?}", w.dim())));
    }
    Ok(sigma_update(&design, w, theta, lambda))
}

pub(crate) fn sigma_update(design: &Design, w: &Array2<f64>, theta: &Array4<f64>, lambda: f64) -> f64 {
    let pen = if lambda > 0.0 { penalty_weight(lambda, design.n()) * group_penalty(design, theta) } else { 0.0 };
    let value = (weighted_rss(design, w, theta) + pen) / (2.0 * design.p as f64 * design.n() as f64);
    value.max(SIGMA2_FLOOR)
}

/// The expected complete-data objective `L(new | old)` minus the group penalty.
///
/// `estep` carries the smoothed marginals and the `(m_hat, tau_hat)`
/// statistics computed under the old parameters.
pub fn penalized_objective(
    y: &Array2<f64>,
    psi: &PsiFeatures,
    params: &ModelParams,
    posterior: &Posterior,
    estep: &EStepStats,
    lambda: f64,
) -> Result<f64> {
    let design = Design::new(y, psi)?;
    design.check_params(params)?;
    if posterior.w.dim() != (design.n(), params.k()) {
        return Err(Error::Shape(format!("posterior weights are {:?}", posterior.w.dim())));
    }
    objective_parts(&design, params, &posterior.w, estep, lambda).map(|o| o.penalized())
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ObjectiveParts {
    pub chain: f64,
    pub gaussian: f64,
    /// `penalty_weight * penalty / (4 sigma^2)`.
    pub penalty: f64,
}

impl ObjectiveParts {
    pub fn penalized(&self) -> f64 {
        self.chain + self.gaussian - self.penalty
    }

    pub fn unpenalized(&self) -> f64 {
        self.chain + self.gaussian
    }
}

pub(crate) fn objective_parts(
    design: &Design,
    params: &ModelParams,
    w: &Array2<f64>,
    estep: &EStepStats,
    lambda: f64,
) -> Result<ObjectiveParts> {
    let k = params.k();
    let mut chain = 0.0;
    for a in 0..k {
        chain -= params.q.exit_rate(a) * estep.tau_hat[a];
        for b in 0..k {
            if a == b {
                continue;
            }
            let count = estep.m_hat[(a, b)];
            if count > 0.0 {
                let rate = params.q.rate(a, b);
                if !(rate > 0.0) {
                    return Err(Error::Domain(format!(
                        "rate ({a},{b}) is zero but {count:e} transitions are expected"
                    )));
                }
                chain += count * rate.ln();
            }
        }
    }
    let (n, p) = (design.n() as f64, design.p as f64);
    let s2 = params.sigma2;
    let rss = weighted_rss(design, w, &params.theta);
    let gaussian = -0.5 * n * p * (4.0 * std::f64::consts::PI * s2).ln() - rss / (4.0 * s2);
    let penalty = if lambda > 0.0 { penalty_weight(lambda, design.n()) * group_penalty(design, &params.theta) / (4.0 * s2) } else { 0.0 };
    Ok(ObjectiveParts { chain, gaussian, penalty })
}

/// Optimality diagnostics of a drift update, stated for the residual sum of
/// squares plus `lambda' = penalty_weight(lambda, N)` times the `G_j`-norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Largest `|grad_j|_{G_j^{-1}} / lambda'` over zero blocks (0 when none).
    pub zero_ratio: f64,
    /// Largest `|grad_j|_{G_j^{-1}}` over zero blocks when `lambda = 0`.
    pub zero_gradient: f64,
    /// Largest `|grad_j + lambda' G_j theta_j / |theta_j|_{G_j}|_{G_j^{-1}}` over active blocks.
    pub stationarity: f64,
}

/// Checks the group-lasso optimality conditions directly in the original
/// coordinates. `frozen` states are skipped.
pub fn kkt_residuals(
    y: &Array2<f64>,
    psi: &PsiFeatures,
    w: &Array2<f64>,
    lambda: f64,
    theta: &Array4<f64>,
    frozen: &[usize],
) -> Result<KktReport> {
    let design = Design::new(y, psi)?;
    let lambda = penalty_weight(lambda, design.n());
    let (k, p, _, m) = theta.dim();
    let grams: Vec<DMatrix<f64>> = (0..p)
        .map(|j| {
            let block = design.x.slice(s![.., j * m..(j + 1) * m]);
            let g = block.t().dot(&block);
            DMatrix::from_fn(m, m, |a, b| g[[a, b]])
        })
        .collect();
    let mut report = KktReport { zero_ratio: 0.0, zero_gradient: 0.0, stationarity: 0.0 };
    for state in 0..k {
        if frozen.contains(&state) {
            continue;
        }
        let resid = design.residuals(theta, state);
        let weighted = &resid * &w.column(state).insert_axis(Axis(1));
        // Gradient of the smooth part: -2 sum_n w_n r_{n,i} psi_{n,j}.
        let grad_all = design.x.t().dot(&weighted).mapv(|v| -2.0 * v);
        for target in 0..p {
            for j in 0..p {
                let g = DVector::from_fn(m, |a, _| grad_all[[j * m + a, target]]);
                let gram = &grams[j];
                let v = DVector::from_fn(m, |a, _| theta[[state, target, j, a]]);
                let dual = |x: &DVector<f64>| -> f64 {
                    match gram.clone().cholesky() {
                        Some(c) => x.dot(&c.solve(x)).max(0.0).sqrt(),
                        None => x.norm() / gram.norm().max(1e-300).sqrt(),
                    }
                };
                if v.iter().all(|&t| t == 0.0) {
                    let d = dual(&g);
                    if lambda > 0.0 {
                        report.zero_ratio = report.zero_ratio.max(d / lambda);
                    } else {
                        report.zero_gradient = report.zero_gradient.max(d);
                    }
                } else {
                    let gv = gram * &v;
                    let norm = v.dot(&gv).max(0.0).sqrt();
                    let station = if norm > 0.0 { &g + gv * (lambda / norm) } else { g.clone() };
                    report.stationarity = report.stationarity.max(dual(&station));
                }
            }
        }
    }
    Ok(report)
}
