//! The EM loop, warm-started penalty paths and the grouped variant.
//!
//! The law of `Z(t_0)` is carried as its own parameter: it starts at the
//! stationary law of the initial generator and is re-estimated from the
//! smoothed initial marginal at each M-step. With that choice every M-step is
//! an exact maximizer and the traced objective, the observed log-likelihood
//! minus `penalty_weight(lambda, N) * penalty / (4 sigma^2)`, cannot decrease.

use nalgebra::DMatrix;
use ndarray::{Array2, Array4, Axis};
use rand_distr::{Distribution, Uniform};

use super::mstep::{
    e_step_statistics, floor_rates, group_penalty, penalty_weight, m_step_q, m_step_theta_design, objective_parts, sigma_update,
    EStepStats, InnerSolver, Whitening,
};
use super::params::{init_params, ModelParams};
use super::posterior::{forward_backward_design, truncated_design, Design, Posterior};
use crate::ctmc::{stationary_distribution, RateMatrix};
use crate::denoise::PsiFeatures;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Number of draws in the default penalty grid.
pub const DEFAULT_GRID_SIZE: usize = 100;

/// `log(lambda)` range of the default grid.
pub const GRID_LOG_RANGE: (f64, f64) = (-7.0, -1.0);

/// Largest relative objective decrease tolerated before the fit is declared inconsistent.
const DECREASE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop once `|dF| / (1 + |F|) < tol`.
    pub tol: f64,
    /// Window radius for truncated smoothing; `None` runs the exact smoother.
    pub trunc_r: Option<usize>,
    pub inner: InnerSolver,
    /// Cold starts at the smallest penalty of a path fit. Zero keeps the
    /// plain descending warm-start sweep.
    pub restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { lambda: 0.0, max_iter: 500, tol: 1e-6, trunc_r: None, inner: InnerSolver::default(), restarts: 8 }
    }
}

impl FitConfig {
    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Argument(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Argument(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Argument("max_iter must be at least 1".into()));
        }
        if self.trunc_r == Some(0) {
            return Err(Error::Argument("truncation radius must be at least 1".into()));
        }
        if !(self.inner.tol > 0.0) || self.inner.max_sweeps == 0 {
            return Err(Error::Argument("inner solver needs a positive tolerance and sweep budget".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Fitted law of `Z(t_0)`.
    pub initial: Vec<f64>,
    pub lambda: f64,
    /// Penalized observed-data objective after each E-step, starting at the initial parameters.
    pub loglik_trace: Vec<f64>,
    pub posterior: Posterior,
    /// Expected transitions and dwell times under the fitted parameters.
    pub estep: EStepStats,
    /// Unpenalized expected complete-data log-likelihood `L(theta_hat | theta_hat)`.
    pub complete_loglik: f64,
    /// `penalty_weight(lambda, N) * penalty / (4 sigma^2)` at the fitted parameters.
    pub penalty: f64,
    pub converged: bool,
    /// Number of M-steps performed.
    pub iterations: usize,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }

    /// Number of intervals `N`.
    pub fn n(&self) -> usize {
        self.posterior.n()
    }
}

/// One observation sequence of a grouped fit.
#[derive(Debug, Clone, Copy)]
pub struct GroupMember<'a> {
    pub y: &'a Array2<f64>,
    pub psi: &'a PsiFeatures,
    pub group: usize,
}

#[derive(Debug, Clone)]
pub struct GroupedFit {
    /// Shared drift and noise; `params.q` is the generator of group 0.
    pub params: ModelParams,
    /// Generator per group.
    pub q: Vec<RateMatrix>,
    pub member_groups: Vec<usize>,
    pub initial: Vec<Vec<f64>>,
    pub posteriors: Vec<Posterior>,
    pub estep: Vec<EStepStats>,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl GroupedFit {
    pub fn n_groups(&self) -> usize {
        self.q.len()
    }
}

/// Prepared data of one sequence.
struct Member {
    design: Design,
    h: f64,
    group: usize,
}

/// Everything the EM loop needs that does not depend on the parameters.
struct Prepared {
    members: Vec<Member>,
    stacked: Design,
    whitening: Whitening,
    n_groups: usize,
}

impl Prepared {
    fn new(parts: &[GroupMember<'_>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Argument("no observation sequences".into()));
        }
        let n_groups = parts.iter().map(|g| g.group).max().unwrap_or(0) + 1;
        for group in 0..n_groups {
            if !parts.iter().any(|g| g.group == group) {
                return Err(Error::Argument(format!("group {group} has no members")));
            }
        }
        let members = parts
            .iter()
            .map(|g| Ok(Member { design: Design::new(g.y, g.psi)?, h: g.psi.h, group: g.group }))
            .collect::<Result<Vec<_>>>()?;
        let stacked = if members.len() == 1 {
            members[0].design.clone()
        } else {
            Design::stack(&members.iter().map(|m| &m.design).collect::<Vec<_>>())?
        };
        let whitening = Whitening::new(&stacked);
        Ok(Self { members, stacked, whitening, n_groups })
    }
}

struct State {
    q: Vec<RateMatrix>,
    initial: Vec<Vec<f64>>,
    theta: Array4<f64>,
    sigma2: f64,
}

impl State {
    fn params(&self, group: usize) -> ModelParams {
        ModelParams { q: self.q[group].clone(), theta: self.theta.clone(), sigma2: self.sigma2 }
    }
}

struct EmOutput {
    state: State,
    posteriors: Vec<Posterior>,
    estep: Vec<EStepStats>,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn e_step(prep: &Prepared, state: &State, trunc_r: Option<usize>) -> Result<Vec<Posterior>> {
    prep.members
        .iter()
        .enumerate()
        .map(|(idx, member)| {
            let params = state.params(member.group);
            match trunc_r {
                Some(r) => truncated_design(&member.design, &params, &state.initial[idx], member.h, r),
                None => forward_backward_design(&member.design, &params, &state.initial[idx], member.h),
            }
        })
        .collect()
}

fn stacked_weights(posteriors: &[Posterior]) -> Array2<f64> {
    if posteriors.len() == 1 {
        return posteriors[0].w.clone();
    }
    let views: Vec<_> = posteriors.iter().map(|p| p.w.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("posteriors share k")
}

fn run_em(prep: &Prepared, mut state: State, config: &FitConfig) -> Result<EmOutput> {
    config.validate()?;
    let lambda = config.lambda;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut posteriors;
    loop {
        posteriors = e_step(prep, &state, config.trunc_r)?;
        let loglik: f64 = posteriors.iter().map(|p| p.loglik).sum();
        let pen = if lambda > 0.0 { penalty_weight(lambda, prep.stacked.n()) * group_penalty(&prep.stacked, &state.theta) / (4.0 * state.sigma2) } else { 0.0 };
        let objective = loglik - pen;
        if !objective.is_finite() {
            return Err(Error::Domain(format!("objective is not finite at iteration {iterations}")));
        }
        if let Some(&prev) = trace.last() {
            let decrease = prev - objective;
            if config.trunc_r.is_none() && decrease > DECREASE_SLACK * prev.abs().max(1.0) {
                return Err(Error::ObjectiveDecrease { iteration: iterations, decrease });
            }
            if (objective - prev).abs() / (1.0 + objective.abs()) < config.tol {
                converged = true;
            }
        }
        trace.push(objective);
        if converged || iterations == config.max_iter {
            break;
        }

        // M-step.
        let k = state.theta.dim().0;
        let mut m_sum = vec![DMatrix::zeros(k, k); prep.n_groups];
        let mut tau_sum = vec![vec![0.0; k]; prep.n_groups];
        for (member, post) in prep.members.iter().zip(&posteriors) {
            let stats = e_step_statistics(post, &state.q[member.group], member.h)?;
            m_sum[member.group] += &stats.m_hat;
            for (acc, t) in tau_sum[member.group].iter_mut().zip(&stats.tau_hat) {
                *acc += t;
            }
        }
        for group in 0..prep.n_groups {
            let q = m_step_q(&m_sum[group], &tau_sum[group]).map_err(|e| match e {
                Error::DegenerateState { state, .. } => Error::DegenerateState { state, iteration: iterations },
                other => other,
            })?;
            state.q[group] = floor_rates(&q)?;
        }
        for (idx, post) in posteriors.iter().enumerate() {
            state.initial[idx] = post.initial.to_vec();
        }
        let w = stacked_weights(&posteriors);
        let step = m_step_theta_design(&prep.stacked, &prep.whitening, &w, lambda, &state.theta, &config.inner)?;
        for &frozen in &step.frozen {
            log::debug!("state {frozen} has negligible weight at iteration {iterations}; drift block frozen");
        }
        state.theta = step.theta;
        state.sigma2 = sigma_update(&prep.stacked, &w, &state.theta, lambda);
        iterations += 1;
    }
    let estep = prep
        .members
        .iter()
        .zip(&posteriors)
        .map(|(member, post)| e_step_statistics(post, &state.q[member.group], member.h))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmOutput { state, posteriors, estep, trace, converged, iterations })
}

fn start_state(prep: &Prepared, init: &ModelParams, q: Vec<RateMatrix>) -> Result<State> {
    prep.stacked.check_params(init)?;
    let initial = prep
        .members
        .iter()
        .map(|m| stationary_distribution(&q[m.group]))
        .collect::<Result<Vec<_>>>()?;
    Ok(State { q, initial, theta: init.theta.clone(), sigma2: init.sigma2 })
}

fn single_result(prep: &Prepared, out: EmOutput, lambda: f64) -> Result<FitResult> {
    let params = out.state.params(0);
    let posterior = out.posteriors.into_iter().next().expect("one member");
    let estep = out.estep.into_iter().next().expect("one member");
    let parts = objective_parts(&prep.stacked, &params, &posterior.w, &estep, lambda)?;
    Ok(FitResult {
        initial: out.state.initial.into_iter().next().expect("one member"),
        params,
        lambda,
        loglik_trace: out.trace,
        posterior,
        estep,
        complete_loglik: parts.unpenalized(),
        penalty: parts.penalty,
        converged: out.converged,
        iterations: out.iterations,
    })
}

fn fit_prepared(prep: &Prepared, init: &ModelParams, config: &FitConfig) -> Result<FitResult> {
    let state = start_state(prep, init, vec![init.q.clone()])?;
    let out = run_em(prep, state, config)?;
    single_result(prep, out, config.lambda)
}

/// Runs EM from `init` until the relative objective change drops below `config.tol`.
pub fn fit(y: &Array2<f64>, psi: &PsiFeatures, init: &ModelParams, config: &FitConfig) -> Result<FitResult> {
    let prep = Prepared::new(&[GroupMember { y, psi, group: 0 }])?;
    fit_prepared(&prep, init, config)
}

/// Unpenalized expected complete-data log-likelihood of a fit, recomputed from
/// its parameters, posterior and sufficient statistics.
pub fn complete_loglik(y: &Array2<f64>, psi: &PsiFeatures, result: &FitResult) -> Result<f64> {
    let design = Design::new(y, psi)?;
    design.check_params(&result.params)?;
    Ok(objective_parts(&design, &result.params, &result.posterior.w, &result.estep, 0.0)?.unpenalized())
}

/// The default penalty grid: `exp(u)` for `u` drawn uniformly from
/// [`GRID_LOG_RANGE`], sorted in descending order.
pub fn default_lambda_grid(seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, 0x1a3b));
    let unif = Uniform::new_inclusive(GRID_LOG_RANGE.0, GRID_LOG_RANGE.1).expect("valid range");
    let mut grid: Vec<f64> = (0..DEFAULT_GRID_SIZE).map(|_| unif.sample(&mut rng).exp()).collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid
}

fn check_descending(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Argument("empty lambda path".into()));
    }
    if lambdas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Argument("lambda path must be sorted in descending order".into()));
    }
    Ok(())
}

/// Fits along a descending penalty path.
///
/// The descending sweep starts from [`init_params`]`(k, p, m, seed)` and
/// warm-starts every later penalty from the previous solution. With
/// `config.restarts > 0` the smallest penalty is also fitted from that many
/// further random starts, the best of them is carried back up the path, and
/// each entry keeps whichever sweep reached the higher penalized objective.
/// EM with a heavy penalty tends to merge the states, and a descending sweep
/// cannot split them again; the ascending sweep can keep them apart.
pub fn lambda_path_fit(
    y: &Array2<f64>,
    psi: &PsiFeatures,
    k: usize,
    lambdas: &[f64],
    config: &FitConfig,
    seed: u64,
) -> Result<Vec<FitResult>> {
    lambda_path_fit_lenient(y, psi, k, lambdas, config, seed)?.into_iter().collect()
}

/// Like [`lambda_path_fit`] but keeps going after a failed fit; the next
/// entry then starts from the last successful solution.
pub fn lambda_path_fit_lenient(
    y: &Array2<f64>,
    psi: &PsiFeatures,
    k: usize,
    lambdas: &[f64],
    config: &FitConfig,
    seed: u64,
) -> Result<Vec<Result<FitResult>>> {
    check_descending(lambdas)?;
    let prep = Prepared::new(&[GroupMember { y, psi, group: 0 }])?;
    let first = init_params(k, psi.p(), psi.m(), seed)?;
    let mut out = sweep(&prep, lambdas.iter().copied(), first, config);
    if config.restarts == 0 {
        return Ok(out);
    }

    let last = lambdas.len() - 1;
    let smallest = config.with_lambda(lambdas[last]);
    let mut best: Option<FitResult> = None;
    for r in 0..config.restarts {
        let init = init_params(k, psi.p(), psi.m(), derive_seed(seed, r as u64 + 1))?;
        match fit_prepared(&prep, &init, &smallest) {
            Ok(fit) if best.as_ref().is_none_or(|b| fit.objective() > b.objective()) => best = Some(fit),
            Ok(_) => {}
            Err(e) => log::debug!("restart {r} at lambda = {:e} failed: {e}", lambdas[last]),
        }
    }
    let Some(best) = best else { return Ok(out) };
    let mut up = sweep(&prep, lambdas[..last].iter().rev().copied(), best.params.clone(), config);
    up.reverse();
    up.push(Ok(best));
    for (slot, candidate) in out.iter_mut().zip(up) {
        let better = match (&*slot, &candidate) {
            (_, Err(_)) => false,
            (Err(_), Ok(_)) => true,
            (Ok(a), Ok(b)) => b.objective() > a.objective(),
        };
        if better {
            *slot = candidate;
        }
    }
    Ok(out)
}

/// Warm-started fits over `lambdas` in the given order.
fn sweep(
    prep: &Prepared,
    lambdas: impl Iterator<Item = f64>,
    mut start: ModelParams,
    config: &FitConfig,
) -> Vec<Result<FitResult>> {
    lambdas
        .map(|lambda| {
            let result = fit_prepared(prep, &start, &config.with_lambda(lambda));
            if let Ok(r) = &result {
                start = r.params.clone();
            }
            result
        })
        .collect()
}

/// Shared drift and noise with one generator per group.
///
/// `init.q` seeds every group's generator.
pub fn fit_grouped(members: &[GroupMember<'_>], init: &ModelParams, config: &FitConfig) -> Result<GroupedFit> {
    let prep = Prepared::new(members)?;
    let state = start_state(&prep, init, vec![init.q.clone(); prep.n_groups])?;
    let out = run_em(&prep, state, config)?;
    Ok(GroupedFit {
        params: out.state.params(0),
        q: out.state.q,
        member_groups: members.iter().map(|m| m.group).collect(),
        initial: out.state.initial,
        posteriors: out.posteriors,
        estep: out.estep,
        loglik_trace: out.trace,
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// Drift estimates along a descending penalty path when the latent states at
/// the sampling times are known (`states[0..=N]`); each solution warm-starts the next.
pub fn fit_theta_known_states(
    y: &Array2<f64>,
    psi: &PsiFeatures,
    states: &[usize],
    k: usize,
    lambdas: &[f64],
    inner: &InnerSolver,
) -> Result<Vec<Array4<f64>>> {
    check_descending(lambdas)?;
    let design = Design::new(y, psi)?;
    if states.len() != design.n() + 1 {
        return Err(Error::Shape(format!("{} states for {} observations", states.len(), design.n() + 1)));
    }
    let w = Posterior::from_states(states, k)?.w;
    let whitening = Whitening::new(&design);
    let mut theta = Array4::zeros((k, design.p, design.p, design.m));
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        theta = m_step_theta_design(&design, &whitening, &w, lambda, &theta, inner)?.theta;
        out.push(theta.clone());
    }
    Ok(out)
}
