//! Gaussian increment emissions and forward-backward smoothing over the
//! discretized latent chain.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use super::params::ModelParams;
use crate::ctmc::{stationary_distribution, transition_matrix};
use crate::denoise::PsiFeatures;
use crate::error::{Error, Result};

/// Regression view of one observation sequence: increments
/// `dy[n, i] = y[n + 1, i] - y[n, i]` and flattened features
/// `x[n, j * m + b] = psi[n, j, b]`.
#[derive(Debug, Clone)]
pub struct Design {
    pub dy: Array2<f64>,
    pub x: Array2<f64>,
    pub p: usize,
    pub m: usize,
}

impl Design {
    pub fn new(y: &Array2<f64>, psi: &PsiFeatures) -> Result<Self> {
        let (rows, p) = y.dim();
        if rows < 3 {
            return Err(Error::Shape(format!("need at least 3 observations, got {rows}")));
        }
        if psi.n() != rows - 1 || psi.p() != p {
            return Err(Error::Shape(format!(
                "features are {} x {} x {}, observations are {rows} x {p}",
                psi.n(),
                psi.p(),
                psi.m()
            )));
        }
        let dy = &y.slice(s![1.., ..]) - &y.slice(s![..-1, ..]);
        let m = psi.m();
        let x = psi
            .psi
            .to_shape((rows - 1, p * m))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        Ok(Self { dy, x, p, m })
    }

    /// Stacks the rows of several designs; increments never bridge segments.
    pub fn stack(parts: &[&Design]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Argument("no segments to stack".into()))?;
        if parts.iter().any(|d| d.p != first.p || d.m != first.m) {
            return Err(Error::Shape("segments disagree on p or m".into()));
        }
        let dy_views: Vec<_> = parts.iter().map(|d| d.dy.view()).collect();
        let x_views: Vec<_> = parts.iter().map(|d| d.x.view()).collect();
        Ok(Self {
            dy: ndarray::concatenate(Axis(0), &dy_views).map_err(|e| Error::Shape(e.to_string()))?,
            x: ndarray::concatenate(Axis(0), &x_views).map_err(|e| Error::Shape(e.to_string()))?,
            p: first.p,
            m: first.m,
        })
    }

    pub fn n(&self) -> usize {
        self.dy.nrows()
    }

    pub(crate) fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.p() != self.p || params.m() != self.m {
            return Err(Error::Shape(format!(
                "parameters have p = {}, m = {}; data has p = {}, m = {}",
                params.p(),
                params.m(),
                self.p,
                self.m
            )));
        }
        Ok(())
    }

    /// Predicted increments `N x p` for one state.
    pub fn predictions(&self, theta: &ndarray::Array4<f64>, state: usize) -> Array2<f64> {
        let coef = theta_rows(theta, state);
        self.x.dot(&coef.t())
    }

    /// Residuals `dy - prediction` for one state.
    pub fn residuals(&self, theta: &ndarray::Array4<f64>, state: usize) -> Array2<f64> {
        &self.dy - &self.predictions(theta, state)
    }
}

/// `theta[state]` reshaped to `p x (p m)`.
pub(crate) fn theta_rows(theta: &ndarray::Array4<f64>, state: usize) -> Array2<f64> {
    let (_, p, _, m) = theta.dim();
    theta
        .index_axis(Axis(0), state)
        .to_shape((p, p * m))
        .expect("contiguous reshape")
        .to_owned()
}

/// Smoothed latent-state probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `w[n, l] = P(Z(t_{n+1}) = l | Y)`, `N x k`.
    pub w: Array2<f64>,
    /// `pair[n, i, j] = P(Z(t_n) = i, Z(t_{n+1}) = j | Y)`, `N x k x k`.
    pub pair: Array3<f64>,
    /// `P(Z(t_0) = l | Y)`.
    pub initial: Array1<f64>,
    /// `log p(Y_1..Y_N | Y_0)`.
    pub loglik: f64,
}

impl Posterior {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    /// Posterior that puts all mass on a known state sequence `states[0..=N]`.
    pub fn from_states(states: &[usize], k: usize) -> Result<Self> {
        if states.len() < 2 || states.iter().any(|&s| s >= k) {
            return Err(Error::Argument("state sequence must have length >= 2 with states < k".into()));
        }
        let n = states.len() - 1;
        let mut w = Array2::zeros((n, k));
        let mut pair = Array3::zeros((n, k, k));
        for t in 0..n {
            w[[t, states[t + 1]]] = 1.0;
            pair[[t, states[t], states[t + 1]]] = 1.0;
        }
        let mut initial = Array1::zeros(k);
        initial[states[0]] = 1.0;
        Ok(Self { w, pair, initial, loglik: f64::NAN })
    }
}

/// `log prod_i N(dy_i; prediction_i, 2 sigma^2)` for interval `n` (1-based, `1 <= n <= N`).
pub fn emission_logdensity(
    y: &Array2<f64>,
    psi: &PsiFeatures,
    params: &ModelParams,
    n: usize,
    state: usize,
) -> Result<f64> {
    if !(params.sigma2 > 0.0) {
        return Err(Error::Domain(format!("noise variance must be positive, got {}", params.sigma2)));
    }
    if n == 0 || n > psi.n() || n >= y.nrows() {
        return Err(Error::Domain(format!("interval index {n} outside 1..={}", psi.n())));
    }
    if state >= params.k() {
        return Err(Error::Domain(format!("state {state} out of range")));
    }
    let (p, m) = (params.p(), params.m());
    let var = 2.0 * params.sigma2;
    let mut out = -0.5 * p as f64 * (2.0 * std::f64::consts::PI * var).ln();
    for i in 0..p {
        let mut pred = 0.0;
        for j in 0..p {
            for b in 0..m {
                pred += params.theta[[state, i, j, b]] * psi.psi[[n - 1, j, b]];
            }
        }
        let r = y[[n, i]] - y[[n - 1, i]] - pred;
        out -= r * r / (2.0 * var);
    }
    Ok(out)
}

/// Log emission densities for all intervals and states, `N x k`.
pub(crate) fn log_emissions(design: &Design, params: &ModelParams) -> Array2<f64> {
    let (n, p, k) = (design.n(), design.p, params.k());
    let var = 2.0 * params.sigma2;
    let norm = -0.5 * p as f64 * (2.0 * std::f64::consts::PI * var).ln();
    let mut out = Array2::zeros((n, k));
    for state in 0..k {
        let resid = design.residuals(&params.theta, state);
        for (t, row) in resid.rows().into_iter().enumerate() {
            out[[t, state]] = norm - row.dot(&row) / (2.0 * var);
        }
    }
    out
}

/// Scaled forward-backward recursion.
///
/// `initial` is the law of `Z(t_0)`; `trans` is `exp(Qh)`. Emissions are
/// exponentiated after subtracting the per-step maximum.
pub(crate) fn smooth(log_em: ArrayView2<f64>, initial: &[f64], trans: &nalgebra::DMatrix<f64>) -> Result<Posterior> {
    let (n, k) = log_em.dim();
    let mut alpha = Array2::<f64>::zeros((n + 1, k));
    let mut scaled_em = Array2::<f64>::zeros((n, k));
    let mut scale = vec![0.0; n];
    let mut loglik = 0.0;
    for (l, &v) in initial.iter().enumerate() {
        alpha[[0, l]] = v;
    }
    for t in 0..n {
        let row = log_em.row(t);
        if let Some(state) = row.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFiniteEmission { index: t + 1, state });
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Err(Error::NonFiniteEmission { index: t + 1, state: 0 });
        }
        let mut c = 0.0;
        for j in 0..k {
            let e = (row[j] - mx).exp();
            scaled_em[[t, j]] = e;
            let mut pred = 0.0;
            for i in 0..k {
                pred += alpha[[t, i]] * trans[(i, j)];
            }
            let a = pred * e;
            alpha[[t + 1, j]] = a;
            c += a;
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::NonFiniteEmission { index: t + 1, state: 0 });
        }
        for j in 0..k {
            alpha[[t + 1, j]] /= c;
        }
        scale[t] = c;
        loglik += c.ln() + mx;
    }

    let mut beta = vec![1.0; k];
    let mut next_beta = vec![0.0; k];
    let mut w = Array2::zeros((n, k));
    let mut pair = Array3::zeros((n, k, k));
    let mut initial_post = Array1::zeros(k);
    for t in (0..n).rev() {
        let mut total = 0.0;
        for j in 0..k {
            let v = alpha[[t + 1, j]] * beta[j];
            w[[t, j]] = v;
            total += v;
        }
        w.row_mut(t).mapv_inplace(|v| v / total);

        let mut pair_total = 0.0;
        for i in 0..k {
            let mut b = 0.0;
            for j in 0..k {
                let v = trans[(i, j)] * scaled_em[[t, j]] * beta[j];
                b += v;
                let joint = alpha[[t, i]] * v;
                pair[[t, i, j]] = joint;
                pair_total += joint;
            }
            next_beta[i] = b / scale[t];
        }
        pair.index_axis_mut(Axis(0), t).mapv_inplace(|v| v / pair_total);
        std::mem::swap(&mut beta, &mut next_beta);
    }
    let mut total = 0.0;
    for l in 0..k {
        initial_post[l] = alpha[[0, l]] * beta[l];
        total += initial_post[l];
    }
    initial_post.mapv_inplace(|v| v / total);
    Ok(Posterior { w, pair, initial: initial_post, loglik })
}

/// Smoothed marginals and pairwise probabilities with the stationary law of
/// `Q` as the distribution of `Z(t_0)`.
pub fn forward_backward(y: &Array2<f64>, psi: &PsiFeatures, params: &ModelParams) -> Result<Posterior> {
    let design = Design::new(y, psi)?;
    design.check_params(params)?;
    let initial = stationary_distribution(&params.q)?;
    forward_backward_design(&design, params, &initial, psi.h)
}

pub(crate) fn forward_backward_design(
    design: &Design,
    params: &ModelParams,
    initial: &[f64],
    h: f64,
) -> Result<Posterior> {
    let trans = transition_matrix(&params.q, h)?.p;
    let log_em = log_emissions(design, params);
    smooth(log_em.view(), initial, &trans)
}

/// Smoothed probabilities where the quantities at `t_n` use only observations
/// in the window `Y_{max(n - r, 0)} .. Y_{min(n + r, N)}`.
///
/// The pair at `(t_{n-1}, t_n)` uses the window of `t_n`. Each window starts
/// from the stationary law.
pub fn truncated_posterior(y: &Array2<f64>, psi: &PsiFeatures, params: &ModelParams, r: usize) -> Result<Posterior> {
    if r == 0 {
        return Err(Error::Argument("truncation radius must be at least 1".into()));
    }
    let design = Design::new(y, psi)?;
    design.check_params(params)?;
    let initial = stationary_distribution(&params.q)?;
    truncated_design(&design, params, &initial, psi.h, r)
}

pub(crate) fn truncated_design(
    design: &Design,
    params: &ModelParams,
    initial: &[f64],
    h: f64,
    r: usize,
) -> Result<Posterior> {
    let n_total = design.n();
    let k = params.k();
    if r >= n_total {
        return forward_backward_design(design, params, initial, h);
    }
    let trans = transition_matrix(&params.q, h)?.p;
    let log_em = log_emissions(design, params);
    let mut w = Array2::zeros((n_total, k));
    let mut pair = Array3::zeros((n_total, k, k));
    let mut initial_post = Array1::zeros(k);
    // Every window starts from `initial`, the stationary law.
    for obs in 0..=n_total {
        let lo = obs.saturating_sub(r);
        let hi = (obs + r).min(n_total);
        let post = smooth(log_em.slice(s![lo..hi, ..]), initial, &trans)?;
        if obs == 0 {
            initial_post.assign(&post.initial);
            continue;
        }
        // Emission row `obs - 1` belongs to observation `obs`.
        let local = obs - 1 - lo;
        w.row_mut(obs - 1).assign(&post.w.row(local));
        pair.index_axis_mut(Axis(0), obs - 1).assign(&post.pair.index_axis(Axis(0), local));
    }
    let loglik = smooth(log_em.view(), initial, &trans)?.loglik;
    Ok(Posterior { w, pair, initial: initial_post, loglik })
}
