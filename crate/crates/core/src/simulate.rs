//! Ground-truth simulation of Markov-switching additive ODEs.
//!
//! Node `i` evolves as `dx_i/dt = sum_j <theta[z, i, j, :], g(x_j)>` where `z`
//! is the current latent state and `g` a basis family. Trajectories are
//! integrated with classical RK4 on a uniform fine grid; a step that contains
//! latent jumps is split at each jump so every sub-step sees a single state.

use ndarray::{Array2, Array3, Array4};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::ctmc::{sample_path, InitialState, PathSample, RateMatrix};
use crate::denoise::PsiFeatures;
use crate::emfit::ModelParams;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Blow-up guard on `max_i |x_i|`.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Default number of fine integration steps per unit horizon is `2^14 / T`.
pub const DEFAULT_FINE_STEPS: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisFamily {
    /// `g_i(x) = x^i`, `i = 1..=m`.
    Monomial { m: usize },
}

impl BasisFamily {
    pub fn monomial(m: usize) -> Self {
        BasisFamily::Monomial { m }
    }

    pub fn m(&self) -> usize {
        match *self {
            BasisFamily::Monomial { m } => m,
        }
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        match *self {
            BasisFamily::Monomial { m } => {
                let mut pow = 1.0;
                for slot in out.iter_mut().take(m) {
                    pow *= x;
                    *slot = pow;
                }
            }
        }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn deriv(&self, x: f64) -> Vec<f64> {
        match *self {
            BasisFamily::Monomial { m } => (1..=m)
                .map(|i| if i == 1 { 1.0 } else { i as f64 * x.powi(i as i32 - 1) })
                .collect(),
        }
    }
}

/// Drift parameters `theta[state, target, source, basis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveOdeModel {
    pub theta: Array4<f64>,
    pub basis: BasisFamily,
}

impl AdditiveOdeModel {
    pub fn new(theta: Array4<f64>, basis: BasisFamily) -> Result<Self> {
        let (_, p, p2, m) = theta.dim();
        if p != p2 || m != basis.m() {
            return Err(Error::Shape(format!(
                "theta has shape {:?}, basis has m = {}",
                theta.dim(),
                basis.m()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("theta has non-finite entries".into()));
        }
        Ok(Self { theta, basis })
    }

    pub fn k(&self) -> usize {
        self.theta.dim().0
    }

    pub fn p(&self) -> usize {
        self.theta.dim().1
    }

    pub fn m(&self) -> usize {
        self.theta.dim().3
    }

    fn drift_into(&self, x: &[f64], state: usize, features: &mut [f64], out: &mut [f64]) {
        let (p, m) = (self.p(), self.m());
        for (j, &xj) in x.iter().enumerate() {
            self.basis.eval_into(xj, &mut features[j * m..(j + 1) * m]);
        }
        let theta = self.theta.index_axis(ndarray::Axis(0), state);
        for i in 0..p {
            let mut acc = 0.0;
            for j in 0..p {
                for b in 0..m {
                    acc += theta[[i, j, b]] * features[j * m + b];
                }
            }
            out[i] = acc;
        }
    }
}

pub fn drift(model: &AdditiveOdeModel, x: &[f64], state: usize) -> Result<Vec<f64>> {
    if state >= model.k() {
        return Err(Error::Domain(format!("state {state} out of range for k = {}", model.k())));
    }
    if x.len() != model.p() {
        return Err(Error::Shape(format!("x has length {}, model has p = {}", x.len(), model.p())));
    }
    let mut features = vec![0.0; model.p() * model.m()];
    let mut out = vec![0.0; model.p()];
    model.drift_into(x, state, &mut features, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingTrajectory {
    pub fine_times: Vec<f64>,
    /// `fine_times.len() x p`.
    pub x: Array2<f64>,
    pub z_path: PathSample,
}

impl SwitchingTrajectory {
    pub fn horizon(&self) -> f64 {
        self.z_path.horizon
    }

    pub fn switch_times(&self) -> &[f64] {
        &self.z_path.jump_times
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Linear interpolation of the fine grid at `t`.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let n = self.fine_times.len();
        let last = n - 1;
        let idx = self.fine_times.partition_point(|&s| s <= t);
        if idx == 0 {
            return self.x.row(0).to_vec();
        }
        if idx > last {
            return self.x.row(last).to_vec();
        }
        let (t0, t1) = (self.fine_times[idx - 1], self.fine_times[idx]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        let (a, b) = (self.x.row(idx - 1), self.x.row(idx));
        a.iter().zip(b.iter()).map(|(&u, &v)| u + w * (v - u)).collect()
    }

    /// Trajectory values at the `n_intervals + 1` uniform sampling times.
    pub fn sample_uniform(&self, n_intervals: usize) -> Array2<f64> {
        let horizon = self.horizon();
        let fine_steps = self.fine_times.len() - 1;
        let mut out = Array2::zeros((n_intervals + 1, self.p()));
        for n in 0..=n_intervals {
            let row = if fine_steps.is_multiple_of(n_intervals) {
                self.x.row(n * (fine_steps / n_intervals)).to_vec()
            } else {
                self.value_at(n as f64 * horizon / n_intervals as f64)
            };
            out.row_mut(n).iter_mut().zip(row).for_each(|(o, v)| *o = v);
        }
        out
    }

    /// Features `∫ g(x_j(u)) du` over each sampling interval, integrated on
    /// the fine grid rather than from the samples.
    pub fn exact_features(&self, basis: BasisFamily, n_intervals: usize) -> Result<PsiFeatures> {
        if n_intervals < 2 {
            return Err(Error::Domain(format!("need at least 2 intervals, got {n_intervals}")));
        }
        let horizon = self.horizon();
        let h = horizon / n_intervals as f64;
        let fine_steps = self.fine_times.len() - 1;
        let sub = fine_steps.div_ceil(n_intervals).max(1);
        let (p, m) = (self.p(), basis.m());
        let mut psi = Array3::zeros((n_intervals, p, m));
        let mut g = vec![0.0; m];
        for n in 0..n_intervals {
            let t0 = n as f64 * h;
            for s in 0..=sub {
                let weight = if s == 0 || s == sub { 0.5 } else { 1.0 } * h / sub as f64;
                let row = if fine_steps.is_multiple_of(n_intervals * sub) {
                    self.x.row(n * sub + s).to_vec()
                } else {
                    self.value_at(t0 + s as f64 * h / sub as f64)
                };
                for (j, &v) in row.iter().enumerate() {
                    basis.eval_into(v, &mut g);
                    for b in 0..m {
                        psi[[n, j, b]] += weight * g[b];
                    }
                }
            }
        }
        PsiFeatures::new(psi, h)
    }

    /// Latent state at each of the `n_intervals + 1` sampling times.
    pub fn states_uniform(&self, n_intervals: usize) -> Vec<usize> {
        let horizon = self.horizon();
        (0..=n_intervals).map(|n| self.z_path.state_at(n as f64 * horizon / n_intervals as f64)).collect()
    }
}

/// Noisy uniform samples `y[n] = x(t_n) + sigma * eps_n`, `t_n = n * horizon / n_intervals`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// `(n_intervals + 1) x p`.
    pub y: Array2<f64>,
    pub horizon: f64,
    pub sigma_true: Option<f64>,
}

impl ObservationSet {
    pub fn new(y: Array2<f64>, horizon: f64, sigma_true: Option<f64>) -> Result<Self> {
        if y.nrows() < 3 {
            return Err(Error::Shape(format!("need at least 3 observations, got {}", y.nrows())));
        }
        if !(horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("observations contain non-finite values".into()));
        }
        Ok(Self { y, horizon, sigma_true })
    }

    /// Number of sampling intervals `N`.
    pub fn n(&self) -> usize {
        self.y.nrows() - 1
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.n() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let h = self.h();
        (0..=self.n()).map(|n| n as f64 * h).collect()
    }
}

/// Integrates the switching system along a latent path drawn from `q`.
pub fn integrate(
    model: &AdditiveOdeModel,
    q: &RateMatrix,
    x0: &[f64],
    horizon: f64,
    dt_fine: f64,
    seed: u64,
) -> Result<SwitchingTrajectory> {
    if q.k() != model.k() {
        return Err(Error::Shape(format!("model has k = {}, rate matrix has k = {}", model.k(), q.k())));
    }
    if !(horizon > 0.0) || !(dt_fine > 0.0) {
        return Err(Error::Domain("horizon and fine step must be positive".into()));
    }
    let path = sample_path(q, horizon, InitialState::Stationary, seed)?;
    integrate_along(model, &path, x0, dt_fine)
}

/// Integrates the switching system along a given latent path.
pub fn integrate_along(
    model: &AdditiveOdeModel,
    path: &PathSample,
    x0: &[f64],
    dt_fine: f64,
) -> Result<SwitchingTrajectory> {
    let p = model.p();
    if x0.len() != p {
        return Err(Error::Shape(format!("x0 has length {}, model has p = {p}", x0.len())));
    }
    if path.states.iter().any(|&s| s >= model.k()) {
        return Err(Error::Domain("latent path visits a state the model does not define".into()));
    }
    let horizon = path.horizon;
    let steps = ((horizon / dt_fine).round() as usize).max(1);
    let dt = horizon / steps as f64;
    let fine_times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();

    let mut x = Array2::zeros((steps + 1, p));
    x.row_mut(0).iter_mut().zip(x0).for_each(|(o, &v)| *o = v);

    let mut work = Rk4Work::new(p, model.m());
    let mut state_x = x0.to_vec();
    let mut jump = 0usize;
    let mut state = path.states[0];
    for step in 0..steps {
        let (mut t, t_end) = (fine_times[step], fine_times[step + 1]);
        while jump < path.jump_times.len() && path.jump_times[jump] <= t {
            jump += 1;
            state = path.states[jump];
        }
        while t < t_end {
            let next_jump = path.jump_times.get(jump).copied().unwrap_or(f64::INFINITY);
            let stop = if next_jump < t_end { next_jump } else { t_end };
            if stop > t {
                work.step(model, state, &mut state_x, stop - t);
            }
            if state_x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
                return Err(Error::Divergence { time: stop });
            }
            t = stop;
            if next_jump <= t_end && next_jump == stop {
                jump += 1;
                state = path.states[jump];
            }
        }
        x.row_mut(step + 1).iter_mut().zip(&state_x).for_each(|(o, &v)| *o = v);
    }
    Ok(SwitchingTrajectory { fine_times, x, z_path: path.clone() })
}

struct Rk4Work {
    features: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(p: usize, m: usize) -> Self {
        Self {
            features: vec![0.0; p * m],
            k1: vec![0.0; p],
            k2: vec![0.0; p],
            k3: vec![0.0; p],
            k4: vec![0.0; p],
            tmp: vec![0.0; p],
        }
    }

    fn step(&mut self, model: &AdditiveOdeModel, state: usize, x: &mut [f64], dt: f64) {
        let Rk4Work { features, k1, k2, k3, k4, tmp } = self;
        model.drift_into(x, state, features, k1);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        model.drift_into(tmp, state, features, k2);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        model.drift_into(tmp, state, features, k3);
        for i in 0..x.len() {
            tmp[i] = x[i] + dt * k3[i];
        }
        model.drift_into(tmp, state, features, k4);
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Samples the trajectory at `n_intervals + 1` uniform times and adds i.i.d.
/// Gaussian noise of standard deviation `sigma`.
pub fn observe(traj: &SwitchingTrajectory, n_intervals: usize, sigma: f64, seed: u64) -> Result<ObservationSet> {
    if n_intervals < 2 {
        return Err(Error::Domain(format!("need at least 2 sampling intervals, got {n_intervals}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut y = traj.sample_uniform(n_intervals);
    if sigma > 0.0 {
        let mut rng = rng_from_seed(seed);
        for v in y.iter_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * eps;
        }
    }
    ObservationSet::new(y, traj.horizon(), Some(sigma))
}

/// A benchmark data-generating process.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub model: AdditiveOdeModel,
    pub q: RateMatrix,
    pub x0: Vec<f64>,
}

impl Benchmark {
    pub fn truth(&self, sigma: f64) -> ModelParams {
        ModelParams::new(self.q.clone(), self.model.theta.clone(), (sigma * sigma).max(crate::emfit::SIGMA2_FLOOR))
            .expect("benchmark parameters are valid")
    }
}

pub fn benchmark_rate_matrix() -> RateMatrix {
    RateMatrix::from_rows(&[vec![-0.27, 0.27], vec![0.18, -0.18]]).expect("valid generator")
}

/// Default observation noise of both benchmarks.
pub const BENCHMARK_SIGMA: f64 = 0.01;
/// Physical horizon of both benchmarks.
pub const BENCHMARK_HORIZON: f64 = 40.0;

/// Nonlinear benchmark: five coupled pairs with a cubic monomial basis.
///
/// State 0 couples pairs (1,2), (3,4), (5,6); state 1 uses the same blocks on
/// pairs (5,6), (7,8), (9,10). Indices in the comments are 1-based.
pub fn dgp1() -> Benchmark {
    let (k, p, m) = (2, 10, 3);
    let mut theta = Array4::zeros((k, p, p, m));
    let pair_blocks: [[f64; 3]; 8] = [
        [1.2, 0.3, -0.6],  // (a, a)
        [0.1, 0.2, 0.2],   // (a, b)
        [-2.0, 0.0, 0.4],  // (b, a)
        [0.5, 0.2, -0.3],  // (b, b)
        [-0.3, 0.4, 0.1],  // (c, d)
        [0.2, -0.1, -0.2], // (d, c)
        [0.1, 0.0, -0.8],  // (e, f)
        [0.0, 0.0, 0.5],   // (f, e)
    ];
    let mut set = |state: usize, first: usize| {
        let (a, b, c, d, e, f) = (first, first + 1, first + 2, first + 3, first + 4, first + 5);
        let entries = [(a, a), (a, b), (b, a), (b, b), (c, d), (d, c), (e, f), (f, e)];
        for ((i, j), block) in entries.iter().zip(pair_blocks.iter()) {
            for (b_idx, &v) in block.iter().enumerate() {
                theta[[state, *i, *j, b_idx]] = v;
            }
        }
    };
    set(0, 0);
    set(1, 4);
    Benchmark {
        model: AdditiveOdeModel::new(theta, BasisFamily::monomial(m)).expect("valid model"),
        q: benchmark_rate_matrix(),
        x0: vec![-2.0, 2.0, 2.0, -2.0, -1.5, 1.5, -1.0, 1.0, 1.0, -1.0],
    }
}

/// Generic start for the star/ring benchmark (uniform draws on [-1, 1]).
/// Structured starts such as alternating signs sit in a low-dimensional
/// invariant subspace of the ring dynamics and leave the edges unidentifiable.
pub const DGP2_X0: [f64; 20] = [
    -0.33, -0.92, -0.45, -0.62, 0.14, 0.44, 0.02, 0.13, 0.74, -0.21, -0.15, -0.75, -0.32, 0.66, -0.64, -0.53, 0.78, 0.52,
    -0.02, 0.33,
];

/// Linear benchmark on 20 nodes: four bidirected 5-node stars in state 0, a
/// bidirected ring in state 1.
pub fn dgp2() -> Benchmark {
    let (k, p, m) = (2, 20, 1);
    let w = 0.8 * PI;
    let mut theta = Array4::zeros((k, p, p, m));
    for star in 0..4 {
        let hub = 5 * star;
        for leaf in hub + 1..hub + 5 {
            theta[[0, leaf, hub, 0]] = -w;
            theta[[0, hub, leaf, 0]] = w;
        }
    }
    for i in 0..p {
        theta[[1, i, (i + p - 1) % p, 0]] = -w;
        theta[[1, i, (i + 1) % p, 0]] = w;
    }
    Benchmark {
        model: AdditiveOdeModel::new(theta, BasisFamily::monomial(m)).expect("valid model"),
        q: benchmark_rate_matrix(),
        x0: DGP2_X0.to_vec(),
    }
}

/// Simulates a benchmark on `[0, horizon]` and samples `n_intervals + 1` noisy
/// observations. The latent path and the noise use independent streams of `seed`.
pub fn simulate_benchmark(
    bench: &Benchmark,
    horizon: f64,
    n_intervals: usize,
    sigma: f64,
    seed: u64,
) -> Result<(SwitchingTrajectory, ObservationSet)> {
    let dt_fine = horizon / DEFAULT_FINE_STEPS as f64;
    let traj = integrate(&bench.model, &bench.q, &bench.x0, horizon, dt_fine, derive_seed(seed, 0))?;
    let obs = observe(&traj, n_intervals, sigma, derive_seed(seed, 1))?;
    Ok((traj, obs))
}
