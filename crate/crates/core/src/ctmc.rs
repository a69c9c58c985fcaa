//! Continuous-time Markov chain kernel.
//!
//! Transition probabilities come from the matrix exponential `P(h) = exp(Qh)`.
//! Endpoint-conditioned expectations of dwell times and transition counts are
//! obtained from integrals of the form
//!
//! ```text
//! I_{ab}(h) = ∫_0^h exp(Qu) E_{ab} exp(Q(h-u)) du
//! ```
//!
//! which are read off the upper-right block of `exp([[Q, E_ab], [0, Q]] h)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

/// Endpoint probabilities below this are treated as impossible events.
pub const NULL_EVENT_FLOOR: f64 = 1e-300;

const ROW_SUM_TOL: f64 = 1e-12;

/// Generator of a finite continuous-time Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    q: DMatrix<f64>,
}

impl RateMatrix {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::InvalidRateMatrix(format!(
                "expected a non-empty square matrix, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let k = q.nrows();
        let scale = q.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        for i in 0..k {
            let mut sum = 0.0;
            for j in 0..k {
                let v = q[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidRateMatrix(format!("entry ({i},{j}) is not finite")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::InvalidRateMatrix(format!(
                        "off-diagonal entry ({i},{j}) = {v} is negative"
                    )));
                }
                sum += v;
            }
            if sum.abs() > ROW_SUM_TOL * scale {
                return Err(Error::InvalidRateMatrix(format!("row {i} sums to {sum:e}")));
            }
        }
        Ok(Self { q })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidRateMatrix("rows have inconsistent lengths".into()));
        }
        Self::new(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
    }

    /// Builds a generator from its off-diagonal rates; the diagonal is set to
    /// the negative row sum.
    pub fn from_off_diagonal(k: usize, mut rate: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut q = DMatrix::zeros(k, k);
        for i in 0..k {
            let mut total = 0.0;
            for j in 0..k {
                if i != j {
                    let r = rate(i, j);
                    q[(i, j)] = r;
                    total += r;
                }
            }
            q[(i, i)] = -total;
        }
        Self::new(q)
    }

    pub fn k(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.q[(from, to)]
    }

    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.q[(state, state)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.k()).map(|i| self.q.row(i).iter().copied().collect()).collect()
    }

    /// Strong connectivity of the graph of positive off-diagonal rates.
    pub fn is_irreducible(&self) -> bool {
        let k = self.k();
        let reach = |forward: bool| {
            let mut seen = vec![false; k];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for v in 0..k {
                    let rate = if forward { self.q[(u, v)] } else { self.q[(v, u)] };
                    if u != v && rate > 0.0 && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }

    /// Relabels states: entry `(a, b)` of the result is `q[perm[a], perm[b]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        Self { q: DMatrix::from_fn(k, k, |a, b| self.q[(perm[a], perm[b])]) }
    }
}

/// `P(h) = exp(Qh)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub h: f64,
    pub p: DMatrix<f64>,
}

impl TransitionMatrix {
    pub fn k(&self) -> usize {
        self.p.nrows()
    }
}

/// Latent path on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl PathSample {
    /// State occupied at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jump_times.partition_point(|&s| s <= t);
        self.states[idx]
    }

    /// Total time spent in each of `k` states.
    pub fn occupation(&self, k: usize) -> Vec<f64> {
        let mut occ = vec![0.0; k];
        let mut start = 0.0;
        for (idx, &s) in self.states.iter().enumerate() {
            let end = self.jump_times.get(idx).copied().unwrap_or(self.horizon);
            occ[s] += end - start;
            start = end;
        }
        occ
    }

    /// Number of `from -> to` jumps.
    pub fn transition_counts(&self, k: usize) -> DMatrix<f64> {
        let mut counts = DMatrix::zeros(k, k);
        for w in self.states.windows(2) {
            counts[(w[0], w[1])] += 1.0;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialState {
    Fixed(usize),
    Stationary,
}

pub fn stationary_distribution(q: &RateMatrix) -> Result<Vec<f64>> {
    let k = q.k();
    if k == 1 {
        return Ok(vec![1.0]);
    }
    if !q.is_irreducible() {
        return Err(Error::Reducible);
    }
    // Solve Q^T pi = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = q.matrix().transpose();
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(k);
    rhs[k - 1] = 1.0;
    let pi = a.lu().solve(&rhs).ok_or(Error::Reducible)?;
    let mut pi: Vec<f64> = pi.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    if pi.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Reducible);
    }
    Ok(pi)
}

pub fn transition_matrix(q: &RateMatrix, h: f64) -> Result<TransitionMatrix> {
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::Domain(format!("time step must be finite and non-negative, got {h}")));
    }
    let p = (q.matrix() * h).exp();
    Ok(TransitionMatrix { h, p })
}

/// `∫_0^h exp(Qu) E_{from,to} exp(Q(h-u)) du` via one `2k x 2k` exponential.
pub fn van_loan_integral(q: &RateMatrix, h: f64, from: usize, to: usize) -> Result<DMatrix<f64>> {
    let k = q.k();
    if !(h > 0.0) {
        return Err(Error::Domain(format!("integration horizon must be positive, got {h}")));
    }
    if from >= k || to >= k {
        return Err(Error::Domain(format!("state index out of range for k = {k}")));
    }
    Ok(van_loan_block(q.matrix(), h, from, to))
}

fn van_loan_block(q: &DMatrix<f64>, h: f64, from: usize, to: usize) -> DMatrix<f64> {
    let k = q.nrows();
    let mut block = DMatrix::zeros(2 * k, 2 * k);
    block.view_mut((0, 0), (k, k)).copy_from(&(q * h));
    block.view_mut((k, k), (k, k)).copy_from(&(q * h));
    block[(from, k + to)] = h;
    let e = block.exp();
    e.view((0, k), (k, k)).into_owned()
}

/// Endpoint-conditioned expectations for one `(Q, h)` pair.
///
/// Holds `P(h)` and the `k^2` integral matrices so that repeated queries over
/// `(start, end)` pairs reuse the same exponentials.
#[derive(Debug, Clone)]
pub struct EndpointStatistics {
    h: f64,
    q: DMatrix<f64>,
    p: DMatrix<f64>,
    integrals: Vec<DMatrix<f64>>,
}

impl EndpointStatistics {
    pub fn new(q: &RateMatrix, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Domain(format!("time step must be positive, got {h}")));
        }
        let k = q.k();
        let p = transition_matrix(q, h)?.p;
        let mut integrals = Vec::with_capacity(k * k);
        for a in 0..k {
            for b in 0..k {
                integrals.push(van_loan_block(q.matrix(), h, a, b));
            }
        }
        Ok(Self { h, q: q.matrix().clone(), p, integrals })
    }

    pub fn k(&self) -> usize {
        self.q.nrows()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn transition_probabilities(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// `∫_0^h P_{start,a}(u) P_{b,end}(h-u) du` for all `(start, end)`.
    pub fn integral(&self, a: usize, b: usize) -> &DMatrix<f64> {
        &self.integrals[a * self.k() + b]
    }

    fn endpoint_prob(&self, start: usize, end: usize) -> Result<f64> {
        let prob = self.p[(start, end)];
        if !(prob >= NULL_EVENT_FLOOR) {
            return Err(Error::NullEvent { start, end, prob });
        }
        Ok(prob)
    }

    /// `E[time in state | Z(0) = start, Z(h) = end]`.
    pub fn dwell(&self, start: usize, end: usize, state: usize) -> Result<f64> {
        let prob = self.endpoint_prob(start, end)?;
        Ok(self.integral(state, state)[(start, end)] / prob)
    }

    /// `E[# from -> to jumps | Z(0) = start, Z(h) = end]`.
    pub fn transitions(&self, start: usize, end: usize, from: usize, to: usize) -> Result<f64> {
        if from == to {
            return Err(Error::Domain("transition count needs two distinct states".into()));
        }
        let prob = self.endpoint_prob(start, end)?;
        let rate = self.q[(from, to)];
        if rate == 0.0 {
            return Ok(0.0);
        }
        Ok((rate * self.integral(from, to)[(start, end)] / prob).max(0.0))
    }
}

fn check_states(k: usize, states: &[usize]) -> Result<()> {
    match states.iter().find(|&&s| s >= k) {
        Some(s) => Err(Error::Domain(format!("state {s} out of range for k = {k}"))),
        None => Ok(()),
    }
}

pub fn expected_dwell(q: &RateMatrix, h: f64, start: usize, end: usize, state: usize) -> Result<f64> {
    check_states(q.k(), &[start, end, state])?;
    EndpointStatistics::new(q, h)?.dwell(start, end, state)
}

pub fn expected_transitions(
    q: &RateMatrix,
    h: f64,
    start: usize,
    end: usize,
    from: usize,
    to: usize,
) -> Result<f64> {
    check_states(q.k(), &[start, end, from, to])?;
    if from == to {
        return Err(Error::Domain("transition count needs two distinct states".into()));
    }
    let stats = EndpointStatistics::new(q, h)?;
    stats.transitions(start, end, from, to)
}

/// Gillespie simulation of the chain on `[0, horizon]`.
pub fn sample_path(q: &RateMatrix, horizon: f64, initial: InitialState, seed: u64) -> Result<PathSample> {
    let mut rng = rng_from_seed(seed);
    sample_path_with(q, horizon, initial, &mut rng)
}

pub fn sample_path_with(
    q: &RateMatrix,
    horizon: f64,
    initial: InitialState,
    rng: &mut SimRng,
) -> Result<PathSample> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    let k = q.k();
    let start = match initial {
        InitialState::Fixed(s) => {
            check_states(k, &[s])?;
            s
        }
        InitialState::Stationary => draw_categorical(&stationary_distribution(q)?, rng),
    };
    let mut path = PathSample { jump_times: Vec::new(), states: vec![start], horizon };
    let mut t = 0.0;
    let mut state = start;
    let mut weights = vec![0.0; k];
    loop {
        let exit = q.exit_rate(state);
        if exit <= 0.0 {
            break;
        }
        let hold: f64 = Exp::new(exit).expect("positive rate").sample(rng);
        t += hold;
        if t >= horizon {
            break;
        }
        for (j, w) in weights.iter_mut().enumerate() {
            *w = if j == state { 0.0 } else { q.rate(state, j) };
        }
        state = draw_categorical(&weights, rng);
        path.jump_times.push(t);
        path.states.push(state);
    }
    Ok(path)
}

/// Index drawn with probability proportional to `weights`.
pub(crate) fn draw_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

/// Detailed balance `pi_i q_ij = pi_j q_ji` for all pairs, within 1e-10.
pub fn check_reversibility(q: &RateMatrix) -> Result<bool> {
    let pi = stationary_distribution(q)?;
    let k = q.k();
    for i in 0..k {
        for j in (i + 1)..k {
            if (pi[i] * q.rate(i, j) - pi[j] * q.rate(j, i)).abs() > 1e-10 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn q_star() -> RateMatrix {
        RateMatrix::from_rows(&[vec![-0.27, 0.27], vec![0.18, -0.18]]).unwrap()
    }

    #[test]
    fn rejects_invalid_generators() {
        assert!(RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -0.5]]).is_err());
        assert!(RateMatrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).is_err());
        assert!(RateMatrix::from_rows(&[vec![-1.0, 1.0]]).is_err());
    }

    #[test]
    fn stationary_examples() {
        let pi = stationary_distribution(&q_star()).unwrap();
        assert_abs_diff_eq!(pi[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(pi[1], 0.6, epsilon = 1e-12);

        let one = RateMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(stationary_distribution(&one).unwrap(), vec![1.0]);

        let sym = RateMatrix::from_rows(&[vec![-2.5, 2.5], vec![2.5, -2.5]]).unwrap();
        let pi = stationary_distribution(&sym).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn reducible_chain_has_no_stationary_law() {
        let q = RateMatrix::from_rows(&[vec![-1.0, 1.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 1.0, -1.0]])
            .unwrap();
        assert!(!q.is_irreducible());
        assert!(matches!(stationary_distribution(&q), Err(Error::Reducible)));
        let zero = RateMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(stationary_distribution(&zero), Err(Error::Reducible)));
    }

    #[test]
    fn transition_matrix_trivial_cases() {
        let p = transition_matrix(&q_star(), 0.0).unwrap().p;
        assert_abs_diff_eq!(p, DMatrix::identity(2, 2), epsilon = 1e-15);
        let zero = RateMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let p = transition_matrix(&zero, 5.0).unwrap().p;
        assert_abs_diff_eq!(p, DMatrix::identity(3, 3), epsilon = 1e-15);
    }

    #[test]
    fn transition_matrix_matches_taylor_series() {
        let q = q_star();
        let a = q.matrix() * 1.0;
        let mut term = DMatrix::<f64>::identity(2, 2);
        let mut sum = term.clone();
        for j in 1..=50 {
            term = &term * &a / j as f64;
            sum += &term;
        }
        let p = transition_matrix(&q, 1.0).unwrap().p;
        assert_abs_diff_eq!(p, sum, epsilon = 1e-10);
    }

    #[test]
    fn van_loan_trivial_cases() {
        let zero = RateMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let m = van_loan_integral(&zero, 0.7, 1, 2).unwrap();
        let mut expected = DMatrix::zeros(3, 3);
        expected[(1, 2)] = 0.7;
        assert_abs_diff_eq!(m, expected, epsilon = 1e-14);

        let one = RateMatrix::from_rows(&[vec![0.0]]).unwrap();
        let m = van_loan_integral(&one, 0.3, 0, 0).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 0.3, epsilon = 1e-15);
        assert!(van_loan_integral(&one, 0.0, 0, 0).is_err());
    }

    #[test]
    fn dwell_trivial_cases() {
        let one = RateMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert_abs_diff_eq!(expected_dwell(&one, 0.8, 0, 0, 0).unwrap(), 0.8, epsilon = 1e-14);

        let q = q_star();
        let stats = EndpointStatistics::new(&q, 0.25).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let total: f64 = (0..2).map(|l| stats.dwell(i, j, l).unwrap()).sum();
                assert_abs_diff_eq!(total, 0.25, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn transitions_with_zero_rate_vanish() {
        let q = RateMatrix::from_rows(&[vec![-1.0, 1.0, 0.0], vec![0.0, -1.0, 1.0], vec![1.0, 0.0, -1.0]])
            .unwrap();
        assert_eq!(expected_transitions(&q, 0.5, 0, 2, 0, 2).unwrap(), 0.0);
        assert!(expected_transitions(&q, 0.5, 0, 2, 1, 1).is_err());
    }

    #[test]
    fn null_event_is_reported() {
        // State 1 is absorbing, so 1 -> 0 is impossible.
        let q = RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(expected_dwell(&q, 1.0, 1, 0, 0), Err(Error::NullEvent { .. })));
    }

    #[test]
    fn sample_path_basics() {
        let one = RateMatrix::from_rows(&[vec![0.0]]).unwrap();
        let path = sample_path(&one, 10.0, InitialState::Stationary, 3).unwrap();
        assert!(path.jump_times.is_empty());
        assert_eq!(path.states, vec![0]);

        let a = sample_path(&q_star(), 100.0, InitialState::Stationary, 11).unwrap();
        let b = sample_path(&q_star(), 100.0, InitialState::Stationary, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), a.jump_times.len() + 1);
        assert!(a.jump_times.windows(2).all(|w| w[0] < w[1]));
        assert!(a.states.windows(2).all(|w| w[0] != w[1]));
        let occ: f64 = a.occupation(2).iter().sum();
        assert_abs_diff_eq!(occ, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn reversibility_examples() {
        assert!(check_reversibility(&q_star()).unwrap());
        let cycle = RateMatrix::from_off_diagonal(3, |i, j| if j == (i + 1) % 3 { 1.0 } else { 0.0 }).unwrap();
        let pi = stationary_distribution(&cycle).unwrap();
        assert_abs_diff_eq!(pi[0], 1.0 / 3.0, epsilon = 1e-12);
        assert!(!check_reversibility(&cycle).unwrap());
    }

    #[test]
    fn permutation_relabels_states() {
        let q = q_star().permuted(&[1, 0]);
        assert_eq!(q.rate(0, 1), 0.18);
        assert_eq!(q.rate(1, 0), 0.27);
    }
}
