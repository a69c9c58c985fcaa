use ndarray::{Array4, Axis};
use rand_distr::{Distribution, StandardNormal, Uniform};
use std::collections::BTreeSet;

use crate::ctmc::RateMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Full parameter set: generator, drift coefficients `theta[state, target, source, basis]`
/// and the observation noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub q: RateMatrix,
    pub theta: Array4<f64>,
    pub sigma2: f64,
}

impl ModelParams {
    pub fn new(q: RateMatrix, theta: Array4<f64>, sigma2: f64) -> Result<Self> {
        let (k, p, p2, _) = theta.dim();
        if k != q.k() {
            return Err(Error::Shape(format!("theta has k = {k}, rate matrix has k = {}", q.k())));
        }
        if p != p2 {
            return Err(Error::Shape(format!("theta must be k x p x p x m, got {:?}", theta.dim())));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Domain(format!("noise variance must be positive, got {sigma2}")));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("theta has non-finite entries".into()));
        }
        Ok(Self { q, theta, sigma2 })
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

    /// Euclidean norm of the block `theta[state, target, source, :]`.
    pub fn block_norm(&self, state: usize, target: usize, source: usize) -> f64 {
        block_norm(&self.theta, state, target, source)
    }

    /// Relabels latent states: new state `a` carries the parameters of old state `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let theta = self.theta.select(Axis(0), perm);
        Self { q: self.q.permuted(perm), theta, sigma2: self.sigma2 }
    }
}

pub(crate) fn block_norm(theta: &Array4<f64>, state: usize, target: usize, source: usize) -> f64 {
    let m = theta.dim().3;
    (0..m).map(|b| theta[[state, target, source, b]].powi(2)).sum::<f64>().sqrt()
}

/// Random starting point: off-diagonal rates with magnitude drawn from
/// `Uniform(0, 1)`, standard normal drift coefficients, unit noise variance.
pub fn init_params(k: usize, p: usize, m: usize, seed: u64) -> Result<ModelParams> {
    if k == 0 || p == 0 || m == 0 {
        return Err(Error::Argument(format!("dimensions must be positive (k = {k}, p = {p}, m = {m})")));
    }
    let mut rate_rng = rng_from_seed(derive_seed(seed, 0));
    let unif = Uniform::new(-1.0, 0.0).expect("valid range");
    let mut rates = vec![0.0; k * k];
    for (idx, r) in rates.iter_mut().enumerate() {
        if idx / k != idx % k {
            let u: f64 = unif.sample(&mut rate_rng);
            // Guard the open end so every rate stays strictly positive.
            *r = u.abs().max(1e-3);
        }
    }
    let q = RateMatrix::from_off_diagonal(k, |i, j| rates[i * k + j])?;
    let mut theta_rng = rng_from_seed(derive_seed(seed, 1));
    let theta = Array4::from_shape_simple_fn((k, p, p, m), || StandardNormal.sample(&mut theta_rng));
    ModelParams::new(q, theta, 1.0)
}

/// Directed edge `source -> target`, present when `theta[state, target, source, :]` is non-negligible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
}

/// Per-state edge sets `{source -> target : ||theta[state, target, source, :]||_2 > epsilon}`.
pub fn edge_set(params: &ModelParams, epsilon: f64) -> Result<Vec<BTreeSet<Edge>>> {
    edges_of(&params.theta, epsilon)
}

pub(crate) fn edges_of(theta: &Array4<f64>, epsilon: f64) -> Result<Vec<BTreeSet<Edge>>> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("edge threshold must be non-negative, got {epsilon}")));
    }
    let (k, p, _, _) = theta.dim();
    Ok((0..k)
        .map(|state| {
            let mut set = BTreeSet::new();
            for target in 0..p {
                for source in 0..p {
                    if block_norm(theta, state, target, source) > epsilon {
                        set.insert(Edge { source, target });
                    }
                }
            }
            set
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::dgp2;
    use std::f64::consts::PI;

    #[test]
    fn init_is_reproducible_and_valid() {
        let a = init_params(3, 4, 2, 17).unwrap();
        let b = init_params(3, 4, 2, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.q.is_irreducible());
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(a.q.rate(i, j) > 0.0 && a.q.rate(i, j) <= 1.0);
                }
            }
        }
        assert_eq!(a.sigma2, 1.0);
        let one = init_params(1, 2, 1, 0).unwrap();
        assert_eq!(one.q.to_rows(), vec![vec![0.0]]);
    }

    #[test]
    fn edge_set_examples() {
        let truth = dgp2().truth(0.01);
        let exact = edge_set(&truth, 0.0).unwrap();
        assert_eq!(exact[0].len(), 32);
        assert_eq!(exact[1].len(), 40);
        assert!(exact[1].contains(&Edge { source: 1, target: 0 }));
        assert!(edge_set(&truth, 10.0).unwrap().iter().all(BTreeSet::is_empty));
        let corollary = edge_set(&truth, 2.0 / 3.0 * 0.8 * PI).unwrap();
        assert_eq!(corollary, exact);
    }

    #[test]
    fn permutation_moves_theta_and_rates() {
        let truth = dgp2().truth(0.01);
        let swapped = truth.permuted(&[1, 0]);
        assert_eq!(swapped.theta.index_axis(Axis(0), 0), truth.theta.index_axis(Axis(0), 1));
        assert_eq!(swapped.q.rate(0, 1), truth.q.rate(1, 0));
        assert_eq!(swapped.permuted(&[1, 0]), truth);
    }
}
