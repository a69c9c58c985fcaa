//! Wavelet shrinkage of each observed coordinate and the integrated basis
//! features built from the smoothed trajectories.
//!
//! The transform is the periodized orthonormal Daubechies-3 (six tap) pyramid.
//! Coefficients are computed on the raw samples, so white noise of standard
//! deviation `sigma` maps to coefficients of standard deviation `sigma`. The
//! shrinkage threshold `3 sigma sqrt(2 log(N / delta) / N)` for coefficients
//! of the `N^{-1/2}`-scaled empirical projection becomes
//! `3 sigma sqrt(2 log(N / delta))` in these units.

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::simulate::BasisFamily;

/// Daubechies-3 scaling filter, from the closed form
/// `sqrt(2)/32 * (1 + sqrt(10) +- sqrt(5 + 2 sqrt(10)), ...)`.
const DB3_LOW: [f64; 6] = [
    0.332_670_552_950_082_6,
    0.806_891_509_311_092_6,
    0.459_877_502_118_491_6,
    -0.135_011_020_010_254_59,
    -0.085_441_273_882_026_66,
    0.035_226_291_885_709_537,
];

/// Median absolute deviation scale for the standard normal.
const MAD_SCALE: f64 = 0.6745;

fn db3_high() -> [f64; 6] {
    let mut g = [0.0; 6];
    for (k, slot) in g.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *slot = sign * DB3_LOW[5 - k];
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    pub j0: usize,
    /// Finest level `J`, with `N = 2^J`.
    pub levels: usize,
    /// `2^j0` scaling coefficients.
    pub approx: Vec<f64>,
    /// `details[j - j0]` holds the `2^j` coefficients of level `j`, `j0 <= j < J`.
    pub details: Vec<Vec<f64>>,
}

impl WaveletCoeffs {
    pub fn len(&self) -> usize {
        self.approx.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.approx
            .iter()
            .chain(self.details.iter().flatten())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn finest(&self) -> &[f64] {
        self.details.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn log2_exact(n: usize) -> Option<usize> {
    (n.is_power_of_two()).then(|| n.trailing_zeros() as usize)
}

fn analysis_step(x: &[f64], low: &mut Vec<f64>, high: &mut Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let g = db3_high();
    low.clear();
    high.clear();
    for i in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for k in 0..6 {
            let v = x[(2 * i + k) % n];
            a += DB3_LOW[k] * v;
            d += g[k] * v;
        }
        low.push(a);
        high.push(d);
    }
}

fn synthesis_step(low: &[f64], high: &[f64]) -> Vec<f64> {
    let n = 2 * low.len();
    let g = db3_high();
    let mut x = vec![0.0; n];
    for i in 0..low.len() {
        for k in 0..6 {
            x[(2 * i + k) % n] += DB3_LOW[k] * low[i] + g[k] * high[i];
        }
    }
    x
}

pub fn dwt(series: &[f64], j0: usize) -> Result<WaveletCoeffs> {
    let levels = log2_exact(series.len())
        .ok_or_else(|| Error::Shape(format!("series length {} is not a power of two", series.len())))?;
    if levels <= j0 {
        return Err(Error::Shape(format!("coarse level {j0} must be below the finest level {levels}")));
    }
    let mut current = series.to_vec();
    let mut details = Vec::with_capacity(levels - j0);
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for _ in j0..levels {
        analysis_step(&current, &mut low, &mut high);
        details.push(high.clone());
        std::mem::swap(&mut current, &mut low);
    }
    details.reverse();
    Ok(WaveletCoeffs { j0, levels, approx: current, details })
}

pub fn idwt(coeffs: &WaveletCoeffs) -> Vec<f64> {
    let mut current = coeffs.approx.clone();
    for detail in &coeffs.details {
        current = synthesis_step(&current, detail);
    }
    current
}

/// `sign(x) (|x| - lambda)_+`.
#[inline]
pub fn soft(x: f64, lambda: f64) -> f64 {
    let mag = x.abs() - lambda;
    if mag > 0.0 {
        mag.copysign(x)
    } else {
        0.0
    }
}

/// Soft-thresholds the detail coefficients, `lambdas[j - j0]` at level `j`.
/// Scaling coefficients pass through unchanged.
pub fn soft_threshold(coeffs: &WaveletCoeffs, lambdas: &[f64]) -> Result<WaveletCoeffs> {
    if lambdas.len() != coeffs.details.len() {
        return Err(Error::Shape(format!(
            "{} thresholds for {} detail levels",
            lambdas.len(),
            coeffs.details.len()
        )));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::Domain("thresholds must be non-negative".into()));
    }
    let details = coeffs
        .details
        .iter()
        .zip(lambdas)
        .map(|(level, &lambda)| level.iter().map(|&v| soft(v, lambda)).collect())
        .collect();
    Ok(WaveletCoeffs { details, ..coeffs.clone() })
}

/// Extends `series` to the next power of two by mirror reflection at the right end.
pub fn symmetric_pad(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    let target = n.next_power_of_two();
    let mut out = series.to_vec();
    if n == 0 {
        return out;
    }
    // Half-sample symmetric extension: ..., x[n-2], x[n-1] | x[n-1], x[n-2], ...
    let period = 2 * n;
    for idx in n..target {
        let r = idx % period;
        let src = if r < n { r } else { period - 1 - r };
        out.push(series[src]);
    }
    out
}

/// MAD estimate of the noise level from the finest detail coefficients.
pub fn estimate_noise_sigma(series: &[f64]) -> Result<f64> {
    if series.len() < 4 {
        return Err(Error::Shape(format!("need at least 4 samples, got {}", series.len())));
    }
    let padded = symmetric_pad(series);
    let (mut low, mut high) = (Vec::new(), Vec::new());
    analysis_step(&padded, &mut low, &mut high);
    let mut mags: Vec<f64> = high.iter().map(|v| v.abs()).collect();
    Ok(median(&mut mags) / MAD_SCALE)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Known(f64),
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// `3 sigma sqrt(2 log(N / delta) / N)`.
    Standard,
    /// Adds `3 log p` inside the logarithm for simultaneous recovery of `p` series.
    HighDimensional { p: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub delta: f64,
    pub j0: usize,
    pub sigma: SigmaMode,
    pub rule: ThresholdRule,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { delta: 0.1, j0: 3, sigma: SigmaMode::Estimate, rule: ThresholdRule::Standard }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if let SigmaMode::Known(s) = self.sigma {
            if !(s >= 0.0) {
                return Err(Error::Domain(format!("noise level must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    /// Threshold in raw-sample coefficient units for a transform of length `n`.
    pub fn threshold(&self, sigma: f64, n: usize) -> f64 {
        let n = n as f64;
        let log_term = match self.rule {
            ThresholdRule::Standard => (n / self.delta).ln(),
            ThresholdRule::HighDimensional { p } => n.ln() + 3.0 * (p.max(1) as f64).ln() - self.delta.ln(),
        };
        3.0 * sigma * (2.0 * log_term).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub values: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
}

/// Soft-threshold wavelet estimate of one coordinate on its sampling grid.
pub fn denoise_trajectory(series: &[f64], config: &DenoiseConfig) -> Result<Denoised> {
    config.validate()?;
    let sigma = match config.sigma {
        SigmaMode::Known(s) => s,
        SigmaMode::Estimate => estimate_noise_sigma(series)?,
    };
    let padded = symmetric_pad(series);
    let coeffs = dwt(&padded, config.j0)?;
    let lambda = config.threshold(sigma, padded.len());
    let shrunk = soft_threshold(&coeffs, &vec![lambda; coeffs.details.len()])?;
    let mut values = idwt(&shrunk);
    values.truncate(series.len());
    Ok(Denoised { values, sigma, lambda })
}

/// Denoises every column of `y` independently. Returns the smoothed matrix and
/// the noise level used for each column.
pub fn denoise_columns(y: &Array2<f64>, config: &DenoiseConfig) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = Array2::zeros(y.raw_dim());
    let mut sigmas = Vec::with_capacity(y.ncols());
    for (col, mut dest) in y.axis_iter(Axis(1)).zip(out.axis_iter_mut(Axis(1))) {
        let series = col.to_vec();
        let d = denoise_trajectory(&series, config)?;
        dest.iter_mut().zip(&d.values).for_each(|(o, &v)| *o = v);
        sigmas.push(d.sigma);
    }
    Ok((out, sigmas))
}

/// Integrated basis features, `psi[n - 1, j, :] ≈ ∫_{t_{n-1}}^{t_n} g(x_j(u)) du`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiFeatures {
    /// `N x p x m`.
    pub psi: Array3<f64>,
    pub h: f64,
}

impl PsiFeatures {
    pub fn new(psi: Array3<f64>, h: f64) -> Result<Self> {
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("features contain non-finite values".into()));
        }
        if !(h > 0.0) {
            return Err(Error::Domain(format!("sampling period must be positive, got {h}")));
        }
        Ok(Self { psi, h })
    }

    pub fn n(&self) -> usize {
        self.psi.dim().0
    }

    pub fn p(&self) -> usize {
        self.psi.dim().1
    }

    pub fn m(&self) -> usize {
        self.psi.dim().2
    }

    pub fn interval(&self, n: usize) -> ndarray::ArrayView2<'_, f64> {
        self.psi.index_axis(Axis(0), n)
    }
}

/// Trapezoid features from grid values `x_hat` (`(N + 1) x p`, first row at `t_0`).
pub fn compute_psi_features(x_hat: &Array2<f64>, basis: BasisFamily, h: f64) -> Result<PsiFeatures> {
    let (rows, p) = x_hat.dim();
    if rows < 2 {
        return Err(Error::Shape("need at least two grid points".into()));
    }
    let m = basis.m();
    let mut psi = Array3::zeros((rows - 1, p, m));
    let mut prev = vec![0.0; m];
    let mut next = vec![0.0; m];
    for j in 0..p {
        let col: ArrayView1<f64> = x_hat.column(j);
        basis.eval_into(col[0], &mut prev);
        for n in 1..rows {
            basis.eval_into(col[n], &mut next);
            for b in 0..m {
                psi[[n - 1, j, b]] = 0.5 * h * (prev[b] + next[b]);
            }
            std::mem::swap(&mut prev, &mut next);
        }
    }
    PsiFeatures::new(psi, h)
}
