//! Closed-form Gaussian analysis of the forward process.
//!
//! For `x_0 ~ N(0, Σ)` the forward chain is jointly Gaussian, so the
//! correlation between component `i` of `x_t` and component `j` of the
//! noisier `x_{t+τ}` has a closed form. [`corr_monte_carlo`] estimates the
//! same quantity by simulating the chain directly and is kept independent of
//! [`corr_analytic`] so the two can check each other.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_range, Error, Result};
use crate::rng::{standard_normal_vec, SeedTree};
use crate::schedule::NoiseSchedule;

pub const PSD_TOLERANCE: f64 = -1e-10;
const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Monte-Carlo samples are split into this many independently seeded shards.
const MC_SHARDS: usize = 16;

/// Covariance Σ of `x_0` at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCovariance {
    sigma: DMatrix<f64>,
}

impl DataCovariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::DegenerateCovariance("matrix must be square and non-empty".into()));
        }
        let n = sigma.nrows();
        for i in 0..n {
            if !(sigma[(i, i)] > 0.0) {
                return Err(Error::DegenerateCovariance(format!(
                    "diagonal entry {i} = {} is not positive",
                    sigma[(i, i)]
                )));
            }
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOLERANCE {
                    return Err(Error::DegenerateCovariance(format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        let min_eig = sigma.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < PSD_TOLERANCE {
            return Err(Error::DegenerateCovariance(format!(
                "not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DegenerateCovariance("rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * variance)
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma[(i, j)]
    }

    /// Lower Cholesky factor, with jitter `1e-10 · trace / dim` added when the
    /// plain factorization fails.
    pub fn cholesky_factor(&self) -> Result<DMatrix<f64>> {
        if let Some(c) = self.sigma.clone().cholesky() {
            return Ok(c.l());
        }
        let n = self.dim();
        let jitter = 1e-10 * self.sigma.trace() / n as f64;
        let jittered = &self.sigma + DMatrix::identity(n, n) * jitter;
        jittered
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::DegenerateCovariance("Cholesky factorization failed".into()))
    }
}

/// A correlation query between component `i` of `x_t` and component `j` of
/// the noisier `x_{t+τ}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrQuery {
    pub t: usize,
    pub tau: usize,
    pub i: usize,
    pub j: usize,
}

impl CorrQuery {
    pub fn new(t: usize, tau: usize, i: usize, j: usize) -> Self {
        Self { t, tau, i, j }
    }

    fn validate(&self, s: &NoiseSchedule, cov: &DataCovariance) -> Result<()> {
        check_range("t + tau", self.t + self.tau, 0, s.steps())?;
        check_range("i", self.i, 0, cov.dim() - 1)?;
        check_range("j", self.j, 0, cov.dim() - 1)
    }
}

/// Closed-form correlation for explicit signal levels `ᾱ_t` (less noisy) and
/// `ᾱ_{t+τ}` (noisier).
pub fn corr_from_alpha_bars(
    ab_t: f64,
    ab_later: f64,
    cov: &DataCovariance,
    i: usize,
    j: usize,
) -> Result<f64> {
    let delta = if i == j { 1.0 } else { 0.0 };
    let numerator =
        (ab_later * ab_t).sqrt() * cov.get(i, j) + (ab_later / ab_t).sqrt() * (1.0 - ab_t) * delta;
    let var_t = ab_t * cov.get(i, i) + (1.0 - ab_t);
    let var_later = ab_later * cov.get(j, j) + (1.0 - ab_later);
    let denominator = (var_t * var_later).sqrt();
    if !(denominator > 0.0) {
        return Err(Error::DegenerateCovariance("zero marginal variance".into()));
    }
    Ok(numerator / denominator)
}

pub fn corr_analytic(s: &NoiseSchedule, cov: &DataCovariance, q: CorrQuery) -> Result<f64> {
    q.validate(s, cov)?;
    if q.tau == 0 && q.i == q.j {
        return Ok(1.0);
    }
    corr_from_alpha_bars(s.alpha_bar(q.t), s.alpha_bar(q.t + q.tau), cov, q.i, q.j)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    /// `(1 − ρ̂²) / √n`.
    pub std_error: f64,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn merge(mut self, o: Moments) -> Moments {
        self.n += o.n;
        self.sx += o.sx;
        self.sy += o.sy;
        self.sxx += o.sxx;
        self.syy += o.syy;
        self.sxy += o.sxy;
        self
    }

    fn pearson(&self) -> f64 {
        let cxx = self.sxx - self.sx * self.sx / self.n;
        let cyy = self.syy - self.sy * self.sy / self.n;
        let cxy = self.sxy - self.sx * self.sy / self.n;
        cxy / (cxx * cyy).sqrt()
    }
}

/// Monte-Carlo estimate with explicit signal levels, simulating
/// `x_0 ~ N(0, Σ)`, `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε` and
/// `x_{t+τ} | x_t = √(ᾱ_{t+τ}/ᾱ_t) x_t + √(1 − ᾱ_{t+τ}/ᾱ_t) ε'`.
pub fn corr_monte_carlo_from_alpha_bars(
    ab_t: f64,
    ab_later: f64,
    cov: &DataCovariance,
    i: usize,
    j: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples < 1000 {
        return Err(Error::Invalid(format!("need at least 1000 samples, got {n_samples}")));
    }
    let chol = cov.cholesky_factor()?;
    let dim = cov.dim();
    let tree = SeedTree::new(seed);
    let keep = (ab_later / ab_t).sqrt();
    let fresh = (1.0 - ab_later / ab_t).max(0.0).sqrt();
    let per_shard = n_samples / MC_SHARDS;
    let remainder = n_samples % MC_SHARDS;

    let shards: Vec<Moments> = (0..MC_SHARDS)
        .into_par_iter()
        .map(|shard| {
            let mut rng = tree.stream(&format!("corr-mc/{shard}"));
            let count = per_shard + usize::from(shard < remainder);
            let mut m = Moments::default();
            for _ in 0..count {
                let z = DVector::from_vec(standard_normal_vec(&mut rng, dim));
                let x0 = &chol * z;
                let eps = standard_normal_vec(&mut rng, dim);
                let xi = ab_t.sqrt() * x0[i] + (1.0 - ab_t).sqrt() * eps[i];
                let xj = ab_t.sqrt() * x0[j] + (1.0 - ab_t).sqrt() * eps[j];
                let eps_later: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let yj = keep * xj + fresh * eps_later;
                m.push(xi, yj);
            }
            m
        })
        .collect();
    let total = shards.into_iter().fold(Moments::default(), Moments::merge);
    let estimate = total.pearson();
    if !estimate.is_finite() {
        return Err(Error::DegenerateCovariance("sample variance vanished".into()));
    }
    Ok(McEstimate {
        estimate,
        std_error: (1.0 - estimate * estimate) / (n_samples as f64).sqrt(),
    })
}

pub fn corr_monte_carlo(
    s: &NoiseSchedule,
    cov: &DataCovariance,
    q: CorrQuery,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    q.validate(s, cov)?;
    corr_monte_carlo_from_alpha_bars(
        s.alpha_bar(q.t),
        s.alpha_bar(q.t + q.tau),
        cov,
        q.i,
        q.j,
        n_samples,
        seed,
    )
}

/// `u_t = 1 − Corr(x_t^(i), x_{t+τ}^(i))` for `t = T−τ` down to `0`, i.e.
/// ordered along the generation direction. Entry `n` belongs to
/// `t = T − τ − n`.
pub fn uncertainty_series(
    s: &NoiseSchedule,
    cov: &DataCovariance,
    tau: usize,
    i: usize,
) -> Result<Vec<f64>> {
    if tau < 1 {
        return Err(Error::Invalid("uncertainty lag tau must be >= 1".into()));
    }
    check_range("tau", tau, 1, s.steps())?;
    (0..=s.steps() - tau)
        .rev()
        .map(|t| corr_analytic(s, cov, CorrQuery::new(t, tau, i, i)).map(|c| 1.0 - c))
        .collect()
}

/// A Gaussian data distribution `N(mean, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianData {
    pub mean: DVector<f64>,
    pub cov: DataCovariance,
}

impl GaussianData {
    pub fn new(mean: &[f64], cov: DataCovariance) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Invalid("mean and covariance dimensions differ".into()));
        }
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            cov,
        })
    }

    pub fn centered(cov: DataCovariance) -> Self {
        Self {
            mean: DVector::zeros(cov.dim()),
            cov,
        }
    }

    /// Forward marginal at `t`: `N(√ᾱ_t μ, ᾱ_t Σ + (1 − ᾱ_t) I)`.
    pub fn marginal(&self, s: &NoiseSchedule, t: usize) -> (DVector<f64>, DMatrix<f64>) {
        let ab = s.alpha_bar(t);
        let n = self.cov.dim();
        (
            &self.mean * ab.sqrt(),
            self.cov.matrix() * ab + DMatrix::identity(n, n) * (1.0 - ab),
        )
    }

    /// Exact noise prediction `ε*(x, t) = −√(1−ᾱ_t) ∇ log p_t(x)`.
    pub fn optimal_epsilon(&self, s: &NoiseSchedule, x: &[f64], t: usize) -> Result<Vec<f64>> {
        check_range("t", t, 1, s.steps())?;
        if x.len() != self.cov.dim() {
            return Err(Error::Invalid("state dimension mismatch".into()));
        }
        let (mean, marginal_cov) = self.marginal(s, t);
        let centered = DVector::from_column_slice(x) - mean;
        let solved = marginal_cov
            .cholesky()
            .ok_or_else(|| Error::DegenerateCovariance("singular marginal covariance".into()))?
            .solve(&centered);
        let scale = (1.0 - s.alpha_bar(t)).sqrt();
        Ok(solved.iter().map(|v| scale * v).collect())
    }
}

/// Optimal noise prediction for zero-mean data `x_0 ~ N(0, Σ)`.
pub fn optimal_epsilon_gaussian(
    s: &NoiseSchedule,
    cov: &DataCovariance,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    GaussianData::centered(cov.clone()).optimal_epsilon(s, x, t)
}
