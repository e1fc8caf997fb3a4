//! θ-indexed MCMC kernels with equilibrium `p_θ`.
//!
//! Gibbs kernels use a fixed systematic scan (hidden block then visible block
//! for the RBM, coordinate order for the Gaussian), so one step of the
//! discrete kernel is exactly the product of two block matrices. The
//! exact-resampling kernel ignores its input and draws from `p_θ`, which
//! models the `α = 0` limit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::expfam::{ExponentialFamily, FamilyKind, GaussianMean, Matrix, ParamDomain, Parameter, Vector};
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    RbmGibbs,
    GaussianGibbs,
    ExactResample,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::RbmGibbs => "rbm_gibbs",
            KernelKind::GaussianGibbs => "gaussian_gibbs",
            KernelKind::ExactResample => "exact_resample",
        }
    }
}

/// Anything that can advance a chain by one transition at a fixed `θ`.
pub trait MarkovKernel<F: ExponentialFamily>: Sync {
    fn step(&self, family: &F, prep: &F::Prepared, x: &mut F::Point, rng: &mut StreamRng);

    /// The mixing constant when it is known analytically.
    fn known_alpha(&self) -> Option<f64> {
        None
    }
}

/// A kernel kind validated against the family it will drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelSpec {
    kind: KernelKind,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, family: FamilyKind) -> Result<Self> {
        let ok = matches!(
            (kind, family),
            (KernelKind::ExactResample, _)
                | (KernelKind::RbmGibbs, FamilyKind::BinaryRbm)
                | (KernelKind::GaussianGibbs, FamilyKind::GaussianMean)
        );
        if !ok {
            return Err(invalid(format!(
                "kernel {} cannot drive the {} family",
                kind.name(),
                family.name()
            )));
        }
        Ok(Self { kind })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }
}

impl<F: ExponentialFamily> MarkovKernel<F> for KernelSpec {
    #[inline]
    fn step(&self, family: &F, prep: &F::Prepared, x: &mut F::Point, rng: &mut StreamRng) {
        match self.kind {
            KernelKind::ExactResample => family.draw_into(prep, x, rng),
            KernelKind::RbmGibbs | KernelKind::GaussianGibbs => family.gibbs_sweep(prep, x, rng),
        }
    }

    fn known_alpha(&self) -> Option<f64> {
        match self.kind {
            KernelKind::ExactResample => Some(0.0),
            _ => None,
        }
    }
}

pub fn kernel_step<F: ExponentialFamily, K: MarkovKernel<F>>(
    kernel: &K,
    family: &F,
    theta: &Parameter,
    x: &F::Point,
    rng: &mut StreamRng,
) -> F::Point {
    let prep = family.prepare(theta);
    let mut y = x.clone();
    kernel.step(family, &prep, &mut y, rng);
    y
}

pub fn m_step<F: ExponentialFamily, K: MarkovKernel<F>>(
    kernel: &K,
    family: &F,
    theta: &Parameter,
    x: &F::Point,
    m: usize,
    rng: &mut StreamRng,
) -> Result<F::Point> {
    if m < 1 {
        return Err(invalid("m must be at least 1"));
    }
    let prep = family.prepare(theta);
    let mut y = x.clone();
    for _ in 0..m {
        kernel.step(family, &prep, &mut y, rng);
    }
    Ok(y)
}

/// A row-stochastic matrix over an enumerated state space together with its
/// stationary law.
#[derive(Clone, Debug)]
pub struct TransitionMatrix {
    p: Matrix,
    stationary: Vector,
}

impl TransitionMatrix {
    /// Validate a stochastic matrix and solve for its stationary law.
    pub fn from_matrix(p: Matrix) -> Result<Self> {
        check_stochastic(&p)?;
        let s = p.nrows();
        // πᵀ(P − I) = 0 with the last equation replaced by Σπ = 1.
        let mut a = p.transpose() - Matrix::identity(s, s);
        for j in 0..s {
            a[(s - 1, j)] = 1.0;
        }
        let mut rhs = Vector::zeros(s);
        rhs[s - 1] = 1.0;
        let stationary = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| invalid("transition matrix has no unique stationary law"))?;
        Ok(Self { p, stationary })
    }

    pub(crate) fn with_stationary(p: Matrix, stationary: Vector) -> Self {
        Self { p, stationary }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn stationary(&self) -> &Vector {
        &self.stationary
    }

    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.nrows() == 0
    }

    /// `Pᵐ` by repeated squaring; `P⁰ = I`.
    pub fn power(&self, m: usize) -> Matrix {
        let s = self.len();
        let mut result = Matrix::identity(s, s);
        let mut base = self.p.clone();
        let mut e = m;
        while e > 0 {
            if e & 1 == 1 {
                result = &result * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        result
    }

    /// `P − 1πᵀ`: removes the eigenpair `(1, π)` and keeps the rest.
    pub fn deflated(&self) -> Matrix {
        let s = self.len();
        let ones = Vector::from_element(s, 1.0);
        &self.p - ones * self.stationary.transpose()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.p
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn check_stochastic(p: &Matrix) -> Result<()> {
    if p.nrows() == 0 || p.nrows() != p.ncols() {
        return Err(invalid("transition matrix must be square and nonempty"));
    }
    for (i, row) in p.row_iter().enumerate() {
        let sum = row.sum();
        if row.iter().any(|&x| !(x >= -1e-12)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

/// Exact one-step matrix of a kernel on the enumerated RBM state space.
///
/// For the Gibbs kernel this is `H·V`, with `H` resampling every hidden unit
/// given the visible block and `V` resampling every visible unit given the
/// new hidden block.
pub fn transition_matrix<F: ExponentialFamily>(
    kernel: &KernelSpec,
    family: &F,
    theta: &Parameter,
) -> Result<TransitionMatrix> {
    let rbm = family.as_discrete().ok_or(Error::UnsupportedFamily {
        op: "transition_matrix",
        family: family.kind().name(),
    })?;
    theta.check_dim(rbm.dim())?;
    let table = rbm.table();
    let s = table.len();
    let pi = Vector::from_vec(table.exact_distribution(theta));
    if kernel.kind() == KernelKind::ExactResample {
        let ones = Vector::from_element(s, 1.0);
        return Ok(TransitionMatrix::with_stationary(ones * pi.transpose(), pi));
    }
    let (nv, nh) = (rbm.nv(), rbm.nh());
    let w = theta.as_slice();
    let vis_mask = (1u64 << nv) - 1;
    // Probability of every hidden pattern given each visible pattern, and
    // vice versa.
    let hidden_given = |v: u64| -> Vec<f64> {
        let on: Vec<f64> = (0..nh)
            .map(|i| {
                let a: f64 = (0..nv).filter(|j| (v >> j) & 1 == 1).map(|j| w[i * nv + j]).sum();
                1.0 / (1.0 + (-a).exp())
            })
            .collect();
        (0..1u64 << nh)
            .map(|h| (0..nh).map(|i| if (h >> i) & 1 == 1 { on[i] } else { 1.0 - on[i] }).product())
            .collect()
    };
    let visible_given = |h: u64| -> Vec<f64> {
        let on: Vec<f64> = (0..nv)
            .map(|j| {
                let b: f64 = (0..nh).filter(|i| (h >> i) & 1 == 1).map(|i| w[i * nv + j]).sum();
                1.0 / (1.0 + (-b).exp())
            })
            .collect();
        (0..1u64 << nv)
            .map(|v| (0..nv).map(|j| if (v >> j) & 1 == 1 { on[j] } else { 1.0 - on[j] }).product())
            .collect()
    };
    let mut hmat = Matrix::zeros(s, s);
    let mut vmat = Matrix::zeros(s, s);
    for from in 0..s as u64 {
        let v = from & vis_mask;
        let h = from >> nv;
        for (h2, q) in hidden_given(v).into_iter().enumerate() {
            hmat[(from as usize, (v | ((h2 as u64) << nv)) as usize)] = q;
        }
        for (v2, q) in visible_given(h).into_iter().enumerate() {
            vmat[(from as usize, (v2 as u64 | (h << nv)) as usize)] = q;
        }
    }
    Ok(TransitionMatrix::with_stationary(hmat * vmat, pi))
}

/// Dense route for `α`: largest eigenvalue modulus of the deflated matrix.
pub fn spectral_alpha_dense(p: &TransitionMatrix) -> Result<f64> {
    check_stochastic(p.matrix())?;
    let eig = p.deflated().complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max).min(1.0))
}

const POWER_MAX_ITERATIONS: usize = 2_000_000;

/// Power-iteration route for `α` on `P − 1πᵀ`.
pub fn spectral_alpha_power(p: &TransitionMatrix) -> Result<f64> {
    check_stochastic(p.matrix())?;
    let d = p.deflated();
    let s = p.len();
    // A fixed, non-symmetric start vector avoids landing in an invariant
    // subspace by accident.
    let mut x = Vector::from_fn(s, |i, _| 1.0 + ((i * 7 + 3) % 11) as f64 / 10.0 - 0.37 * (i % 3) as f64);
    let mut norm = x.norm();
    x /= norm;
    let mut prev = f64::NAN;
    let mut stable = 0;
    for _ in 0..POWER_MAX_ITERATIONS {
        let y = &d * &x;
        norm = y.norm();
        if norm < 1e-300 {
            return Ok(0.0);
        }
        x = y / norm;
        if (norm - prev).abs() <= 1e-15 * norm.max(1e-300) {
            stable += 1;
            if stable >= 5 {
                break;
            }
        } else {
            stable = 0;
        }
        prev = norm;
    }
    Ok(norm.min(1.0))
}

/// Matrices up to this size use the dense route.
pub const DENSE_LIMIT: usize = 64;

/// Second largest absolute eigenvalue `α(θ)`.
pub fn spectral_alpha(p: &TransitionMatrix) -> Result<f64> {
    if p.len() <= DENSE_LIMIT {
        spectral_alpha_dense(p)
    } else {
        spectral_alpha_power(p)
    }
}

/// `L²(p_θ)` operator norm of `P` on mean-zero functions. Equals `α(θ)` for
/// reversible kernels; for the two-block systematic scan it is `√α(θ)`.
pub fn l2_contraction(p: &TransitionMatrix) -> f64 {
    let s = p.len();
    let sqrt_pi: Vec<f64> = p.stationary().iter().map(|q| q.max(0.0).sqrt()).collect();
    let d = p.deflated();
    let a = Matrix::from_fn(s, s, |i, j| {
        if sqrt_pi[j] == 0.0 {
            0.0
        } else {
            sqrt_pi[i] * d[(i, j)] / sqrt_pi[j]
        }
    });
    a.singular_values().max()
}

#[derive(Clone, Debug)]
pub struct SpectralReport {
    pub grid_points_per_dim: usize,
    pub alpha_at: Vec<(Parameter, f64)>,
    pub alpha_sup: f64,
    /// Set when `alpha_sup ≥ 1 − 1e−6`.
    pub near_one: bool,
}

pub fn alpha_sup_over_grid<F: ExponentialFamily>(
    kernel: &KernelSpec,
    family: &F,
    domain: &ParamDomain,
    grid_points_per_dim: usize,
) -> Result<SpectralReport> {
    let grid = domain.grid(grid_points_per_dim);
    alpha_sup_over_points(kernel, family, grid, grid_points_per_dim)
}

pub(crate) fn alpha_sup_over_points<F: ExponentialFamily>(
    kernel: &KernelSpec,
    family: &F,
    points: Vec<Parameter>,
    grid_points_per_dim: usize,
) -> Result<SpectralReport> {
    let mut alpha_at = Vec::with_capacity(points.len());
    let mut alpha_sup: f64 = 0.0;
    for theta in points {
        let a = spectral_alpha(&transition_matrix(kernel, family, &theta)?)?;
        alpha_sup = alpha_sup.max(a);
        alpha_at.push((theta, a));
    }
    Ok(SpectralReport {
        grid_points_per_dim,
        alpha_at,
        alpha_sup,
        near_one: alpha_sup >= 1.0 - 1e-6,
    })
}

pub const ALPHA_FIT_MAX_LAG: usize = 10;
pub const ALPHA_BURN_IN: usize = 1_000;

/// Sample autocorrelations at lags `1..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (1..=max_lag)
        .map(|k| {
            if k >= n || var == 0.0 {
                return 0.0;
            }
            let c: f64 = (0..n - k).map(|t| (series[t] - mean) * (series[t + k] - mean)).sum();
            c / n as f64 / var
        })
        .collect()
}

/// Least-squares rate `r ∈ [0, 1]` for `acf_k ≈ r^k`.
pub fn fit_geometric_rate(acf: &[f64]) -> f64 {
    let loss = |r: f64| -> f64 {
        acf.iter()
            .enumerate()
            .map(|(i, a)| (a - r.powi(i as i32 + 1)).powi(2))
            .sum()
    };
    let mut best = (0.0, loss(0.0));
    for i in 1..=1000 {
        let r = i as f64 / 1000.0;
        let l = loss(r);
        if l < best.1 {
            best = (r, l);
        }
    }
    // Golden-section refinement inside the winning cell.
    let (mut lo, mut hi) = ((best.0 - 1e-3).max(0.0), (best.0 + 1e-3).min(1.0));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if loss(a) < loss(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

/// Estimate `α` for a continuous kernel from the geometric decay of the
/// lag autocorrelations of each coordinate along one long chain; the
/// slowest coordinate wins.
pub fn gaussian_gibbs_alpha_estimate<K: MarkovKernel<GaussianMean>>(
    family: &GaussianMean,
    kernel: &K,
    theta: &Parameter,
    chain_length: usize,
    seed: u64,
) -> Result<f64> {
    if chain_length < 100_000 {
        return Err(invalid("chain_length must be at least 1e5"));
    }
    theta.check_dim(family.dim())?;
    let prep = family.prepare(theta);
    let mut rng = rng::stream(seed, &[rng::tag::SPECTRAL]);
    let mut x = family.origin();
    for _ in 0..ALPHA_BURN_IN {
        kernel.step(family, &prep, &mut x, &mut rng);
    }
    let p = family.dim();
    let mut series = vec![Vec::with_capacity(chain_length); p];
    for _ in 0..chain_length {
        kernel.step(family, &prep, &mut x, &mut rng);
        for (i, s) in series.iter_mut().enumerate() {
            s.push(x[i]);
        }
    }
    Ok(series
        .iter()
        .map(|s| fit_geometric_rate(&autocorrelation(s, ALPHA_FIT_MAX_LAG)))
        .fold(0.0, f64::max))
}
