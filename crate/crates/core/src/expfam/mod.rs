//! Exponential families `p_θ(x) = c(x) exp(θ·φ(x) − Λ(θ))`.
//!
//! The [`ExponentialFamily`] trait carries what every downstream module
//! needs: the sufficient statistic, the cumulant and its first two
//! derivatives, exact sampling, and a Gibbs sweep whose equilibrium is
//! `p_θ`. Likelihood, gradient and MLE are generic over the trait.
//!
//! Two families are provided: [`GaussianMean`] (normal with known
//! covariance, natural parameter `θ` with mean `Σ₀θ`) and [`BinaryRbm`]
//! (fully observed binary RBM with zero biases, `φ(v,h) = vec(h vᵀ)`).

mod gaussian;
mod rbm;

pub use gaussian::{GaussianMean, GaussianPrepared};
pub use rbm::{BinaryConfig, BinaryRbm, RbmPrepared};

use std::fmt::Debug;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// A natural parameter `θ ∈ ℝᵈ` with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter(Vector);

impl Parameter {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::from_vector(Vector::from_vec(values))
    }

    pub fn from_vector(v: Vector) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("parameter has non-finite entries"));
        }
        Ok(Self(v))
    }

    /// Wrap a vector produced by finite arithmetic on other parameters.
    pub(crate) fn from_vector_unchecked(v: Vector) -> Self {
        Self(v)
    }

    pub fn zeros(d: usize) -> Self {
        Self(Vector::zeros(d))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn into_vector(self) -> Vector {
        self.0
    }

    pub fn distance(&self, other: &Parameter) -> f64 {
        (&self.0 - &other.0).norm()
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::Dimension {
                what: "parameter",
                expected: d,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

impl Deref for Parameter {
    type Target = Vector;
    fn deref(&self) -> &Vector {
        &self.0
    }
}

/// Axis-aligned compact box `Θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("domain bounds must be nonempty and of equal length"));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(format!(
                    "domain coordinate {j}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[lo, hi]^d`.
    pub fn cube(d: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; d], vec![hi; d])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, theta: &Parameter) -> bool {
        theta.dim() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }

    pub fn contains_interior(&self, theta: &Parameter) -> bool {
        theta.dim() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *lo < *x && *x < *hi)
    }

    /// Clamp every coordinate into the box; the flag reports whether any
    /// coordinate moved.
    pub fn clamp(&self, theta: Parameter) -> (Parameter, bool) {
        let mut v = theta.into_vector();
        let mut clamped = false;
        for (j, x) in v.iter_mut().enumerate() {
            let c = x.clamp(self.lower[j], self.upper[j]);
            if c != *x {
                clamped = true;
                *x = c;
            }
        }
        (Parameter(v), clamped)
    }

    /// Grid coordinates along axis `j` with `k` points including both ends.
    pub fn axis(&self, j: usize, k: usize) -> Vec<f64> {
        let (lo, hi) = (self.lower[j], self.upper[j]);
        if k == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..k)
            .map(|i| {
                if i + 1 == k {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (k - 1) as f64
                }
            })
            .collect()
    }

    /// All `k^d` tensor-grid points, first coordinate varying slowest.
    pub fn grid(&self, k: usize) -> Vec<Parameter> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|j| self.axis(j, k)).collect();
        grid_from_axes(&axes)
    }

    /// Largest distance from `center` to any corner of the box.
    pub fn max_distance_from(&self, center: &Parameter) -> f64 {
        center
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(c, (lo, hi))| (c - lo).abs().max((hi - c).abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Tensor product of per-axis coordinates, first axis varying slowest.
pub fn grid_from_axes(axes: &[Vec<f64>]) -> Vec<Parameter> {
    let total: usize = axes.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        let v: Vec<f64> = idx.iter().zip(axes).map(|(&i, a)| a[i]).collect();
        out.push(Parameter(Vector::from_vec(v)));
        for j in (0..axes.len()).rev() {
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    GaussianMean,
    BinaryRbm,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::GaussianMean => "gaussian_mean",
            FamilyKind::BinaryRbm => "binary_rbm",
        }
    }
}

/// An exponential family together with the samplers the CD machinery needs.
pub trait ExponentialFamily: Send + Sync {
    /// An element of the data space.
    type Point: Clone + Debug + PartialEq + Send + Sync;
    /// Per-`θ` precomputation shared by all chains of one CD step.
    type Prepared: Send + Sync;

    fn kind(&self) -> FamilyKind;

    /// Sufficient-statistic dimension `d`.
    fn dim(&self) -> usize;

    /// The constant `C` with `φ(x) ∈ [−C, C]^d`.
    fn stat_bound(&self) -> f64;

    fn check_point(&self, x: &Self::Point) -> Result<()>;

    /// `acc += φ(x)`.
    fn add_suff_stat(&self, x: &Self::Point, acc: &mut [f64]);

    fn log_carrier(&self, x: &Self::Point) -> f64;

    fn cumulant(&self, theta: &Parameter) -> f64;

    fn mean_param(&self, theta: &Parameter) -> Vector;

    fn covariance(&self, theta: &Parameter) -> Matrix;

    fn prepare(&self, theta: &Parameter) -> Self::Prepared;

    /// Overwrite `x` with an exact draw from `p_θ`.
    fn draw_into(&self, prep: &Self::Prepared, x: &mut Self::Point, rng: &mut StreamRng);

    /// One systematic-scan Gibbs sweep, in place.
    fn gibbs_sweep(&self, prep: &Self::Prepared, x: &mut Self::Point, rng: &mut StreamRng);

    /// A placeholder point used to seed buffers before [`Self::draw_into`].
    fn origin(&self) -> Self::Point;

    /// The enumerable family, if this is one.
    fn as_discrete(&self) -> Option<&BinaryRbm> {
        None
    }

    /// Position of `x` in the enumerated state space, for discrete families.
    fn state_index(&self, _x: &Self::Point) -> Option<usize> {
        None
    }

    /// The Gaussian family, if this is one.
    fn as_gaussian(&self) -> Option<&GaussianMean> {
        None
    }

    fn suff_stat(&self, x: &Self::Point) -> Result<Vector> {
        self.check_point(x)?;
        let mut acc = vec![0.0; self.dim()];
        self.add_suff_stat(x, &mut acc);
        Ok(Vector::from_vec(acc))
    }
}

/// An i.i.d. sample `X_1..X_n` from the data space.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSample<P> {
    points: Vec<P>,
}

impl<P> DataSample<P> {
    pub fn new(points: Vec<P>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("data sample must contain at least one point"));
        }
        Ok(Self { points })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[P] {
        &self.points
    }
}

impl<P: Clone + Debug + PartialEq + Send + Sync> DataSample<P> {
    /// `φ̄ = (1/n) Σ φ(X_i)`.
    pub fn mean_stat<F: ExponentialFamily<Point = P>>(&self, family: &F) -> Vector {
        let mut acc = vec![0.0; family.dim()];
        for x in &self.points {
            family.add_suff_stat(x, &mut acc);
        }
        Vector::from_vec(acc) / self.n() as f64
    }

    pub fn validate<F: ExponentialFamily<Point = P>>(&self, family: &F) -> Result<()> {
        self.points.iter().try_for_each(|x| family.check_point(x))
    }
}

/// `l(θ) = (1/n)Σ log c(X_i) + θ·φ̄ − Λ(θ)`.
pub fn log_likelihood<F: ExponentialFamily>(
    family: &F,
    data: &DataSample<F::Point>,
    theta: &Parameter,
) -> Result<f64> {
    theta.check_dim(family.dim())?;
    let carrier = data.points().iter().map(|x| family.log_carrier(x)).sum::<f64>() / data.n() as f64;
    Ok(carrier + theta.dot(&data.mean_stat(family)) - family.cumulant(theta))
}

/// `g(θ) = φ̄ − μ(θ)`.
pub fn exact_gradient<F: ExponentialFamily>(
    family: &F,
    data: &DataSample<F::Point>,
    theta: &Parameter,
) -> Result<Vector> {
    theta.check_dim(family.dim())?;
    Ok(data.mean_stat(family) - family.mean_param(theta))
}

pub const MLE_MAX_ITERATIONS: usize = 200;
pub const MLE_DEFAULT_TOL: f64 = 1e-10;

/// Solve `μ(θ̂) = target` by damped Newton steps with step halving until the
/// moment residual decreases.
pub fn solve_moment_match<F: ExponentialFamily>(family: &F, target: &Vector, tol: f64) -> Result<Parameter> {
    let d = family.dim();
    if target.len() != d {
        return Err(Error::Dimension {
            what: "moment target",
            expected: d,
            got: target.len(),
        });
    }
    let mut theta = Vector::zeros(d);
    let mut residual_vec = target - family.mean_param(&Parameter(theta.clone()));
    let mut residual = residual_vec.norm();
    for _ in 0..MLE_MAX_ITERATIONS {
        if residual <= tol {
            return Ok(Parameter(theta));
        }
        let cov = family.covariance(&Parameter(theta.clone()));
        let step = match cov.clone().cholesky() {
            Some(ch) => ch.solve(&residual_vec),
            None => cov
                .lu()
                .solve(&residual_vec)
                .ok_or_else(|| invalid("singular covariance during Newton iteration"))?,
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + &step * scale;
            let cand_res_vec = target - family.mean_param(&Parameter(cand.clone()));
            let cand_res = cand_res_vec.norm();
            if cand_res.is_finite() && cand_res < residual {
                theta = cand;
                residual_vec = cand_res_vec;
                residual = cand_res;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if residual <= tol {
        Ok(Parameter(theta))
    } else {
        Err(Error::Convergence {
            iterations: MLE_MAX_ITERATIONS,
            residual,
        })
    }
}

/// Maximum-likelihood estimate `θ̂_n`.
pub fn mle<F: ExponentialFamily>(family: &F, data: &DataSample<F::Point>, tol: f64) -> Result<Parameter> {
    let target = data.mean_stat(family);
    if family.kind() == FamilyKind::BinaryRbm {
        if let Some((coord, &value)) = target.iter().enumerate().find(|(_, &v)| v <= 0.0 || v >= 1.0) {
            return Err(Error::NoInteriorMle { coord, value });
        }
    }
    solve_moment_match(family, &target, tol)
}

/// `n` exact i.i.d. draws from `p_θ` from a single data stream.
pub fn sample_from_model<F: ExponentialFamily>(
    family: &F,
    theta: &Parameter,
    n: usize,
    seed: u64,
) -> Result<DataSample<F::Point>> {
    theta.check_dim(family.dim())?;
    if n == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    let prep = family.prepare(theta);
    let mut rng = crate::rng::stream(seed, &[crate::rng::tag::DATA]);
    let points = (0..n)
        .map(|_| {
            let mut x = family.origin();
            family.draw_into(&prep, &mut x, &mut rng);
            x
        })
        .collect();
    DataSample::new(points)
}

/// Smallest and largest eigenvalues of `Σ(θ)` over a set of parameters.
pub fn eigen_bounds<F: ExponentialFamily>(family: &F, thetas: &[Parameter]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for theta in thetas {
        let eig = family.covariance(theta).symmetric_eigenvalues();
        lo = lo.min(eig.min());
        hi = hi.max(eig.max());
    }
    (lo, hi)
}
