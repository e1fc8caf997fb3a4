use rand_distr::{Distribution, StandardNormal};

use super::{ExponentialFamily, FamilyKind, Matrix, Parameter, Vector};
use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;

/// Normal family with known covariance `Σ₀`.
///
/// The carrier is the centred `N(0, Σ₀)` density, so `Λ(θ) = θᵀΣ₀θ/2`,
/// `μ(θ) = Σ₀θ` and `p_θ = N(Σ₀θ, Σ₀)`. The statistic `φ(x) = x` is
/// unbounded; `stat_bound` is a configured effective range.
#[derive(Clone, Debug)]
pub struct GaussianMean {
    sigma0: Matrix,
    chol_lower: Matrix,
    precision: Matrix,
    log_norm: f64,
    stat_bound: f64,
}

impl GaussianMean {
    pub const DEFAULT_STAT_BOUND: f64 = 6.0;

    pub fn new(sigma0: Matrix, stat_bound: f64) -> Result<Self> {
        let p = sigma0.nrows();
        if p == 0 || sigma0.ncols() != p {
            return Err(invalid("Sigma0 must be a nonempty square matrix"));
        }
        if sigma0.iter().any(|x| !x.is_finite()) {
            return Err(invalid("Sigma0 has non-finite entries"));
        }
        let asym = (&sigma0 - sigma0.transpose()).amax();
        if asym > 1e-12 * sigma0.amax().max(1.0) {
            return Err(invalid("Sigma0 must be symmetric"));
        }
        if sigma0.symmetric_eigenvalues().min() <= 0.0 {
            return Err(invalid("Sigma0 must be positive definite"));
        }
        if !(stat_bound.is_finite() && stat_bound > 0.0) {
            return Err(invalid("stat_bound_C must be positive"));
        }
        let chol = sigma0
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("Sigma0 must be positive definite"))?;
        let chol_lower = chol.l();
        let precision = chol.inverse();
        let log_det: f64 = 2.0 * chol_lower.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let log_norm = -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            sigma0,
            chol_lower,
            precision,
            log_norm,
            stat_bound,
        })
    }

    /// The 2×2 covariance used in the bivariate-normal experiment.
    pub fn paper_default() -> Self {
        Self::new(
            Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            Self::DEFAULT_STAT_BOUND,
        )
        .expect("valid default covariance")
    }

    pub fn sigma0(&self) -> &Matrix {
        &self.sigma0
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn data_dim(&self) -> usize {
        self.sigma0.nrows()
    }

    /// Natural parameter with mean `mu`.
    pub fn theta_for_mean(&self, mu: &Vector) -> Parameter {
        Parameter::from_vector_unchecked(&self.precision * mu)
    }
}

/// Per-`θ` cache: the mean and the coordinate conditionals
/// `x_i | x_{-i} ~ N(μ_i − Σ_{j≠i} (Q_ij/Q_ii)(x_j − μ_j), 1/Q_ii)`.
#[derive(Clone, Debug)]
pub struct GaussianPrepared {
    mean: Vec<f64>,
    coef: Vec<f64>,
    cond_sd: Vec<f64>,
}

impl ExponentialFamily for GaussianMean {
    type Point = Vector;
    type Prepared = GaussianPrepared;

    fn kind(&self) -> FamilyKind {
        FamilyKind::GaussianMean
    }

    fn dim(&self) -> usize {
        self.sigma0.nrows()
    }

    fn stat_bound(&self) -> f64 {
        self.stat_bound
    }

    fn check_point(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                what: "data point",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn add_suff_stat(&self, x: &Vector, acc: &mut [f64]) {
        for (a, v) in acc.iter_mut().zip(x.iter()) {
            *a += v;
        }
    }

    fn log_carrier(&self, x: &Vector) -> f64 {
        self.log_norm - 0.5 * x.dot(&(&self.precision * x))
    }

    fn cumulant(&self, theta: &Parameter) -> f64 {
        0.5 * theta.dot(&(&self.sigma0 * theta.as_vector()))
    }

    fn mean_param(&self, theta: &Parameter) -> Vector {
        &self.sigma0 * theta.as_vector()
    }

    fn covariance(&self, _theta: &Parameter) -> Matrix {
        self.sigma0.clone()
    }

    fn prepare(&self, theta: &Parameter) -> GaussianPrepared {
        let p = self.dim();
        let mean = self.mean_param(theta);
        let mut coef = vec![0.0; p * p];
        let mut cond_sd = vec![0.0; p];
        for i in 0..p {
            let qii = self.precision[(i, i)];
            cond_sd[i] = (1.0 / qii).sqrt();
            for j in 0..p {
                if j != i {
                    coef[i * p + j] = self.precision[(i, j)] / qii;
                }
            }
        }
        GaussianPrepared {
            mean: mean.iter().copied().collect(),
            coef,
            cond_sd,
        }
    }

    fn draw_into(&self, prep: &GaussianPrepared, x: &mut Vector, rng: &mut StreamRng) {
        let p = self.dim();
        let z = Vector::from_fn(p, |_, _| StandardNormal.sample(rng));
        let lz = &self.chol_lower * z;
        for i in 0..p {
            x[i] = prep.mean[i] + lz[i];
        }
    }

    fn gibbs_sweep(&self, prep: &GaussianPrepared, x: &mut Vector, rng: &mut StreamRng) {
        let p = self.dim();
        for i in 0..p {
            let mut m = prep.mean[i];
            for j in 0..p {
                if j != i {
                    m -= prep.coef[i * p + j] * (x[j] - prep.mean[j]);
                }
            }
            let z: f64 = StandardNormal.sample(rng);
            x[i] = m + prep.cond_sd[i] * z;
        }
    }

    fn origin(&self) -> Vector {
        Vector::zeros(self.dim())
    }

    fn as_gaussian(&self) -> Option<&GaussianMean> {
        Some(self)
    }
}
