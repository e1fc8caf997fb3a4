//! Brute-force ground truth for the binary RBM.
//!
//! Every configuration is enumerated, so the law `p_θ`, its moments and all
//! m-step expectations of the Gibbs kernel are exact up to floating-point
//! rounding. Weights are normalised with log-sum-exp throughout.

use crate::error::{Error, Result};
use crate::expfam::{BinaryConfig, BinaryRbm, DataSample, Matrix, Parameter, Vector};
use crate::kernels::{transition_matrix, KernelSpec};

/// Enumeration is refused above this many configurations.
pub const MAX_STATES: u64 = 1 << 20;

/// All `2^(nv+nh)` configurations in increasing bit-encoding order with their
/// sufficient statistics.
#[derive(Clone, Debug)]
pub struct StateTable {
    nv: usize,
    nh: usize,
    states: Vec<BinaryConfig>,
    /// Row-major `states × d`, entries in {0, 1}.
    phi: Vec<f64>,
}

impl StateTable {
    pub fn enumerate(nv: usize, nh: usize) -> Result<Self> {
        let units = (nv + nh) as u32;
        let count = 1u64.checked_shl(units).unwrap_or(u64::MAX);
        if units >= 63 || count > MAX_STATES {
            return Err(Error::StateSpaceTooLarge {
                states: count,
                cap: MAX_STATES,
            });
        }
        let d = nv * nh;
        let states: Vec<BinaryConfig> = (0..count).map(BinaryConfig).collect();
        let mut phi = vec![0.0; states.len() * d];
        for (s, x) in states.iter().enumerate() {
            for i in 0..nh {
                for j in 0..nv {
                    phi[s * d + i * nv + j] = (x.hidden(nv, i) * x.visible(j)) as f64;
                }
            }
        }
        Ok(Self { nv, nh, states, phi })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nv * self.nh
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn nh(&self) -> usize {
        self.nh
    }

    pub fn states(&self) -> &[BinaryConfig] {
        &self.states
    }

    pub fn phi(&self, s: usize) -> &[f64] {
        let d = self.dim();
        &self.phi[s * d..(s + 1) * d]
    }

    /// The `states × d` statistic matrix.
    pub fn phi_matrix(&self) -> Matrix {
        Matrix::from_row_slice(self.len(), self.dim(), &self.phi)
    }

    /// `θ·φ(x)` for every state.
    pub fn log_weights(&self, theta: &Parameter) -> Vec<f64> {
        (0..self.len())
            .map(|s| self.phi(s).iter().zip(theta.iter()).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn log_partition(&self, theta: &Parameter) -> f64 {
        log_sum_exp(&self.log_weights(theta))
    }

    pub fn exact_distribution(&self, theta: &Parameter) -> Vec<f64> {
        let lw = self.log_weights(theta);
        let z = log_sum_exp(&lw);
        lw.iter().map(|w| (w - z).exp()).collect()
    }

    pub fn mean_under(&self, p: &[f64]) -> Vector {
        let d = self.dim();
        let mut mean = Vector::zeros(d);
        for (s, &ps) in p.iter().enumerate() {
            for (k, &f) in self.phi(s).iter().enumerate() {
                mean[k] += ps * f;
            }
        }
        mean
    }

    pub fn covariance_under(&self, p: &[f64]) -> Matrix {
        let d = self.dim();
        let mean = self.mean_under(p);
        let mut cov = Matrix::zeros(d, d);
        for (s, &ps) in p.iter().enumerate() {
            let f = self.phi(s);
            for a in 0..d {
                let da = f[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += ps * da * (f[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov
    }

    /// Histogram of a data sample over states, as empirical probabilities.
    pub fn empirical_distribution(&self, data: &DataSample<BinaryConfig>) -> Vec<f64> {
        let mut counts = vec![0.0; self.len()];
        for x in data.points() {
            counts[x.index()] += 1.0;
        }
        let n = data.n() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }
}

/// `log Σ exp(w_i)` without overflow.
pub fn log_sum_exp(w: &[f64]) -> f64 {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + w.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn exact_distribution(table: &StateTable, theta: &Parameter) -> Vec<f64> {
    table.exact_distribution(theta)
}

/// m-step law from every start state: row `x` of `Pᵐ`, or `p_θ` in every row
/// for the exact-resampling kernel.
pub fn m_step_law(family: &BinaryRbm, kernel: &KernelSpec, theta: &Parameter, m: usize) -> Result<Matrix> {
    let p = transition_matrix(kernel, family, theta)?;
    Ok(p.power(m))
}

/// `f_θ(x) = E[φ(X^(m)) | X_0 = x]` for every state, as a `states × d` matrix.
pub fn propagated_stats(family: &BinaryRbm, kernel: &KernelSpec, theta: &Parameter, m: usize) -> Result<Matrix> {
    Ok(m_step_law(family, kernel, theta, m)? * family.table().phi_matrix())
}

/// Exact mean of the CD gradient: `φ̄ − (1/n) Σ_i (row X_i of Pᵐ)·φ`.
pub fn exact_cd_gradient_mean(
    family: &BinaryRbm,
    kernel: &KernelSpec,
    theta: &Parameter,
    data: &DataSample<BinaryConfig>,
    m: usize,
) -> Result<Vector> {
    let emp = family.table().empirical_distribution(data);
    exact_cd_gradient_mean_from_law(family, kernel, theta, &emp, m)
}

/// [`exact_cd_gradient_mean`] for data given as an empirical law over states.
pub fn exact_cd_gradient_mean_from_law(
    family: &BinaryRbm,
    kernel: &KernelSpec,
    theta: &Parameter,
    emp: &[f64],
    m: usize,
) -> Result<Vector> {
    let table = family.table();
    let phibar = table.mean_under(emp);
    Ok(phibar - law_average(&propagated_stats(family, kernel, theta, m)?, emp))
}

/// `Σ_x w(x) f(x)` for the rows of a `states × d` matrix.
pub fn law_average(f: &Matrix, w: &[f64]) -> Vector {
    let mut out = Vector::zeros(f.ncols());
    for (s, &ws) in w.iter().enumerate() {
        if ws != 0.0 {
            out += f.row(s).transpose() * ws;
        }
    }
    out
}

/// Exact trace of the CD-gradient covariance:
/// `(1/n²) Σ_i Σ_j Var(φ_j(X_i^(m)) | X_i)`.
pub fn exact_cd_gradient_trace(
    family: &BinaryRbm,
    kernel: &KernelSpec,
    theta: &Parameter,
    data: &DataSample<BinaryConfig>,
    m: usize,
) -> Result<f64> {
    let emp = family.table().empirical_distribution(data);
    exact_cd_gradient_trace_from_law(family, kernel, theta, &emp, data.n(), m)
}

pub fn exact_cd_gradient_trace_from_law(
    family: &BinaryRbm,
    kernel: &KernelSpec,
    theta: &Parameter,
    emp: &[f64],
    n: usize,
    m: usize,
) -> Result<f64> {
    let table = family.table();
    let law = m_step_law(family, kernel, theta, m)?;
    let phi = table.phi_matrix();
    let first = &law * &phi;
    let second = &law * phi.component_mul(&phi);
    let mut per_point = 0.0;
    for (s, &w) in emp.iter().enumerate() {
        if w > 0.0 {
            let var: f64 = (0..table.dim()).map(|j| second[(s, j)] - first[(s, j)].powi(2)).sum();
            per_point += w * var;
        }
    }
    // Σ_i over n points is n·E_emp, so (1/n²)·n·E_emp = E_emp/n.
    Ok(per_point / n as f64)
}

/// The lattice on which CD gradients of a {0,1}-statistic family live:
/// `g = (S_data − s)/n` with integer `s_j ∈ [0, n]`, so every increment
/// `η·g` is a multiple of `η/n` per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CdLattice {
    pub n: usize,
    pub eta: f64,
    /// `Σ_i φ(x_i)`, integer valued.
    pub data_sum: Vec<i64>,
}

impl CdLattice {
    pub fn spacing(&self) -> f64 {
        self.eta / self.n as f64
    }

    /// Integer model sums `s` reproducing `g`, with the largest absolute
    /// deviation of `n·g` from an integer.
    pub fn decompose(&self, g: &[f64]) -> (Vec<i64>, f64) {
        let n = self.n as f64;
        let mut dev: f64 = 0.0;
        let s = g
            .iter()
            .zip(&self.data_sum)
            .map(|(gj, sj)| {
                let scaled = gj * n;
                let k = scaled.round();
                dev = dev.max((scaled - k).abs());
                sj - k as i64
            })
            .collect();
        (s, dev)
    }

    /// Whether `g` is an achievable CD gradient up to `tol` in units of `1/n`.
    pub fn contains(&self, g: &[f64], tol: f64) -> bool {
        let (s, dev) = self.decompose(g);
        dev <= tol && s.iter().all(|&k| (0..=self.n as i64).contains(&k))
    }
}

pub fn exact_cd_gradient_support(family: &BinaryRbm, data: &DataSample<BinaryConfig>, eta: f64) -> CdLattice {
    let sum = data.mean_stat(family) * data.n() as f64;
    CdLattice {
        n: data.n(),
        eta,
        data_sum: sum.iter().map(|v| v.round() as i64).collect(),
    }
}
