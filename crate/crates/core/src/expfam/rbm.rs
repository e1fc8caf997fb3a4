use std::sync::OnceLock;

use rand::Rng;

use super::{ExponentialFamily, FamilyKind, Matrix, Parameter, Vector};
use crate::error::{invalid, Error, Result};
use crate::oracle::StateTable;
use crate::rng::StreamRng;

/// A complete `(v, h)` configuration packed into bits: bit `j` holds `v_j`
/// for `j < nv`, bit `nv + i` holds `h_i`. The integer value doubles as the
/// state index used by the enumeration oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryConfig(pub u64);

impl BinaryConfig {
    pub fn from_units(visible: &[u8], hidden: &[u8]) -> Self {
        let nv = visible.len();
        let mut bits = 0u64;
        for (j, &v) in visible.iter().enumerate() {
            bits |= u64::from(v & 1) << j;
        }
        for (i, &h) in hidden.iter().enumerate() {
            bits |= u64::from(h & 1) << (nv + i);
        }
        Self(bits)
    }

    #[inline]
    pub fn visible(self, j: usize) -> u64 {
        (self.0 >> j) & 1
    }

    #[inline]
    pub fn hidden(self, nv: usize, i: usize) -> u64 {
        (self.0 >> (nv + i)) & 1
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Binary RBM over complete configurations with biases fixed at zero.
///
/// `θ` is the weight matrix flattened row-major by hidden unit:
/// `θ[i·nv + j] = w_ij`, paired with `φ(v,h)[i·nv + j] = h_i v_j`.
#[derive(Clone, Debug)]
pub struct BinaryRbm {
    nv: usize,
    nh: usize,
    table: StateTable,
}

impl BinaryRbm {
    pub fn new(nv: usize, nh: usize) -> Result<Self> {
        if nv == 0 || nh == 0 {
            return Err(invalid("RBM needs at least one visible and one hidden unit"));
        }
        let table = StateTable::enumerate(nv, nh)?;
        Ok(Self { nv, nh, table })
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn nh(&self) -> usize {
        self.nh
    }

    pub fn table(&self) -> &StateTable {
        &self.table
    }

    /// `θ` for a weight matrix given as rows per hidden unit.
    pub fn theta_from_weights(&self, w: &[Vec<f64>]) -> Result<Parameter> {
        if w.len() != self.nh || w.iter().any(|r| r.len() != self.nv) {
            return Err(invalid(format!("weights must be {}x{}", self.nh, self.nv)));
        }
        Parameter::new(w.iter().flatten().copied().collect())
    }

    pub fn config(&self, visible: &[u8], hidden: &[u8]) -> Result<BinaryConfig> {
        if visible.len() != self.nv || hidden.len() != self.nh {
            return Err(Error::Dimension {
                what: "RBM configuration",
                expected: self.nv + self.nh,
                got: visible.len() + hidden.len(),
            });
        }
        Ok(BinaryConfig::from_units(visible, hidden))
    }
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Weights plus a lazily built CDF over all configurations for exact draws.
#[derive(Debug)]
pub struct RbmPrepared {
    weights: Vec<f64>,
    theta: Parameter,
    cdf: OnceLock<Vec<f64>>,
}

impl RbmPrepared {
    fn cdf(&self, table: &StateTable) -> &[f64] {
        self.cdf.get_or_init(|| {
            let p = table.exact_distribution(&self.theta);
            let mut acc = 0.0;
            let mut cdf: Vec<f64> = p
                .iter()
                .map(|q| {
                    acc += q;
                    acc
                })
                .collect();
            if let Some(last) = cdf.last_mut() {
                *last = f64::INFINITY;
            }
            cdf
        })
    }
}

impl ExponentialFamily for BinaryRbm {
    type Point = BinaryConfig;
    type Prepared = RbmPrepared;

    fn kind(&self) -> FamilyKind {
        FamilyKind::BinaryRbm
    }

    fn dim(&self) -> usize {
        self.nv * self.nh
    }

    fn stat_bound(&self) -> f64 {
        1.0
    }

    fn check_point(&self, x: &BinaryConfig) -> Result<()> {
        if x.0 >> (self.nv + self.nh) != 0 {
            return Err(invalid(format!(
                "configuration {:#b} has bits beyond {} units",
                x.0,
                self.nv + self.nh
            )));
        }
        Ok(())
    }

    fn add_suff_stat(&self, x: &BinaryConfig, acc: &mut [f64]) {
        for i in 0..self.nh {
            if x.hidden(self.nv, i) == 1 {
                for j in 0..self.nv {
                    acc[i * self.nv + j] += x.visible(j) as f64;
                }
            }
        }
    }

    fn log_carrier(&self, _x: &BinaryConfig) -> f64 {
        0.0
    }

    fn cumulant(&self, theta: &Parameter) -> f64 {
        self.table.log_partition(theta)
    }

    fn mean_param(&self, theta: &Parameter) -> Vector {
        let p = self.table.exact_distribution(theta);
        self.table.mean_under(&p)
    }

    fn covariance(&self, theta: &Parameter) -> Matrix {
        let p = self.table.exact_distribution(theta);
        self.table.covariance_under(&p)
    }

    fn prepare(&self, theta: &Parameter) -> RbmPrepared {
        RbmPrepared {
            weights: theta.iter().copied().collect(),
            theta: theta.clone(),
            cdf: OnceLock::new(),
        }
    }

    fn draw_into(&self, prep: &RbmPrepared, x: &mut BinaryConfig, rng: &mut StreamRng) {
        let cdf = prep.cdf(&self.table);
        let u: f64 = rng.random();
        let idx = cdf.partition_point(|&c| c <= u);
        *x = self.table.states()[idx];
    }

    fn gibbs_sweep(&self, prep: &RbmPrepared, x: &mut BinaryConfig, rng: &mut StreamRng) {
        let (nv, nh) = (self.nv, self.nh);
        let w = &prep.weights;
        let mut bits = x.0 & ((1u64 << nv) - 1);
        for i in 0..nh {
            let mut a = 0.0;
            for j in 0..nv {
                if (bits >> j) & 1 == 1 {
                    a += w[i * nv + j];
                }
            }
            let u: f64 = rng.random();
            if u < sigmoid(a) {
                bits |= 1 << (nv + i);
            }
        }
        let hidden = bits >> nv;
        bits = hidden << nv;
        for j in 0..nv {
            let mut b = 0.0;
            for i in 0..nh {
                if (hidden >> i) & 1 == 1 {
                    b += w[i * nv + j];
                }
            }
            let u: f64 = rng.random();
            if u < sigmoid(b) {
                bits |= 1 << j;
            }
        }
        *x = BinaryConfig(bits);
    }

    fn origin(&self) -> BinaryConfig {
        BinaryConfig(0)
    }

    fn as_discrete(&self) -> Option<&BinaryRbm> {
        Some(self)
    }

    fn state_index(&self, x: &BinaryConfig) -> Option<usize> {
        Some(x.index())
    }
}
