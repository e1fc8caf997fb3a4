//! The CD-m driver.
//!
//! One step draws `n` independent m-step chains, chain `i` started at data
//! point `X_i`, and moves `θ` along `φ̄ − (1/n) Σ φ(X_i^(m))`. Chain `i` of a
//! step reads only its own stream, so the result does not depend on how the
//! chains are scheduled across threads.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::expfam::{DataSample, ExponentialFamily, ParamDomain, Parameter, Vector};
use crate::kernels::MarkovKernel;
use crate::rng::{self, tag};

/// Chains are summed in blocks of this size, in block order.
const CHAIN_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct CdConfig {
    pub eta: f64,
    pub m: usize,
    pub steps: usize,
    pub theta0: Parameter,
    pub domain: ParamDomain,
    pub projection: bool,
    pub seed: u64,
}

impl CdConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid("eta must be positive"));
        }
        if self.m < 1 {
            return Err(invalid("m must be at least 1"));
        }
        self.theta0.check_dim(d)?;
        if self.domain.dim() != d {
            return Err(invalid(format!("domain has dimension {}, expected {d}", self.domain.dim())));
        }
        if !self.domain.contains(&self.theta0) {
            return Err(invalid("theta0 lies outside the parameter domain"));
        }
        Ok(())
    }
}

/// `Σ_i φ(X_i^(m))` over chains started at the data, one stream per chain
/// under `stream_seed`.
pub fn cd_model_sum<F, K>(
    family: &F,
    kernel: &K,
    data: &DataSample<F::Point>,
    prep: &F::Prepared,
    m: usize,
    stream_seed: u64,
) -> Vector
where
    F: ExponentialFamily,
    K: MarkovKernel<F>,
{
    let d = family.dim();
    let points = data.points();
    let blocks: Vec<Vec<f64>> = points
        .par_chunks(CHAIN_BLOCK)
        .enumerate()
        .map(|(b, chunk)| {
            let mut acc = vec![0.0; d];
            for (k, x0) in chunk.iter().enumerate() {
                let i = (b * CHAIN_BLOCK + k) as u64;
                let mut r = rng::stream(stream_seed, &[i]);
                let mut x = x0.clone();
                for _ in 0..m {
                    kernel.step(family, prep, &mut x, &mut r);
                }
                family.add_suff_stat(&x, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; d];
    for block in blocks {
        for (t, v) in total.iter_mut().zip(block) {
            *t += v;
        }
    }
    Vector::from_vec(total)
}

/// `g_cd(θ) = φ̄ − (1/n) Σ_i φ(X_i^(m))`.
pub fn cd_gradient<F, K>(
    family: &F,
    kernel: &K,
    data: &DataSample<F::Point>,
    theta: &Parameter,
    m: usize,
    stream_seed: u64,
) -> Result<Vector>
where
    F: ExponentialFamily,
    K: MarkovKernel<F>,
{
    theta.check_dim(family.dim())?;
    if m < 1 {
        return Err(invalid("m must be at least 1"));
    }
    let prep = family.prepare(theta);
    let n = data.n() as f64;
    let model = cd_model_sum(family, kernel, data, &prep, m, stream_seed);
    Ok(data.mean_stat(family) - model / n)
}

/// `θ + η g`, clamped to `Θ` when `projection` is set. The flag reports
/// whether any coordinate was clamped.
pub fn cd_update(
    theta: &Parameter,
    g_cd: &Vector,
    eta: f64,
    domain: &ParamDomain,
    projection: bool,
) -> Result<(Parameter, bool)> {
    if g_cd.len() != theta.dim() {
        return Err(invalid(format!(
            "gradient has length {}, parameter has {}",
            g_cd.len(),
            theta.dim()
        )));
    }
    let next = Parameter::from_vector(theta.as_vector() + g_cd * eta)?;
    if projection {
        Ok(domain.clamp(next))
    } else {
        Ok((next, false))
    }
}

/// The recorded chain `θ_0..θ_T`.
///
/// `cd_grads[t]` is the gradient that moved `θ_t` to `θ_{t+1}`, and
/// `model_sums[t]` the matching `Σ_i φ(X_i^(m))`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub config: CdConfig,
    pub n: usize,
    pub thetas: Vec<Parameter>,
    pub cd_grads: Vec<Vector>,
    pub model_sums: Vec<Vector>,
    pub clamped_steps: usize,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.cd_grads.len()
    }

    pub fn last(&self) -> &Parameter {
        self.thetas.last().expect("trajectory always holds theta0")
    }

    /// CSV with columns `t, theta_1..theta_d, gcd_1..gcd_d`; row `t` carries
    /// the gradient that produced `θ_t`, so row 0 has empty gradient cells.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.config.theta0.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|j| format!("theta_{j}")));
        header.extend((1..=d).map(|j| format!("gcd_{j}")));
        writeln!(w, "{}", header.join(","))?;
        for (t, theta) in self.thetas.iter().enumerate() {
            write!(w, "{t}")?;
            for v in theta.iter() {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            match t.checked_sub(1).map(|s| &self.cd_grads[s]) {
                Some(g) => {
                    for v in g.iter() {
                        write!(w, ",{}", fmt_f64(*v))?;
                    }
                }
                None => write!(w, "{}", ",".repeat(d))?,
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Stream seed for the chains of step `t` of a run.
pub fn step_stream_seed(seed: u64, t: usize) -> u64 {
    rng::derive_seed(seed, &[tag::CD_STEP, t as u64])
}

/// Result of one CD transition.
#[derive(Clone, Debug)]
pub struct CdStep {
    pub theta: Parameter,
    pub g_cd: Vector,
    pub model_sum: Vector,
    pub clamped: bool,
}

/// One CD transition from `theta` with chains drawn under `stream_seed`.
/// `phibar` is the cached `φ̄` of `data`.
pub fn cd_transition<F, K>(
    family: &F,
    kernel: &K,
    data: &DataSample<F::Point>,
    phibar: &Vector,
    theta: &Parameter,
    config: &CdConfig,
    stream_seed: u64,
) -> Result<CdStep>
where
    F: ExponentialFamily,
    K: MarkovKernel<F>,
{
    let prep = family.prepare(theta);
    let model_sum = cd_model_sum(family, kernel, data, &prep, config.m, stream_seed);
    let g_cd = phibar - &model_sum / data.n() as f64;
    let (theta, clamped) = cd_update(theta, &g_cd, config.eta, &config.domain, config.projection)?;
    Ok(CdStep {
        theta,
        g_cd,
        model_sum,
        clamped,
    })
}

pub fn run_cd<F, K>(family: &F, kernel: &K, data: &DataSample<F::Point>, config: &CdConfig) -> Result<Trajectory>
where
    F: ExponentialFamily,
    K: MarkovKernel<F>,
{
    config.validate(family.dim())?;
    data.validate(family)?;
    let phibar = data.mean_stat(family);
    let mut thetas = Vec::with_capacity(config.steps + 1);
    let mut cd_grads = Vec::with_capacity(config.steps);
    let mut model_sums = Vec::with_capacity(config.steps);
    let mut clamped_steps = 0;
    let mut theta = config.theta0.clone();
    thetas.push(theta.clone());
    for t in 0..config.steps {
        let step = cd_transition(family, kernel, data, &phibar, &theta, config, step_stream_seed(config.seed, t))?;
        clamped_steps += usize::from(step.clamped);
        theta = step.theta;
        thetas.push(theta.clone());
        cd_grads.push(step.g_cd);
        model_sums.push(step.model_sum);
    }
    Ok(Trajectory {
        config: config.clone(),
        n: data.n(),
        thetas,
        cd_grads,
        model_sums,
        clamped_steps,
    })
}

/// Average of `θ_{burn_in+1}..θ_T`.
pub fn ergodic_average(traj: &Trajectory, burn_in: usize) -> Result<Parameter> {
    let steps = traj.steps();
    if burn_in >= steps {
        return Err(invalid(format!("burn_in {burn_in} must be below steps {steps}")));
    }
    let tail = &traj.thetas[burn_in + 1..];
    let mut acc = Vector::zeros(traj.config.theta0.dim());
    for theta in tail {
        acc += theta.as_vector();
    }
    Parameter::from_vector(acc / tail.len() as f64)
}
