//! Empirical checks of the finite-sample theory of CD.
//!
//! Closed-form quantities (drift constants, bias and concentration bounds)
//! are pure functions. Monte Carlo checks derive every stream from a base
//! seed, so a report is reproducible bit for bit. Each check produces a
//! [`CheckRecord`]; `pass` is `None` when the check could not be decided
//! (a violated hypothesis, a capped simulation, or a quantity that is not
//! computable for the family).
//!
//! Pass policy: an inequality `estimate ≤ bound` passes when
//! `bound ≥ estimate − 3·SE`; a sign check uses the one-sided 99% upper
//! confidence limit `estimate + 2.326·SE`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::cd::{cd_gradient, cd_transition, ergodic_average, run_cd, step_stream_seed, CdConfig, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::expfam::{
    eigen_bounds, exact_gradient, mle, sample_from_model, DataSample, ExponentialFamily, ParamDomain, Parameter,
    Vector, MLE_DEFAULT_TOL,
};
use crate::kernels::{alpha_sup_over_grid, gaussian_gibbs_alpha_estimate, KernelKind, KernelSpec, MarkovKernel};
use crate::oracle::{self, CdLattice};
use crate::rng::{derive_seed, tag};

pub const GAMMA1_DEFAULT: f64 = 0.1;
pub const GAMMA2_DEFAULT: f64 = 0.15;
pub const LAMBDA_GRID_DEFAULT: usize = 7;
pub const ALPHA_GRID_DEFAULT: usize = 5;
pub const HITTING_CAP_DEFAULT: usize = 1_000_000;
/// More capped hitting-time runs than this makes the record inconclusive.
pub const MAX_CAPPED_FRACTION: f64 = 0.05;
pub const SLACK_SE: f64 = 3.0;
pub const Z_99: f64 = 2.326;
pub const MIN_REPLICATES: usize = 1_000;
pub const MIN_SWEEP_SEEDS: usize = 20;
const BATCHES: usize = 20;

pub mod flag {
    pub const CONDITION_VIOLATED: &str = "condition-violated";
    pub const SKIPPED: &str = "skipped";
    pub const INCONCLUSIVE: &str = "inconclusive";
    pub const NOT_COMPUTED: &str = "not-computed";
    pub const UNBOUNDED_STATISTIC: &str = "assumption-violated:bounded-statistic";
    pub const SIMULATION_ONLY: &str = "simulation-only";
    pub const START_INSIDE_BALL: &str = "start-inside-ball";
    pub const ESTIMATED_BOUND: &str = "estimated-bound";
    pub const CONSTRAINT_UNMET: &str = "constraint-unmet";
}

/// One line of a diagnostics report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRecord {
    pub check: String,
    pub inputs: Map<String, Value>,
    pub bound: Option<f64>,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub replicates: usize,
    pub pass: Option<bool>,
    pub flags: Vec<String>,
}

impl CheckRecord {
    pub fn new(check: &str) -> Self {
        Self {
            check: check.to_string(),
            inputs: Map::new(),
            bound: None,
            estimate: None,
            std_error: None,
            replicates: 0,
            pass: None,
            flags: Vec::new(),
        }
    }

    pub fn input(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.inputs.insert(key.to_string(), value.into());
        self
    }

    pub fn flag(mut self, f: &str) -> Self {
        if !self.flags.iter().any(|x| x == f) {
            self.flags.push(f.to_string());
        }
        self
    }

    fn numbers(mut self, bound: Option<f64>, estimate: Option<f64>, se: Option<f64>, replicates: usize) -> Self {
        self.bound = bound;
        self.estimate = estimate;
        self.std_error = se;
        self.replicates = replicates;
        self
    }

    /// `estimate ≤ bound` up to the Monte Carlo slack.
    fn judge_upper(mut self) -> Self {
        self.pass = match (self.bound, self.estimate) {
            (Some(b), Some(e)) => Some(b >= e - SLACK_SE * self.std_error.unwrap_or(0.0)),
            _ => None,
        };
        self
    }
}

/// Ordered collection of check records.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct DiagnosticsReport {
    pub records: Vec<CheckRecord>,
}

impl DiagnosticsReport {
    pub fn push(&mut self, r: CheckRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, rs: impl IntoIterator<Item = CheckRecord>) {
        self.records.extend(rs);
    }

    /// True when some decided check failed.
    pub fn any_failed(&self) -> bool {
        self.records.iter().any(|r| r.pass == Some(false))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("records serialize");
        s.push('\n');
        s
    }

    /// One CSV row per record; `inputs` is embedded as compact JSON and
    /// `flags` joined with `;`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(["check", "inputs", "bound", "estimate", "std_error", "replicates", "pass", "flags"])?;
        let num = |v: Option<f64>| v.map(crate::cd::fmt_f64).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.check.clone(),
                serde_json::to_string(&r.inputs).expect("inputs serialize"),
                num(r.bound),
                num(r.estimate),
                num(r.std_error),
                r.replicates.to_string(),
                r.pass.map(|p| p.to_string()).unwrap_or_default(),
                r.flags.join(";"),
            ])?;
        }
        out.flush()
    }
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Empirical law of the data over enumerated states, for discrete families.
pub fn empirical_law<F: ExponentialFamily>(family: &F, data: &DataSample<F::Point>) -> Option<Vec<f64>> {
    let rbm = family.as_discrete()?;
    let mut law = vec![0.0; rbm.table().len()];
    for x in data.points() {
        law[family.state_index(x)?] += 1.0;
    }
    let n = data.n() as f64;
    law.iter_mut().for_each(|w| *w /= n);
    Some(law)
}

// ---------------------------------------------------------------------------
// Drift constants

/// Inputs of the drift constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriftInputs {
    pub d: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub alpha: f64,
    pub m: usize,
    pub eta: f64,
    pub n: usize,
    pub gamma1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriftConstants {
    #[serde(flatten)]
    pub inputs: DriftInputs,
    pub a: f64,
    pub b_n: f64,
    pub c_n: f64,
    /// Positive root of `a r² − b_n r − c_n`; absent when `a ≤ 0`.
    pub r_n: Option<f64>,
}

impl DriftInputs {
    /// `√d·C·L·αᵐ`, taken as 0 when `α = 0` whatever `L` is.
    pub fn kappa(&self) -> f64 {
        if self.alpha == 0.0 {
            0.0
        } else {
            (self.d as f64).sqrt() * self.c * self.l * self.alpha.powi(self.m as i32)
        }
    }
}

pub fn drift_constants(inputs: DriftInputs) -> Result<DriftConstants> {
    let i = inputs;
    let positive = [i.lambda_min, i.lambda_max, i.c, i.eta];
    if positive.iter().any(|v| !(*v > 0.0)) || i.d == 0 || i.n == 0 || i.m == 0 {
        return Err(invalid("drift constants need positive λ_min, λ_max, C, η, d, n and m"));
    }
    if !(i.l >= 0.0) || !(0.0..=1.0).contains(&i.alpha) {
        return Err(invalid("drift constants need L ≥ 0 and α in [0, 1]"));
    }
    if !(i.gamma1 > 0.0 && i.gamma1 < 0.5) {
        return Err(invalid("gamma1 must lie in (0, 1/2)"));
    }
    let (lmin, lmax, eta) = (i.lambda_min, i.lambda_max, i.eta);
    let k = i.kappa();
    let n = i.n as f64;
    let d = i.d as f64;
    let a = lmin * lmin - k * lmax - 0.5 * eta * lmax * (lmax + k).powi(2);
    let b_n = lmax * (1.0 + k) * (1.0 + eta * lmax + eta * k) * n.powf(-0.5 + i.gamma1);
    let c_n = 0.5 * eta * lmax * (d * i.c * i.c * n.powf(-2.0 * i.gamma1) + (1.0 + k).powi(2)) * n.powf(-1.0 + 2.0 * i.gamma1);
    let r_n = (a > 0.0).then(|| (b_n + (b_n * b_n + 4.0 * a * c_n).sqrt()) / (2.0 * a));
    Ok(DriftConstants {
        inputs,
        a,
        b_n,
        c_n,
        r_n,
    })
}

/// `β = max(2, n^γ₂)`.
pub fn beta_schedule(n: usize, gamma2: f64) -> f64 {
    (n as f64).powf(gamma2).max(2.0)
}

impl DriftConstants {
    pub fn condition_holds(&self) -> bool {
        self.r_n.is_some()
    }

    /// `(1+κ)n^(−1/2+γ₁) + κ‖θ−θ̂‖`.
    pub fn bias_bound(&self, dist: f64) -> f64 {
        let k = self.inputs.kappa();
        (1.0 + k) * (self.inputs.n as f64).powf(-0.5 + self.inputs.gamma1) + k * dist
    }

    /// `dC²/n`.
    pub fn variance_bound(&self) -> f64 {
        self.inputs.d as f64 * self.inputs.c * self.inputs.c / self.inputs.n as f64
    }

    /// `−η(a r² − b_n r − c_n)` at `r = ‖θ−θ̂‖`.
    pub fn drift_bound(&self, dist: f64) -> f64 {
        -self.inputs.eta * (self.a * dist * dist - self.b_n * dist - self.c_n)
    }

    /// `δ = η(β²−1)c_n`.
    pub fn delta(&self, beta: f64) -> f64 {
        self.inputs.eta * (beta * beta - 1.0) * self.c_n
    }

    /// `(c_n + b_n²/4a) / ((β²−1) c_n)`, when `a > 0`.
    pub fn concentration_bound(&self, beta: f64) -> Option<f64> {
        self.condition_holds()
            .then(|| (self.c_n + self.b_n * self.b_n / (4.0 * self.a)) / ((beta * beta - 1.0) * self.c_n))
    }

    pub fn ball(&self, center: Parameter, beta: f64) -> Option<BallSpec> {
        let r = self.r_n?;
        Some(BallSpec {
            center,
            radius: beta * r,
            beta,
        })
    }

    pub fn record(&self) -> CheckRecord {
        let mut rec = CheckRecord::new("drift_constants");
        if let Value::Object(map) = json!(self.inputs) {
            rec.inputs = map;
        }
        rec = rec
            .input("a", self.a)
            .input("b_n", self.b_n)
            .input("c_n", self.c_n)
            .input("r_n", self.r_n.map(Value::from).unwrap_or(Value::Null))
            .numbers(None, Some(self.a), None, 0);
        if self.condition_holds() {
            rec.pass = Some(true);
        } else {
            rec = rec.flag(flag::CONDITION_VIOLATED);
        }
        rec
    }
}

/// `B_β = {θ : ‖θ − θ̂_n‖ ≤ β r_n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BallSpec {
    pub center: Parameter,
    pub radius: f64,
    pub beta: f64,
}

impl BallSpec {
    pub fn contains(&self, theta: &Parameter) -> bool {
        self.center.distance(theta) <= self.radius
    }
}

// ---------------------------------------------------------------------------
// Measured constants

/// `(λ_min, λ_max)` of `Σ(θ)` over a `k`-point-per-axis grid on `Θ`.
pub fn lambda_bounds<F: ExponentialFamily>(family: &F, domain: &ParamDomain, k: usize) -> (f64, f64) {
    eigen_bounds(family, &domain.grid(k))
}

/// `α` for the kernel: exact 0 for resampling, the grid supremum of the
/// exact spectral radius for the discrete Gibbs kernel, and the
/// autocorrelation fit at `θ*` for the Gaussian Gibbs kernel, whose
/// dynamics do not depend on `θ` beyond a shift.
pub fn measure_alpha<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    domain: &ParamDomain,
    theta_star: &Parameter,
    grid_points_per_dim: usize,
    chain_length: usize,
    seed: u64,
) -> Result<f64> {
    match kernel.kind() {
        KernelKind::ExactResample => Ok(0.0),
        KernelKind::RbmGibbs => Ok(alpha_sup_over_grid(kernel, family, domain, grid_points_per_dim)?.alpha_sup),
        KernelKind::GaussianGibbs => {
            let g = family.as_gaussian().ok_or(Error::UnsupportedFamily {
                op: "measure_alpha",
                family: family.kind().name(),
            })?;
            gaussian_gibbs_alpha_estimate(g, kernel, theta_star, chain_length, seed)
        }
    }
}

/// `f(θ) = √(exp(−2Λ(θ*) + Λ(θ) + Λ(2θ*−θ)) − 1)`, radicand floored at 0.
pub fn lipschitz_target<F: ExponentialFamily>(family: &F, theta_star: &Parameter, theta: &Parameter) -> f64 {
    let mirror = Parameter::from_vector_unchecked(theta_star.as_vector() * 2.0 - theta.as_vector());
    let e = -2.0 * family.cumulant(theta_star) + family.cumulant(theta) + family.cumulant(&mirror);
    e.exp_m1().max(0.0).sqrt()
}

/// Largest slope of `f` between grid neighbours along one axis.
pub fn estimate_lipschitz_l<F: ExponentialFamily>(
    family: &F,
    theta_star: &Parameter,
    domain: &ParamDomain,
    grid_points_per_dim: usize,
) -> Result<f64> {
    let k = grid_points_per_dim;
    if k < 3 {
        return Err(invalid("the Lipschitz grid needs at least 3 points per dimension"));
    }
    theta_star.check_dim(family.dim())?;
    let d = domain.dim();
    let grid = domain.grid(k);
    let values: Vec<f64> = grid
        .par_iter()
        .map(|t| lipschitz_target(family, theta_star, t))
        .collect();
    let h: Vec<f64> = (0..d)
        .map(|j| (domain.upper()[j] - domain.lower()[j]) / (k - 1) as f64)
        .collect();
    // Grid index = Σ_j i_j·k^(d−1−j); the first coordinate varies slowest.
    let stride: Vec<usize> = (0..d).map(|j| k.pow((d - 1 - j) as u32)).collect();
    let mut best: f64 = 0.0;
    for (idx, &f0) in values.iter().enumerate() {
        for j in 0..d {
            if (idx / stride[j]) % k + 1 < k {
                let f1 = values[idx + stride[j]];
                let slope = (f1 - f0).abs() / h[j];
                if !slope.is_finite() {
                    return Ok(f64::INFINITY);
                }
                best = best.max(slope);
            }
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Constraint deviations

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintDeviations {
    /// `‖φ̄ − μ(θ*)‖`.
    pub sample_mean: f64,
    /// `‖θ̂_n − θ*‖`.
    pub mle: f64,
    /// `sup_θ ‖(1/n)Σ f_θ(X_i) − E f_θ‖` over the grid, when computable.
    pub empirical_process: Option<f64>,
}

pub fn constraint_deviations<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    data: &DataSample<F::Point>,
    theta_star: &Parameter,
    m: usize,
    theta_grid: &[Parameter],
) -> Result<ConstraintDeviations> {
    let phibar = data.mean_stat(family);
    let sample_mean = (&phibar - family.mean_param(theta_star)).norm();
    let theta_hat = mle(family, data, MLE_DEFAULT_TOL)?;
    let empirical_process = if kernel.kind() == KernelKind::ExactResample {
        // f_θ ≡ μ(θ) does not depend on the start.
        Some(0.0)
    } else if let (Some(rbm), Some(emp)) = (family.as_discrete(), empirical_law(family, data)) {
        let pstar = rbm.table().exact_distribution(theta_star);
        let diff: Vec<f64> = emp.iter().zip(&pstar).map(|(a, b)| a - b).collect();
        let sups: Vec<f64> = theta_grid
            .par_iter()
            .map(|theta| -> Result<f64> {
                let f = oracle::propagated_stats(rbm, kernel, theta, m)?;
                Ok(oracle::law_average(&f, &diff).norm())
            })
            .collect::<Result<_>>()?;
        Some(sups.into_iter().fold(0.0, f64::max))
    } else {
        None
    };
    Ok(ConstraintDeviations {
        sample_mean,
        mle: theta_hat.distance(theta_star),
        empirical_process,
    })
}

impl ConstraintDeviations {
    /// Records comparing each deviation with the rate `n^(−1/2+γ₁)`.
    ///
    /// The constraints are conditions on the sample that hold only with
    /// probability tending to one, so a miss marks the sample as outside the
    /// theory's scope (flagged, `pass` empty) rather than a failed bound.
    pub fn records(&self, n: usize, gamma1: f64) -> Vec<CheckRecord> {
        let rate = (n as f64).powf(-0.5 + gamma1);
        let mk = |name: &str, v: Option<f64>| {
            let rec = CheckRecord::new(name).input("n", n).input("gamma1", gamma1);
            match v {
                Some(v) if v <= rate => rec.numbers(Some(rate), Some(v), None, 0).judge_upper(),
                Some(v) => rec.numbers(Some(rate), Some(v), None, 0).flag(flag::CONSTRAINT_UNMET),
                None => rec.numbers(Some(rate), None, None, 0).flag(flag::NOT_COMPUTED),
            }
        };
        vec![
            mk("constraint_sample_mean", Some(self.sample_mean)),
            mk("constraint_mle", Some(self.mle)),
            mk("constraint_empirical_process", self.empirical_process),
        ]
    }
}

// ---------------------------------------------------------------------------
// Gradient error

fn replicate_gradients<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    data: &DataSample<F::Point>,
    theta: &Parameter,
    m: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<Vector>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| cd_gradient(family, kernel, data, theta, m, derive_seed(seed, &[tag::REPLICATE, r as u64])))
        .collect()
}

/// Columnwise mean of vectors and `trace` of their sample covariance with
/// the standard error of that trace.
fn mean_and_trace(vs: &[Vector]) -> (Vector, f64, f64) {
    let r = vs.len() as f64;
    let d = vs[0].len();
    let mut mean = Vector::zeros(d);
    for v in vs {
        mean += v;
    }
    mean /= r;
    let z: Vec<f64> = vs.iter().map(|v| (v - &mean).norm_squared() * r / (r - 1.0)).collect();
    let (trace, se) = mean_se(&z);
    (mean, trace, se)
}

/// `E[Δg] = μ(θ) − (1/n)Σ f_θ(X_i)` against the bias bound.
#[allow(clippy::too_many_arguments)]
pub fn bias_report<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    data: &DataSample<F::Point>,
    theta: &Parameter,
    theta_hat: &Parameter,
    m: usize,
    replicates: usize,
    constants: &DriftConstants,
    seed: u64,
) -> Result<CheckRecord> {
    let dist = theta.distance(theta_hat);
    let rec = CheckRecord::new("bias")
        .input("m", m)
        .input("n", data.n())
        .input("distance_to_mle", dist)
        .input("kernel", kernel.kind().name());
    let bound = constants.bias_bound(dist);
    let rec = match (family.as_discrete(), empirical_law(family, data)) {
        (Some(rbm), Some(emp)) => {
            let exact = oracle::exact_cd_gradient_mean_from_law(rbm, kernel, theta, &emp, m)?
                - (rbm.table().mean_under(&emp) - family.mean_param(theta));
            rec.input("method", "exact").numbers(Some(bound), Some(exact.norm()), Some(0.0), 0)
        }
        _ => {
            if replicates < MIN_REPLICATES {
                return Err(invalid(format!("bias_report needs at least {MIN_REPLICATES} replicates")));
            }
            let g = exact_gradient(family, data, theta)?;
            let reps = replicate_gradients(family, kernel, data, theta, m, replicates, seed)?;
            let (mean, trace, _) = mean_and_trace(&reps);
            let se = (trace / replicates as f64).sqrt();
            rec.input("method", "monte-carlo")
                .numbers(Some(bound), Some((mean - g).norm()), Some(se), replicates)
        }
    };
    Ok(with_family_flags(family, rec.judge_upper()))
}

/// MCMC part of the bias: `μ(θ) − Σ_x p_θ*(x) f_θ(x)`, exact, discrete only.
pub fn mcmc_bias_component<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    theta: &Parameter,
    theta_star: &Parameter,
    m: usize,
) -> Result<Vector> {
    let rbm = family.as_discrete().ok_or(Error::UnsupportedFamily {
        op: "mcmc_bias_component",
        family: family.kind().name(),
    })?;
    let pstar = rbm.table().exact_distribution(theta_star);
    let f = oracle::propagated_stats(rbm, kernel, theta, m)?;
    Ok(family.mean_param(theta) - oracle::law_average(&f, &pstar))
}

/// Trace of the CD-gradient covariance over replicates against `dC²/n`.
#[allow(clippy::too_many_arguments)]
pub fn variance_report<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    data: &DataSample<F::Point>,
    theta: &Parameter,
    m: usize,
    replicates: usize,
    seed: u64,
) -> Result<CheckRecord> {
    if replicates < MIN_REPLICATES {
        return Err(invalid(format!("variance_report needs at least {MIN_REPLICATES} replicates")));
    }
    let reps = replicate_gradients(family, kernel, data, theta, m, replicates, seed)?;
    let (_, trace, se) = mean_and_trace(&reps);
    let d = family.dim() as f64;
    let c = family.stat_bound();
    let bound = d * c * c / data.n() as f64;
    let mut rec = CheckRecord::new("variance")
        .input("m", m)
        .input("n", data.n())
        .input("kernel", kernel.kind().name());
    if let (Some(rbm), Some(emp)) = (family.as_discrete(), empirical_law(family, data)) {
        let exact = oracle::exact_cd_gradient_trace_from_law(rbm, kernel, theta, &emp, data.n(), m)?;
        rec = rec.input("exact_trace", exact);
    }
    Ok(with_family_flags(family, rec.numbers(Some(bound), Some(trace), Some(se), replicates).judge_upper()))
}

fn with_family_flags<F: ExponentialFamily>(family: &F, rec: CheckRecord) -> CheckRecord {
    if family.as_gaussian().is_some() {
        rec.flag(flag::UNBOUNDED_STATISTIC)
    } else {
        rec
    }
}

// ---------------------------------------------------------------------------
// Lyapunov drift

/// `u(θ) = l(θ̂) − l(θ) = Λ(θ) − Λ(θ̂) − (θ − θ̂)·φ̄`.
pub fn lyapunov_u_with<F: ExponentialFamily>(family: &F, phibar: &Vector, theta_hat: &Parameter, theta: &Parameter) -> f64 {
    family.cumulant(theta) - family.cumulant(theta_hat) - (theta.as_vector() - theta_hat.as_vector()).dot(phibar)
}

pub fn lyapunov_u<F: ExponentialFamily>(
    family: &F,
    data: &DataSample<F::Point>,
    theta_hat: &Parameter,
    theta: &Parameter,
) -> Result<f64> {
    theta.check_dim(family.dim())?;
    Ok(lyapunov_u_with(family, &data.mean_stat(family), theta_hat, theta))
}

/// One-step change of `u` under CD from `theta`, against
/// `−η(a r² − b_n r − c_n)`; outside `B_β` the 99% upper limit must also be
/// negative.
#[allow(clippy::too_many_arguments)]
pub fn drift_check<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    data: &DataSample<F::Point>,
    theta_hat: &Parameter,
    theta: &Parameter,
    config: &CdConfig,
    constants: &DriftConstants,
    beta: f64,
    replicates: usize,
    seed: u64,
) -> Result<CheckRecord> {
    let dist = theta.distance(theta_hat);
    let mut rec = CheckRecord::new("drift")
        .input("distance_to_mle", dist)
        .input("beta", beta)
        .input("eta", config.eta)
        .input("m", config.m)
        .input("n", data.n())
        .input("kernel", kernel.kind().name());
    let Some(r_n) = constants.r_n else {
        return Ok(rec.flag(flag::CONDITION_VIOLATED).flag(flag::SKIPPED));
    };
    if replicates < MIN_REPLICATES {
        return Err(invalid(format!("drift_check needs at least {MIN_REPLICATES} replicates")));
    }
    let phibar = data.mean_stat(family);
    let u0 = lyapunov_u_with(family, &phibar, theta_hat, theta);
    let diffs: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let s = derive_seed(seed, &[tag::REPLICATE, r as u64]);
            let step = cd_transition(family, kernel, data, &phibar, theta, config, s)?;
            Ok(lyapunov_u_with(family, &phibar, theta_hat, &step.theta) - u0)
        })
        .collect::<Result<_>>()?;
    let (mean, se) = mean_se(&diffs);
    let ucl = mean + Z_99 * se;
    let outside = dist > beta * r_n;
    rec = rec
        .input("ball_radius", beta * r_n)
        .input("outside_ball", outside)
        .input("minus_delta", -constants.delta(beta))
        .input("upper_confidence_99", ucl)
        .numbers(Some(constants.drift_bound(dist)), Some(mean), Some(se), replicates)
        .judge_upper();
    if outside {
        rec.pass = rec.pass.map(|p| p && ucl < 0.0);
    }
    Ok(with_family_flags(family, rec))
}

// ---------------------------------------------------------------------------
// Hitting times

#[derive(Clone, Copy, Debug)]
struct HitRun {
    time: Option<usize>,
    /// `u(θ₁)·1{θ₁ ∉ B}`.
    first_step_outside_u: f64,
}

#[allow(clippy::too_many_arguments)]
fn hitting_run<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    data: &DataSample<F::Point>,
    phibar: &Vector,
    theta_hat: &Parameter,
    config: &CdConfig,
    ball: &BallSpec,
    start: &Parameter,
    cap: usize,
    seed: u64,
) -> Result<HitRun> {
    let mut theta = start.clone();
    let mut first = 0.0;
    for t in 1..=cap {
        theta = cd_transition(family, kernel, data, phibar, &theta, config, step_stream_seed(seed, t - 1))?.theta;
        let inside = ball.contains(&theta);
        if t == 1 && !inside {
            first = lyapunov_u_with(family, phibar, theta_hat, &theta);
        }
        if inside {
            return Ok(HitRun {
                time: Some(t),
                first_step_outside_u: first,
            });
        }
    }
    Ok(HitRun {
        time: None,
        first_step_outside_u: first,
    })
}

/// Mean first hitting time of `B_β` from each start against the drift
/// bound: `u(z)/δ` outside the ball, `1 + E[u(θ₁); θ₁ ∉ B]/δ` inside.
#[allow(clippy::too_many_arguments)]
pub fn hitting_time_check<F: ExponentialFamily>(
    family: &F,
    kernel: &KernelSpec,
    data: &DataSample<F::Point>,
    theta_hat: &Parameter,
    config: &CdConfig,
    constants: &DriftConstants,
    ball: &BallSpec,
    starts: &[Parameter],
    replicates: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<CheckRecord>> {
    let phibar = data.mean_stat(family);
    let delta = constants.delta(ball.beta);
    let mut out = Vec::with_capacity(starts.len());
    for (si, z) in starts.iter().enumerate() {
        z.check_dim(family.dim())?;
        let uz = lyapunov_u_with(family, &phibar, theta_hat, z);
        let mut rec = CheckRecord::new("hitting_time")
            .input("start", z.iter().copied().collect::<Vec<f64>>())
            .input("start_index", si)
            .input("distance_to_mle", z.distance(theta_hat))
            .input("ball_radius", ball.radius)
            .input("beta", ball.beta)
            .input("delta", delta)
            .input("u_start", uz)
            .input("cap", cap)
            .input("kernel", kernel.kind().name());
        if !constants.condition_holds() {
            out.push(rec.flag(flag::CONDITION_VIOLATED).flag(flag::SKIPPED));
            continue;
        }
        let runs: Vec<HitRun> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let s = derive_seed(seed, &[tag::HITTING, si as u64, r as u64]);
                hitting_run(family, kernel, data, &phibar, theta_hat, config, ball, z, cap, s)
            })
            .collect::<Result<_>>()?;
        let times: Vec<f64> = runs.iter().filter_map(|h| h.time.map(|t| t as f64)).collect();
        let capped = replicates - times.len();
        let capped_fraction = capped as f64 / replicates as f64;
        let inside = ball.contains(z);
        let bound = if inside {
            let firsts: Vec<f64> = runs.iter().map(|h| h.first_step_outside_u).collect();
            rec = rec.flag(flag::START_INSIDE_BALL).flag(flag::ESTIMATED_BOUND);
            1.0 + mean_se(&firsts).0 / delta
        } else {
            uz / delta
        };
        let (mean, se) = if times.is_empty() { (f64::NAN, f64::NAN) } else { mean_se(&times) };
        rec = rec
            .input("capped", capped)
            .input("capped_fraction", capped_fraction)
            .numbers(Some(bound), Some(mean).filter(|m| m.is_finite()), Some(se).filter(|s| s.is_finite()), replicates)
            .judge_upper();
        if capped_fraction > MAX_CAPPED_FRACTION {
            rec.pass = None;
            rec = rec.flag(flag::INCONCLUSIVE);
        }
        out.push(with_family_flags(family, rec));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Concentration

/// Fraction of `θ_t`, `t > burn_in`, farther than `radius` from `center`.
pub fn occupancy_outside(traj: &Trajectory, center: &Parameter, radius: f64, burn_in: usize) -> f64 {
    let tail = &traj.thetas[burn_in + 1..];
    tail.iter().filter(|t| t.distance(center) > radius).count() as f64 / tail.len() as f64
}

/// Mean of `‖θ_t − center‖` for `t > burn_in`.
pub fn mean_distance(traj: &Trajectory, center: &Parameter, burn_in: usize) -> f64 {
    let tail = &traj.thetas[burn_in + 1..];
    tail.iter().map(|t| t.distance(center)).sum::<f64>() / tail.len() as f64
}

/// Batch-means standard error of the mean of a time series.
pub fn batch_means_se(series: &[f64], batches: usize) -> f64 {
    let len = series.len() / batches;
    if len == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| series[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    mean_se(&means).1
}

/// Long-run occupancy of `B_β^c` against the concentration bound on
/// `π(B^c)/π(B)`.
pub fn concentration_report(
    traj: &Trajectory,
    theta_hat: &Parameter,
    constants: &DriftConstants,
    beta: f64,
    burn_in: usize,
) -> Result<CheckRecord> {
    if burn_in >= traj.steps() {
        return Err(invalid(format!("burn_in {burn_in} must be below steps {}", traj.steps())));
    }
    let mut rec = CheckRecord::new("concentration")
        .input("beta", beta)
        .input("burn_in", burn_in)
        .input("steps", traj.steps())
        .input("n", traj.n)
        .input("mean_distance", mean_distance(traj, theta_hat, burn_in));
    let Some(r_n) = constants.r_n else {
        return Ok(rec.flag(flag::CONDITION_VIOLATED).flag(flag::NOT_COMPUTED));
    };
    let radius = beta * r_n;
    let indicator: Vec<f64> = traj.thetas[burn_in + 1..]
        .iter()
        .map(|t| f64::from(u8::from(t.distance(theta_hat) > radius)))
        .collect();
    let p = indicator.iter().sum::<f64>() / indicator.len() as f64;
    let se_p = batch_means_se(&indicator, BATCHES);
    let ratio = p / (1.0 - p);
    let se_ratio = se_p / (1.0 - p).powi(2);
    rec = rec
        .input("ball_radius", radius)
        .input("occupancy_outside", p)
        .numbers(constants.concentration_bound(beta), Some(ratio), Some(se_ratio), indicator.len())
        .judge_upper();
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Ergodic sweep

/// Per-seed outcome of the sweep. `total` is `‖θ̄ − θ*‖` for the average from
/// `s = 1`; the three terms split it through the tail mean and the MLE.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub seed_index: usize,
    pub total: f64,
    pub total_after_burn_in: f64,
    pub average_to_tail: f64,
    pub tail_to_mle: f64,
    pub mle_error: f64,
    pub mean_distance_to_mle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub n: usize,
    pub seeds: usize,
    pub total_median: f64,
    pub total_q1: f64,
    pub total_q3: f64,
    pub average_to_tail_median: f64,
    pub tail_to_mle_median: f64,
    pub mle_error_median: f64,
    pub mean_distance_to_mle_median: f64,
}

/// Data and CD seeds for sweep cell `(n, s)`.
pub fn sweep_seeds(seed: u64, n: usize, s: usize) -> (u64, u64) {
    (
        derive_seed(seed, &[tag::SWEEP, n as u64, s as u64, tag::DATA]),
        derive_seed(seed, &[tag::SWEEP, n as u64, s as u64, tag::CD_STEP]),
    )
}

/// Fresh data per `(n, seed)`, one CD run each, burn-in `T/2`.
pub fn ergodic_sweep<F, K>(
    family: &F,
    kernel: &K,
    theta_star: &Parameter,
    n_list: &[usize],
    template: &CdConfig,
    seeds: usize,
    seed: u64,
) -> Result<Vec<SweepRow>>
where
    F: ExponentialFamily,
    K: MarkovKernel<F>,
{
    if n_list.len() < 2 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("n_list must hold at least two increasing sample sizes"));
    }
    if seeds < MIN_SWEEP_SEEDS {
        return Err(invalid(format!("a sweep needs at least {MIN_SWEEP_SEEDS} seeds per n")));
    }
    if template.steps < 2 {
        return Err(invalid("a sweep needs at least 2 CD steps"));
    }
    let cells: Vec<(usize, usize)> = n_list.iter().flat_map(|&n| (0..seeds).map(move |s| (n, s))).collect();
    cells
        .into_par_iter()
        .map(|(n, s)| {
            let (data_seed, cd_seed) = sweep_seeds(seed, n, s);
            let data = sample_from_model(family, theta_star, n, data_seed)?;
            let theta_hat = mle(family, &data, MLE_DEFAULT_TOL)?;
            let cfg = CdConfig {
                seed: cd_seed,
                ..template.clone()
            };
            let traj = run_cd(family, kernel, &data, &cfg)?;
            let burn_in = cfg.steps / 2;
            let avg = ergodic_average(&traj, 0)?;
            let tail = ergodic_average(&traj, burn_in)?;
            Ok(SweepRow {
                n,
                seed_index: s,
                total: avg.distance(theta_star),
                total_after_burn_in: tail.distance(theta_star),
                average_to_tail: avg.distance(&tail),
                tail_to_mle: tail.distance(&theta_hat),
                mle_error: theta_hat.distance(theta_star),
                mean_distance_to_mle: mean_distance(&traj, &theta_hat, burn_in),
            })
        })
        .collect()
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.n == n).collect();
            let col = |f: fn(&SweepRow) -> f64| -> Vec<f64> { sel.iter().map(|r| f(r)).collect() };
            let total = col(|r| r.total);
            SweepSummary {
                n,
                seeds: sel.len(),
                total_median: median(&total),
                total_q1: quantile(&total, 0.25),
                total_q3: quantile(&total, 0.75),
                average_to_tail_median: median(&col(|r| r.average_to_tail)),
                tail_to_mle_median: median(&col(|r| r.tail_to_mle)),
                mle_error_median: median(&col(|r| r.mle_error)),
                mean_distance_to_mle_median: median(&col(|r| r.mean_distance_to_mle)),
            }
        })
        .collect()
}

/// True when every consecutive pair strictly decreases.
pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

// ---------------------------------------------------------------------------
// Lattice

/// Checks that `θ_t − θ_0` is `η/n` times an integer vector for every `t`.
///
/// The reference path is rebuilt from integer counts, `θ_0 + (η/n)·k_t` with
/// `k_t = Σ_{s<t} (Σφ(x_i) − Σφ(X_i^(m)))`, and compared with the
/// floating-point path.
pub fn lattice_check<F: ExponentialFamily>(
    traj: &Trajectory,
    family: &F,
    data: &DataSample<F::Point>,
    tolerance: f64,
) -> Result<CheckRecord> {
    if family.as_discrete().is_none() {
        return Err(Error::UnsupportedFamily {
            op: "lattice_check",
            family: family.kind().name(),
        });
    }
    let n = data.n();
    let eta = traj.config.eta;
    let data_sum: Vec<i64> = (data.mean_stat(family) * n as f64).iter().map(|v| v.round() as i64).collect();
    let lattice = CdLattice { n, eta, data_sum: data_sum.clone() };
    let theta0 = &traj.thetas[0];
    let spacing = lattice.spacing();
    let mut k = vec![0i64; data_sum.len()];
    let mut max_dev: f64 = 0.0;
    let mut count_dev: f64 = 0.0;
    let mut off_lattice_grads = 0usize;
    for (t, sum) in traj.model_sums.iter().enumerate() {
        for (j, s) in sum.iter().enumerate() {
            count_dev = count_dev.max((s - s.round()).abs());
            k[j] += data_sum[j] - s.round() as i64;
        }
        if !lattice.contains(traj.cd_grads[t].as_slice(), 1e-9) {
            off_lattice_grads += 1;
        }
        for (j, v) in traj.thetas[t + 1].iter().enumerate() {
            let reference = theta0[j] + spacing * k[j] as f64;
            max_dev = max_dev.max((v - reference).abs());
        }
    }
    let mut rec = CheckRecord::new("lattice")
        .input("n", n)
        .input("eta", eta)
        .input("spacing", spacing)
        .input("steps", traj.steps())
        .input("count_deviation", count_dev)
        .input("off_lattice_gradients", off_lattice_grads)
        .input("tolerance", tolerance)
        .numbers(Some(tolerance), Some(max_dev), Some(0.0), 0);
    rec.pass = Some(max_dev <= tolerance && off_lattice_grads == 0 && count_dev <= 1e-9);
    if traj.clamped_steps > 0 {
        rec = rec.flag("projection-clamped");
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{BinaryRbm, FamilyKind, GaussianMean};

    fn inputs(alpha: f64, eta: f64) -> DriftInputs {
        DriftInputs {
            d: 2,
            lambda_min: 0.5,
            lambda_max: 1.5,
            c: 6.0,
            l: 3.0,
            alpha,
            m: 3,
            eta,
            n: 500,
            gamma1: 0.1,
        }
    }

    #[test]
    fn alpha_zero_simplifies() {
        let k = drift_constants(inputs(0.0, 0.1)).unwrap();
        assert!((k.a - (0.25 - 0.1 * 1.5f64.powi(3) / 2.0)).abs() < 1e-15);
        let b = 1.5 * (1.0 + 0.15) * 500f64.powf(-0.4);
        assert!((k.b_n - b).abs() < 1e-15);
        assert!(k.condition_holds());
    }

    #[test]
    fn small_eta_restores_condition() {
        let k = drift_constants(inputs(0.0, 1e-6)).unwrap();
        assert!((k.a - 0.25).abs() < 1e-5);
        let bad = drift_constants(inputs(0.0, 10.0)).unwrap();
        assert!(bad.r_n.is_none());
        let rec = bad.record();
        assert_eq!(rec.pass, None);
        assert!(rec.flags.iter().any(|f| f == flag::CONDITION_VIOLATED));
    }

    #[test]
    fn r_n_is_a_root() {
        let k = drift_constants(inputs(0.0, 0.1)).unwrap();
        let r = k.r_n.unwrap();
        assert!((k.a * r * r - k.b_n * r - k.c_n).abs() < 1e-12);
        assert!(k.drift_bound(2.0 * r) < 0.0);
    }

    #[test]
    fn gamma1_out_of_range_is_rejected() {
        let mut i = inputs(0.1, 0.1);
        i.gamma1 = 0.5;
        assert!(drift_constants(i).is_err());
    }

    #[test]
    fn beta_has_floor_of_two() {
        assert_eq!(beta_schedule(50, 0.15), 2.0);
        assert!((beta_schedule(1_000_000, 0.15) - 1_000_000f64.powf(0.15)).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_target_vanishes_at_theta_star() {
        let g = GaussianMean::paper_default();
        let ts = Parameter::new(vec![0.3, -0.2]).unwrap();
        assert_eq!(lipschitz_target(&g, &ts, &ts), 0.0);
        let r = BinaryRbm::new(2, 2).unwrap();
        let ts = Parameter::new(vec![0.5; 4]).unwrap();
        assert_eq!(lipschitz_target(&r, &ts, &ts), 0.0);
    }

    #[test]
    fn quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0, 1.0]));
    }

    #[test]
    fn lattice_rejects_continuous_family() {
        let g = GaussianMean::paper_default();
        let data = sample_from_model(&g, &Parameter::zeros(2), 10, 1).unwrap();
        let k = KernelSpec::new(KernelKind::ExactResample, FamilyKind::GaussianMean).unwrap();
        let cfg = CdConfig {
            eta: 0.1,
            m: 1,
            steps: 3,
            theta0: Parameter::zeros(2),
            domain: ParamDomain::cube(2, -4.0, 4.0).unwrap(),
            projection: false,
            seed: 1,
        };
        let traj = run_cd(&g, &k, &data, &cfg).unwrap();
        assert!(matches!(
            lattice_check(&traj, &g, &data, 1e-9),
            Err(Error::UnsupportedFamily { .. })
        ));
    }

    #[test]
    fn report_serializations() {
        let mut rep = DiagnosticsReport::default();
        rep.push(
            CheckRecord::new("x")
                .input("b", 2)
                .input("a", "k,\"q\"")
                .numbers(Some(1.0), Some(0.5), Some(0.1), 10)
                .judge_upper(),
        );
        rep.push(CheckRecord::new("y").flag(flag::NOT_COMPUTED));
        assert!(!rep.any_failed());
        let js = rep.to_json();
        assert!(js.find("\"a\"").unwrap() < js.find("\"b\"").unwrap());
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with(",0,,not-computed"));
        rep.push(CheckRecord::new("z").numbers(Some(0.0), Some(1.0), Some(0.0), 1).judge_upper());
        assert!(rep.any_failed());
    }
}
