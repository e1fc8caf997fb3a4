//! Batch front end: experiment configuration, shipped presets and the four
//! verbs `run`, `gradient-field`, `diagnose` and `sweep`.
//!
//! A configuration is a TOML file with unknown keys rejected. Before any work
//! starts it is resolved (family-dependent defaults filled in) and validated;
//! the resolved form is written to `manifest.json` next to the outputs and
//! can be fed back through `--config` to reproduce them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cd::{cd_gradient, fmt_f64, run_cd, CdConfig, Trajectory};
use crate::diagnostics::{self as diag, CheckRecord, DiagnosticsReport, DriftInputs};
use crate::expfam::{
    exact_gradient, mle, sample_from_model, BinaryRbm, DataSample, ExponentialFamily, GaussianMean, Matrix,
    ParamDomain, Parameter, Vector, MLE_DEFAULT_TOL,
};
use crate::kernels::{KernelKind, KernelSpec};
use crate::rng::{derive_seed, tag};

/// Output directory used when neither `--out` nor the config names one.
pub const OUT_DIR_ENV: &str = "CDCONV_OUT";
pub const DEFAULT_OUT_DIR: &str = "cdconv-out";
pub const MANIFEST: &str = "manifest.json";

const LATTICE_TOLERANCE: f64 = 1e-9;

pub const PRESETS: &[(&str, &str)] = &[
    ("gaussian-n50", include_str!("../presets/gaussian-n50.toml")),
    ("gaussian-n100", include_str!("../presets/gaussian-n100.toml")),
    ("gaussian-n500", include_str!("../presets/gaussian-n500.toml")),
    ("rbm-n100", include_str!("../presets/rbm-n100.toml")),
    ("rbm-n10000", include_str!("../presets/rbm-n10000.toml")),
    ("rbm-n1000000", include_str!("../presets/rbm-n1000000.toml")),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Library(#[from] crate::Error),

    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// Every error is a refusal to run or to finish: exit status 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

/// What a successful invocation concluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Every check passed or was flagged; exit 0.
    Passed,
    /// At least one diagnostic failed; exit 1.
    ChecksFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Passed => 0,
            Outcome::ChecksFailed => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "cdconv", version, about = "Contrastive divergence experiments and convergence diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// CD trajectories, one CSV per start point.
    Run(CommonArgs),
    /// Exact and CD gradients on a parameter grid.
    GradientField(CommonArgs),
    /// Bound checks, written as JSON and CSV.
    Diagnose(CommonArgs),
    /// Ergodic-average error across sample sizes and seeds.
    Sweep(CommonArgs),
}

#[derive(Clone, Debug, Args)]
pub struct CommonArgs {
    /// Experiment file (TOML, or a manifest.json from an earlier run).
    #[arg(long, value_name = "PATH", required_unless_present = "preset", conflicts_with = "preset")]
    pub config: Option<PathBuf>,

    /// Shipped experiment: gaussian-n50|n100|n500, rbm-n100|n10000|n1000000.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,

    /// Output directory; beats the environment and the config file.
    #[arg(long, value_name = "DIR", env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,

    /// Replaces the config's base seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,

    /// Worker threads; defaults to one per core.
    #[arg(long, value_name = "INT")]
    pub jobs: Option<usize>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Run(_) => "run",
            Command::GradientField(_) => "gradient-field",
            Command::Diagnose(_) => "diagnose",
            Command::Sweep(_) => "sweep",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Run(a) | Command::GradientField(a) | Command::Diagnose(a) | Command::Sweep(a) => a,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub family: FamilyConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub cd: CdSection,
    pub data: DataSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub gradient_field: GradientFieldSection,
    /// Where outputs go; not part of the resolved config.
    #[serde(default, skip_serializing)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    GaussianMean {
        sigma0: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stat_bound_c: Option<f64>,
    },
    BinaryRbm {
        nv: usize,
        nh: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<KernelKind>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub projection: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub theta_star: Vec<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_list: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Spectral,
    DriftConstants,
    Constraints,
    Bias,
    Variance,
    Drift,
    HittingTime,
    Concentration,
    Lattice,
}

impl Check {
    pub const ALL: [Check; 9] = [
        Check::Spectral,
        Check::DriftConstants,
        Check::Constraints,
        Check::Bias,
        Check::Variance,
        Check::Drift,
        Check::HittingTime,
        Check::Concentration,
        Check::Lattice,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub gamma1: f64,
    pub gamma2: f64,
    /// Fixed `β`; the schedule `max(2, n^γ₂)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub lambda_grid: usize,
    pub alpha_grid: usize,
    pub lipschitz_grid: usize,
    pub constraint_grid: usize,
    pub alpha_chain_length: usize,
    pub replicates: usize,
    /// Drift is probed at these multiples of `β r_n` from the MLE.
    pub drift_radii: Vec<f64>,
    pub hitting_replicates: usize,
    pub hitting_cap: usize,
    pub sweep_seeds: usize,
    pub checks: Vec<Check>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            gamma1: diag::GAMMA1_DEFAULT,
            gamma2: diag::GAMMA2_DEFAULT,
            beta: None,
            lambda_grid: diag::LAMBDA_GRID_DEFAULT,
            alpha_grid: diag::ALPHA_GRID_DEFAULT,
            lipschitz_grid: 9,
            constraint_grid: 5,
            alpha_chain_length: 100_000,
            replicates: diag::MIN_REPLICATES,
            drift_radii: vec![2.0, 3.0, 4.0, 6.0, 8.0],
            hitting_replicates: 200,
            hitting_cap: diag::HITTING_CAP_DEFAULT,
            sweep_seeds: diag::MIN_SWEEP_SEEDS,
            checks: Check::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientFieldSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_per_dim: Option<usize>,
    #[serde(default = "default_field_replicates")]
    pub replicates: usize,
    /// Off-pair coordinates sit at the grid value nearest this, ties low.
    #[serde(default = "default_pin")]
    pub pin: f64,
}

fn default_field_replicates() -> usize {
    5
}

fn default_pin() -> f64 {
    0.5
}

impl Default for GradientFieldSection {
    fn default() -> Self {
        Self {
            lower: None,
            upper: None,
            points_per_dim: None,
            replicates: default_field_replicates(),
            pin: default_pin(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// TOML, or JSON when the path ends in `.json`; a manifest's `config`
    /// object is accepted as is.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            if let Some(inner) = v.get_mut("config") {
                v = inner.take();
            }
            serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("unknown preset `{name}`; available: {}", names.join(", ")))
        })?;
        Self::from_toml(text)
    }

    pub fn dim(&self) -> usize {
        match &self.family {
            FamilyConfig::GaussianMean { sigma0, .. } => sigma0.len(),
            FamilyConfig::BinaryRbm { nv, nh } => nv * nh,
        }
    }

    /// Fills every family-dependent default so the config names every value
    /// a run uses.
    pub fn resolve(mut self) -> Self {
        let d = self.dim();
        let gaussian = matches!(self.family, FamilyConfig::GaussianMean { .. });
        if let FamilyConfig::GaussianMean { stat_bound_c, .. } = &mut self.family {
            stat_bound_c.get_or_insert(6.0);
        }
        self.kernel.kind.get_or_insert(if gaussian { KernelKind::GaussianGibbs } else { KernelKind::RbmGibbs });
        let cd = &mut self.cd;
        cd.eta.get_or_insert(if gaussian { 0.1 } else { 0.2 });
        cd.m.get_or_insert(if gaussian { 3 } else { 1 });
        cd.steps.get_or_insert(if gaussian { 2000 } else { 1000 });
        cd.starts.get_or_insert_with(|| vec![vec![0.0; d]]);
        let half = if gaussian { 4.0 } else { 3.0 };
        let domain = cd
            .domain
            .get_or_insert_with(|| DomainConfig { lower: vec![-half; d], upper: vec![half; d] })
            .clone();
        let gf = &mut self.gradient_field;
        if gaussian {
            gf.lower.get_or_insert(domain.lower);
            gf.upper.get_or_insert(domain.upper);
            gf.points_per_dim.get_or_insert(9);
        } else {
            gf.lower.get_or_insert(vec![0.0; d]);
            gf.upper.get_or_insert(vec![1.0; d]);
            gf.points_per_dim.get_or_insert(6);
        }
        self
    }
}

// ---------------------------------------------------------------------------
// Validated experiment

/// A resolved, validated configuration with library objects built.
#[derive(Clone, Debug)]
pub struct Experiment<F> {
    pub family: F,
    pub kernel: KernelSpec,
    pub seed: u64,
    pub eta: f64,
    pub m: usize,
    pub steps: usize,
    pub starts: Vec<Parameter>,
    pub projection: bool,
    pub domain: ParamDomain,
    pub theta_star: Parameter,
    pub n: usize,
    pub n_list: Vec<usize>,
    pub diagnostics: DiagnosticsSection,
    pub field_domain: ParamDomain,
    pub field_points: usize,
    pub field_replicates: usize,
    pub pin: f64,
}

#[derive(Clone, Debug)]
pub enum BuiltExperiment {
    Gaussian(Experiment<GaussianMean>),
    Rbm(Experiment<BinaryRbm>),
}

fn parameter(field: &str, v: &[f64], d: usize) -> Result<Parameter, CliError> {
    if v.len() != d {
        return Err(config_err(field, format!("expected {d} values, got {}", v.len())));
    }
    Parameter::new(v.to_vec()).map_err(|e| config_err(field, e))
}

fn domain(field: &str, lower: &[f64], upper: &[f64], d: usize) -> Result<ParamDomain, CliError> {
    if lower.len() != d || upper.len() != d {
        return Err(config_err(field, format!("lower and upper need {d} values each")));
    }
    ParamDomain::new(lower.to_vec(), upper.to_vec()).map_err(|e| config_err(field, e))
}

fn validate_diagnostics(s: &DiagnosticsSection) -> Result<(), CliError> {
    let f = |name: &str| format!("diagnostics.{name}");
    if !(s.gamma1 > 0.0 && s.gamma1 < 0.5) {
        return Err(config_err(&f("gamma1"), "must lie in (0, 0.5)"));
    }
    if !(s.gamma2 > 0.0 && s.gamma2.is_finite()) {
        return Err(config_err(&f("gamma2"), "must be positive"));
    }
    if let Some(b) = s.beta {
        if !(b > 1.0 && b.is_finite()) {
            return Err(config_err(&f("beta"), "must exceed 1"));
        }
    }
    for (name, v, min) in [
        ("lambda_grid", s.lambda_grid, 2),
        ("alpha_grid", s.alpha_grid, 2),
        ("lipschitz_grid", s.lipschitz_grid, 3),
        ("constraint_grid", s.constraint_grid, 2),
        ("alpha_chain_length", s.alpha_chain_length, 100_000),
        ("replicates", s.replicates, diag::MIN_REPLICATES),
        ("hitting_replicates", s.hitting_replicates, 1),
        ("hitting_cap", s.hitting_cap, 1),
        ("sweep_seeds", s.sweep_seeds, diag::MIN_SWEEP_SEEDS),
    ] {
        if v < min {
            return Err(config_err(&f(name), format!("must be at least {min}, got {v}")));
        }
    }
    if s.drift_radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(config_err(&f("drift_radii"), "multiples must be positive"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Resolves and validates; the first offending field is named in the
    /// error.
    pub fn build(self) -> Result<(ExperimentConfig, BuiltExperiment), CliError> {
        let cfg = self.resolve();
        let built = match &cfg.family {
            FamilyConfig::GaussianMean { sigma0, stat_bound_c } => {
                let p = sigma0.len();
                if p == 0 || sigma0.iter().any(|r| r.len() != p) {
                    return Err(config_err("family.sigma0", "must be a non-empty square matrix"));
                }
                let m = Matrix::from_fn(p, p, |i, j| sigma0[i][j]);
                let c = stat_bound_c.expect("resolved");
                let fam = GaussianMean::new(m, c).map_err(|e| config_err("family", e))?;
                BuiltExperiment::Gaussian(experiment(&cfg, fam)?)
            }
            FamilyConfig::BinaryRbm { nv, nh } => {
                let fam = BinaryRbm::new(*nv, *nh).map_err(|e| config_err("family", e))?;
                BuiltExperiment::Rbm(experiment(&cfg, fam)?)
            }
        };
        Ok((cfg, built))
    }
}

fn experiment<F: ExponentialFamily>(cfg: &ExperimentConfig, family: F) -> Result<Experiment<F>, CliError> {
    let d = family.dim();
    let kind = cfg.kernel.kind.expect("resolved");
    let kernel = KernelSpec::new(kind, family.kind()).map_err(|e| config_err("kernel.kind", e))?;
    let cd = &cfg.cd;
    let eta = cd.eta.expect("resolved");
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(config_err("cd.eta", format!("must be positive, got {eta}")));
    }
    let m = cd.m.expect("resolved");
    if m < 1 {
        return Err(config_err("cd.m", "must be at least 1"));
    }
    let dc = cd.domain.as_ref().expect("resolved");
    let dom = domain("cd.domain", &dc.lower, &dc.upper, d)?;
    let starts_raw = cd.starts.as_ref().expect("resolved");
    if starts_raw.is_empty() {
        return Err(config_err("cd.starts", "needs at least one start"));
    }
    let mut starts = Vec::with_capacity(starts_raw.len());
    for (i, s) in starts_raw.iter().enumerate() {
        let field = format!("cd.starts[{i}]");
        let p = parameter(&field, s, d)?;
        if !dom.contains(&p) {
            return Err(config_err(&field, "lies outside cd.domain"));
        }
        starts.push(p);
    }
    let theta_star = parameter("data.theta_star", &cfg.data.theta_star, d)?;
    if !dom.contains_interior(&theta_star) {
        return Err(config_err("data.theta_star", "must lie inside cd.domain"));
    }
    if cfg.data.n == 0 {
        return Err(config_err("data.n", "must be at least 1"));
    }
    if cfg.data.n_list.contains(&0) {
        return Err(config_err("data.n_list", "sample sizes must be at least 1"));
    }
    validate_diagnostics(&cfg.diagnostics)?;
    let gf = &cfg.gradient_field;
    let field_domain = domain(
        "gradient_field",
        gf.lower.as_deref().expect("resolved"),
        gf.upper.as_deref().expect("resolved"),
        d,
    )?;
    let field_points = gf.points_per_dim.expect("resolved");
    if field_points < 2 {
        return Err(config_err("gradient_field.points_per_dim", "must be at least 2"));
    }
    if gf.replicates < 1 {
        return Err(config_err("gradient_field.replicates", "must be at least 1"));
    }
    if !gf.pin.is_finite() {
        return Err(config_err("gradient_field.pin", "must be finite"));
    }
    Ok(Experiment {
        family,
        kernel,
        seed: cfg.seed,
        eta,
        m,
        steps: cd.steps.expect("resolved"),
        starts,
        projection: cd.projection,
        domain: dom,
        theta_star,
        n: cfg.data.n,
        n_list: cfg.data.n_list.clone(),
        diagnostics: cfg.diagnostics.clone(),
        field_domain,
        field_points,
        field_replicates: gf.replicates,
        pin: gf.pin,
    })
}

// ---------------------------------------------------------------------------
// Output helpers

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io { path: path.to_path_buf(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn fmt_row(cells: &[f64]) -> String {
    cells.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

/// Output files written by one verb, relative to the output directory.
type Written = Vec<(String, Vec<u8>)>;

impl<F: ExponentialFamily> Experiment<F> {
    pub fn cd_config(&self, theta0: Parameter, seed: u64) -> CdConfig {
        CdConfig {
            eta: self.eta,
            m: self.m,
            steps: self.steps,
            theta0,
            domain: self.domain.clone(),
            projection: self.projection,
            seed,
        }
    }

    pub fn data(&self) -> crate::Result<DataSample<F::Point>> {
        sample_from_model(&self.family, &self.theta_star, self.n, self.seed)
    }

    /// CD seed of the trajectory from start `i`.
    pub fn start_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, &[tag::CD_STEP, i as u64])
    }

    pub fn trajectory(&self, data: &DataSample<F::Point>, i: usize) -> crate::Result<Trajectory> {
        run_cd(&self.family, &self.kernel, data, &self.cd_config(self.starts[i].clone(), self.start_seed(i)))
    }

    fn run_outputs(&self) -> Result<Written, CliError> {
        let data = self.data()?;
        let per_start: Vec<Written> = (0..self.starts.len())
            .into_par_iter()
            .map(|i| -> Result<Written, CliError> {
                let traj = self.trajectory(&data, i)?;
                let stem = format!("traj_{i}_{}", self.seed);
                let mut out = vec![(format!("{stem}.csv"), csv_bytes(|b| traj.write_csv(b)))];
                if let Some(g) = self.family.as_gaussian() {
                    out.push((format!("{stem}_mean.csv"), csv_bytes(|b| write_mean_csv(g, &traj, b))));
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()?;
        Ok(per_start.into_iter().flatten().collect())
    }

    /// Coordinate pairs shown by the gradient field, `(0, 1)` first.
    pub fn field_pairs(&self) -> Vec<(usize, usize)> {
        let d = self.family.dim();
        (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).collect()
    }

    /// Grid value of each coordinate nearest the pin; ties go low.
    pub fn pinned(&self) -> Vec<f64> {
        (0..self.family.dim())
            .map(|j| {
                let axis = self.field_domain.axis(j, self.field_points);
                let mut best = axis[0];
                for &v in &axis[1..] {
                    let (dv, db) = ((v - self.pin).abs(), (best - self.pin).abs());
                    if dv < db - 1e-12 {
                        best = v;
                    }
                }
                best
            })
            .collect()
    }

    fn field_outputs(&self) -> Result<Written, CliError> {
        let data = self.data()?;
        let pinned = self.pinned();
        let mut out = Vec::new();
        for (pi, &(a, b)) in self.field_pairs().iter().enumerate() {
            let axis_a = self.field_domain.axis(a, self.field_points);
            let axis_b = self.field_domain.axis(b, self.field_points);
            let points: Vec<Parameter> = axis_a
                .iter()
                .flat_map(|&va| axis_b.iter().map(move |&vb| (va, vb)))
                .map(|(va, vb)| {
                    let mut v = pinned.clone();
                    v[a] = va;
                    v[b] = vb;
                    Parameter::new(v)
                })
                .collect::<crate::Result<_>>()?;
            let rows: Vec<String> = points
                .par_iter()
                .enumerate()
                .map(|(k, theta)| -> crate::Result<String> {
                    let exact = exact_gradient(&self.family, &data, theta)?;
                    let mut lines = String::new();
                    for r in 0..self.field_replicates {
                        let s = derive_seed(self.seed, &[tag::GRADIENT_FIELD, pi as u64, k as u64, r as u64]);
                        let g = cd_gradient(&self.family, &self.kernel, &data, theta, self.m, s)?;
                        let norm = g[a].hypot(g[b]);
                        let (da, db) = if norm > 0.0 { (g[a] / norm, g[b] / norm) } else { (0.0, 0.0) };
                        lines.push_str(&fmt_row(&[theta[a], theta[b], exact[a], exact[b]]));
                        lines.push_str(&format!(",{r},"));
                        lines.push_str(&fmt_row(&[g[a], g[b], da, db]));
                        lines.push('\n');
                    }
                    Ok(lines)
                })
                .collect::<crate::Result<_>>()?;
            let (ia, ib) = (a + 1, b + 1);
            let mut text = format!(
                "theta_{ia},theta_{ib},exact_{ia},exact_{ib},rep,gcd_{ia},gcd_{ib},dir_{ia},dir_{ib}\n"
            );
            text.extend(rows);
            out.push((format!("gradient_field_{ia}_{ib}.csv"), text.into_bytes()));
        }
        Ok(out)
    }

    /// Runs the configured checks; see the module docs of `diagnostics`.
    pub fn diagnose(&self) -> Result<DiagnosticsReport, CliError> {
        let s = &self.diagnostics;
        let on = |c: Check| s.checks.contains(&c);
        let fam = &self.family;
        let data = self.data()?;
        let theta_hat = mle(fam, &data, MLE_DEFAULT_TOL)?;
        let mut report = DiagnosticsReport::default();

        let (lambda_min, lambda_max) = diag::lambda_bounds(fam, &self.domain, s.lambda_grid);
        let l = diag::estimate_lipschitz_l(fam, &self.theta_star, &self.domain, s.lipschitz_grid)?;
        let alpha = diag::measure_alpha(
            fam,
            &self.kernel,
            &self.domain,
            &self.theta_star,
            s.alpha_grid,
            s.alpha_chain_length,
            derive_seed(self.seed, &[tag::SPECTRAL]),
        )?;
        if on(Check::Spectral) {
            let mut rec = CheckRecord::new("spectral")
                .input("kernel", self.kernel.kind().name())
                .input("alpha", alpha)
                .input("lambda_min", lambda_min)
                .input("lambda_max", lambda_max)
                .input("L", l);
            rec.estimate = Some(alpha);
            rec.bound = Some(1.0);
            rec.pass = Some(alpha < 1.0);
            if self.kernel.kind() == KernelKind::GaussianGibbs {
                rec = rec.flag(diag::flag::SIMULATION_ONLY);
            }
            report.push(rec);
        }
        let constants = diag::drift_constants(DriftInputs {
            d: fam.dim(),
            lambda_min,
            lambda_max,
            c: fam.stat_bound(),
            l,
            alpha,
            m: self.m,
            eta: self.eta,
            n: self.n,
            gamma1: s.gamma1,
        })?;
        let beta = s.beta.unwrap_or_else(|| diag::beta_schedule(self.n, s.gamma2));
        if on(Check::DriftConstants) {
            report.push(constants.record().input("beta", beta));
        }
        if on(Check::Constraints) {
            let grid = self.domain.grid(s.constraint_grid);
            let dev = diag::constraint_deviations(fam, &self.kernel, &data, &self.theta_star, self.m, &grid)?;
            report.extend(dev.records(self.n, s.gamma1));
        }
        let probes: Vec<&Parameter> = std::iter::once(&theta_hat).chain(&self.starts).collect();
        if on(Check::Bias) {
            for (i, theta) in probes.iter().enumerate() {
                let seed = derive_seed(self.seed, &[tag::REPLICATE, 1, i as u64]);
                let rec = diag::bias_report(fam, &self.kernel, &data, theta, &theta_hat, self.m, s.replicates, &constants, seed)?;
                report.push(rec.input("probe", i));
            }
        }
        if on(Check::Variance) {
            for (i, theta) in probes.iter().enumerate() {
                let seed = derive_seed(self.seed, &[tag::REPLICATE, 2, i as u64]);
                let rec = diag::variance_report(fam, &self.kernel, &data, theta, self.m, s.replicates, seed)?;
                report.push(rec.input("probe", i));
            }
        }
        let template = self.cd_config(self.starts[0].clone(), self.start_seed(0));
        if on(Check::Drift) {
            let dir = {
                let v = self.starts[0].as_vector() - theta_hat.as_vector();
                let norm = v.norm();
                if norm > 0.0 {
                    v / norm
                } else {
                    let mut e = Vector::zeros(fam.dim());
                    e[0] = 1.0;
                    e
                }
            };
            match constants.r_n {
                Some(r_n) => {
                    for (i, k) in s.drift_radii.iter().enumerate() {
                        let theta = Parameter::from_vector(theta_hat.as_vector() + &dir * (k * beta * r_n))?;
                        let seed = derive_seed(self.seed, &[tag::REPLICATE, 3, i as u64]);
                        let rec = diag::drift_check(
                            fam, &self.kernel, &data, &theta_hat, &theta, &template, &constants, beta, s.replicates, seed,
                        )?;
                        report.push(rec.input("radius_multiple", *k));
                    }
                }
                None => {
                    let rec = diag::drift_check(
                        fam, &self.kernel, &data, &theta_hat, &self.starts[0], &template, &constants, beta, s.replicates, 0,
                    )?;
                    report.push(rec);
                }
            }
        }
        if on(Check::HittingTime) {
            let ball = constants.ball(theta_hat.clone(), beta).unwrap_or(diag::BallSpec {
                center: theta_hat.clone(),
                radius: f64::NAN,
                beta,
            });
            report.extend(diag::hitting_time_check(
                fam,
                &self.kernel,
                &data,
                &theta_hat,
                &template,
                &constants,
                &ball,
                &self.starts,
                s.hitting_replicates,
                s.hitting_cap,
                derive_seed(self.seed, &[tag::HITTING]),
            )?);
        }
        let needs_traj = (on(Check::Concentration) && self.steps >= 2) || (on(Check::Lattice) && fam.as_discrete().is_some());
        if needs_traj {
            let traj = self.trajectory(&data, 0)?;
            if on(Check::Concentration) {
                report.push(diag::concentration_report(&traj, &theta_hat, &constants, beta, self.steps / 2)?);
            }
            if on(Check::Lattice) && fam.as_discrete().is_some() {
                report.push(diag::lattice_check(&traj, fam, &data, LATTICE_TOLERANCE)?);
            }
        }
        Ok(report)
    }

    pub fn sweep(&self) -> Result<Vec<diag::SweepRow>, CliError> {
        let n_list = &self.n_list;
        if n_list.len() < 2 || n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("data.n_list", "a sweep needs at least two increasing sample sizes"));
        }
        let template = self.cd_config(self.starts[0].clone(), 0);
        template.validate(self.family.dim())?;
        if self.steps < 2 {
            return Err(config_err("cd.steps", "a sweep needs at least 2 steps"));
        }
        Ok(diag::ergodic_sweep(
            &self.family,
            &self.kernel,
            &self.theta_star,
            n_list,
            &template,
            self.diagnostics.sweep_seeds,
            self.seed,
        )?)
    }
}

/// Mean parameter `μ_t = Σ₀θ_t` along a Gaussian trajectory.
pub fn write_mean_csv<W: Write>(family: &GaussianMean, traj: &Trajectory, mut w: W) -> std::io::Result<()> {
    let p = family.data_dim();
    let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=p).map(|j| format!("mu_{j}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for (t, theta) in traj.thetas.iter().enumerate() {
        let mu = family.mean_param(theta);
        writeln!(w, "{t},{}", fmt_row(mu.as_slice()))?;
    }
    Ok(())
}

fn sweep_csvs(rows: &[diag::SweepRow]) -> (Vec<u8>, Vec<u8>) {
    let mut per_seed = String::from(
        "n,seed_index,total,total_after_burn_in,average_to_tail,tail_to_mle,mle_error,mean_distance_to_mle\n",
    );
    for r in rows {
        per_seed.push_str(&format!(
            "{},{},{}\n",
            r.n,
            r.seed_index,
            fmt_row(&[r.total, r.total_after_burn_in, r.average_to_tail, r.tail_to_mle, r.mle_error, r.mean_distance_to_mle])
        ));
    }
    let mut summary = String::from(
        "n,seeds,total_median,total_q1,total_q3,average_to_tail_median,tail_to_mle_median,mle_error_median,mean_distance_to_mle_median\n",
    );
    for s in diag::summarize_sweep(rows) {
        summary.push_str(&format!(
            "{},{},{}\n",
            s.n,
            s.seeds,
            fmt_row(&[
                s.total_median,
                s.total_q1,
                s.total_q3,
                s.average_to_tail_median,
                s.tail_to_mle_median,
                s.mle_error_median,
                s.mean_distance_to_mle_median
            ])
        ));
    }
    (summary.into_bytes(), per_seed.into_bytes())
}

// ---------------------------------------------------------------------------
// Driver

fn verb<F: ExponentialFamily>(command: &Command, exp: &Experiment<F>) -> Result<(Written, Outcome), CliError> {
    Ok(match command {
        Command::Run(_) => (exp.run_outputs()?, Outcome::Passed),
        Command::GradientField(_) => (exp.field_outputs()?, Outcome::Passed),
        Command::Diagnose(_) => {
            let report = exp.diagnose()?;
            let csv = csv_bytes(|b| report.write_csv(b));
            let outcome = if report.any_failed() { Outcome::ChecksFailed } else { Outcome::Passed };
            (
                vec![("diagnostics.json".into(), report.to_json().into_bytes()), ("diagnostics.csv".into(), csv)],
                outcome,
            )
        }
        Command::Sweep(_) => {
            let (summary, per_seed) = sweep_csvs(&exp.sweep()?);
            (vec![("sweep.csv".into(), summary), ("sweep_seeds.csv".into(), per_seed)], Outcome::Passed)
        }
    })
}

/// Resolves the configuration for a command line, applying `--seed`.
pub fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        _ => return Err(CliError::Config("give exactly one of --config and --preset".into())),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let args = cli.command.args();
    let cfg = resolve_config(args)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let (resolved, built) = cfg.build()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(config_err("--jobs", "must be at least 1"));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    let (files, outcome) = pool.install(|| match &built {
        BuiltExperiment::Gaussian(e) => verb(&cli.command, e),
        BuiltExperiment::Rbm(e) => verb(&cli.command, e),
    })?;
    fs::create_dir_all(&out_dir).map_err(|source| CliError::Io { path: out_dir.clone(), source })?;
    let mut names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    let manifest = json!({
        "command": cli.command.name(),
        "config": resolved,
        "outputs": names,
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
    });
    for (name, bytes) in &files {
        write_atomic(&out_dir.join(name), bytes)?;
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&out_dir.join(MANIFEST), text.as_bytes())?;
    Ok(outcome)
}
