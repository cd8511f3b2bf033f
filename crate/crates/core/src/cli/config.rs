use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fields::{CoefficientSet, ExampleParams};
use crate::semigroup::{DriftScheme, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    MorreyNorm,
    Oscillation,
    Embedding,
    Simulate,
    ExitStats,
    Laplace,
    Increments,
    KrylovCheck,
    HeatKernel,
    Semigroup,
    ChaosDecay,
    MollifyConvergence,
    Counterexample,
    DerivativeFlow,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::MorreyNorm => "morrey-norm",
            ExperimentKind::Oscillation => "oscillation",
            ExperimentKind::Embedding => "embedding",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::ExitStats => "exit-stats",
            ExperimentKind::Laplace => "laplace",
            ExperimentKind::Increments => "increments",
            ExperimentKind::KrylovCheck => "krylov-check",
            ExperimentKind::HeatKernel => "heat-kernel",
            ExperimentKind::Semigroup => "semigroup",
            ExperimentKind::ChaosDecay => "chaos-decay",
            ExperimentKind::MollifyConvergence => "mollify-convergence",
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::DerivativeFlow => "derivative-flow",
        }
    }

    fn uses_fields(self) -> bool {
        matches!(
            self,
            ExperimentKind::MorreyNorm | ExperimentKind::Embedding | ExperimentKind::MollifyConvergence
        )
    }
}

/// Coefficients `(σ, b)` of the equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// `σ = [I | 0]`, `b = 0`.
    Brownian {
        #[serde(default = "default_d1")]
        d1: usize,
    },
    /// The three-dimensional example, optionally mollified at scale `n`.
    Example {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default)]
        beta: f64,
        #[serde(default)]
        gamma: f64,
        #[serde(default)]
        mollify: Option<usize>,
    },
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec::Brownian { d1: 3 }
    }
}

/// A scalar or vector field whose magnitude enters a Morrey-type quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    /// `|x|^{-1} 1_{|x| < 1}`.
    InverseDistance,
    /// `|b|` for the example drift.
    ExampleDrift {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default)]
        beta: f64,
        #[serde(default)]
        gamma: f64,
        #[serde(default)]
        mollify: Option<usize>,
    },
    /// `|Dσ|` for the example diffusion.
    ExampleSigmaGradient {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default)]
        beta: f64,
    },
    /// The disjoint-bump field with `n_max` bumps.
    DisjointBumps { q: f64, n_max: usize },
}

impl FieldSpec {
    pub fn label(&self) -> String {
        match self {
            FieldSpec::InverseDistance => "inverse-distance".into(),
            FieldSpec::ExampleDrift { mollify: None, .. } => "example-drift".into(),
            FieldSpec::ExampleDrift { mollify: Some(n), .. } => format!("example-drift-n{n}"),
            FieldSpec::ExampleSigmaGradient { .. } => "example-sigma-gradient".into(),
            FieldSpec::DisjointBumps { n_max, .. } => format!("disjoint-bumps-{n_max}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Declared nondegeneracy; the coefficients must satisfy it.
    pub delta: f64,
    pub q: f64,
    /// Exponent of the diffusion-gradient class.
    pub q0: f64,
    /// `None` means `(d/2 + 1 + q) / 2`.
    pub p: Option<f64>,
    pub r0: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    pub taming: bool,
    pub start: Vec<f64>,
    pub radii: Vec<f64>,
    pub nu: f64,
    pub m_max: usize,
    /// Time nodes of the chaos quadrature; empty means the geometric default.
    pub s_nodes: Vec<f64>,
    /// Also run the chaos levels on the grid with half the spacing.
    pub refine: bool,
    pub times: Vec<f64>,
    pub widths: Vec<f64>,
    pub probes: Vec<Vec<f64>>,
    pub etas: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    pub small_times: Vec<f64>,
    pub moments: Vec<f64>,
    pub gaps: Vec<f64>,
    pub n_grid: Vec<f64>,
    pub ns: Vec<usize>,
    pub n_max: Vec<usize>,
    pub mass_n_max: Vec<usize>,
    pub levels: usize,
    pub max_lattice: usize,
    pub pairs: usize,
    pub tolerance: Option<f64>,
    /// Width of the Gaussian test function for single-function experiments.
    pub width: f64,
    pub stop_after_exit: bool,
    /// Write the trajectory batch of `simulate` next to the reports.
    pub write_batch: bool,
    /// Compare the grid semigroup with Feynman–Kac at the probes.
    pub cross_check: bool,
    /// Also measure grid convergence of the mollified semigroups.
    pub grid_convergence: bool,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            delta: 0.4,
            q: 2.8,
            q0: 2.8,
            p: None,
            r0: 1.0,
            dt: 1e-3,
            horizon: 1.0,
            n_paths: 1000,
            master_seed: 0,
            taming: false,
            start: vec![0.0; 3],
            radii: vec![1.0],
            nu: 4.0,
            m_max: 2,
            s_nodes: Vec::new(),
            refine: false,
            times: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            widths: vec![0.25, 0.5, 1.0],
            probes: vec![vec![0.0; 3]],
            etas: vec![vec![1.0, 0.0, 0.0]],
            lambdas: vec![1.0, 4.0, 16.0, 64.0],
            small_times: vec![0.02, 0.03, 0.05],
            moments: vec![2.0, 4.0],
            gaps: vec![0.01, 0.02, 0.05, 0.1],
            n_grid: vec![0.25, 0.5, 0.75, 1.0, 1.25],
            ns: vec![2, 4, 8, 16],
            n_max: vec![100, 1000, 10_000],
            mass_n_max: vec![1000, 1_000_000],
            levels: 13,
            max_lattice: 343,
            pairs: 512,
            tolerance: None,
            width: 1.0,
            stop_after_exit: false,
            write_batch: false,
            cross_check: false,
            grid_convergence: false,
        }
    }
}

impl Params {
    pub fn p_or_default(&self, d: usize) -> f64 {
        self.p.unwrap_or((d as f64 / 2.0 + 1.0 + self.q) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Half side of the cube `[-half, half]³`.
    pub half: f64,
    pub h: f64,
    pub scheme: DriftScheme,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half: 4.0,
            h: 0.1,
            scheme: DriftScheme::Upwind,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> crate::Result<GridSpec> {
        GridSpec::cube(self.half, self.h)
    }
}

/// A parsed experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Not part of the config hash.
    #[serde(default = "default_output", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default = "yes", skip_serializing)]
    pub plots: bool,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub grid: GridConfig,
}

fn default_d1() -> usize {
    3
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A configuration problem, pointing at the offending line when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let file = self
            .path
            .as_ref()
            .map_or("<config>".to_string(), |p| p.display().to_string());
        match self.line {
            Some(l) => write!(f, "{file}:{l}: ")?,
            None => write!(f, "{file}: ")?,
        }
        if let Some(k) = &self.key {
            write!(f, "`{k}`: ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: None,
        line: None,
        key: Some(key.to_string()),
        message: message.into(),
    }
}

/// 1-based line of `section.key` (or of the section header) in TOML text.
pub fn locate_key(source: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", dotted),
    };
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section || current == dotted {
                header = header.or(Some(i + 1));
            }
            continue;
        }
        let name = line.split('=').next().unwrap_or("").trim().trim_matches('"');
        if line.contains('=') && current == section && name == key {
            return Some(i + 1);
        }
        if line.contains('=') && current.is_empty() && name == dotted {
            return Some(i + 1);
        }
    }
    header
}

impl ExperimentConfig {
    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| ConfigError {
            path: None,
            line: e.span().map(|s| source[..s.start].matches('\n').count() + 1),
            key: None,
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|mut e| {
            if let Some(k) = &e.key {
                e.line = locate_key(source, k);
            }
            e
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            key: None,
            message: e.to_string(),
        })?;
        Self::from_toml(&source).map_err(|mut e| {
            e.path = Some(path.to_path_buf());
            e
        })
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn coefficient_set(&self) -> crate::Result<CoefficientSet> {
        match &self.coefficients {
            CoefficientSpec::Brownian { d1 } => CoefficientSet::brownian(3, *d1),
            CoefficientSpec::Example {
                alpha,
                beta,
                gamma,
                mollify,
            } => {
                let base = crate::fields::example_coefficients(&ExampleParams::new(*alpha, *beta, *gamma))?;
                match mollify {
                    Some(n) => crate::semigroup::mollified_coefficients(&base, *n, base.delta),
                    None => Ok(base),
                }
            }
        }
    }

    /// Checks every parameter the selected experiment reads.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.params;
        let kind = self.experiment;
        if !(p.delta > 0.0 && p.delta <= 1.0) {
            return Err(invalid("params.delta", "must lie in (0, 1]"));
        }
        if !(p.q > 1.0 && p.q <= 3.0) {
            return Err(invalid("params.q", "must lie in (1, d] with d = 3"));
        }
        if !(p.q0 > 1.0 && p.q0 <= 3.0) {
            return Err(invalid("params.q0", "must lie in (1, d] with d = 3"));
        }
        if !(p.r0 > 0.0 && p.r0 <= 1.0) {
            return Err(invalid("params.r0", "must lie in (0, 1]"));
        }
        if let Some(pp) = p.p {
            if !(pp > 1.0) {
                return Err(invalid("params.p", "must exceed 1"));
            }
        }
        if !(p.dt > 0.0 && p.dt <= p.horizon) {
            return Err(invalid("params.dt", "must lie in (0, T]"));
        }
        if !(p.horizon > 0.0 && p.horizon.is_finite()) {
            return Err(invalid("params.T", "must be positive"));
        }
        if p.n_paths == 0 {
            return Err(invalid("params.n_paths", "must be positive"));
        }
        if p.start.len() != 3 || p.start.iter().any(|v| !v.is_finite()) {
            return Err(invalid("params.start", "must be a finite point of R^3"));
        }
        if p.radii.is_empty() || p.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("params.radii", "need at least one positive radius"));
        }
        if !(p.nu > 0.0) {
            return Err(invalid("params.nu", "must be positive"));
        }
        if p.m_max == 0 || p.m_max > 3 {
            return Err(invalid("params.m_max", "must lie in 1..=3"));
        }
        if p.s_nodes.iter().any(|s| !(*s > 0.0)) || p.s_nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("params.s_nodes", "must be positive and increasing"));
        }
        if p.times.is_empty() || p.times.iter().any(|t| !(*t > 0.0)) || p.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("params.times", "must be positive and increasing"));
        }
        if p.widths.is_empty() || p.widths.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("params.widths", "need at least one positive width"));
        }
        for (name, pts) in [("params.probes", &p.probes), ("params.etas", &p.etas)] {
            if pts.is_empty() || pts.iter().any(|x| x.len() != 3 || x.iter().any(|v| !v.is_finite())) {
                return Err(invalid(name, "need points of R^3"));
            }
        }
        if p.ns.is_empty() || p.ns.contains(&0) {
            return Err(invalid("params.ns", "need positive mollification scales"));
        }
        if p.n_max.is_empty() || p.mass_n_max.is_empty() {
            return Err(invalid("params.n_max", "need at least one truncation"));
        }
        if p.levels == 0 || p.max_lattice == 0 || p.pairs == 0 {
            return Err(invalid("params.levels", "search budget must be positive"));
        }
        if let Some(t) = p.tolerance {
            if !(t > 0.0) {
                return Err(invalid("params.tolerance", "must be positive"));
            }
        }
        if !(p.width > 0.0) {
            return Err(invalid("params.width", "must be positive"));
        }
        if !(self.grid.h > 0.0 && self.grid.half >= 2.0 * self.grid.h) {
            return Err(invalid("grid.h", "need 0 < h <= half / 2"));
        }
        match &self.coefficients {
            CoefficientSpec::Brownian { d1 } if *d1 < 3 => {
                return Err(invalid("coefficients.d1", "must be at least d = 3"));
            }
            CoefficientSpec::Example {
                alpha,
                beta,
                gamma,
                mollify,
            } => {
                ExampleParams::new(*alpha, *beta, *gamma)
                    .validate()
                    .map_err(|e| invalid("coefficients", e.to_string()))?;
                if *mollify == Some(0) {
                    return Err(invalid("coefficients.mollify", "must be positive"));
                }
            }
            _ => {}
        }
        let coeffs = self
            .coefficient_set()
            .map_err(|e| invalid("coefficients", e.to_string()))?;
        if coeffs.delta < p.delta {
            return Err(invalid(
                "params.delta",
                format!("coefficients are only {:.4}-elliptic", coeffs.delta),
            ));
        }
        if kind.uses_fields() && self.fields.is_empty() {
            return Err(invalid("fields", "field list is empty"));
        }
        if kind == ExperimentKind::MollifyConvergence
            && !self
                .fields
                .iter()
                .all(|f| matches!(f, FieldSpec::ExampleDrift { mollify: None, .. }))
        {
            return Err(invalid(
                "fields",
                "mollify-convergence takes unmollified example drifts",
            ));
        }
        for f in &self.fields {
            match f {
                FieldSpec::DisjointBumps { q, n_max } => {
                    if !(*q > 1.0 && *q <= 3.0) || *n_max == 0 {
                        return Err(invalid("fields", "disjoint bumps need q in (1, 3] and n_max > 0"));
                    }
                }
                FieldSpec::ExampleDrift { alpha, beta, gamma, .. } => ExampleParams::new(*alpha, *beta, *gamma)
                    .validate()
                    .map_err(|e| invalid("fields", e.to_string()))?,
                FieldSpec::ExampleSigmaGradient { alpha, beta } => ExampleParams::new(*alpha, *beta, 0.0)
                    .validate()
                    .map_err(|e| invalid("fields", e.to_string()))?,
                FieldSpec::InverseDistance => {}
            }
        }
        let pp = p.p_or_default(3);
        match kind {
            ExperimentKind::Embedding if !(pp < p.q) => {
                return Err(invalid("params.p", "embedding needs p < q"));
            }
            ExperimentKind::KrylovCheck | ExperimentKind::HeatKernel if !(pp > 2.5) => {
                return Err(invalid("params.p", "need p > d/2 + 1"));
            }
            ExperimentKind::Counterexample if !(p.q + 0.3 < 3.0) => {
                return Err(invalid(
                    "params.q",
                    "the L_p mass uses p = q + 0.3, which must stay below d",
                ));
            }
            _ => {}
        }
        Ok(())
    }
}
