//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kh_core::fields::{make_coefficients, CoefficientField, CoefficientKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GeometryCheck,
    KernelCheck,
    Solve,
    WeakPoincare,
    Pop,
    MinimaMeasure,
    PopLargeTimes,
    WeakHarnack,
    Harnack,
    Holder,
    Inkspots,
    All,
}

impl ExperimentKind {
    pub const LISTED: [(ExperimentKind, &'static str); 12] = [
        (
            ExperimentKind::GeometryCheck,
            "group axioms, cylinder membership and stacking on random samples",
        ),
        (
            ExperimentKind::KernelCheck,
            "mass, moments and residual of the Kolmogorov kernel",
        ),
        (
            ExperimentKind::Solve,
            "solver run with positivity and weak-residual checks",
        ),
        (
            ExperimentKind::WeakPoincare,
            "localization bound and weak Poincaré inequality",
        ),
        (
            ExperimentKind::Pop,
            "expansion of positivity on a kernel-mixture ensemble",
        ),
        (ExperimentKind::MinimaMeasure, "measure-to-minimum over long times"),
        (
            ExperimentKind::PopLargeTimes,
            "positivity carried along stacked cylinders",
        ),
        (
            ExperimentKind::WeakHarnack,
            "weak Harnack inequality on solver ensembles",
        ),
        (ExperimentKind::Harnack, "Harnack inequality on solver ensembles"),
        (ExperimentKind::Holder, "oscillation decay over nested cylinders"),
        (ExperimentKind::Inkspots, "ink-spots covering bound on generated sets"),
        (
            ExperimentKind::All,
            "every experiment above with its default parameters",
        ),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GeometryCheck => "geometry-check",
            ExperimentKind::KernelCheck => "kernel-check",
            ExperimentKind::Solve => "solve",
            ExperimentKind::WeakPoincare => "weak-poincare",
            ExperimentKind::Pop => "pop",
            ExperimentKind::MinimaMeasure => "minima-measure",
            ExperimentKind::PopLargeTimes => "pop-large-times",
            ExperimentKind::WeakHarnack => "weak-harnack",
            ExperimentKind::Harnack => "harnack",
            ExperimentKind::Holder => "holder",
            ExperimentKind::Inkspots => "inkspots",
            ExperimentKind::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_dx")]
    pub dx: f64,
    #[serde(default = "default_dx")]
    pub dv: f64,
    /// Quadrature nodes per axis on cylinders.
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

fn default_d() -> usize {
    1
}
fn default_dt() -> f64 {
    0.025
}
fn default_dx() -> f64 {
    0.25
}
fn default_nodes() -> usize {
    12
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            d: default_d(),
            dt: default_dt(),
            dx: default_dx(),
            dv: default_dx(),
            nodes: default_nodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub lambda: f64,
    pub big_lambda: f64,
    pub model: CoefficientKind,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec {
            lambda: 1.0,
            big_lambda: 4.0,
            model: CoefficientKind::Checkerboard { cell: 1.0 },
        }
    }
}

/// Test function for the Harnack-type experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    /// `f ≡ 1`.
    Constant,
    /// Solver runs from random nonnegative data.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: Vec<f64>,
    #[serde(default = "default_p")]
    pub p: f64,
    /// Localization radius `R`; each experiment has its own default.
    #[serde(default)]
    pub big_r: Option<f64>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_fixture")]
    pub fixture: Fixture,
    /// Whether ensemble members carry a nonnegative source.
    #[serde(default)]
    pub with_source: bool,
    /// Relative tolerance on fitted-constant drift across refinement.
    #[serde(default = "default_refinement_tol")]
    pub refinement_tol: f64,
}

fn default_theta() -> f64 {
    0.5
}
fn default_omega() -> f64 {
    0.5
}
fn default_m() -> f64 {
    3.0
}
fn default_epsilon() -> Vec<f64> {
    vec![kh_core::logtransform::DEFAULT_EPSILON]
}
fn default_p() -> f64 {
    0.5
}
fn default_mu() -> f64 {
    0.5
}
fn default_members() -> usize {
    4
}
fn default_levels() -> usize {
    5
}
fn default_fixture() -> Fixture {
    Fixture::Random
}
fn default_refinement_tol() -> f64 {
    kh_core::report::REFINEMENT_TOLERANCE
}

impl Default for Params {
    fn default() -> Self {
        toml::from_str("").expect("all parameters have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn check(ok: bool, what: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError(format!("parameter out of range: {what}")))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.grid;
        let p = &self.params;
        check((1..=3).contains(&g.d), "grid.d ∈ {1, 2, 3}")?;
        check(g.dt > 0.0 && g.dx > 0.0 && g.dv > 0.0, "grid spacings > 0")?;
        check((2..=256).contains(&g.nodes), "grid.nodes ∈ [2, 256]")?;
        check(p.theta > 0.0 && p.theta <= 1.0, "params.theta ∈ (0, 1]")?;
        check(p.omega > 0.0 && p.omega <= 0.5, "params.omega ∈ (0, 1/2]")?;
        check(p.m >= 1.0, "params.m ≥ 1")?;
        check(
            !p.epsilon.is_empty() && p.epsilon.iter().all(|&e| e > 0.0 && e <= 0.25),
            "params.epsilon values ∈ (0, 1/4]",
        )?;
        check(p.p > 0.0 && p.p.is_finite(), "params.p > 0")?;
        check(p.big_r.is_none_or(|r| r >= 1.0 && r.is_finite()), "params.big_r ≥ 1")?;
        check(p.mu > 0.0 && p.mu < 1.0, "params.mu ∈ (0, 1)")?;
        check((1..=10_000).contains(&p.members), "params.members ∈ [1, 10000]")?;
        check((2..=40).contains(&p.levels), "params.levels ∈ [2, 40]")?;
        check(p.refinement_tol > 0.0, "params.refinement_tol > 0")?;
        self.coefficients().map(|_| ())
    }

    pub fn coefficients(&self) -> Result<CoefficientField, ConfigError> {
        let c = &self.coefficients;
        make_coefficients(c.model.clone(), self.grid.d, c.lambda, c.big_lambda).map_err(|e| ConfigError(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse("kind = \"geometry-check\"").unwrap();
        assert_eq!(cfg.kind, ExperimentKind::GeometryCheck);
        assert_eq!(cfg.grid, GridSpec::default());
        assert_eq!(cfg.params.p, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("kind = \"pop\"\nbogus = 1").is_err());
        assert!(ExperimentConfig::parse("kind = \"pop\"\n[params]\nthetta = 0.5").is_err());
        let nested = "kind = \"solve\"\n[coefficients]\nlambda = 1.0\nbig_lambda = 2.0\nmodel = { kind = \"checkerboard\", cell = 1.0, extra = 2 }";
        assert!(ExperimentConfig::parse(nested).is_err());
    }

    #[test]
    fn ranges_are_checked() {
        assert!(ExperimentConfig::parse("kind = \"pop\"\n[params]\ntheta = 1.5").is_err());
        assert!(ExperimentConfig::parse("kind = \"pop\"\n[params]\nepsilon = [0.5]").is_err());
        assert!(ExperimentConfig::parse("kind = \"solve\"\n[coefficients]\nlambda = 2.0\nbig_lambda = 1.0\nmodel = { kind = \"checkerboard\", cell = 1.0 }").is_err());
    }

    #[test]
    fn every_kind_parses() {
        for (k, _) in ExperimentKind::LISTED {
            let cfg = ExperimentConfig::parse(&format!("kind = \"{}\"", k.name())).unwrap();
            assert_eq!(cfg.kind, k);
        }
    }
}
