//! Run configuration: JSON loading, schema errors with field paths, and
//! semantic validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::incentive::{check_level1_terminal, check_level2_terminal, IncentiveError, SolverConfig};
use crate::linalg::CMat;
use crate::model::{validate_problem, Level1Params, Level2Params, ModelError, ProblemSpec, EXECUTIVES, MANAGERS};
use crate::riccati::DEFAULT_CONDITION_CAP;
use crate::verify::{NashConfig, VerifyConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid problem: {0}")]
    Problem(#[from] ModelError),
    #[error("invalid terminal value: {0}")]
    Terminal(#[from] IncentiveError),
    #[error("invalid setting {field}: {message}")]
    Invalid { field: &'static str, message: String },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
    /// Simulation sub-steps per solver step; gains are held per solver node.
    #[serde(default = "one")]
    pub refinement: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_paths: 2000, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    #[serde(with = "crate::matrix_io::cmat23")]
    pub eta: [[CMat; EXECUTIVES]; MANAGERS],
    #[serde(with = "crate::matrix_io::cmat23")]
    pub zeta: [[CMat; EXECUTIVES]; MANAGERS],
    #[serde(with = "crate::matrix_io::cmat23")]
    pub rho: [[CMat; EXECUTIVES]; MANAGERS],
}

impl TerminalConfig {
    pub fn level1(&self) -> Level1Params {
        Level1Params { eta: self.eta.clone(), zeta: self.zeta.clone() }
    }

    pub fn level2(&self) -> Level2Params {
        Level2Params { rho: self.rho.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub matching: f64,
    pub max_iter: usize,
    pub condition_cap: f64,
    pub p_residual: f64,
    pub jump_factor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self { matching: s.tol, max_iter: s.max_iter, condition_cap: DEFAULT_CONDITION_CAP, p_residual: 1e-3, jump_factor: s.jump_factor }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweeps {
    pub gamma: Vec<f64>,
    pub terminal_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub hinf_probes: usize,
    pub nash: bool,
    pub nash_deviations: usize,
    pub nash_paths: usize,
    pub epsilon: f64,
    pub gram_basis: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        let n = NashConfig::default();
        Self { hinf_probes: 1000, nash: true, nash_deviations: n.n_deviations, nash_paths: 2000, epsilon: n.epsilon, gram_basis: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    pub dir: PathBuf,
    pub svg: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), svg: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    /// Path to a problem JSON file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_file: Option<PathBuf>,
    pub grid: GridConfig,
    #[serde(default)]
    pub mc: McConfig,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub sweeps: Sweeps,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub outputs: Outputs,
}

impl RunConfig {
    /// The embedded or resolved problem. Valid after [`load_config`].
    pub fn spec(&self) -> &ProblemSpec {
        self.problem.as_ref().expect("problem resolved at load time")
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tolerances.matching,
            max_iter: self.tolerances.max_iter,
            condition_cap: self.tolerances.condition_cap,
            jump_factor: self.tolerances.jump_factor,
            seed: self.mc.seed,
            ..SolverConfig::default()
        }
    }

    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            p_residual_tol: self.tolerances.p_residual,
            hinf_probes: self.verify.hinf_probes,
            hinf_seed: self.mc.seed,
            nash: NashConfig {
                epsilon: self.verify.epsilon,
                n_deviations: self.verify.nash_deviations,
                n_paths: self.verify.nash_paths,
                seed: self.mc.seed,
                ..NashConfig::default()
            },
            gram_basis: self.verify.gram_basis,
            condition_cap: self.tolerances.condition_cap,
        }
    }

    /// SHA-256 of the canonical serialization. The output directory is
    /// excluded so relocated runs of one experiment share a hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.outputs.dir = PathBuf::new();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = self.spec();
        validate_problem(spec)?;
        check_level1_terminal(&spec.dims, &self.terminal.level1())?;
        check_level2_terminal(&spec.dims, &self.terminal.level2())?;
        if self.grid.steps < 2 {
            return Err(ConfigError::Invalid { field: "grid.steps", message: "need at least 2 steps".into() });
        }
        if self.grid.refinement == 0 {
            return Err(ConfigError::Invalid { field: "grid.refinement", message: "must be at least 1".into() });
        }
        if self.mc.n_paths == 0 {
            return Err(ConfigError::Invalid { field: "mc.n_paths", message: "must be at least 1".into() });
        }
        if let Some(g) = self.sweeps.gamma.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(ConfigError::Invalid { field: "sweeps.gamma", message: format!("{g} is not strictly positive") });
        }
        if let Some(s) = self.sweeps.terminal_scale.iter().find(|s| !s.is_finite()) {
            return Err(ConfigError::Invalid { field: "sweeps.terminal_scale", message: format!("{s} is not finite") });
        }
        let t = &self.tolerances;
        if !(t.matching > 0.0 && t.condition_cap > 1.0 && t.p_residual > 0.0 && t.max_iter > 0) {
            return Err(ConfigError::Invalid { field: "tolerances", message: "tolerances must be positive".into() });
        }
        Ok(())
    }
}

/// Deserialize with field paths in schema errors.
pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => {
                let msg = inner.to_string();
                // name the missing field itself, e.g. `terminal.eta`
                let missing = msg.strip_prefix("missing field `").and_then(|r| r.split('`').next());
                let path = match (missing, path.as_str()) {
                    (Some(f), ".") => f.to_string(),
                    (Some(f), p) => format!("{p}.{f}"),
                    (None, p) => p.to_string(),
                };
                ConfigError::Schema { path, message: strip_position(&msg) }
            }
            _ => ConfigError::Parse { line: inner.line(), column: inner.column(), message: strip_position(&inner.to_string()) },
        }
    })
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_config_str(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let mut cfg: RunConfig = parse_json(text)?;
    match (&cfg.problem, &cfg.problem_file) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::Schema {
                path: "problem_file".into(),
                message: "give either `problem` or `problem_file`, not both".into(),
            })
        }
        (None, None) => {
            return Err(ConfigError::Schema { path: "problem".into(), message: "missing field `problem`".into() })
        }
        (None, Some(file)) => {
            let full = base.join(file);
            cfg.problem = Some(parse_json(&read(&full)?)?);
            cfg.problem_file = None;
        }
        (Some(_), None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load, resolve and validate a run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let base = path.parent().unwrap_or(Path::new("."));
    load_config_str(&read(path)?, base)
}
