//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, load_config_str, ConfigError, RunConfig};
use crate::pipeline::{run_pipeline, RunManifest, Stage};

/// Configuration used when `--config` is absent: the scalar benchmark.
pub const BUNDLED_CONFIG: &str = include_str!("../configs/example.json");

#[derive(Debug, Parser)]
#[command(name = "stackelberg-hinf", version, about = "Incentive Stackelberg LQ game with H-infinity attenuation")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Verb {
    /// Load and validate the configuration.
    Validate,
    /// Solve the team Riccati equation and emit P and gains.
    Solve,
    /// Compute both levels of incentive parameters.
    Incentive,
    /// Monte-Carlo simulation of the closed loop.
    Simulate,
    /// Residual, H-infinity, Nash and convexity checks.
    Verify,
    /// Every stage.
    All,
    /// Attenuation and terminal-scale sweeps.
    Sweep,
}

impl Verb {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            Verb::Validate => vec![Stage::Validate],
            Verb::Solve => vec![Stage::Solve],
            Verb::Incentive => vec![Stage::Incentive],
            Verb::Simulate => vec![Stage::Simulate],
            Verb::Verify => vec![Stage::Verify],
            Verb::All => Stage::ALL.to_vec(),
            Verb::Sweep => vec![Stage::Sweep],
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration (defaults to the bundled benchmark).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte-Carlo path count.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Number of solver steps N.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Emit SVG plots.
    #[arg(long, global = true)]
    pub svg: bool,
    #[arg(long, global = true, value_delimiter = ',')]
    pub gamma_list: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub terminal_scale: Option<Vec<f64>>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.out {
            cfg.outputs.dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.mc.seed = s;
        }
        if let Some(p) = self.paths {
            cfg.mc.n_paths = p;
        }
        if let Some(n) = self.grid {
            cfg.grid.steps = n;
        }
        if self.svg {
            cfg.outputs.svg = true;
        }
        if let Some(g) = &self.gamma_list {
            cfg.sweeps.gamma = g.clone();
        }
        if let Some(s) = &self.terminal_scale {
            cfg.sweeps.terminal_scale = s.clone();
        }
    }

    pub fn load(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => load_config_str(BUNDLED_CONFIG, Path::new("."))?,
        };
        self.apply(&mut cfg);
        Ok(cfg)
    }
}

fn report(m: &RunManifest) {
    for s in &m.stages {
        println!("{:<10} {:<9} {:>10.1} ms  {}", format!("{:?}", s.stage).to_lowercase(), format!("{:?}", s.status).to_lowercase(), s.wall_ms, s.files.join(" "));
    }
    for (k, v) in &m.summary {
        println!("  {k} = {v:e}");
    }
    if let Some(f) = &m.failure {
        eprintln!("error in {:?} stage: {}", f.stage, f.message);
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match cli.overrides.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    let manifest = run_pipeline(&cfg, &cli.verb.stages());
    report(&manifest);
    manifest.exit_code()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["x", "sweep", "--gamma-list", "1,10,100", "--terminal-scale", "0.85", "--seed", "7", "--svg"]).unwrap();
        assert_eq!(cli.verb, Verb::Sweep);
        assert_eq!(cli.overrides.gamma_list, Some(vec![1.0, 10.0, 100.0]));
        assert_eq!(cli.overrides.terminal_scale, Some(vec![0.85]));
        let mut cfg = cli.overrides.load().unwrap();
        cli.overrides.apply(&mut cfg);
        assert_eq!(cfg.mc.seed, 7);
        assert!(cfg.outputs.svg);
    }

    #[test]
    fn bundled_config_loads() {
        let cfg = load_config_str(BUNDLED_CONFIG, Path::new(".")).unwrap();
        assert_eq!(cfg.grid.steps, 40);
    }

    #[test]
    fn bad_usage_is_a_config_error() {
        assert_eq!(run(["x", "frobnicate"]), 2);
        assert_eq!(run(["x", "validate", "--config", "/nonexistent/cfg.json"]), 2);
    }
}
