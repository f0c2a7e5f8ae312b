//! Stage orchestration and artifact emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::incentive::{
    incentive_identity_check, level1_recursion, level2_recursion, scale_level1, IncentiveError, Level1Solution,
    Level2Solution, MatchingReport,
};
use crate::linalg::{CMat, RMat};
use crate::model::{ControlId, ProblemSpec, EXECUTIVES, MANAGERS};
use crate::riccati::{RiccatiError, RiccatiPath, TimeGrid};
use crate::simulate::{monte_carlo, sample_brownian, simulate_hierarchy, CostReport, Estimate, Mode, SimulateError};
use crate::svg::{emit_plot, Plot, PlotError, Series};
use crate::team::{analytic_costs, solve_team, TeamError, TeamSolution};
use crate::verify::{verify_all, VerificationReport, VerifyError};

/// Paths used for the pathwise trajectory comparison of the two representations.
const GAP_PATHS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validate,
    Solve,
    Incentive,
    Simulate,
    Verify,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Validate, Stage::Solve, Stage::Incentive, Stage::Simulate, Stage::Verify, Stage::Sweep];

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Validate => &[],
            Stage::Solve => &[Stage::Validate],
            Stage::Incentive | Stage::Simulate | Stage::Sweep => &[Stage::Solve],
            Stage::Verify => &[Stage::Incentive],
        }
    }
}

/// Requested stages plus their prerequisites, in execution order.
pub fn stage_closure(requested: &[Stage]) -> Vec<Stage> {
    let mut set = BTreeSet::new();
    let mut stack: Vec<Stage> = requested.to_vec();
    while let Some(s) = stack.pop() {
        if set.insert(s) {
            stack.extend_from_slice(s.deps());
        }
    }
    set.into_iter().collect()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Team(#[from] TeamError),
    #[error(transparent)]
    Incentive(#[from] IncentiveError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// 0 ok, 1 I/O, 2 config, 3 divergence, 4 matching, 5 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Incentive(IncentiveError::Matching { .. }) => 4,
            PipelineError::Incentive(IncentiveError::TerminalShape { .. }) => 2,
            PipelineError::Riccati(RiccatiError::InvalidGrid { .. } | RiccatiError::TerminalShape { .. }) => 2,
            PipelineError::Riccati(_)
            | PipelineError::Team(_)
            | PipelineError::Incentive(IncentiveError::Riccati(_))
            | PipelineError::Simulate(_)
            | PipelineError::Verify(_) => 3,
            PipelineError::VerificationFailed(_) => 5,
            PipelineError::Plot(PlotError::Io { .. }) | PipelineError::Io { .. } => 1,
            PipelineError::Plot(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub wall_ms: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    /// Emitted file name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// Convergence and check summaries, keyed `stage.quantity`.
    pub summary: BTreeMap<String, f64>,
    pub failure: Option<Failure>,
}

impl RunManifest {
    pub fn exit_code(&self) -> i32 {
        self.failure.as_ref().map_or(0, |f| f.exit_code)
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

// ---------------------------------------------------------------------------
// CSV helpers

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn entry_suffix(rows: usize, cols: usize, r: usize, c: usize) -> String {
    if rows == 1 && cols == 1 {
        String::new()
    } else {
        format!("_{}_{}", r + 1, c + 1)
    }
}

/// Column name of entry `(r, c)` of the gain of block `id`.
pub fn gain_header(id: ControlId, rows: usize, cols: usize, r: usize, c: usize) -> String {
    format!("{}_gain{}", id.label(), entry_suffix(rows, cols, r, c))
}

/// Inverse of [`gain_header`]; a missing entry suffix means `(0, 0)`.
pub fn parse_gain_header(h: &str) -> Option<(ControlId, usize, usize)> {
    let (label, rest) = h.split_once("_gain")?;
    let id = ControlId::parse_label(label)?;
    if rest.is_empty() {
        return Some((id, 0, 0));
    }
    let mut it = rest.strip_prefix('_')?.split('_');
    let r = it.next()?.parse::<usize>().ok()?.checked_sub(1)?;
    let c = it.next()?.parse::<usize>().ok()?.checked_sub(1)?;
    it.next().is_none().then_some((id, r, c))
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    fn to_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        let io = |e: csv::Error| PipelineError::Io { path: "csv".into(), message: e.to_string() };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.into_inner().map_err(|e| PipelineError::Io { path: "csv".into(), message: e.to_string() })
    }
}

/// Column-major time series: `t` followed by named columns.
struct Columns {
    t: Vec<f64>,
    cols: Vec<(String, Vec<f64>)>,
}

impl Columns {
    fn new(t: Vec<f64>) -> Self {
        Self { t, cols: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, v: Vec<f64>) {
        debug_assert_eq!(v.len(), self.t.len());
        self.cols.push((name.into(), v));
    }

    fn table(&self) -> Table {
        let mut header = vec!["t".to_string()];
        header.extend(self.cols.iter().map(|(n, _)| n.clone()));
        let mut table = Table::new(header);
        for k in 0..self.t.len() {
            let mut row = vec![fmt_num(self.t[k])];
            row.extend(self.cols.iter().map(|(_, v)| fmt_num(v[k])));
            table.rows.push(row);
        }
        table
    }

    fn series(&self, pick: impl Fn(&str) -> bool) -> Vec<Series> {
        self.cols.iter().filter(|(n, _)| pick(n)).map(|(n, v)| Series::new(n.clone(), &self.t, v)).collect()
    }
}

struct Emitter<'a> {
    dir: &'a Path,
    svg: bool,
    files: BTreeMap<String, String>,
    stage_files: Vec<String>,
}

impl Emitter<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| PipelineError::Io { path: path.display().to_string(), message: e.to_string() })?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        self.stage_files.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, table: &Table) -> Result<(), PipelineError> {
        let bytes = table.to_bytes()?;
        self.write(name, &bytes)
    }

    fn plot(&mut self, name: &str, plot: Plot) -> Result<(), PipelineError> {
        if !self.svg {
            return Ok(());
        }
        let path = self.dir.join(name);
        emit_plot(&plot, &path)?;
        let bytes = fs::read(&path).map_err(|e| PipelineError::Io { path: path.display().to_string(), message: e.to_string() })?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        self.stage_files.push(name.to_string());
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Refinement

fn hold<T: Clone>(v: &[T], r: usize, fine_nodes: usize) -> Vec<T> {
    if v.is_empty() || r == 1 {
        return v.to_vec();
    }
    (0..fine_nodes).map(|f| v[(f / r).min(v.len() - 1)].clone()).collect()
}

/// Team solution on a grid refined `r` times, every quantity held constant
/// from its coarse node.
pub fn hold_team(team: &TeamSolution, r: usize) -> Result<TeamSolution, RiccatiError> {
    let g = team.grid();
    let fine = TimeGrid::new(g.horizon, g.steps * r)?;
    let m = fine.nodes();
    Ok(TeamSolution {
        central: team.central.clone(),
        p: RiccatiPath { grid: fine, values: hold(&team.p.values, r, m), conditions: hold(&team.p.conditions, r, m) },
        lambda: hold(&team.lambda, r, m),
        kc: hold(&team.kc, r, m),
        kv: hold(&team.kv, r, m),
        a: hold(&team.a, r, m),
        b: hold(&team.b, r, m),
    })
}

pub fn hold_level1(l1: &Level1Solution, r: usize, fine_nodes: usize) -> Level1Solution {
    Level1Solution {
        params: hold(&l1.params, r, fine_nodes),
        xi: hold(&l1.xi, r, fine_nodes),
        pi: hold(&l1.pi, r, fine_nodes),
        sigma: hold(&l1.sigma, r, fine_nodes),
    }
}

pub fn hold_level2(l2: &Level2Solution, r: usize, fine_nodes: usize) -> Level2Solution {
    Level2Solution {
        params: hold(&l2.params, r, fine_nodes),
        theta: hold(&l2.theta, r, fine_nodes),
        phi: hold(&l2.phi, r, fine_nodes),
        psi: hold(&l2.psi, r, fine_nodes),
    }
}

// ---------------------------------------------------------------------------
// Series builders

fn real_entries(name: &str, path: &[RMat], cols: &mut Columns) {
    let (rows, ncols) = path[0].shape();
    for r in 0..rows {
        for c in 0..ncols {
            cols.push(format!("{name}{}", entry_suffix(rows, ncols, r, c)), path.iter().map(|m| m[(r, c)]).collect());
        }
    }
}

fn complex_entries(name: &str, path: &[&CMat], cols: &mut Columns, parts: bool) {
    let (rows, ncols) = path[0].shape();
    for r in 0..rows {
        for c in 0..ncols {
            let base = format!("{name}{}", entry_suffix(rows, ncols, r, c));
            if parts {
                cols.push(format!("{base}_re"), path.iter().map(|m| m[(r, c)].re).collect());
                cols.push(format!("{base}_im"), path.iter().map(|m| m[(r, c)].im).collect());
            }
            cols.push(format!("{base}_abs"), path.iter().map(|m| m[(r, c)].norm()).collect());
        }
    }
}

/// Feedback coefficients `F` with `u = F x̄` for every control block.
fn gain_columns(team: &TeamSolution) -> Columns {
    let mut cols = Columns::new(team.grid().times());
    for id in ControlId::all() {
        let path: Vec<RMat> = (0..team.kc.len()).map(|k| -team.gain(k, id)).collect();
        let (rows, ncols) = path[0].shape();
        for r in 0..rows {
            for c in 0..ncols {
                cols.push(gain_header(id, rows, ncols, r, c), path.iter().map(|m| m[(r, c)]).collect());
            }
        }
    }
    cols
}

fn level1_columns(t: Vec<f64>, l1: &Level1Solution, report: &MatchingReport, parts: bool) -> Columns {
    let mut cols = Columns::new(t);
    cols.push("residual", report.nodes.iter().map(|n| n.residual).collect());
    for i in 0..MANAGERS {
        for j in 0..EXECUTIVES {
            let tag = format!("{}_{}", i + 1, j + 1);
            complex_entries(&format!("eta_{tag}"), &l1.params.iter().map(|p| &p.eta[i][j]).collect::<Vec<_>>(), &mut cols, parts);
            complex_entries(&format!("zeta_{tag}"), &l1.params.iter().map(|p| &p.zeta[i][j]).collect::<Vec<_>>(), &mut cols, parts);
            complex_entries(&format!("xi_{tag}"), &l1.xi.iter().map(|x| &x[i][j]).collect::<Vec<_>>(), &mut cols, parts);
        }
    }
    cols
}

fn level2_columns(t: Vec<f64>, l2: &Level2Solution, report: &MatchingReport) -> Columns {
    let mut cols = Columns::new(t);
    cols.push("residual", report.nodes.iter().map(|n| n.residual).collect());
    for i in 0..MANAGERS {
        for j in 0..EXECUTIVES {
            let tag = format!("{}_{}", i + 1, j + 1);
            complex_entries(&format!("rho_{tag}"), &l2.params.iter().map(|p| &p.rho[i][j]).collect::<Vec<_>>(), &mut cols, true);
            complex_entries(&format!("theta_{tag}"), &l2.theta.iter().map(|x| &x[i][j]).collect::<Vec<_>>(), &mut cols, true);
        }
    }
    cols
}

/// Frobenius norm of the disturbance gain at each node.
pub fn disturbance_gain_norm(team: &TeamSolution) -> Vec<f64> {
    team.kv.iter().map(|k| k.norm()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSweepRow {
    pub gamma: f64,
    pub kv_norm: Vec<f64>,
    pub sup_kv: f64,
}

/// Solve the team problem once per attenuation level on a common grid.
pub fn gamma_sweep(spec: &ProblemSpec, grid: TimeGrid, gammas: &[f64], cap: f64) -> Result<Vec<GammaSweepRow>, RiccatiError> {
    gammas
        .iter()
        .map(|&g| {
            let mut s = spec.clone();
            s.gamma = g;
            let team = solve_team(&s, grid, cap)?;
            let kv_norm = disturbance_gain_norm(&team);
            let sup_kv = kv_norm.iter().copied().fold(0.0, f64::max);
            Ok(GammaSweepRow { gamma: g, kv_norm, sup_kv })
        })
        .collect()
}

fn cost_rows(table: &mut Table, mode: &str, report: &CostReport, analytic: Option<(f64, f64)>) {
    let mut row = |name: String, e: &Estimate, a: Option<f64>| {
        table.rows.push(vec![
            mode.to_string(),
            name,
            fmt_num(e.mean),
            fmt_num(e.se),
            a.map(fmt_num).unwrap_or_default(),
            report.n_paths.to_string(),
            report.seed.to_string(),
        ]);
    };
    row("J1".into(), &report.j1, analytic.map(|a| a.0));
    for (i, e) in report.j2.iter().enumerate() {
        row(format!("J2_{}", i + 1), e, None);
    }
    for (j, e) in report.j3.iter().enumerate() {
        row(format!("J3_{}", j + 1), e, None);
    }
    row("Jv".into(), &report.jv, analytic.map(|a| a.1));
}

fn verify_table(report: &VerificationReport, cfg: &RunConfig) -> Table {
    let mut t = Table::new(["check", "value", "threshold", "passed"].map(String::from).to_vec());
    let mut row = |name: &str, v: f64, thr: Option<f64>, ok: Option<bool>| {
        t.rows.push(vec![
            name.to_string(),
            fmt_num(v),
            thr.map(fmt_num).unwrap_or_default(),
            ok.map(|b| b.to_string()).unwrap_or_default(),
        ]);
    };
    row("p_residual", report.p_residual, Some(cfg.tolerances.p_residual), Some(report.verdict.p_residual));
    if let Some(v) = report.pi_residual {
        row("pi_residual", v, None, None);
    }
    if let Some(v) = report.phi_residual {
        row("phi_residual", v, None, None);
    }
    row("hinf_max_ratio", report.hinf.max_ratio, Some(report.hinf.gamma), Some(report.verdict.hinf));
    row("hinf_violations", report.hinf.violations as f64, Some(0.0), Some(report.verdict.hinf));
    if let Some(n) = &report.nash {
        row("nash_control_pass_rate", n.control_pass_rate, Some(n.config.min_pass_rate), Some(n.control_pass_rate >= n.config.min_pass_rate));
        row(
            "nash_disturbance_pass_rate",
            n.disturbance_pass_rate,
            Some(n.config.min_pass_rate),
            Some(n.disturbance_pass_rate >= n.config.min_pass_rate),
        );
    }
    if let Some(g) = &report.gram {
        for (i, v) in g.managers.iter().enumerate() {
            row(&format!("gram_min_manager_{}", i + 1), *v, Some(0.0), Some(*v > 0.0));
        }
        for (j, v) in g.executives.iter().enumerate() {
            row(&format!("gram_min_executive_{}", j + 1), *v, Some(0.0), Some(*v > 0.0));
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Pipeline

struct Run<'a> {
    cfg: &'a RunConfig,
    stages: Vec<Stage>,
    grid: Option<TimeGrid>,
    team: Option<TeamSolution>,
    incentive: Option<(Level1Solution, MatchingReport, Level2Solution, MatchingReport)>,
    summary: BTreeMap<String, f64>,
}

impl Run<'_> {
    fn team(&self) -> &TeamSolution {
        self.team.as_ref().expect("solve stage precedes its dependents")
    }

    fn stage(&mut self, stage: Stage, out: &mut Emitter) -> Result<(), PipelineError> {
        match stage {
            Stage::Validate => self.validate(),
            Stage::Solve => self.solve(out),
            Stage::Incentive => self.incentive(out),
            Stage::Simulate => self.simulate(out),
            Stage::Verify => self.verify(out),
            Stage::Sweep => self.sweep(out),
        }
    }

    fn validate(&mut self) -> Result<(), PipelineError> {
        self.cfg.validate()?;
        self.grid = Some(TimeGrid::new(self.cfg.spec().horizon, self.cfg.grid.steps)?);
        Ok(())
    }

    fn solve(&mut self, out: &mut Emitter) -> Result<(), PipelineError> {
        let spec = self.cfg.spec();
        let grid = self.grid.expect("validated");
        let team = solve_team(spec, grid, self.cfg.tolerances.condition_cap)?;
        let t = grid.times();

        let mut p = Columns::new(t.clone());
        real_entries("P", &team.p.values, &mut p);
        out.csv("p_path.csv", &p.table())?;

        let gains = gain_columns(&team);
        out.csv("gains.csv", &gains.table())?;

        let mut kv = Columns::new(t.clone());
        real_entries("v_gain", &team.kv, &mut kv);
        let norm = disturbance_gain_norm(&team);
        kv.push("v_gain_norm", norm.clone());
        out.csv("disturbance_gain.csv", &kv.table())?;

        out.plot("p_path.svg", p.series(|_| true).into_iter().fold(Plot::new("Riccati solution P", "P"), Plot::with))?;
        out.plot(
            "team_strategy.svg",
            gains.series(|_| true).into_iter().fold(Plot::new("Team strategy gains (u = F x)", "F"), Plot::with),
        )?;
        out.plot(
            "disturbance_gain.svg",
            kv.series(|n| n != "v_gain_norm").into_iter().fold(Plot::new("Worst-case disturbance gain", "Kv"), Plot::with),
        )?;

        self.summary.insert("solve.max_condition".into(), team.p.max_condition());
        self.summary.insert("solve.p0_norm".into(), team.p.values[0].norm());
        self.summary.insert("solve.sup_kv".into(), norm.iter().copied().fold(0.0, f64::max));
        self.team = Some(team);
        Ok(())
    }

    fn incentive(&mut self, out: &mut Emitter) -> Result<(), PipelineError> {
        let spec = self.cfg.spec();
        let team = self.team();
        let solver = self.cfg.solver();
        let (l1, r1) = level1_recursion(spec, team, &self.cfg.terminal.level1(), &solver)?;
        let (l2, r2) = level2_recursion(spec, team, &l1, &self.cfg.terminal.level2(), &solver)?;
        let id = incentive_identity_check(team, &l1, &l2);
        let t = team.grid().times();

        let c1 = level1_columns(t.clone(), &l1, &r1, true);
        out.csv("incentive_level1.csv", &c1.table())?;
        let c2 = level2_columns(t, &l2, &r2);
        out.csv("incentive_level2.csv", &c2.table())?;
        for (file, prefix, title) in [
            ("eta_moduli.svg", "eta_", "Leader incentive parameters |eta|"),
            ("zeta_moduli.svg", "zeta_", "Leader incentive parameters |zeta|"),
            ("xi_moduli.svg", "xi_", "Leader state coefficients |xi|"),
        ] {
            let s = c1.series(|n| n.starts_with(prefix) && n.ends_with("_abs"));
            out.plot(file, s.into_iter().fold(Plot::new(title, "modulus"), Plot::with))?;
        }
        for (file, prefix, title) in [
            ("rho_moduli.svg", "rho_", "Manager incentive parameters |rho|"),
            ("theta_moduli.svg", "theta_", "Manager state coefficients |theta|"),
        ] {
            let s = c2.series(|n| n.starts_with(prefix) && n.ends_with("_abs"));
            out.plot(file, s.into_iter().fold(Plot::new(title, "modulus"), Plot::with))?;
        }

        let max_imag1 = l1.params.iter().map(|p| p.max_imag()).fold(0.0, f64::max);
        let max_imag2 = l2.params.iter().map(|p| p.max_imag()).fold(0.0, f64::max);
        let s = &mut self.summary;
        s.insert("incentive.level1_max_residual".into(), r1.max_residual());
        s.insert("incentive.level1_max_imag".into(), max_imag1);
        s.insert("incentive.level1_flagged_jumps".into(), r1.flagged_jumps().len() as f64);
        s.insert("incentive.level2_max_residual".into(), r2.max_residual());
        s.insert("incentive.level2_max_imag".into(), max_imag2);
        s.insert("incentive.level2_flagged_jumps".into(), r2.flagged_jumps().len() as f64);
        s.insert("incentive.identity_level1".into(), id.level1);
        s.insert("incentive.identity_level2".into(), id.level2);
        self.incentive = Some((l1, r1, l2, r2));
        Ok(())
    }

    fn simulate(&mut self, out: &mut Emitter) -> Result<(), PipelineError> {
        let spec = self.cfg.spec();
        let r = self.cfg.grid.refinement;
        let team = hold_team(self.team(), r)?;
        let fine = team.grid();
        let noise = sample_brownian(fine, self.cfg.mc.n_paths, self.cfg.mc.seed)?;
        let seed = self.cfg.mc.seed;

        let mc = monte_carlo(spec, &team, &noise, Mode::Team)?;
        let analytic = analytic_costs(&team, &team.second_moment(spec)?, spec)?;
        let mut costs = Table::new(["mode", "functional", "mc_mean", "mc_se", "analytic", "n_paths", "seed"].map(String::from).to_vec());
        cost_rows(&mut costs, "team", &CostReport::from_paths(&mc.costs, seed), Some((analytic.j1_star, analytic.jv_star)));

        let t = fine.times();
        let n = spec.n();
        let mut traj = Columns::new(t.clone());
        for d in 0..n {
            traj.push(format!("x_{}_mean", d + 1), mc.bands.mean.iter().map(|m| m[d]).collect());
            traj.push(format!("x_{}_std", d + 1), mc.bands.std.iter().map(|m| m[d]).collect());
        }
        self.summary.insert("simulate.max_abs_state".into(), mc.max_abs_state);
        self.summary.insert("simulate.j1_analytic".into(), analytic.j1_star);
        self.summary.insert("simulate.jv_analytic".into(), analytic.jv_star);

        if let Some((l1, _, l2, _)) = &self.incentive {
            let m = fine.nodes();
            let (l1, l2) = (hold_level1(l1, r, m), hold_level2(l2, r, m));
            let mode = Mode::Incentive { level1: &l1, level2: &l2 };
            let inc = monte_carlo(spec, &team, &noise, mode)?;
            cost_rows(&mut costs, "incentive", &CostReport::from_paths(&inc.costs, seed), None);
            for d in 0..n {
                traj.push(format!("incentive_x_{}_mean", d + 1), inc.bands.mean.iter().map(|m| m[d]).collect());
                traj.push(format!("incentive_x_{}_std", d + 1), inc.bands.std.iter().map(|m| m[d]).collect());
            }
            let few = sample_brownian(fine, self.cfg.mc.n_paths.min(GAP_PATHS), seed)?;
            let a = simulate_hierarchy(spec, &team, &few, Mode::Team)?;
            let b = simulate_hierarchy(spec, &team, &few, mode)?;
            let gap = a.paths.iter().zip(&b.paths).flat_map(|(p, q)| p.x.iter().zip(&q.x).map(|(u, v)| (u - v).abs())).fold(0.0, f64::max);
            self.summary.insert("simulate.trajectory_gap".into(), gap / (1.0 + a.max_abs_state()));
        }
        out.csv("trajectories.csv", &traj.table())?;
        out.csv("costs.csv", &costs)?;

        let mut plot = Plot::new("State trajectory (mean and one standard deviation)", "x");
        for d in 0..n {
            let mean: Vec<f64> = mc.bands.mean.iter().map(|m| m[d]).collect();
            let std: Vec<f64> = mc.bands.std.iter().map(|m| m[d]).collect();
            let hi: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m + s).collect();
            let lo: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m - s).collect();
            plot = plot
                .with(Series::new(format!("x_{} mean", d + 1), &t, &mean))
                .with(Series::new(format!("x_{} + std", d + 1), &t, &hi).dashed())
                .with(Series::new(format!("x_{} - std", d + 1), &t, &lo).dashed());
        }
        out.plot("trajectory.svg", plot)
    }

    fn verify(&mut self, out: &mut Emitter) -> Result<(), PipelineError> {
        let spec = self.cfg.spec();
        let team = self.team();
        let inc = self.incentive.as_ref().map(|(l1, _, l2, _)| (l1, l2));
        let report = verify_all(spec, team, inc, self.cfg.verify.nash, &self.cfg.verify_config())?;
        out.csv("verify.csv", &verify_table(&report, self.cfg))?;
        let s = &mut self.summary;
        s.insert("verify.p_residual".into(), report.p_residual);
        s.insert("verify.hinf_max_ratio".into(), report.hinf.max_ratio);
        if let Some(n) = &report.nash {
            s.insert("verify.nash_control_pass_rate".into(), n.control_pass_rate);
            s.insert("verify.nash_disturbance_pass_rate".into(), n.disturbance_pass_rate);
        }
        if let Some(g) = &report.gram {
            s.insert("verify.gram_min".into(), g.min());
        }
        if !report.verdict.pass {
            let v = report.verdict;
            return Err(PipelineError::VerificationFailed(format!(
                "p_residual={} hinf={} nash={:?} gram={:?}",
                v.p_residual, v.hinf, v.nash, v.gram
            )));
        }
        Ok(())
    }

    fn sweep(&mut self, out: &mut Emitter) -> Result<(), PipelineError> {
        let spec = self.cfg.spec();
        let grid = self.team().grid();
        let t = grid.times();
        let sweeps = &self.cfg.sweeps;
        if !sweeps.gamma.is_empty() {
            let rows = gamma_sweep(spec, grid, &sweeps.gamma, self.cfg.tolerances.condition_cap)?;
            let mut cols = Columns::new(t.clone());
            for row in &rows {
                cols.push(format!("v_gain_norm_gamma_{}", row.gamma), row.kv_norm.clone());
                self.summary.insert(format!("sweep.gamma_{}.sup_kv", row.gamma), row.sup_kv);
            }
            out.csv("gamma_sweep.csv", &cols.table())?;
            out.plot(
                "gamma_sweep.svg",
                cols.series(|_| true).into_iter().fold(Plot::new("Disturbance gain across attenuation levels", "|Kv|"), Plot::with),
            )?;
        }
        if !sweeps.terminal_scale.is_empty() {
            let mut scales = vec![1.0];
            scales.extend(sweeps.terminal_scale.iter().copied().filter(|s| *s != 1.0));
            let base = self.cfg.terminal.level1();
            let mut cols = Columns::new(t.clone());
            for &s in &scales {
                let (l1, rep) = level1_recursion(spec, self.team(), &scale_level1(&base, s), &self.cfg.solver())?;
                self.summary.insert(format!("sweep.scale_{s}.level1_max_residual"), rep.max_residual());
                let c = level1_columns(t.clone(), &l1, &rep, false);
                for (name, v) in c.cols.into_iter().filter(|(n, _)| !n.starts_with("xi_") && n != "residual") {
                    cols.push(format!("{name}_scale_{s}"), v);
                }
            }
            out.csv("terminal_scale.csv", &cols.table())?;
            for (file, prefix, title) in [
                ("terminal_scale_eta.svg", "eta_", "Terminal-scale sensitivity of |eta|"),
                ("terminal_scale_zeta.svg", "zeta_", "Terminal-scale sensitivity of |zeta|"),
            ] {
                let series = cols
                    .cols
                    .iter()
                    .filter(|(n, _)| n.starts_with(prefix))
                    .map(|(n, v)| {
                        let s = Series::new(n.clone(), &t, v);
                        if n.ends_with("_scale_1") { s } else { s.dashed() }
                    })
                    .fold(Plot::new(title, "modulus"), Plot::with);
                out.plot(file, series)?;
            }
        }
        Ok(())
    }
}

/// Run the requested stages and their prerequisites, writing artifacts and
/// `manifest.json` to the configured output directory. A failed stage halts
/// every later stage; the manifest records how far the run got.
pub fn run_pipeline(cfg: &RunConfig, requested: &[Stage]) -> RunManifest {
    let dir: PathBuf = cfg.outputs.dir.clone();
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        stages: Vec::new(),
        files: BTreeMap::new(),
        summary: BTreeMap::new(),
        failure: None,
    };
    let stages = stage_closure(requested);
    if let Err(e) = fs::create_dir_all(&dir) {
        manifest.failure = Some(Failure { stage: stages.first().copied().unwrap_or(Stage::Validate), exit_code: 1, message: e.to_string() });
        return manifest;
    }
    let mut run = Run { cfg, stages: stages.clone(), grid: None, team: None, incentive: None, summary: BTreeMap::new() };
    let mut out = Emitter { dir: &dir, svg: cfg.outputs.svg, files: BTreeMap::new(), stage_files: Vec::new() };
    for &stage in &run.stages.clone() {
        if manifest.failure.is_some() {
            manifest.stages.push(StageRecord { stage, status: StageStatus::Skipped, wall_ms: 0.0, files: Vec::new() });
            continue;
        }
        let start = Instant::now();
        let result = run.stage(stage, &mut out);
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let files = std::mem::take(&mut out.stage_files);
        let status = match result {
            Ok(()) => StageStatus::Completed,
            Err(e) => {
                manifest.failure = Some(Failure { stage, exit_code: e.exit_code(), message: e.to_string() });
                StageStatus::Failed
            }
        };
        manifest.stages.push(StageRecord { stage, status, wall_ms, files });
    }
    manifest.files = out.files;
    manifest.summary = run.summary;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = fs::write(&path, text) {
        if manifest.failure.is_none() {
            manifest.failure = Some(Failure {
                stage: *stages.last().unwrap_or(&Stage::Validate),
                exit_code: 1,
                message: format!("cannot write {}: {e}", path.display()),
            });
        }
    }
    manifest
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_adds_prerequisites_in_order() {
        assert_eq!(stage_closure(&[Stage::Solve]), vec![Stage::Validate, Stage::Solve]);
        assert_eq!(
            stage_closure(&[Stage::Verify, Stage::Simulate]),
            vec![Stage::Validate, Stage::Solve, Stage::Incentive, Stage::Simulate, Stage::Verify]
        );
        assert_eq!(stage_closure(&Stage::ALL), Stage::ALL.to_vec());
    }

    #[test]
    fn gain_headers_round_trip() {
        for id in ControlId::all() {
            assert_eq!(parse_gain_header(&gain_header(id, 1, 1, 0, 0)), Some((id, 0, 0)));
            assert_eq!(parse_gain_header(&gain_header(id, 2, 3, 1, 2)), Some((id, 1, 2)));
        }
        assert_eq!(gain_header(ControlId::Manager { i: 1, j: 0 }, 1, 1, 0, 0), "u_2_2_1_gain");
        assert_eq!(parse_gain_header("u_2_1_3_gain"), Some((ControlId::Manager { i: 0, j: 2 }, 0, 0)));
        assert_eq!(parse_gain_header("u_4_1_gain"), None);
        assert_eq!(parse_gain_header("u_1_1_gain_0_1"), None);
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn hold_repeats_coarse_values() {
        let v = vec![1, 2, 3];
        assert_eq!(hold(&v, 2, 5), vec![1, 1, 2, 2, 3]);
        assert_eq!(hold(&v, 1, 3), v);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::VerificationFailed(String::new()).exit_code(), 5);
        assert_eq!(PipelineError::Incentive(IncentiveError::Matching { level: 1, node: 0, residual: 1.0 }).exit_code(), 4);
        assert_eq!(PipelineError::Riccati(RiccatiError::Divergence { flow: "P", node: 3 }).exit_code(), 3);
        assert_eq!(PipelineError::Config(ConfigError::Invalid { field: "x", message: String::new() }).exit_code(), 2);
        assert_eq!(PipelineError::Io { path: String::new(), message: String::new() }.exit_code(), 1);
    }
}
