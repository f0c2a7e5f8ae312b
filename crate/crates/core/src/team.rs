//! Team-optimal synthesis on top of the `P` flow.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::RMat;
use crate::model::{assemble_centralized, CentralizedForm, ControlId, NodeTeamData, ProblemSpec};
use crate::riccati::{second_moment, solve_p, RiccatiError, RiccatiPath, SecondMomentPath, TeamFlow, TimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeamError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("second-moment path has {found} nodes, the team solution has {expected}")]
    GridMismatch { found: usize, expected: usize },
}

#[derive(Debug, Clone)]
pub struct TeamSolution {
    pub central: CentralizedForm,
    pub p: RiccatiPath<RMat>,
    pub lambda: Vec<RMat>,
    /// `u*_c = −Kc x̄`
    pub kc: Vec<RMat>,
    /// `v* = Kv x̄`
    pub kv: Vec<RMat>,
    /// Closed-loop drift.
    pub a: Vec<RMat>,
    /// Closed-loop diffusion.
    pub b: Vec<RMat>,
}

impl TeamSolution {
    pub fn grid(&self) -> TimeGrid {
        self.p.grid
    }

    pub fn node(&self, k: usize) -> NodeTeamData {
        NodeTeamData { p: self.p.values[k].clone(), lambda: self.lambda[k].clone(), kc: self.kc[k].clone() }
    }

    /// Gain of one control block at node `k` (enters as `u = −K x̄`).
    pub fn gain(&self, k: usize, id: ControlId) -> RMat {
        self.central.slice_rows(&self.kc[k], id)
    }

    pub fn second_moment(&self, spec: &ProblemSpec) -> Result<SecondMomentPath, RiccatiError> {
        second_moment(&self.a, &self.b, &spec.x0, self.grid())
    }
}

/// `Λ` at one node via the guarded inverse.
pub fn compute_lambda(
    p: &RMat,
    spec: &ProblemSpec,
    central: &CentralizedForm,
    node: usize,
    cap: f64,
) -> Result<RMat, RiccatiError> {
    TeamFlow::new(spec, central, cap).lambda(p, node).map(|(l, _)| l)
}

pub fn team_gains(
    p: RiccatiPath<RMat>,
    spec: &ProblemSpec,
    central: &CentralizedForm,
    cap: f64,
) -> Result<TeamSolution, RiccatiError> {
    let flow = TeamFlow::new(spec, central, cap);
    let nodes = p.values.len();
    let (mut lambda, mut kc, mut kv, mut a, mut b) = (
        Vec::with_capacity(nodes),
        Vec::with_capacity(nodes),
        Vec::with_capacity(nodes),
        Vec::with_capacity(nodes),
        Vec::with_capacity(nodes),
    );
    let g2 = spec.gamma * spec.gamma;
    for (k, pk) in p.values.iter().enumerate() {
        let (l, _) = flow.lambda(pk, k)?;
        let gain = &central.rc_inv * (central.bc.transpose() * pk + central.dc.transpose() * &l);
        a.push(&spec.a + spec.attenuation_term(pk) - &central.bc * &gain);
        b.push(&spec.c - &central.dc * &gain);
        kv.push(spec.e.transpose() * pk / g2);
        kc.push(gain);
        lambda.push(l);
    }
    Ok(TeamSolution { central: central.clone(), p, lambda, kc, kv, a, b })
}

/// Assemble, integrate `P` and extract every team quantity.
pub fn solve_team(spec: &ProblemSpec, grid: TimeGrid, cap: f64) -> Result<TeamSolution, RiccatiError> {
    let central = assemble_centralized(spec);
    let p = solve_p(spec, &central, grid, cap)?;
    team_gains(p, spec, &central, cap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticCosts {
    pub j1_star: f64,
    pub jv_star: f64,
    /// `ȳ(0) = P(0) x0`
    pub y0: Vec<f64>,
}

pub fn analytic_costs(team: &TeamSolution, x: &SecondMomentPath, spec: &ProblemSpec) -> Result<AnalyticCosts, TeamError> {
    let nodes = team.p.values.len();
    if x.values.len() != nodes {
        return Err(TeamError::GridMismatch { found: x.values.len(), expected: nodes });
    }
    let p0 = &team.p.values[0];
    let y0 = p0 * &spec.x0;
    let quad = spec.x0.dot(&y0);
    let g2 = spec.gamma * spec.gamma;
    let integrand: Vec<f64> = team
        .p
        .values
        .iter()
        .zip(&x.values)
        .map(|(p, xk)| (spec.e.transpose() * p * xk * p * &spec.e).trace() / g2)
        .collect();
    let dt = team.grid().dt();
    let integral: f64 = integrand.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
    Ok(AnalyticCosts { j1_star: quad + integral, jv_star: -quad, y0: y0.iter().copied().collect() })
}
