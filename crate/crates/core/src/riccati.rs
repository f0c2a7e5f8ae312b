//! Backward Riccati flows: the team flow `P`, the stacked follower flows
//! `Π` (managers, 2n×n) and `Φ` (executives, 3n×n) with their diffusion
//! companions `Σ`/`Ψ`, and the forward second-moment flow.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{
    complexify, guarded_inverse_c, guarded_inverse_r, hcat_c, is_finite_c, is_finite_r, symmetrize, vcat_c, CMat,
    RMat, RVec,
};
use crate::model::{CentralizedForm, ExecutiveView, ManagerView, ProblemSpec};

pub const DEFAULT_CONDITION_CAP: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("time grid needs at least 2 steps and a positive horizon (got N={steps}, T={horizon})")]
    InvalidGrid { steps: usize, horizon: f64 },
    #[error("{flow} flow diverged at node {node}: non-finite entry (gamma may not be large enough)")]
    Divergence { flow: &'static str, node: usize },
    #[error("{what} at node {node} has condition number {condition:e}, above the cap {cap:e}")]
    Invertibility { what: &'static str, node: usize, condition: f64, cap: f64 },
    #[error("terminal value has shape {found:?}, expected {expected:?}")]
    TerminalShape { found: (usize, usize), expected: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, RiccatiError> {
        if steps < 2 || !(horizon.is_finite() && horizon > 0.0) {
            return Err(RiccatiError::InvalidGrid { steps, horizon });
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|k| self.t(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    ExplicitEuler,
    Rk4,
}

/// Values of a flow at every grid node, with the condition numbers of the
/// factors inverted at each node (empty when the flow inverts nothing).
#[derive(Debug, Clone)]
pub struct RiccatiPath<M> {
    pub grid: TimeGrid,
    pub values: Vec<M>,
    pub conditions: Vec<f64>,
}

impl<M> RiccatiPath<M> {
    pub fn max_condition(&self) -> f64 {
        self.conditions.iter().copied().fold(1.0, f64::max)
    }
}

/// Integrate `Ṁ = rhs(k, M)` backward from `values[N] = terminal`. `k` is the
/// right endpoint of the step; every stage of a step sees the same `k`.
/// With `symmetric` set, each new value is replaced by its symmetric part.
pub fn integrate_backward<F>(
    mut rhs: F,
    terminal: RMat,
    grid: TimeGrid,
    method: Method,
    flow: &'static str,
    symmetric: bool,
) -> Result<RiccatiPath<RMat>, RiccatiError>
where
    F: FnMut(usize, &RMat) -> Result<RMat, RiccatiError>,
{
    let n = grid.steps;
    let h = grid.dt();
    let mut values = vec![RMat::zeros(0, 0); n + 1];
    values[n] = terminal;
    for k in (1..=n).rev() {
        let m = &values[k];
        let next = match method {
            Method::ExplicitEuler => m - rhs(k, m)? * h,
            Method::Rk4 => {
                let k1 = rhs(k, m)?;
                let k2 = rhs(k, &(m - &k1 * (h / 2.0)))?;
                let k3 = rhs(k, &(m - &k2 * (h / 2.0)))?;
                let k4 = rhs(k, &(m - &k3 * h))?;
                m - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        };
        if !is_finite_r(&next) {
            return Err(RiccatiError::Divergence { flow, node: k - 1 });
        }
        values[k - 1] = if symmetric { symmetrize(&next) } else { next };
    }
    Ok(RiccatiPath { grid, values, conditions: Vec::new() })
}

/// Constant coefficients of the team flow, precomputed once.
#[derive(Debug, Clone)]
pub struct TeamFlow {
    a: RMat,
    c: RMat,
    q1: RMat,
    /// `Bc Rc⁻¹ Bcᵀ − γ⁻² E Eᵀ`
    s: RMat,
    /// `Dc Rc⁻¹ Dcᵀ`
    drd: RMat,
    /// `Dc Rc⁻¹ Bcᵀ`
    drb: RMat,
    pub cap: f64,
}

impl TeamFlow {
    pub fn new(spec: &ProblemSpec, central: &CentralizedForm, cap: f64) -> Self {
        let g2 = spec.gamma * spec.gamma;
        let s = &central.bc * &central.rc_inv * central.bc.transpose() - &spec.e * spec.e.transpose() / g2;
        Self {
            a: spec.a.clone(),
            c: spec.c.clone(),
            q1: spec.q1.clone(),
            s,
            drd: &central.dc * &central.rc_inv * central.dc.transpose(),
            drb: &central.dc * &central.rc_inv * central.bc.transpose(),
            cap,
        }
    }

    /// `Λ = (I + P Dc Rc⁻¹ Dcᵀ)⁻¹ P (C − Dc Rc⁻¹ Bcᵀ P)` and the condition
    /// number of the inverted factor.
    pub fn lambda(&self, p: &RMat, node: usize) -> Result<(RMat, f64), RiccatiError> {
        let n = p.nrows();
        let factor = RMat::identity(n, n) + p * &self.drd;
        let (inv, cond) = guarded_inverse_r(&factor, self.cap).ok_or_else(|| RiccatiError::Invertibility {
            what: "I + P Dc Rc^-1 Dc^T",
            node,
            condition: crate::linalg::condition_r(&factor),
            cap: self.cap,
        })?;
        Ok((inv * p * (&self.c - &self.drb * p), cond))
    }

    /// Time derivative `Ṗ` at the given value.
    pub fn rhs(&self, p: &RMat, node: usize) -> Result<RMat, RiccatiError> {
        let (lambda, _) = self.lambda(p, node)?;
        let closed = &self.c - &self.drb * p;
        let inner = p * &self.a + self.a.transpose() * p - p * &self.s * p + &self.q1 + closed.transpose() * lambda;
        Ok(-inner)
    }
}

pub fn solve_p(
    spec: &ProblemSpec,
    central: &CentralizedForm,
    grid: TimeGrid,
    cap: f64,
) -> Result<RiccatiPath<RMat>, RiccatiError> {
    solve_p_with(spec, central, grid, cap, Method::Rk4)
}

pub fn solve_p_with(
    spec: &ProblemSpec,
    central: &CentralizedForm,
    grid: TimeGrid,
    cap: f64,
    method: Method,
) -> Result<RiccatiPath<RMat>, RiccatiError> {
    let flow = TeamFlow::new(spec, central, cap);
    let n = spec.n();
    if spec.g1.shape() != (n, n) {
        return Err(RiccatiError::TerminalShape { found: spec.g1.shape(), expected: (n, n) });
    }
    let mut path = integrate_backward(|k, p| flow.rhs(p, k), spec.g1.clone(), grid, method, "P", true)?;
    path.conditions = path
        .values
        .iter()
        .enumerate()
        .map(|(k, p)| flow.lambda(p, k).map(|(_, c)| c))
        .collect::<Result<_, _>>()?;
    Ok(path)
}

/// One player of a stacked follower level: input, diffusion input, state
/// weight, cross weight and control weight in the player's effective problem.
#[derive(Debug, Clone)]
pub struct FollowerBlock {
    pub b: CMat,
    pub d: CMat,
    pub q: CMat,
    pub s: CMat,
    pub r: CMat,
}

/// A Nash level of followers sharing drift `a` and diffusion `c`.
#[derive(Debug, Clone)]
pub struct FollowerLevel {
    pub a: CMat,
    pub c: CMat,
    pub players: Vec<FollowerBlock>,
}

impl FollowerLevel {
    pub fn from_managers(view: &ManagerView) -> Self {
        Self {
            a: view.abar.clone(),
            c: view.cbar.clone(),
            players: view
                .managers
                .iter()
                .map(|m| FollowerBlock { b: m.bbar.clone(), d: m.dbar.clone(), q: m.qbar.clone(), s: m.s.clone(), r: m.rc.clone() })
                .collect(),
        }
    }

    pub fn from_executives(view: &ExecutiveView) -> Self {
        Self {
            a: view.ahat.clone(),
            c: view.chat.clone(),
            players: view
                .executives
                .iter()
                .map(|e| FollowerBlock { b: e.bhat.clone(), d: e.dhat.clone(), q: e.qhat.clone(), s: e.s.clone(), r: e.r.clone() })
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

/// Coefficient matrices of the stacked flow, built from a [`FollowerLevel`].
#[derive(Debug, Clone)]
pub struct StackedCoefficients {
    pub r_inv: Vec<CMat>,
    /// `Ā − Σ B̄ R⁻¹ Sᵀ`
    pub a_shift: CMat,
    /// `Σ D̄ R⁻¹ Sᵀ`
    pub d_rs: CMat,
    pub c: CMat,
    pub bb1: CMat,
    pub bb2: CMat,
    pub dd1: CMat,
    pub dd2: CMat,
    /// Block diagonal of `Ā − B̄ R⁻¹ Sᵀ` per player.
    pub aa: CMat,
    /// Block diagonal of `C̄ − D̄ R⁻¹ Sᵀ` per player.
    pub cc: CMat,
    /// Stack of `Q̄ − S R⁻¹ Sᵀ` per player.
    pub qq: CMat,
    pub max_condition: f64,
}

impl StackedCoefficients {
    pub fn new(level: &FollowerLevel, node: usize, cap: f64) -> Result<Self, RiccatiError> {
        let n = level.n();
        let mut r_inv = Vec::new();
        let mut max_condition: f64 = 1.0;
        let (mut bb1, mut bb2, mut dd1, mut dd2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut aa, mut cc, mut qq) = (Vec::new(), Vec::new(), Vec::new());
        let mut a_shift = level.a.clone();
        let mut d_rs = CMat::zeros(n, n);
        for p in &level.players {
            let (inv, cond) = guarded_inverse_c(&p.r, cap).ok_or_else(|| RiccatiError::Invertibility {
                what: "follower control weight",
                node,
                condition: crate::linalg::condition_c(&p.r),
                cap,
            })?;
            max_condition = max_condition.max(cond);
            let st = p.s.transpose();
            let brs = &p.b * &inv * &st;
            let drs = &p.d * &inv * &st;
            a_shift -= &brs;
            d_rs += &drs;
            bb1.push(-(&p.b * &inv * p.b.transpose()));
            bb2.push(-(&p.b * &inv * p.d.transpose()));
            dd1.push(-(&p.d * &inv * p.b.transpose()));
            dd2.push(-(&p.d * &inv * p.d.transpose()));
            aa.push(&level.a - brs);
            cc.push(&level.c - drs);
            qq.push(&p.q - &p.s * &inv * &st);
            r_inv.push(inv);
        }
        Ok(Self {
            r_inv,
            a_shift,
            d_rs,
            c: level.c.clone(),
            bb1: hcat_c(&refs(&bb1), n),
            bb2: hcat_c(&refs(&bb2), n),
            dd1: hcat_c(&refs(&dd1), n),
            dd2: hcat_c(&refs(&dd2), n),
            aa: crate::linalg::block_diag_c(&refs(&aa)),
            cc: crate::linalg::block_diag_c(&refs(&cc)),
            qq: vcat_c(&refs(&qq), n),
            max_condition,
        })
    }

    /// Diffusion companion `Σ = (I − Π𝔻₂)⁻¹(ΠC̄ − Π Σ D̄R⁻¹Sᵀ + Π𝔻₁Π)`.
    pub fn extract(&self, pi: &CMat, node: usize, cap: f64) -> Result<(CMat, f64), RiccatiError> {
        let k = pi.nrows();
        let factor = CMat::identity(k, k) - pi * &self.dd2;
        let rhs = pi * &self.c - pi * &self.d_rs + pi * &self.dd1 * pi;
        if self.dd2.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
            return Ok((rhs, 1.0));
        }
        let (inv, cond) = guarded_inverse_c(&factor, cap).ok_or_else(|| RiccatiError::Invertibility {
            what: "I - Pi D2",
            node,
            condition: crate::linalg::condition_c(&factor),
            cap,
        })?;
        Ok((inv * rhs, cond))
    }

    /// Minus the time derivative of the stacked flow at `(Π, Σ)`.
    pub fn drift(&self, pi: &CMat, sigma: &CMat) -> CMat {
        pi * &self.a_shift + pi * &self.bb1 * pi + self.aa.transpose() * pi + &self.qq
            + (self.cc.transpose() + pi * &self.bb2) * sigma
    }
}

fn refs(v: &[CMat]) -> Vec<&CMat> {
    v.iter().collect()
}

/// Result of one backward step of a stacked flow.
#[derive(Debug, Clone)]
pub struct StackedStep {
    pub left: CMat,
    pub sigma_right: CMat,
    pub condition: f64,
}

/// One backward explicit-Euler step with coefficients frozen at the right node.
pub fn step_stacked(
    coeffs: &StackedCoefficients,
    right: &CMat,
    dt: f64,
    node: usize,
    cap: f64,
    flow: &'static str,
) -> Result<StackedStep, RiccatiError> {
    let (sigma, cond) = coeffs.extract(right, node, cap)?;
    let left = right + coeffs.drift(right, &sigma) * Complex64::new(dt, 0.0);
    if !is_finite_c(&left) || !is_finite_c(&sigma) {
        return Err(RiccatiError::Divergence { flow, node: node.saturating_sub(1) });
    }
    Ok(StackedStep { left, sigma_right: sigma, condition: cond.max(coeffs.max_condition) })
}

pub fn step_pi(view: &ManagerView, pi_right: &CMat, dt: f64, node: usize, cap: f64) -> Result<StackedStep, RiccatiError> {
    let coeffs = StackedCoefficients::new(&FollowerLevel::from_managers(view), node, cap)?;
    step_stacked(&coeffs, pi_right, dt, node, cap, "Pi")
}

pub fn step_phi(
    view: &ExecutiveView,
    phi_right: &CMat,
    dt: f64,
    node: usize,
    cap: f64,
) -> Result<StackedStep, RiccatiError> {
    let coeffs = StackedCoefficients::new(&FollowerLevel::from_executives(view), node, cap)?;
    step_stacked(&coeffs, phi_right, dt, node, cap, "Phi")
}

/// Stacked terminal value `col(G_1, …, G_k)`.
pub fn stacked_terminal(blocks: &[RMat]) -> CMat {
    let c: Vec<CMat> = blocks.iter().map(complexify).collect();
    let n = blocks.first().map_or(0, |b| b.ncols());
    vcat_c(&c.iter().collect::<Vec<_>>(), n)
}

#[derive(Debug, Clone)]
pub struct SecondMomentPath {
    pub grid: TimeGrid,
    pub values: Vec<RMat>,
}

/// Forward RK4 for `Ẋ = aX + Xaᵀ + bXbᵀ` from `x0 x0ᵀ`, with `a`, `b`
/// linearly interpolated between nodes.
pub fn second_moment(a: &[RMat], b: &[RMat], x0: &RVec, grid: TimeGrid) -> Result<SecondMomentPath, RiccatiError> {
    let n = grid.steps;
    let h = grid.dt();
    let f = |a: &RMat, b: &RMat, x: &RMat| a * x + x * a.transpose() + b * x * b.transpose();
    let mut values = Vec::with_capacity(n + 1);
    values.push(x0 * x0.transpose());
    for k in 0..n {
        let x = &values[k];
        let am = (&a[k] + &a[k + 1]) * 0.5;
        let bm = (&b[k] + &b[k + 1]) * 0.5;
        let k1 = f(&a[k], &b[k], x);
        let k2 = f(&am, &bm, &(x + &k1 * (h / 2.0)));
        let k3 = f(&am, &bm, &(x + &k2 * (h / 2.0)));
        let k4 = f(&a[k + 1], &b[k + 1], &(x + &k3 * h));
        let next = symmetrize(&(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
        if !is_finite_r(&next) {
            return Err(RiccatiError::Divergence { flow: "X", node: k + 1 });
        }
        values.push(next);
    }
    Ok(SecondMomentPath { grid, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_centralized, Dimensions};

    fn scalar(v: f64) -> RMat {
        RMat::from_element(1, 1, v)
    }

    #[test]
    fn zero_rhs_keeps_terminal() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let path = integrate_backward(|_, m| Ok(m * 0.0), RMat::identity(2, 2), grid, Method::Rk4, "t", false).unwrap();
        assert!(path.values.iter().all(|v| *v == RMat::identity(2, 2)));
    }

    #[test]
    fn linear_scalar_matches_closed_form() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        // Ṗ = 2P − 1, P(1) = 0
        let path = integrate_backward(|_, p| Ok(p * 2.0 - scalar(1.0)), scalar(0.0), grid, Method::Rk4, "t", false).unwrap();
        assert!((path.values[0][(0, 0)] - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-6);
        // Ṗ = −2P − 1, P(1) = 0
        let path = integrate_backward(|_, p| Ok(p * -2.0 - scalar(1.0)), scalar(0.0), grid, Method::Rk4, "t", false).unwrap();
        assert!((path.values[0][(0, 0)] - (2.0f64.exp() - 1.0) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let rhs = |_: usize, p: &RMat| Ok(p.map(|x| -(x * x) - 1.0));
        let run = |n| integrate_backward(rhs, scalar(0.5), TimeGrid::new(1.0, n).unwrap(), Method::Rk4, "t", false).unwrap();
        let fine = run(3200).values[0][(0, 0)];
        let e1 = (run(20).values[0][(0, 0)] - fine).abs();
        let e2 = (run(40).values[0][(0, 0)] - fine).abs();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn grid_rejects_single_step() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }

    #[test]
    fn p_is_zero_without_weights() {
        let spec = ProblemSpec::zeros(Dimensions::scalar());
        let c = assemble_centralized(&spec);
        let path = solve_p(&spec, &c, TimeGrid::new(1.0, 20).unwrap(), DEFAULT_CONDITION_CAP).unwrap();
        assert!(path.values.iter().all(|p| p[(0, 0)] == 0.0));
    }

    #[test]
    fn p_is_constant_identity_without_dynamics() {
        let mut dims = Dimensions::scalar();
        dims.n = 2;
        let mut spec = ProblemSpec::zeros(dims);
        spec.g1 = RMat::identity(2, 2);
        let c = assemble_centralized(&spec);
        let path = solve_p(&spec, &c, TimeGrid::new(1.0, 20).unwrap(), DEFAULT_CONDITION_CAP).unwrap();
        assert!(path.values.iter().all(|p| *p == RMat::identity(2, 2)));
    }

    #[test]
    fn benchmark_p_matches_fine_grid_reference() {
        let spec = ProblemSpec::scalar_benchmark();
        let c = assemble_centralized(&spec);
        let path = solve_p(&spec, &c, TimeGrid::new(0.8, 400).unwrap(), DEFAULT_CONDITION_CAP).unwrap();
        assert_eq!(path.values[400][(0, 0)], 1.0);
        // independent N = 40000 integration of the scalar equation
        assert!((path.values[0][(0, 0)] - 0.387_862_697_645_659_84).abs() < 1e-9);
        assert!(path.max_condition() < DEFAULT_CONDITION_CAP);
    }

    #[test]
    fn divergence_reports_node() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let err = integrate_backward(|_, p| Ok(p.map(|x| -1e200 * x * x)), scalar(1.0), grid, Method::ExplicitEuler, "t", false)
            .unwrap_err();
        assert!(matches!(err, RiccatiError::Divergence { .. }));
    }

    #[test]
    fn second_moment_scalar_closed_form() {
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let a = vec![scalar(0.3); 201];
        let b = vec![scalar(0.5); 201];
        let x0 = RVec::from_element(1, 2.0);
        let path = second_moment(&a, &b, &x0, grid).unwrap();
        let exact = 4.0 * (2.0 * 0.3 + 0.25f64).exp();
        assert!((path.values[200][(0, 0)] - exact).abs() < 1e-6);
    }

    #[test]
    fn second_moment_trivial_cases() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let z = vec![RMat::zeros(2, 2); 11];
        let x0 = RVec::from_vec(vec![1.0, -2.0]);
        let path = second_moment(&z, &z, &x0, grid).unwrap();
        assert!(path.values.iter().all(|x| *x == &x0 * x0.transpose()));
        let a = vec![RMat::identity(2, 2); 11];
        let zero = second_moment(&a, &a, &RVec::zeros(2), grid).unwrap();
        assert!(zero.values.iter().all(|x| x.iter().all(|v| *v == 0.0)));
    }

    fn toy_level(dd2_zero: bool) -> FollowerLevel {
        let c = |v: f64| CMat::from_element(1, 1, Complex64::new(v, 0.0));
        let d = if dd2_zero { c(0.0) } else { c(0.3) };
        FollowerLevel {
            a: c(0.4),
            c: c(0.7),
            players: vec![
                FollowerBlock { b: c(1.0), d: d.clone(), q: c(0.5), s: c(0.1), r: c(2.0) },
                FollowerBlock { b: c(-0.5), d, q: c(0.2), s: c(0.0), r: c(1.0) },
            ],
        }
    }

    #[test]
    fn stacked_zero_inputs_stay_zero() {
        let c0 = CMat::zeros(1, 1);
        let level = FollowerLevel {
            a: CMat::from_element(1, 1, Complex64::new(0.3, 0.0)),
            c: c0.clone(),
            players: vec![FollowerBlock { b: c0.clone(), d: c0.clone(), q: c0.clone(), s: c0.clone(), r: CMat::identity(1, 1) }; 2],
        };
        let coeffs = StackedCoefficients::new(&level, 5, DEFAULT_CONDITION_CAP).unwrap();
        let step = step_stacked(&coeffs, &CMat::zeros(2, 1), 0.1, 5, DEFAULT_CONDITION_CAP, "Pi").unwrap();
        assert!(step.left.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn sigma_without_dd2_needs_no_inverse() {
        let level = toy_level(true);
        let coeffs = StackedCoefficients::new(&level, 1, DEFAULT_CONDITION_CAP).unwrap();
        let pi = CMat::from_column_slice(2, 1, &[Complex64::new(0.9, 0.0), Complex64::new(0.4, 0.1)]);
        let (sigma, cond) = coeffs.extract(&pi, 1, DEFAULT_CONDITION_CAP).unwrap();
        assert_eq!(cond, 1.0);
        let expected = &pi * &coeffs.c - &pi * &coeffs.d_rs + &pi * &coeffs.dd1 * &pi;
        assert_eq!(sigma, expected);
    }

    #[test]
    fn stacked_step_resubstitutes() {
        let level = toy_level(false);
        let coeffs = StackedCoefficients::new(&level, 1, DEFAULT_CONDITION_CAP).unwrap();
        let pi = CMat::from_column_slice(2, 1, &[Complex64::new(0.9, 0.0), Complex64::new(0.4, 0.1)]);
        let step = step_stacked(&coeffs, &pi, 0.02, 1, DEFAULT_CONDITION_CAP, "Pi").unwrap();
        let sigma = &step.sigma_right;
        // Σ satisfies its implicit equation
        let implicit = &pi * (&coeffs.c - &coeffs.d_rs + &coeffs.dd1 * &pi + &coeffs.dd2 * sigma);
        assert!((implicit - sigma).norm() < 1e-12);
        // scalar hand expansion of the derivative for player 1
        let (a, c0) = (0.4, 0.7);
        let (b, d, q, s, r) = ([1.0, -0.5], [0.3, 0.3], [0.5, 0.2], [0.1, 0.0], [2.0, 1.0]);
        let p = [pi[(0, 0)], pi[(1, 0)]];
        let sg = [sigma[(0, 0)], sigma[(1, 0)]];
        let a_shift = a - (0..2).map(|k| b[k] * s[k] / r[k]).sum::<f64>();
        let i = 0;
        let mut f = p[i] * a_shift + (a - b[i] * s[i] / r[i]) * p[i] + (q[i] - s[i] * s[i] / r[i])
            + (c0 - d[i] * s[i] / r[i]) * sg[i];
        for k in 0..2 {
            f += -p[i] * b[k] * b[k] / r[k] * p[k] - p[i] * b[k] * d[k] / r[k] * sg[k];
        }
        let expected = pi[(0, 0)] + f * 0.02;
        assert!((step.left[(0, 0)] - expected).norm() < 1e-12);
        let _ = c0;
    }

    #[test]
    fn stacked_terminal_stacks_rows() {
        let t = stacked_terminal(&[scalar(1.0), scalar(2.0), scalar(3.0)]);
        assert_eq!(t.shape(), (3, 1));
        assert_eq!(t[(2, 0)].re, 3.0);
    }
}
