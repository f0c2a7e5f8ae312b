//! Residual checks, H∞ gain probing, deviation probing and convexity Gram
//! matrices.

use nalgebra::{ComplexField, DMatrix};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::incentive::{Level1Solution, Level2Solution};
use crate::linalg::{complexify, min_eigenvalue_hermitian, CMat, RMat};
use crate::model::{assemble_executive_view, assemble_manager_view, ProblemSpec, EXECUTIVES, MANAGERS};
use crate::riccati::{FollowerLevel, RiccatiError, StackedCoefficients, TeamFlow, TimeGrid};
use crate::simulate::{paired_differences, sample_brownian, Deviation, Estimate, Replay, SimulateError};
use crate::team::TeamSolution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("residual check needs at least 3 nodes, got {0}")]
    ShortPath(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualProfile {
    /// Frobenius residual per node; the two endpoints are 0.
    pub per_node: Vec<f64>,
    pub max: f64,
    pub argmax: usize,
}

/// Central-difference derivative at interior nodes against the flow's
/// time derivative.
pub fn riccati_residual<T, F>(values: &[DMatrix<T>], grid: TimeGrid, rhs: F) -> Result<ResidualProfile, VerifyError>
where
    T: ComplexField<RealField = f64>,
    F: Fn(usize, &DMatrix<T>) -> Result<DMatrix<T>, RiccatiError>,
{
    let nodes = values.len();
    if nodes < 3 {
        return Err(VerifyError::ShortPath(nodes));
    }
    let scale = T::from_real(0.5 / grid.dt());
    let mut per_node = vec![0.0; nodes];
    for k in 1..nodes - 1 {
        let fd = (&values[k + 1] - &values[k - 1]) * scale.clone();
        per_node[k] = (fd - rhs(k, &values[k])?).norm();
    }
    let (argmax, max) = per_node.iter().copied().enumerate().fold((0, 0.0), |b, (k, r)| if r > b.1 { (k, r) } else { b });
    Ok(ResidualProfile { per_node, max, argmax })
}

pub fn p_residual(spec: &ProblemSpec, team: &TeamSolution, cap: f64) -> Result<ResidualProfile, VerifyError> {
    let flow = TeamFlow::new(spec, &team.central, cap);
    riccati_residual(&team.p.values, team.grid(), |k, p| flow.rhs(p, k))
}

pub fn pi_residual(
    spec: &ProblemSpec,
    team: &TeamSolution,
    level1: &Level1Solution,
    cap: f64,
) -> Result<ResidualProfile, VerifyError> {
    riccati_residual(&level1.pi, team.grid(), |k, pi| {
        let view = assemble_manager_view(spec, &team.central, &team.node(k), &level1.params[k]);
        let coeffs = StackedCoefficients::new(&FollowerLevel::from_managers(&view), k, cap)?;
        let (sigma, _) = coeffs.extract(pi, k, cap)?;
        Ok(-coeffs.drift(pi, &sigma))
    })
}

pub fn phi_residual(
    spec: &ProblemSpec,
    team: &TeamSolution,
    level1: &Level1Solution,
    level2: &Level2Solution,
    cap: f64,
) -> Result<ResidualProfile, VerifyError> {
    riccati_residual(&level2.phi, team.grid(), |k, phi| {
        let view = assemble_executive_view(
            spec,
            &team.central,
            &team.node(k),
            &level1.params[k],
            &level1.xi[k],
            &level2.params[k],
        );
        let coeffs = StackedCoefficients::new(&FollowerLevel::from_executives(&view), k, cap)?;
        let (psi, _) = coeffs.extract(phi, k, cap)?;
        Ok(-coeffs.drift(phi, &psi))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HinfProbe {
    pub gamma: f64,
    pub n_probes: usize,
    pub seed: u64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// Probes with ratio ≥ γ.
    pub violations: usize,
}

/// Largest number of constant pieces in a probe disturbance.
const MAX_PIECES: usize = 16;

fn probe_disturbance(seed: u64, probe: usize, steps: usize, n_v: usize) -> RMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(probe as u64);
    loop {
        let pieces = rng.random_range(1..=MAX_PIECES.min(steps));
        let levels: Vec<f64> = (0..pieces * n_v).map(|_| StandardNormal.sample(&mut rng)).collect();
        if levels.iter().any(|l| *l != 0.0) {
            return RMat::from_fn(n_v, steps, |r, k| levels[(k * pieces / steps) * n_v + r]);
        }
    }
}

/// Ratio of the closed-loop output norm to the disturbance norm for
/// piecewise-constant random disturbances, `x0 = 0`, `u = −Kc x`. Mean and
/// second moment of the state are propagated exactly (RK4 on the moment
/// equations), so the ratio carries no sampling error.
pub fn hinf_gain_probe(spec: &ProblemSpec, team: &TeamSolution, n_probes: usize, seed: u64) -> HinfProbe {
    let grid = team.grid();
    let steps = grid.steps;
    let dt = grid.dt();
    let n = spec.n();
    let c = &team.central;
    let drift: Vec<RMat> = team.kc.iter().map(|k| &spec.a - &c.bc * k).collect();
    let weight: Vec<RMat> = team.kc.iter().map(|k| &spec.q1 + k.transpose() * &c.rc * k).collect();
    let ratios: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|probe| {
            let v = probe_disturbance(seed, probe, steps, spec.dims.n_v);
            let mut m = RMat::zeros(n, 1);
            let mut x = RMat::zeros(n, n);
            let mut output = 0.0;
            let mut input = 0.0;
            let mut prev = 0.0;
            for k in 0..steps {
                let vk = v.columns(k, 1).into_owned();
                let ev = &spec.e * &vk;
                input += vk.norm_squared() * dt;
                let f = |a: &RMat, b: &RMat, m: &RMat, x: &RMat| {
                    let dm = a * m + &ev;
                    let forcing = &ev * m.transpose();
                    let dx = a * x + x * a.transpose() + b * x * b.transpose() + &forcing + forcing.transpose();
                    (dm, dx)
                };
                let (a0, b0) = (&drift[k], &team.b[k]);
                let (a1, b1) = (&drift[k + 1], &team.b[k + 1]);
                let am = (a0 + a1) * 0.5;
                let bm = (b0 + b1) * 0.5;
                let (k1m, k1x) = f(a0, b0, &m, &x);
                let (k2m, k2x) = f(&am, &bm, &(&m + &k1m * (dt / 2.0)), &(&x + &k1x * (dt / 2.0)));
                let (k3m, k3x) = f(&am, &bm, &(&m + &k2m * (dt / 2.0)), &(&x + &k2x * (dt / 2.0)));
                let (k4m, k4x) = f(a1, b1, &(&m + &k3m * dt), &(&x + &k3x * dt));
                m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (dt / 6.0);
                x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
                let next = (&weight[k + 1] * &x).trace();
                output += 0.5 * (prev + next) * dt;
                prev = next;
            }
            output += (&spec.g1 * &x).trace();
            (output.max(0.0) / input).sqrt()
        })
        .collect();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let violations = ratios.iter().filter(|r| **r >= spec.gamma).count();
    HinfProbe { gamma: spec.gamma, n_probes, seed, ratios, max_ratio, violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NashConfig {
    pub epsilon: f64,
    pub n_deviations: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// A deviation passes when the cost change is at least `−se_factor · SE`.
    pub se_factor: f64,
    pub min_pass_rate: f64,
}

impl Default for NashConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, n_deviations: 20, n_paths: 20_000, seed: 0x5eed, se_factor: 3.0, min_pass_rate: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationOutcome {
    pub delta: Estimate,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashReport {
    pub config: NashConfig,
    /// Control deviations, scored on `J¹` with `v` replayed.
    pub control: Vec<DeviationOutcome>,
    /// Disturbance deviations, scored on `J_v` with `u_c` kept as the team
    /// feedback law.
    pub disturbance: Vec<DeviationOutcome>,
    pub control_pass_rate: f64,
    pub disturbance_pass_rate: f64,
    pub passed: bool,
}

fn random_delta(rng: &mut ChaCha8Rng, rows: usize, cols: usize, eps: f64) -> RMat {
    RMat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        eps * z
    })
}

/// Constant feedback deviations of scale `ε`, compared with the team
/// strategies under common noise. A control deviation faces the realized
/// team disturbance process; a disturbance deviation faces the team control
/// law `u = −Kc x`.
pub fn nash_probe(spec: &ProblemSpec, team: &TeamSolution, cfg: &NashConfig) -> Result<NashReport, VerifyError> {
    let (n, mc, nv) = (spec.n(), team.central.mc(), spec.dims.n_v);
    let mut deviations = Vec::with_capacity(2 * cfg.n_deviations);
    for d in 0..cfg.n_deviations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + d as u64);
        let delta_kc = random_delta(&mut rng, mc, n, cfg.epsilon);
        deviations.push(Deviation { delta_kc, delta_kv: RMat::zeros(nv, n), replay: Replay::Disturbance });
    }
    for d in 0..cfg.n_deviations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + (cfg.n_deviations + d) as u64);
        let delta_kv = random_delta(&mut rng, nv, n, cfg.epsilon);
        deviations.push(Deviation { delta_kc: RMat::zeros(mc, n), delta_kv, replay: Replay::None });
    }
    let noise = sample_brownian(team.grid(), cfg.n_paths, cfg.seed)?;
    let reports = paired_differences(spec, team, &noise, &deviations)?;
    let outcome = |e: Estimate| DeviationOutcome { delta: e, passed: e.mean >= -cfg.se_factor * e.se };
    let control: Vec<DeviationOutcome> = reports[..cfg.n_deviations].iter().map(|r| outcome(r.j1)).collect();
    let disturbance: Vec<DeviationOutcome> = reports[cfg.n_deviations..].iter().map(|r| outcome(r.jv)).collect();
    let rate = |v: &[DeviationOutcome]| {
        if v.is_empty() {
            1.0
        } else {
            v.iter().filter(|o| o.passed).count() as f64 / v.len() as f64
        }
    };
    let (cr, dr) = (rate(&control), rate(&disturbance));
    Ok(NashReport {
        config: *cfg,
        control,
        disturbance,
        control_pass_rate: cr,
        disturbance_pass_rate: dr,
        passed: cr >= cfg.min_pass_rate && dr >= cfg.min_pass_rate,
    })
}

/// Coefficients of one follower's perturbation system at one node:
/// `dz = (A z + B g)dt + (C z + D g)dW`, cost weights `Q`, `S`, `R`.
#[derive(Debug, Clone)]
pub struct GramNode {
    pub a: CMat,
    pub c: CMat,
    pub b: CMat,
    pub d: CMat,
    pub q: CMat,
    pub s: CMat,
    pub r: CMat,
}

/// Gram matrix of the discretized quadratic functional over perturbations
/// that are constant unit vectors on `basis` equal sub-intervals. Moments of
/// the Euler-discretized auxiliary system are propagated exactly, so the
/// result is the Gram matrix of the discrete functional.
pub fn gram_matrix(nodes: &[GramNode], terminal: &CMat, grid: TimeGrid, basis: usize) -> CMat {
    let steps = grid.steps;
    let dt = grid.dt();
    let basis = basis.clamp(1, steps);
    let n = terminal.nrows();
    let m = nodes[0].b.ncols();
    let kdim = basis * m;
    let dim = n * kdim;
    let dtc = Complex64::new(dt, 0.0);
    let mut mu = CMat::zeros(dim, 1);
    let mut second = CMat::zeros(dim, dim);
    let mut gram = CMat::zeros(kdim, kdim);
    let eye = CMat::identity(kdim, kdim);
    let state_term = |q: &CMat, second: &CMat| {
        CMat::from_fn(kdim, kdim, |k, l| {
            let mut s = Complex64::new(0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    s += q[(a, b)] * second[(l * n + b, k * n + a)];
                }
            }
            s
        })
    };
    for (k, node) in nodes.iter().enumerate().take(steps) {
        let piece = (k * basis / steps).min(basis - 1);
        let mut ex = CMat::zeros(m, kdim);
        ex.view_mut((0, piece * m), (m, m)).fill_with_identity();
        let mean = CMat::from_column_slice(n, kdim, mu.as_slice());
        gram += (state_term(&node.q, &second)
            + mean.adjoint() * &node.s * &ex
            + ex.adjoint() * node.s.adjoint() * &mean
            + ex.adjoint() * &node.r * &ex)
            * dtc;

        let big_a = eye.kronecker(&node.a);
        let big_c = eye.kronecker(&node.c);
        let f = CMat::from_column_slice(dim, 1, (&node.b * &ex).as_slice());
        let h = CMat::from_column_slice(dim, 1, (&node.d * &ex).as_slice());
        let step = CMat::identity(dim, dim) + &big_a * dtc;
        let fm = &step * &mu;
        let cm = &big_c * &mu;
        second = &step * &second * step.adjoint()
            + (&fm * f.adjoint() + &f * fm.adjoint()) * dtc
            + &f * f.adjoint() * dtc * dtc
            + (&big_c * &second * big_c.adjoint() + &cm * h.adjoint() + &h * cm.adjoint() + &h * h.adjoint()) * dtc;
        mu = fm + &f * dtc;
    }
    gram + state_term(terminal, &second)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GramReport {
    pub basis: usize,
    pub managers: [f64; MANAGERS],
    pub executives: [f64; EXECUTIVES],
    /// Largest `‖G − Gᴴ‖` over the assembled Gram matrices.
    pub max_asymmetry: f64,
}

impl GramReport {
    pub fn min(&self) -> f64 {
        self.managers.iter().chain(&self.executives).copied().fold(f64::INFINITY, f64::min)
    }
}

fn eig_and_asym(g: &CMat) -> (f64, f64) {
    (min_eigenvalue_hermitian(g), (g - g.adjoint()).norm())
}

/// Minimum Gram eigenvalue of every manager's and executive's perturbation
/// functional at the converged incentive parameters.
pub fn convexity_gram(
    spec: &ProblemSpec,
    team: &TeamSolution,
    level1: &Level1Solution,
    level2: &Level2Solution,
    basis: usize,
) -> GramReport {
    let grid = team.grid();
    let c = &team.central;
    let mviews: Vec<_> =
        (0..grid.nodes()).map(|k| assemble_manager_view(spec, c, &team.node(k), &level1.params[k])).collect();
    let eviews: Vec<_> = (0..grid.nodes())
        .map(|k| {
            assemble_executive_view(spec, c, &team.node(k), &level1.params[k], &level1.xi[k], &level2.params[k])
        })
        .collect();
    let mut asym: f64 = 0.0;
    let managers = [0, 1].map(|i| {
        let nodes: Vec<GramNode> = mviews
            .iter()
            .map(|v| {
                let f = &v.managers[i];
                GramNode {
                    a: v.abar.clone(),
                    c: v.cbar.clone(),
                    b: f.bbar.clone(),
                    d: f.dbar.clone(),
                    q: f.qbar.clone(),
                    s: f.s.clone(),
                    r: f.rc.clone(),
                }
            })
            .collect();
        let (e, a) = eig_and_asym(&gram_matrix(&nodes, &complexify(&spec.g2[i]), grid, basis));
        asym = asym.max(a);
        e
    });
    let executives = [0, 1, 2].map(|j| {
        let nodes: Vec<GramNode> = eviews
            .iter()
            .map(|v| {
                let f = &v.executives[j];
                GramNode {
                    a: v.ahat.clone(),
                    c: v.chat.clone(),
                    b: f.bhat.clone(),
                    d: f.dhat.clone(),
                    q: f.qhat.clone(),
                    s: f.s.clone(),
                    r: f.r.clone(),
                }
            })
            .collect();
        let (e, a) = eig_and_asym(&gram_matrix(&nodes, &complexify(&spec.g3[j]), grid, basis));
        asym = asym.max(a);
        e
    });
    GramReport { basis, managers, executives, max_asymmetry: asym }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub p_residual_tol: f64,
    pub hinf_probes: usize,
    pub hinf_seed: u64,
    pub nash: NashConfig,
    pub gram_basis: usize,
    pub condition_cap: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            p_residual_tol: 1e-3,
            hinf_probes: 1000,
            hinf_seed: 0x5eed,
            nash: NashConfig::default(),
            gram_basis: 8,
            condition_cap: crate::riccati::DEFAULT_CONDITION_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub p_residual: bool,
    pub hinf: bool,
    pub nash: Option<bool>,
    pub gram: Option<bool>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub p_residual: f64,
    pub pi_residual: Option<f64>,
    pub phi_residual: Option<f64>,
    pub hinf: HinfProbe,
    pub nash: Option<NashReport>,
    pub gram: Option<GramReport>,
    pub verdict: Verdict,
}

/// Run every enabled check. Π and Φ residuals are reported only: their
/// recursion is first order, so no fixed tolerance applies.
pub fn verify_all(
    spec: &ProblemSpec,
    team: &TeamSolution,
    incentives: Option<(&Level1Solution, &Level2Solution)>,
    run_nash: bool,
    cfg: &VerifyConfig,
) -> Result<VerificationReport, VerifyError> {
    let p = p_residual(spec, team, cfg.condition_cap)?.max;
    let hinf = hinf_gain_probe(spec, team, cfg.hinf_probes, cfg.hinf_seed);
    let nash = if run_nash { Some(nash_probe(spec, team, &cfg.nash)?) } else { None };
    let (pi, phi, gram) = match incentives {
        Some((l1, l2)) => (
            Some(pi_residual(spec, team, l1, cfg.condition_cap)?.max),
            Some(phi_residual(spec, team, l1, l2, cfg.condition_cap)?.max),
            Some(convexity_gram(spec, team, l1, l2, cfg.gram_basis)),
        ),
        None => (None, None, None),
    };
    let p_ok = p < cfg.p_residual_tol;
    let hinf_ok = hinf.violations == 0;
    let nash_ok = nash.as_ref().map(|r| r.passed);
    let gram_ok = gram.as_ref().map(|g| g.min() > 0.0 && g.max_asymmetry < 1e-10 * (1.0 + g.min().abs()).max(1.0));
    let pass = p_ok && hinf_ok && nash_ok.unwrap_or(true) && gram_ok.unwrap_or(true);
    Ok(VerificationReport {
        p_residual: p,
        pi_residual: pi,
        phi_residual: phi,
        hinf,
        nash,
        gram,
        verdict: Verdict { p_residual: p_ok, hinf: hinf_ok, nash: nash_ok, gram: gram_ok, pass },
    })
}
