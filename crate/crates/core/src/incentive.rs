//! Backward recursions for the incentive parameters of the two upper levels.
//!
//! At each node the matching condition (the followers' Nash-response gain
//! equals the team gain) is solved for the incentive parameters. Given the
//! diffusion companion (`Σ` for managers, `Ψ` for executives) the condition is
//! linear in the parameters, and the companion itself depends on them, so the
//! solver iterates on the companion first and then polishes on the full
//! parameter vector.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{complexify, lstsq_c, row_block, CMat, RMat};
use crate::model::{
    assemble_executive_view, assemble_manager_view, level1_xi, level2_theta, ControlId, Dimensions, Level1Params,
    Level2Params, NodeTeamData, ProblemSpec, EXECUTIVES, MANAGERS,
};
use crate::riccati::{
    stacked_terminal, step_stacked, FollowerLevel, RiccatiError, StackedCoefficients, DEFAULT_CONDITION_CAP,
};
use crate::team::TeamSolution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IncentiveError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("level-{level} matching did not converge at node {node} (residual {residual:e})")]
    Matching { level: u8, node: usize, residual: f64 },
    #[error("terminal parameter {name} has shape {found:?}, expected {expected:?}")]
    TerminalShape { name: String, found: (usize, usize), expected: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    /// Matching residual below which a node is declared converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub condition_cap: f64,
    /// Seed of the one-off perturbed restart.
    pub seed: u64,
    /// Flag root jumps larger than this multiple of the median jump.
    pub jump_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, fd_step: 1e-6, condition_cap: DEFAULT_CONDITION_CAP, seed: 0x5eed, jump_factor: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeMatch {
    pub node: usize,
    pub residual: f64,
    pub iterations: usize,
    /// `‖params_k − params_{k+1}‖`; zero at the terminal node.
    pub jump: f64,
    pub jump_flagged: bool,
    /// The linear parameter solve was not square (least squares or minimum norm).
    pub least_squares: bool,
    pub retried: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchingReport {
    pub level: u8,
    pub tol: f64,
    pub nodes: Vec<NodeMatch>,
}

impl MatchingReport {
    /// Largest residual over the solved nodes (the terminal node is an input).
    pub fn max_residual(&self) -> f64 {
        let last = self.nodes.len().saturating_sub(1);
        self.nodes[..last].iter().map(|n| n.residual).fold(0.0, f64::max)
    }

    pub fn converged(&self) -> bool {
        let last = self.nodes.len().saturating_sub(1);
        self.nodes[..last].iter().all(|n| n.converged)
    }

    pub fn terminal_residual(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.residual)
    }

    pub fn flagged_jumps(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.jump_flagged).map(|n| n.node).collect()
    }

    fn flag_jumps(&mut self, factor: f64) {
        let mut jumps: Vec<f64> = self.nodes.iter().take(self.nodes.len().saturating_sub(1)).map(|n| n.jump).collect();
        if jumps.is_empty() {
            return;
        }
        jumps.sort_by(f64::total_cmp);
        let median = jumps[jumps.len() / 2];
        for n in &mut self.nodes {
            n.jump_flagged = median > 0.0 && n.jump > factor * median;
        }
    }
}

/// Solution of a matching problem at one node.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub params: Vec<Complex64>,
    pub residual: f64,
    pub iterations: usize,
    pub least_squares: bool,
    pub retried: bool,
}

/// The pieces of a matching problem the generic solver needs.
pub trait MatchingProblem {
    /// Companion (`Σ`/`Ψ`) implied by a parameter vector.
    fn companion(&self, params: &[Complex64]) -> Option<CMat>;
    /// Parameters solving the (linear) matching condition for a fixed companion.
    fn linear_params(&self, companion: &CMat) -> Option<Vec<Complex64>>;
    /// Stacked matching brackets for a parameter vector.
    fn bracket(&self, params: &[Complex64]) -> Option<CMat>;
    /// Whether the linear solve is square.
    fn square(&self) -> bool;

    fn residual(&self, params: &[Complex64]) -> f64 {
        self.bracket(params).map_or(f64::INFINITY, |b| b.norm())
    }
}

fn to_real(z: &[Complex64]) -> Vec<f64> {
    z.iter().map(|c| c.re).chain(z.iter().map(|c| c.im)).collect()
}

fn from_real(x: &[f64]) -> Vec<Complex64> {
    let h = x.len() / 2;
    (0..h).map(|k| Complex64::new(x[k], x[h + k])).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton / Gauss–Newton on a real residual map with a
/// central-difference Jacobian. Failed evaluations count as rejected steps.
fn newton<F>(f: F, mut x: Vec<f64>, max_iter: usize, fd_step: f64, stop: f64) -> (Vec<f64>, f64, usize)
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let eval = |x: &[f64]| f(x).filter(|v| v.iter().all(|c| c.is_finite()));
    let Some(mut fx) = eval(&x) else { return (x, f64::INFINITY, 0) };
    let mut fn_ = norm(&fx);
    let mut iters = 0;
    while iters < max_iter && fn_ > stop {
        iters += 1;
        let m = fx.len();
        let mut jac = RMat::zeros(m, x.len());
        let mut ok = true;
        for q in 0..x.len() {
            let h = fd_step * x[q].abs().max(1.0);
            let mut xp = x.clone();
            xp[q] += h;
            let mut xm = x.clone();
            xm[q] -= h;
            match (eval(&xp), eval(&xm)) {
                (Some(fp), Some(fm)) => {
                    for r in 0..m {
                        jac[(r, q)] = (fp[r] - fm[r]) / (2.0 * h);
                    }
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let rhs = RMat::from_column_slice(m, 1, &fx);
        let svd = jac.svd(true, true);
        let tol = svd.singular_values.max() * 1e-14 * (m.max(x.len()) as f64);
        let Ok(dx) = svd.solve(&rhs, tol.max(f64::MIN_POSITIVE)) else { break };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a - t * d).collect();
            if let Some(ft) = eval(&trial) {
                let nt = norm(&ft);
                if nt < fn_ {
                    x = trial;
                    fx = ft;
                    fn_ = nt;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (x, fn_, iters)
}

/// Multipliers applied to the warm-start companion to seed the reduced
/// iteration. The first converged seed is kept unless a later one lands closer
/// to the warm start.
const COMPANION_SEEDS: [f64; 8] = [1.0, 0.75, 0.5, 0.25, 0.0, 1.5, -0.5, 2.0];

fn reduced<P: MatchingProblem>(problem: &P, s0: &CMat, cfg: &SolverConfig) -> (Option<Vec<Complex64>>, usize) {
    let (rows, cols) = s0.shape();
    let fixed_point = |x: &[f64]| -> Option<Vec<f64>> {
        let s = CMat::from_column_slice(rows, cols, &from_real(x));
        let p = problem.linear_params(&s)?;
        let s2 = problem.companion(&p)?;
        Some(to_real(&(s2 - s).iter().copied().collect::<Vec<_>>()))
    };
    let x0 = to_real(&s0.iter().copied().collect::<Vec<_>>());
    let (x, _, it) = newton(fixed_point, x0, cfg.max_iter, cfg.fd_step, 1e-15);
    let s = CMat::from_column_slice(rows, cols, &from_real(&x));
    (problem.linear_params(&s), it)
}

fn attempt<P: MatchingProblem>(problem: &P, guess: &[Complex64], cfg: &SolverConfig) -> (Vec<Complex64>, f64, usize) {
    let mut iterations = 0;
    let mut best = guess.to_vec();
    let mut best_res = problem.residual(guess);
    let mut best_dist = f64::INFINITY;

    if let Some(s0) = problem.companion(guess) {
        for (k, factor) in COMPANION_SEEDS.iter().enumerate() {
            let (p, it) = reduced(problem, &(&s0 * Complex64::new(*factor, 0.0)), cfg);
            iterations += it;
            let Some(p) = p else { continue };
            let r = problem.residual(&p);
            let dist = vec_distance(&p, guess);
            let both_roots = r < cfg.tol && best_res < cfg.tol;
            if (both_roots && dist < best_dist) || (!both_roots && r < best_res) {
                best = p;
                best_res = r;
                best_dist = dist;
            }
            if k == 0 && best_res < cfg.tol {
                break;
            }
        }
    }

    if best_res >= cfg.tol * 1e-3 {
        let full = |x: &[f64]| -> Option<Vec<f64>> {
            let b = problem.bracket(&from_real(x))?;
            Some(to_real(&b.iter().copied().collect::<Vec<_>>()))
        };
        let (x, r, it) = newton(full, to_real(&best), cfg.max_iter, cfg.fd_step, cfg.tol * 1e-4);
        iterations += it;
        if r < best_res {
            best = from_real(&x);
            best_res = r;
        }
    }
    (best, best_res, iterations)
}

/// Solve one node's matching condition, warm-started from `guess`.
pub fn solve_matching<P: MatchingProblem>(problem: &P, guess: &[Complex64], cfg: &SolverConfig, node: usize) -> MatchResult {
    let least_squares = !problem.square();
    let r0 = problem.residual(guess);
    if r0 <= cfg.tol * 1e-4 {
        return MatchResult { params: guess.to_vec(), residual: r0, iterations: 0, least_squares, retried: false };
    }
    let (params, residual, iterations) = attempt(problem, guess, cfg);
    if residual < cfg.tol {
        return MatchResult { params, residual, iterations, least_squares, retried: false };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(node as u64);
    let perturbed: Vec<Complex64> = guess
        .iter()
        .map(|z| z + Complex64::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)))
        .collect();
    let (p2, r2, it2) = attempt(problem, &perturbed, cfg);
    let (params, residual) = if r2 < residual { (p2, r2) } else { (params, residual) };
    MatchResult { params, residual, iterations: iterations + it2, least_squares, retried: true }
}

/// Matching problem of the manager level at one node.
pub struct Level1Node<'a> {
    pub spec: &'a ProblemSpec,
    pub team: &'a TeamSolution,
    pub node: NodeTeamData,
    pub pi: CMat,
    pub template: Level1Params,
    pub cap: f64,
}

impl<'a> Level1Node<'a> {
    pub fn new(spec: &'a ProblemSpec, team: &'a TeamSolution, k: usize, pi: CMat, cap: f64) -> Self {
        Self { spec, team, node: team.node(k), pi, template: Level1Params::zeros(&spec.dims), cap }
    }

    fn coefficients(&self, params: &Level1Params) -> Option<(crate::model::ManagerView, StackedCoefficients)> {
        let view = assemble_manager_view(self.spec, &self.team.central, &self.node, params);
        let coeffs = StackedCoefficients::new(&FollowerLevel::from_managers(&view), 0, self.cap).ok()?;
        Some((view, coeffs))
    }

    fn params(&self, v: &[Complex64]) -> Level1Params {
        Level1Params::from_vec(&self.template, v)
    }
}

impl MatchingProblem for Level1Node<'_> {
    fn companion(&self, params: &[Complex64]) -> Option<CMat> {
        let (_, coeffs) = self.coefficients(&self.params(params))?;
        coeffs.extract(&self.pi, 0, self.cap).ok().map(|(s, _)| s)
    }

    fn linear_params(&self, sigma: &CMat) -> Option<Vec<Complex64>> {
        let n = self.spec.n();
        let central = &self.team.central;
        let mut out = self.template.clone();
        for i in 0..MANAGERS {
            let pi_i = row_block(&self.pi, i, n);
            let sg_i = row_block(sigma, i, n);
            let k1 = complexify(&self.node.gain(central, ControlId::Leader { i }));
            let kc = complexify(&self.node.manager_gain(central, i));
            let (b, d, r) = manager_blocks(self.spec, i);
            let b1 = complexify(&self.spec.b1[i]);
            let d1 = complexify(&self.spec.d1[i]);
            let r2 = complexify(&self.spec.r2_leader[i]);
            let alpha = -(&r2 * &k1) + b1.transpose() * &pi_i + d1.transpose() * &sg_i;
            let beta = &r * &kc - b.transpose() * &pi_i - d.transpose() * &sg_i;
            let n_i = lstsq_c(&alpha.transpose(), &beta.transpose())?;
            out.set_stacked(i, &n_i);
        }
        let v = out.to_vec();
        v.iter().all(|z| z.re.is_finite() && z.im.is_finite()).then_some(v)
    }

    fn bracket(&self, params: &[Complex64]) -> Option<CMat> {
        let p = self.params(params);
        let (view, coeffs) = self.coefficients(&p)?;
        let (sigma, _) = coeffs.extract(&self.pi, 0, self.cap).ok()?;
        Some(level1_brackets(self.spec, &self.team.central, &self.node, &view, &coeffs, &self.pi, &sigma))
    }

    fn square(&self) -> bool {
        (0..MANAGERS).all(|i| self.spec.dims.m1[i] == self.spec.n())
    }
}

/// `B_i`, `D_i` and `r_i` of manager i's stacked control.
fn manager_blocks(spec: &ProblemSpec, i: usize) -> (CMat, CMat, CMat) {
    let n = spec.n();
    let ids = ControlId::manager_stack(i);
    let bs: Vec<CMat> = ids.iter().map(|id| complexify(spec.input_matrices(*id).0)).collect();
    let ds: Vec<CMat> = ids.iter().map(|id| complexify(spec.input_matrices(*id).1)).collect();
    let rs: Vec<CMat> = (0..EXECUTIVES)
        .map(|j| complexify(&spec.r2_manager[i][j]))
        .chain((0..EXECUTIVES).map(|j| complexify(&spec.r2_exec[j][i])))
        .collect();
    (
        crate::linalg::hcat_c(&bs.iter().collect::<Vec<_>>(), n),
        crate::linalg::hcat_c(&ds.iter().collect::<Vec<_>>(), n),
        crate::linalg::block_diag_c(&rs.iter().collect::<Vec<_>>()),
    )
}

/// Stacked `R_ci⁻¹(S_2iᵀ + B̄_ciᵀΠ_i + D̄_ciᵀΣ_i) − K_ci` over both managers.
pub fn level1_brackets(
    spec: &ProblemSpec,
    central: &crate::model::CentralizedForm,
    node: &NodeTeamData,
    view: &crate::model::ManagerView,
    coeffs: &StackedCoefficients,
    pi: &CMat,
    sigma: &CMat,
) -> CMat {
    let n = spec.n();
    let blocks: Vec<CMat> = (0..MANAGERS)
        .map(|i| {
            let m = &view.managers[i];
            let gain = &coeffs.r_inv[i]
                * (m.s.transpose() + m.bbar.transpose() * row_block(pi, i, n) + m.dbar.transpose() * row_block(sigma, i, n));
            gain - complexify(&node.manager_gain(central, i))
        })
        .collect();
    crate::linalg::vcat_c(&blocks.iter().collect::<Vec<_>>(), n)
}

/// Matching problem of the executive level at one node.
pub struct Level2Node<'a> {
    pub spec: &'a ProblemSpec,
    pub team: &'a TeamSolution,
    pub node: NodeTeamData,
    pub level1: Level1Params,
    pub xi: [[CMat; EXECUTIVES]; MANAGERS],
    pub phi: CMat,
    pub template: Level2Params,
    pub cap: f64,
}

impl<'a> Level2Node<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        team: &'a TeamSolution,
        k: usize,
        level1: Level1Params,
        phi: CMat,
        cap: f64,
    ) -> Self {
        let node = team.node(k);
        let xi = level1_xi(&team.central, &node, &level1);
        Self { spec, team, node, level1, xi, phi, template: Level2Params::zeros(&spec.dims), cap }
    }

    fn coefficients(&self, params: &Level2Params) -> Option<(crate::model::ExecutiveView, StackedCoefficients)> {
        let view = assemble_executive_view(self.spec, &self.team.central, &self.node, &self.level1, &self.xi, params);
        let coeffs = StackedCoefficients::new(&FollowerLevel::from_executives(&view), 0, self.cap).ok()?;
        Some((view, coeffs))
    }

    fn params(&self, v: &[Complex64]) -> Level2Params {
        Level2Params::from_vec(&self.template, v)
    }
}

impl MatchingProblem for Level2Node<'_> {
    fn companion(&self, params: &[Complex64]) -> Option<CMat> {
        let (_, coeffs) = self.coefficients(&self.params(params))?;
        coeffs.extract(&self.phi, 0, self.cap).ok().map(|(s, _)| s)
    }

    fn linear_params(&self, psi: &CMat) -> Option<Vec<Complex64>> {
        let n = self.spec.n();
        let central = &self.team.central;
        let s = self.spec;
        let mut out = self.template.clone();
        for j in 0..EXECUTIVES {
            let phi_j = row_block(&self.phi, j, n);
            let psi_j = row_block(psi, j, n);
            for i in 0..MANAGERS {
                let k2 = complexify(&self.node.gain(central, ControlId::Manager { i, j }));
                let k3 = complexify(&self.node.gain(central, ControlId::Executive { j, i }));
                let b1 = complexify(&s.b1[i]);
                let d1 = complexify(&s.d1[i]);
                let eta = &self.level1.eta[i][j];
                let zeta = &self.level1.zeta[i][j];
                let bm = &b1 * eta + complexify(&s.b2[i][j]);
                let dm = &d1 * eta + complexify(&s.d2[i][j]);
                let be = complexify(&s.b3[j][i]) + &b1 * zeta;
                let de = complexify(&s.d3[j][i]) + &d1 * zeta;
                let alpha = -(complexify(&s.r3_manager[i][j]) * &k2) + bm.transpose() * &phi_j + dm.transpose() * &psi_j;
                let beta = complexify(&s.r3_exec[j][i]) * &k3 - be.transpose() * &phi_j - de.transpose() * &psi_j;
                out.rho[i][j] = lstsq_c(&alpha.transpose(), &beta.transpose())?;
            }
        }
        let v = out.to_vec();
        v.iter().all(|z| z.re.is_finite() && z.im.is_finite()).then_some(v)
    }

    fn bracket(&self, params: &[Complex64]) -> Option<CMat> {
        let p = self.params(params);
        let (view, coeffs) = self.coefficients(&p)?;
        let (psi, _) = coeffs.extract(&self.phi, 0, self.cap).ok()?;
        Some(level2_brackets(self.spec, &self.team.central, &self.node, &view, &coeffs, &self.phi, &psi))
    }

    fn square(&self) -> bool {
        let d = &self.spec.dims;
        (0..MANAGERS).all(|i| (0..EXECUTIVES).all(|j| d.m2[i][j] == self.spec.n()))
    }
}

/// Stacked `R_3j⁻¹(S_3jᵀ + B̂_3jᵀΦ_j + D̂_3jᵀΨ_j) − K_3j` over the executives.
pub fn level2_brackets(
    spec: &ProblemSpec,
    central: &crate::model::CentralizedForm,
    node: &NodeTeamData,
    view: &crate::model::ExecutiveView,
    coeffs: &StackedCoefficients,
    phi: &CMat,
    psi: &CMat,
) -> CMat {
    let n = spec.n();
    let blocks: Vec<CMat> = (0..EXECUTIVES)
        .map(|j| {
            let e = &view.executives[j];
            let gain = &coeffs.r_inv[j]
                * (e.s.transpose() + e.bhat.transpose() * row_block(phi, j, n) + e.dhat.transpose() * row_block(psi, j, n));
            let team: Vec<CMat> =
                (0..MANAGERS).map(|i| complexify(&node.gain(central, ControlId::Executive { j, i }))).collect();
            gain - crate::linalg::vcat_c(&team.iter().collect::<Vec<_>>(), n)
        })
        .collect();
    crate::linalg::vcat_c(&blocks.iter().collect::<Vec<_>>(), n)
}

#[derive(Debug, Clone)]
pub struct Level1Solution {
    pub params: Vec<Level1Params>,
    pub xi: Vec<[[CMat; EXECUTIVES]; MANAGERS]>,
    pub pi: Vec<CMat>,
    pub sigma: Vec<CMat>,
}

#[derive(Debug, Clone)]
pub struct Level2Solution {
    pub params: Vec<Level2Params>,
    pub theta: Vec<[[CMat; EXECUTIVES]; MANAGERS]>,
    pub phi: Vec<CMat>,
    pub psi: Vec<CMat>,
}

fn check_terminal(name: &str, m: &CMat, expected: (usize, usize)) -> Result<(), IncentiveError> {
    if m.shape() != expected {
        return Err(IncentiveError::TerminalShape { name: name.to_string(), found: m.shape(), expected });
    }
    Ok(())
}

pub fn check_level2_terminal(d: &Dimensions, t: &Level2Params) -> Result<(), IncentiveError> {
    for i in 0..MANAGERS {
        for j in 0..EXECUTIVES {
            check_terminal(&format!("rho[{}][{}]", i + 1, j + 1), &t.rho[i][j], (d.m2[i][j], d.m3[j][i]))?;
        }
    }
    Ok(())
}

pub fn check_level1_terminal(d: &Dimensions, t: &Level1Params) -> Result<(), IncentiveError> {
    for i in 0..MANAGERS {
        for j in 0..EXECUTIVES {
            check_terminal(&format!("eta[{}][{}]", i + 1, j + 1), &t.eta[i][j], (d.m1[i], d.m2[i][j]))?;
            check_terminal(&format!("zeta[{}][{}]", i + 1, j + 1), &t.zeta[i][j], (d.m1[i], d.m3[j][i]))?;
        }
    }
    Ok(())
}

fn vec_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

/// Manager-level recursion. Node `k−1` is matched using `Π(k−1)` from one
/// backward step at node `k`, with `Σ(k−1)` re-extracted from the candidate
/// parameters at `k−1`.
pub fn level1_recursion(
    spec: &ProblemSpec,
    team: &TeamSolution,
    terminal: &Level1Params,
    cfg: &SolverConfig,
) -> Result<(Level1Solution, MatchingReport), IncentiveError> {
    check_level1_terminal(&spec.dims, terminal)?;
    let grid = team.grid();
    let steps = grid.steps;
    let dt = grid.dt();
    let mut params = vec![terminal.clone(); steps + 1];
    let mut pi = vec![CMat::zeros(0, 0); steps + 1];
    let mut sigma = vec![CMat::zeros(0, 0); steps + 1];
    let mut nodes = vec![None; steps + 1];
    pi[steps] = stacked_terminal(&spec.g2);

    for r in (1..=steps).rev() {
        let node = team.node(r);
        let view = assemble_manager_view(spec, &team.central, &node, &params[r]);
        let coeffs = StackedCoefficients::new(&FollowerLevel::from_managers(&view), r, cfg.condition_cap)?;
        let step = step_stacked(&coeffs, &pi[r], dt, r, cfg.condition_cap, "Pi")?;
        sigma[r] = step.sigma_right.clone();
        if r == steps {
            let res = level1_brackets(spec, &team.central, &node, &view, &coeffs, &pi[r], &sigma[r]).norm();
            nodes[r] = Some(terminal_node(r, res, cfg.tol));
        }
        pi[r - 1] = step.left;

        let problem = Level1Node::new(spec, team, r - 1, pi[r - 1].clone(), cfg.condition_cap);
        let guess = params[r].to_vec();
        let result = solve_matching(&problem, &guess, cfg, r - 1);
        if !(result.residual < cfg.tol) {
            return Err(IncentiveError::Matching { level: 1, node: r - 1, residual: result.residual });
        }
        nodes[r - 1] = Some(NodeMatch {
            node: r - 1,
            residual: result.residual,
            iterations: result.iterations,
            jump: vec_distance(&result.params, &guess),
            jump_flagged: false,
            least_squares: result.least_squares,
            retried: result.retried,
            converged: true,
        });
        params[r - 1] = Level1Params::from_vec(&problem.template, &result.params);
    }
    let last = Level1Node::new(spec, team, 0, pi[0].clone(), cfg.condition_cap);
    sigma[0] = last.companion(&params[0].to_vec()).ok_or(RiccatiError::Invertibility {
        what: "I - Pi D2",
        node: 0,
        condition: f64::INFINITY,
        cap: cfg.condition_cap,
    })?;
    let xi = (0..=steps).map(|k| level1_xi(&team.central, &team.node(k), &params[k])).collect();
    let mut report = MatchingReport { level: 1, tol: cfg.tol, nodes: nodes.into_iter().map(|n| n.expect("filled")).collect() };
    report.flag_jumps(cfg.jump_factor);
    Ok((Level1Solution { params, xi, pi, sigma }, report))
}

fn terminal_node(node: usize, residual: f64, tol: f64) -> NodeMatch {
    NodeMatch {
        node,
        residual,
        iterations: 0,
        jump: 0.0,
        jump_flagged: false,
        least_squares: false,
        retried: false,
        converged: residual < tol,
    }
}

/// Executive-level recursion, mirroring [`level1_recursion`].
pub fn level2_recursion(
    spec: &ProblemSpec,
    team: &TeamSolution,
    level1: &Level1Solution,
    terminal: &Level2Params,
    cfg: &SolverConfig,
) -> Result<(Level2Solution, MatchingReport), IncentiveError> {
    check_level2_terminal(&spec.dims, terminal)?;
    let grid = team.grid();
    let steps = grid.steps;
    let dt = grid.dt();
    let mut params = vec![terminal.clone(); steps + 1];
    let mut phi = vec![CMat::zeros(0, 0); steps + 1];
    let mut psi = vec![CMat::zeros(0, 0); steps + 1];
    let mut nodes = vec![None; steps + 1];
    phi[steps] = stacked_terminal(&spec.g3);

    for r in (1..=steps).rev() {
        let at_r = Level2Node::new(spec, team, r, level1.params[r].clone(), phi[r].clone(), cfg.condition_cap);
        let view = assemble_executive_view(spec, &team.central, &at_r.node, &at_r.level1, &at_r.xi, &params[r]);
        let coeffs = StackedCoefficients::new(&FollowerLevel::from_executives(&view), r, cfg.condition_cap)?;
        let step = step_stacked(&coeffs, &phi[r], dt, r, cfg.condition_cap, "Phi")?;
        psi[r] = step.sigma_right.clone();
        if r == steps {
            let res = level2_brackets(spec, &team.central, &at_r.node, &view, &coeffs, &phi[r], &psi[r]).norm();
            nodes[r] = Some(terminal_node(r, res, cfg.tol));
        }
        phi[r - 1] = step.left;

        let problem = Level2Node::new(spec, team, r - 1, level1.params[r - 1].clone(), phi[r - 1].clone(), cfg.condition_cap);
        let guess = params[r].to_vec();
        let result = solve_matching(&problem, &guess, cfg, r - 1);
        if !(result.residual < cfg.tol) {
            return Err(IncentiveError::Matching { level: 2, node: r - 1, residual: result.residual });
        }
        nodes[r - 1] = Some(NodeMatch {
            node: r - 1,
            residual: result.residual,
            iterations: result.iterations,
            jump: vec_distance(&result.params, &guess),
            jump_flagged: false,
            least_squares: result.least_squares,
            retried: result.retried,
            converged: true,
        });
        params[r - 1] = Level2Params::from_vec(&problem.template, &result.params);
    }
    let last = Level2Node::new(spec, team, 0, level1.params[0].clone(), phi[0].clone(), cfg.condition_cap);
    psi[0] = last.companion(&params[0].to_vec()).ok_or(RiccatiError::Invertibility {
        what: "I - Phi D2",
        node: 0,
        condition: f64::INFINITY,
        cap: cfg.condition_cap,
    })?;
    let theta = (0..=steps).map(|k| level2_theta(&team.central, &team.node(k), &params[k])).collect();
    let mut report = MatchingReport { level: 2, tol: cfg.tol, nodes: nodes.into_iter().map(|n| n.expect("filled")).collect() };
    report.flag_jumps(cfg.jump_factor);
    Ok((Level2Solution { params, theta, phi, psi }, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    /// Max over nodes of `‖Σ_j ξ − Σ_j η K_2 − Σ_j ζ K_3 + K_1‖`.
    pub level1: f64,
    /// Max over nodes of `‖θ − ρ K_3 + K_2‖`.
    pub level2: f64,
}

/// Check that the announced strategies reproduce the team controls when the
/// followers play their team controls.
pub fn incentive_identity_check(team: &TeamSolution, level1: &Level1Solution, level2: &Level2Solution) -> IdentityReport {
    let c = &team.central;
    let mut r1: f64 = 0.0;
    let mut r2: f64 = 0.0;
    for k in 0..level1.params.len() {
        let g = |id| complexify(&team.gain(k, id));
        for i in 0..MANAGERS {
            let mut u1 = g(ControlId::Leader { i });
            for j in 0..EXECUTIVES {
                let p = &level1.params[k];
                u1 += &level1.xi[k][i][j] - &p.eta[i][j] * g(ControlId::Manager { i, j })
                    - &p.zeta[i][j] * g(ControlId::Executive { j, i });
                let theta = &level2.theta[k][i][j];
                let u2 = theta - &level2.params[k].rho[i][j] * g(ControlId::Executive { j, i }) + g(ControlId::Manager { i, j });
                r2 = r2.max(u2.norm());
            }
            r1 = r1.max(u1.norm());
        }
        let _ = c;
    }
    IdentityReport { level1: r1, level2: r2 }
}

/// Level-1 parameters from per-(i,j) scalar values (all blocks 1×1).
pub fn scalar_level1(eta: [[f64; EXECUTIVES]; MANAGERS], zeta: [[f64; EXECUTIVES]; MANAGERS]) -> Level1Params {
    let s = |v: f64| CMat::from_element(1, 1, Complex64::new(v, 0.0));
    Level1Params { eta: eta.map(|r| r.map(s)), zeta: zeta.map(|r| r.map(s)) }
}

pub fn scalar_level2(rho: [[f64; EXECUTIVES]; MANAGERS]) -> Level2Params {
    Level2Params { rho: rho.map(|r| r.map(|v| CMat::from_element(1, 1, Complex64::new(v, 0.0)))) }
}

/// Terminal incentive values of the scalar benchmark.
pub fn benchmark_terminal() -> (Level1Params, Level2Params) {
    (
        scalar_level1([[5.0, 3.0, -2.0], [-1.0, 4.0, 1.0]], [[1.0, -1.0, 1.0], [1.0, 2.0, -1.0]]),
        scalar_level2([[1.0; EXECUTIVES]; MANAGERS]),
    )
}

/// Scale every terminal parameter by `s`.
pub fn scale_level1(p: &Level1Params, s: f64) -> Level1Params {
    let f = Complex64::new(s, 0.0);
    Level1Params { eta: p.eta.clone().map(|r| r.map(|m| m * f)), zeta: p.zeta.clone().map(|r| r.map(|m| m * f)) }
}
