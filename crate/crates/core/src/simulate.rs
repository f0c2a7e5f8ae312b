//! Euler–Maruyama simulation of the hierarchy and Monte-Carlo cost estimates.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::incentive::{Level1Solution, Level2Solution};
use crate::linalg::{CMat, RMat, RVec};
use crate::model::{ControlId, ProblemSpec, EXECUTIVES, MANAGERS};
use crate::riccati::TimeGrid;
use crate::team::TeamSolution;

/// Paths evaluated in parallel per chunk; chunks are reduced in order.
pub const CHUNK: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("state became non-finite on path {path} at node {node}")]
    NonFinite { path: usize, node: usize },
    #[error("control {control} on path {path} at node {node} has imaginary part {imag:e} (magnitude {magnitude:e})")]
    ComplexControl { control: String, path: usize, node: usize, imag: f64, magnitude: f64 },
    #[error("simulation needs at least one path")]
    NoPaths,
    #[error("gain schedule has {found} nodes, the noise grid has {expected}")]
    GridMismatch { found: usize, expected: usize },
}

/// Scalar Brownian increments on a grid. Path `p` draws from the ChaCha8
/// stream `p` of `seed`, so any path can be regenerated on its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseBundle {
    pub seed: u64,
    pub n_paths: usize,
    pub grid: TimeGrid,
}

impl NoiseBundle {
    pub fn increments(&self, path: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        let sd = self.grid.dt().sqrt();
        (0..self.grid.steps)
            .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect()
    }

    /// All increments, path-major.
    pub fn materialize(&self) -> Vec<f64> {
        (0..self.n_paths).flat_map(|p| self.increments(p)).collect()
    }
}

pub fn sample_brownian(grid: TimeGrid, n_paths: usize, seed: u64) -> Result<NoiseBundle, SimulateError> {
    if n_paths == 0 {
        return Err(SimulateError::NoPaths);
    }
    Ok(NoiseBundle { seed, n_paths, grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ModeTag {
    TeamClosedLoop,
    IncentiveRepresentation,
    Deviation,
}

/// Which realized process of the non-deviating side is replayed from the
/// team run under the same noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Replay {
    /// Both sides use feedback.
    None,
    /// The disturbance process `v*(t)` of the team run is replayed.
    Disturbance,
    /// The control process `u*_c(t)` of the team run is replayed.
    Control,
}

/// Constant-in-time perturbations of the team gains:
/// `u_c = −(Kc + Δc) x`, `v = (Kv + Δv) x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub delta_kc: RMat,
    pub delta_kv: RMat,
    pub replay: Replay,
}

impl Deviation {
    pub fn zero(mc: usize, n_v: usize, n: usize) -> Self {
        Self { delta_kc: RMat::zeros(mc, n), delta_kv: RMat::zeros(n_v, n), replay: Replay::None }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Team,
    Incentive { level1: &'a Level1Solution, level2: &'a Level2Solution },
    Deviation(&'a Deviation),
}

impl Mode<'_> {
    pub fn tag(&self) -> ModeTag {
        match self {
            Mode::Team => ModeTag::TeamClosedLoop,
            Mode::Incentive { .. } => ModeTag::IncentiveRepresentation,
            Mode::Deviation(_) => ModeTag::Deviation,
        }
    }
}

/// One simulated path: node-major state, centralized control and disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub grid: TimeGrid,
    pub n: usize,
    pub mc: usize,
    pub n_v: usize,
    pub mode: ModeTag,
    pub paths: Vec<PathRecord>,
}

impl TrajectoryBundle {
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        &self.paths[path].x[node * self.n..(node + 1) * self.n]
    }

    pub fn control(&self, path: usize, node: usize) -> &[f64] {
        &self.paths[path].u[node * self.mc..(node + 1) * self.mc]
    }

    pub fn disturbance(&self, path: usize, node: usize) -> &[f64] {
        &self.paths[path].v[node * self.n_v..(node + 1) * self.n_v]
    }

    pub fn max_abs_state(&self) -> f64 {
        self.paths.iter().flat_map(|p| p.x.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Row-major dense matrix for allocation-free inner loops.
#[derive(Debug, Clone)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn new(m: &RMat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    /// `out += self · x`
    fn apply_add(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn quad(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            s += x[r] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }
}

/// Block-diagonal weight on the centralized control vector.
#[derive(Debug, Clone)]
struct BlockWeight(Vec<(usize, Dense)>);

impl BlockWeight {
    fn new<'s>(central: &crate::model::CentralizedForm, pick: impl Fn(ControlId) -> Option<&'s RMat>) -> Self {
        Self(central.blocks.iter().filter_map(|b| pick(b.id).map(|w| (b.offset, Dense::new(w)))).collect())
    }

    fn quad(&self, u: &[f64]) -> f64 {
        self.0.iter().map(|(off, w)| w.quad(&u[*off..*off + w.rows])).sum()
    }
}

/// Precomputed weights of every cost functional.
#[derive(Debug, Clone)]
pub struct CostWeights {
    n: usize,
    mc: usize,
    n_v: usize,
    gamma2: f64,
    q1: Dense,
    g1: Dense,
    rc: BlockWeight,
    q2: Vec<Dense>,
    g2: Vec<Dense>,
    r2: Vec<BlockWeight>,
    q3: Vec<Dense>,
    g3: Vec<Dense>,
    r3: Vec<BlockWeight>,
}

impl CostWeights {
    pub fn new(spec: &ProblemSpec, team: &TeamSolution) -> Self {
        let c = &team.central;
        let r2 = (0..MANAGERS)
            .map(|i| {
                BlockWeight::new(c, |id| match id {
                    ControlId::Leader { i: l } if l == i => Some(&spec.r2_leader[i]),
                    ControlId::Manager { i: l, j } if l == i => Some(&spec.r2_manager[i][j]),
                    ControlId::Executive { j, i: l } if l == i => Some(&spec.r2_exec[j][i]),
                    _ => None,
                })
            })
            .collect();
        let r3 = (0..EXECUTIVES)
            .map(|j| {
                BlockWeight::new(c, |id| match id {
                    ControlId::Manager { i, j: l } if l == j => Some(&spec.r3_manager[i][j]),
                    ControlId::Executive { j: l, i } if l == j => Some(&spec.r3_exec[j][i]),
                    _ => None,
                })
            })
            .collect();
        Self {
            n: spec.n(),
            mc: c.mc(),
            n_v: spec.dims.n_v,
            gamma2: spec.gamma * spec.gamma,
            q1: Dense::new(&spec.q1),
            g1: Dense::new(&spec.g1),
            rc: BlockWeight::new(c, |id| Some(spec.leader_weight(id))),
            q2: spec.q2.iter().map(Dense::new).collect(),
            g2: spec.g2.iter().map(Dense::new).collect(),
            r2,
            q3: spec.q3.iter().map(Dense::new).collect(),
            g3: spec.g3.iter().map(Dense::new).collect(),
            r3,
        }
    }

    /// `(J¹, J_v)` only.
    pub fn leader(&self, rec: &PathRecord, grid: TimeGrid) -> (f64, f64) {
        let (n, mc, nv) = (self.n, self.mc, self.n_v);
        let dt = grid.dt();
        let (mut j1, mut jv) = (0.0, 0.0);
        for k in 0..grid.steps {
            let x = &rec.x[k * n..(k + 1) * n];
            let h2 = self.q1.quad(x) + self.rc.quad(&rec.u[k * mc..(k + 1) * mc]);
            j1 += h2 * dt;
            jv += (self.gamma2 * rec.v[k * nv..(k + 1) * nv].iter().map(|a| a * a).sum::<f64>() - h2) * dt;
        }
        let terminal = self.g1.quad(&rec.x[grid.steps * n..(grid.steps + 1) * n]);
        (j1 + terminal, jv - terminal)
    }

    /// Left-endpoint Riemann sums plus terminal terms.
    pub fn evaluate(&self, rec: &PathRecord, grid: TimeGrid) -> PathCosts {
        let (n, mc, nv) = (self.n, self.mc, self.n_v);
        let dt = grid.dt();
        let steps = grid.steps;
        let mut out = PathCosts { j1: 0.0, j2: [0.0; MANAGERS], j3: [0.0; EXECUTIVES], jv: 0.0 };
        for k in 0..steps {
            let x = &rec.x[k * n..(k + 1) * n];
            let u = &rec.u[k * mc..(k + 1) * mc];
            let v = &rec.v[k * nv..(k + 1) * nv];
            let h2 = self.q1.quad(x) + self.rc.quad(u);
            out.j1 += h2 * dt;
            out.jv += (self.gamma2 * v.iter().map(|a| a * a).sum::<f64>() - h2) * dt;
            for i in 0..MANAGERS {
                out.j2[i] += (self.q2[i].quad(x) + self.r2[i].quad(u)) * dt;
            }
            for j in 0..EXECUTIVES {
                out.j3[j] += (self.q3[j].quad(x) + self.r3[j].quad(u)) * dt;
            }
        }
        let x = &rec.x[steps * n..(steps + 1) * n];
        let terminal = self.g1.quad(x);
        out.j1 += terminal;
        out.jv -= terminal;
        for i in 0..MANAGERS {
            out.j2[i] += self.g2[i].quad(x);
        }
        for j in 0..EXECUTIVES {
            out.j3[j] += self.g3[j].quad(x);
        }
        out
    }
}

struct Simulator<'a> {
    spec: &'a ProblemSpec,
    team: &'a TeamSolution,
    mode: Mode<'a>,
    a: Dense,
    bc: Dense,
    e: Dense,
    c: Dense,
    dc: Dense,
    kc: Vec<Dense>,
    kv: Vec<Dense>,
}

impl<'a> Simulator<'a> {
    fn new(spec: &'a ProblemSpec, team: &'a TeamSolution, mode: Mode<'a>) -> Self {
        let (kc, kv) = match mode {
            Mode::Deviation(d) => (
                team.kc.iter().map(|k| Dense::new(&(k + &d.delta_kc))).collect(),
                team.kv.iter().map(|k| Dense::new(&(k + &d.delta_kv))).collect(),
            ),
            _ => (team.kc.iter().map(Dense::new).collect(), team.kv.iter().map(Dense::new).collect()),
        };
        Self {
            spec,
            team,
            mode,
            a: Dense::new(&spec.a),
            bc: Dense::new(&team.central.bc),
            e: Dense::new(&spec.e),
            c: Dense::new(&spec.c),
            dc: Dense::new(&team.central.dc),
            kc,
            kv,
        }
    }

    fn replay(&self) -> Replay {
        match self.mode {
            Mode::Deviation(d) => d.replay,
            _ => Replay::None,
        }
    }

    fn incentive_controls(
        &self,
        level1: &Level1Solution,
        level2: &Level2Solution,
        k: usize,
        x: &[f64],
        path: usize,
        out: &mut [f64],
    ) -> Result<(), SimulateError> {
        let central = &self.team.central;
        let xc = CMat::from_iterator(x.len(), 1, x.iter().map(|v| Complex64::new(*v, 0.0)));
        let mut u = CMat::zeros(central.mc(), 1);
        let mut put = |id: ControlId, val: &CMat| {
            let b = central.block(id);
            u.view_mut((b.offset, 0), (b.size, 1)).copy_from(val);
        };
        let mut u3 = vec![vec![CMat::zeros(0, 0); MANAGERS]; EXECUTIVES];
        let mut u2 = vec![vec![CMat::zeros(0, 0); EXECUTIVES]; MANAGERS];
        for j in 0..EXECUTIVES {
            for i in 0..MANAGERS {
                let id = ControlId::Executive { j, i };
                let val = -(crate::linalg::complexify(&self.team.gain(k, id)) * &xc);
                put(id, &val);
                u3[j][i] = val;
            }
        }
        for i in 0..MANAGERS {
            for j in 0..EXECUTIVES {
                let val = &level2.theta[k][i][j] * &xc + &level2.params[k].rho[i][j] * &u3[j][i];
                put(ControlId::Manager { i, j }, &val);
                u2[i][j] = val;
            }
        }
        for i in 0..MANAGERS {
            let mut val = CMat::zeros(self.spec.dims.m1[i], 1);
            for j in 0..EXECUTIVES {
                let p = &level1.params[k];
                val += &level1.xi[k][i][j] * &xc + &p.eta[i][j] * &u2[i][j] + &p.zeta[i][j] * &u3[j][i];
            }
            put(ControlId::Leader { i }, &val);
        }
        for (r, z) in u.iter().enumerate() {
            let magnitude = z.norm();
            if z.im.abs() > 1e-8 * (1.0 + magnitude) {
                let id = central.blocks.iter().find(|b| r >= b.offset && r < b.offset + b.size).map(|b| b.id);
                return Err(SimulateError::ComplexControl {
                    control: id.map_or_else(|| format!("row {r}"), |id| id.label()),
                    path,
                    node: k,
                    imag: z.im,
                    magnitude,
                });
            }
            out[r] = z.re;
        }
        Ok(())
    }

    fn run(&self, dw: &[f64], path: usize, replay: Option<&PathRecord>) -> Result<PathRecord, SimulateError> {
        let s = self.spec;
        let (n, mc, nv) = (s.n(), self.team.central.mc(), s.dims.n_v);
        let steps = dw.len();
        let dt = self.team.grid().dt();
        let mut rec = PathRecord {
            x: vec![0.0; (steps + 1) * n],
            u: vec![0.0; (steps + 1) * mc],
            v: vec![0.0; (steps + 1) * nv],
        };
        rec.x[..n].copy_from_slice(s.x0.as_slice());
        let replay_mode = self.replay();
        let mut drift = vec![0.0; n];
        let mut diffusion = vec![0.0; n];
        for k in 0..=steps {
            let (done, rest) = rec.x.split_at_mut((k + 1) * n);
            let x = &done[k * n..];
            let u = &mut rec.u[k * mc..(k + 1) * mc];
            match (self.mode, replay_mode) {
                (_, Replay::Control) => u.copy_from_slice(&replay.expect("team record").u[k * mc..(k + 1) * mc]),
                (Mode::Incentive { level1, level2 }, _) => self.incentive_controls(level1, level2, k, x, path, u)?,
                _ => {
                    self.kc[k].apply_add(x, u);
                    u.iter_mut().for_each(|a| *a = -*a);
                }
            }
            let v = &mut rec.v[k * nv..(k + 1) * nv];
            match replay_mode {
                Replay::Disturbance => v.copy_from_slice(&replay.expect("team record").v[k * nv..(k + 1) * nv]),
                _ => self.kv[k].apply_add(x, v),
            }
            if k == steps {
                break;
            }
            drift.iter_mut().for_each(|a| *a = 0.0);
            diffusion.iter_mut().for_each(|a| *a = 0.0);
            self.a.apply_add(x, &mut drift);
            self.bc.apply_add(u, &mut drift);
            self.e.apply_add(v, &mut drift);
            self.c.apply_add(x, &mut diffusion);
            self.dc.apply_add(u, &mut diffusion);
            let next = &mut rest[..n];
            for d in 0..n {
                next[d] = x[d] + drift[d] * dt + diffusion[d] * dw[k];
                if !next[d].is_finite() {
                    return Err(SimulateError::NonFinite { path, node: k + 1 });
                }
            }
        }
        Ok(rec)
    }

    fn path(&self, noise: &NoiseBundle, p: usize) -> Result<PathRecord, SimulateError> {
        let dw = noise.increments(p);
        if self.replay() != Replay::None {
            let base = Simulator::new(self.spec, self.team, Mode::Team).run(&dw, p, None)?;
            self.run(&dw, p, Some(&base))
        } else {
            self.run(&dw, p, None)
        }
    }
}

fn check_grid(team: &TeamSolution, noise: &NoiseBundle) -> Result<(), SimulateError> {
    if team.kc.len() != noise.grid.nodes() {
        return Err(SimulateError::GridMismatch { found: team.kc.len(), expected: noise.grid.nodes() });
    }
    if noise.n_paths == 0 {
        return Err(SimulateError::NoPaths);
    }
    Ok(())
}

/// Simulate and keep every path (for small path counts).
pub fn simulate_hierarchy(
    spec: &ProblemSpec,
    team: &TeamSolution,
    noise: &NoiseBundle,
    mode: Mode<'_>,
) -> Result<TrajectoryBundle, SimulateError> {
    check_grid(team, noise)?;
    let sim = Simulator::new(spec, team, mode);
    let paths = (0..noise.n_paths).into_par_iter().map(|p| sim.path(noise, p)).collect::<Result<Vec<_>, _>>()?;
    Ok(TrajectoryBundle {
        grid: noise.grid,
        n: spec.n(),
        mc: team.central.mc(),
        n_v: spec.dims.n_v,
        mode: mode.tag(),
        paths,
    })
}

/// State-only Euler–Maruyama for `dx = a x dt + b x dW`.
pub fn simulate_closed_loop(a: &[RMat], b: &[RMat], x0: &RVec, noise: &NoiseBundle) -> Result<TrajectoryBundle, SimulateError> {
    if a.len() != noise.grid.nodes() || b.len() != noise.grid.nodes() {
        return Err(SimulateError::GridMismatch { found: a.len().min(b.len()), expected: noise.grid.nodes() });
    }
    let dt = noise.grid.dt();
    let n = x0.len();
    let paths = (0..noise.n_paths)
        .into_par_iter()
        .map(|p| {
            let dw = noise.increments(p);
            let mut x = x0.clone();
            let mut rec = PathRecord { x: Vec::with_capacity(dw.len() * n + n), u: Vec::new(), v: Vec::new() };
            rec.x.extend(x.iter());
            for (k, w) in dw.iter().enumerate() {
                x = &x + &a[k] * &x * dt + &b[k] * &x * *w;
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(SimulateError::NonFinite { path: p, node: k + 1 });
                }
                rec.x.extend(x.iter());
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrajectoryBundle { grid: noise.grid, n, mc: 0, n_v: 0, mode: ModeTag::TeamClosedLoop, paths })
}

/// Realized cost functionals of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathCosts {
    pub j1: f64,
    pub j2: [f64; MANAGERS],
    pub j3: [f64; EXECUTIVES],
    pub jv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if v.len() < 2 {
            return Self { mean, se: 0.0 };
        }
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Self { mean, se: (var / n).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub j1: Estimate,
    pub j2: [Estimate; MANAGERS],
    pub j3: [Estimate; EXECUTIVES],
    pub jv: Estimate,
    pub n_paths: usize,
    pub seed: u64,
}

impl CostReport {
    pub fn from_paths(costs: &[PathCosts], seed: u64) -> Self {
        let col = |f: &dyn Fn(&PathCosts) -> f64| Estimate::from_samples(&costs.iter().map(f).collect::<Vec<_>>());
        Self {
            j1: col(&|c| c.j1),
            j2: [0, 1].map(|i| col(&|c| c.j2[i])),
            j3: [0, 1, 2].map(|j| col(&|c| c.j3[j])),
            jv: col(&|c| c.jv),
            n_paths: costs.len(),
            seed,
        }
    }
}

pub fn estimate_costs(spec: &ProblemSpec, team: &TeamSolution, traj: &TrajectoryBundle, seed: u64) -> CostReport {
    let w = CostWeights::new(spec, team);
    let costs: Vec<PathCosts> = traj.paths.iter().map(|p| w.evaluate(p, traj.grid)).collect();
    CostReport::from_paths(&costs, seed)
}

/// Per-node mean and standard deviation of every state component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateBands {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

/// Output of a streamed Monte-Carlo run.
#[derive(Debug, Clone)]
pub struct MonteCarlo {
    pub costs: Vec<PathCosts>,
    pub bands: StateBands,
    pub max_abs_state: f64,
}

/// Simulate `noise.n_paths` paths in chunks, keeping only per-path costs and
/// state statistics. Reduction follows ascending path order.
pub fn monte_carlo(
    spec: &ProblemSpec,
    team: &TeamSolution,
    noise: &NoiseBundle,
    mode: Mode<'_>,
) -> Result<MonteCarlo, SimulateError> {
    check_grid(team, noise)?;
    let sim = Simulator::new(spec, team, mode);
    let w = CostWeights::new(spec, team);
    let nodes = noise.grid.nodes();
    let n = spec.n();
    let mut sum = vec![vec![0.0; n]; nodes];
    let mut sumsq = vec![vec![0.0; n]; nodes];
    let mut costs = Vec::with_capacity(noise.n_paths);
    let mut max_abs: f64 = 0.0;
    let mut start = 0;
    while start < noise.n_paths {
        let end = (start + CHUNK).min(noise.n_paths);
        let chunk = (start..end)
            .into_par_iter()
            .map(|p| sim.path(noise, p).map(|rec| (w.evaluate(&rec, noise.grid), rec.x)))
            .collect::<Result<Vec<_>, _>>()?;
        for (c, x) in chunk {
            costs.push(c);
            for k in 0..nodes {
                for d in 0..n {
                    let v = x[k * n + d];
                    sum[k][d] += v;
                    sumsq[k][d] += v * v;
                    max_abs = max_abs.max(v.abs());
                }
            }
        }
        start = end;
    }
    let m = noise.n_paths as f64;
    let mean: Vec<Vec<f64>> = sum.iter().map(|r| r.iter().map(|s| s / m).collect()).collect();
    let std = sumsq
        .iter()
        .zip(&mean)
        .map(|(r, mu)| r.iter().zip(mu).map(|(s, u)| (s / m - u * u).max(0.0).sqrt()).collect())
        .collect();
    Ok(MonteCarlo { costs, bands: StateBands { mean, std }, max_abs_state: max_abs })
}

/// Paired differences `J(deviation) − J(team)` of the leader functional and
/// the disturbance functional under common noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedDelta {
    pub j1: Estimate,
    pub jv: Estimate,
}

/// The team path is simulated once per noise path and shared by every
/// deviation, including replayed processes.
pub fn paired_differences(
    spec: &ProblemSpec,
    team: &TeamSolution,
    noise: &NoiseBundle,
    deviations: &[Deviation],
) -> Result<Vec<PairedDelta>, SimulateError> {
    check_grid(team, noise)?;
    let base = Simulator::new(spec, team, Mode::Team);
    let sims: Vec<Simulator> = deviations.iter().map(|d| Simulator::new(spec, team, Mode::Deviation(d))).collect();
    let w = CostWeights::new(spec, team);
    let mut j1: Vec<Vec<f64>> = vec![Vec::with_capacity(noise.n_paths); deviations.len()];
    let mut jv = j1.clone();
    let mut start = 0;
    while start < noise.n_paths {
        let end = (start + CHUNK).min(noise.n_paths);
        let chunk = (start..end)
            .into_par_iter()
            .map(|p| {
                let dw = noise.increments(p);
                let rec = base.run(&dw, p, None)?;
                let (b1, bv) = w.leader(&rec, noise.grid);
                sims.iter()
                    .map(|s| {
                        s.run(&dw, p, Some(&rec)).map(|r| {
                            let (d1, dv) = w.leader(&r, noise.grid);
                            (d1 - b1, dv - bv)
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        for row in chunk {
            for (d, (a, b)) in row.into_iter().enumerate() {
                j1[d].push(a);
                jv[d].push(b);
            }
        }
        start = end;
    }
    Ok(j1
        .iter()
        .zip(&jv)
        .map(|(a, b)| PairedDelta { j1: Estimate::from_samples(a), jv: Estimate::from_samples(b) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dimensions;
    use crate::riccati::DEFAULT_CONDITION_CAP;
    use crate::team::solve_team;

    fn bench(n: usize) -> (ProblemSpec, TeamSolution) {
        let spec = ProblemSpec::scalar_benchmark();
        let team = solve_team(&spec, TimeGrid::new(spec.horizon, n).unwrap(), DEFAULT_CONDITION_CAP).unwrap();
        (spec, team)
    }

    #[test]
    fn same_seed_same_noise() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let a = sample_brownian(g, 5, 7).unwrap().materialize();
        let b = sample_brownian(g, 5, 7).unwrap().materialize();
        assert_eq!(a, b);
        let c = sample_brownian(g, 5, 8).unwrap().materialize();
        assert_ne!(a, c);
    }

    #[test]
    fn increment_variance_matches_dt() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let noise = sample_brownian(g, 100_000, 3).unwrap();
        let all = noise.materialize();
        let var = all.iter().map(|x| x * x).sum::<f64>() / all.len() as f64;
        assert!((var / g.dt() - 1.0).abs() < 0.01, "{}", var / g.dt());
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 3.0 * g.dt().sqrt() / (all.len() as f64).sqrt());
    }

    #[test]
    fn paths_are_uncorrelated() {
        let g = TimeGrid::new(1.0, 2000).unwrap();
        let noise = sample_brownian(g, 2, 11).unwrap();
        let (a, b) = (noise.increments(0), noise.increments(1));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() < 0.1);
    }

    #[test]
    fn zero_drift_and_diffusion_hold_state() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let z = vec![RMat::zeros(1, 1); 21];
        let x0 = RVec::from_element(1, 0.7);
        let bundle = simulate_closed_loop(&z, &z, &x0, &sample_brownian(g, 4, 1).unwrap()).unwrap();
        assert!(bundle.paths.iter().all(|p| p.x.iter().all(|x| *x == 0.7)));
    }

    #[test]
    fn deterministic_limb_matches_exponential() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let a = vec![RMat::from_element(1, 1, 0.5); 1001];
        let b = vec![RMat::zeros(1, 1); 1001];
        let bundle = simulate_closed_loop(&a, &b, &RVec::from_element(1, 1.0), &sample_brownian(g, 1, 1).unwrap()).unwrap();
        assert!((bundle.state(0, 1000)[0] - 0.5f64.exp()).abs() < 2e-3);
    }

    #[test]
    fn zero_initial_state_is_exactly_zero() {
        let (mut spec, _) = bench(40);
        spec.x0[0] = 0.0;
        let team = solve_team(&spec, TimeGrid::new(spec.horizon, 40).unwrap(), DEFAULT_CONDITION_CAP).unwrap();
        let noise = sample_brownian(team.grid(), 50, 2).unwrap();
        let bundle = simulate_hierarchy(&spec, &team, &noise, Mode::Team).unwrap();
        for p in &bundle.paths {
            assert!(p.x.iter().chain(&p.u).chain(&p.v).all(|x| *x == 0.0));
        }
        assert_eq!(estimate_costs(&spec, &team, &bundle, 2).jv, Estimate { mean: 0.0, se: 0.0 });
    }

    #[test]
    fn zero_deviation_is_bit_identical() {
        let (spec, team) = bench(40);
        let noise = sample_brownian(team.grid(), 20, 9).unwrap();
        let base = simulate_hierarchy(&spec, &team, &noise, Mode::Team).unwrap();
        let dev = Deviation::zero(team.central.mc(), 1, 1);
        let other = simulate_hierarchy(&spec, &team, &noise, Mode::Deviation(&dev)).unwrap();
        assert_eq!(base.paths, other.paths);
    }

    #[test]
    fn team_mode_matches_closed_loop_coefficients() {
        let (spec, team) = bench(40);
        let noise = sample_brownian(team.grid(), 10, 4).unwrap();
        let full = simulate_hierarchy(&spec, &team, &noise, Mode::Team).unwrap();
        let cl = simulate_closed_loop(&team.a, &team.b, &spec.x0, &noise).unwrap();
        for p in 0..10 {
            for k in 0..=40 {
                assert!((full.state(p, k)[0] - cl.state(p, k)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_zero_costs() {
        let mut spec = ProblemSpec::zeros(Dimensions::scalar());
        spec.x0[0] = 1.0;
        spec.r1_leader = [RMat::from_element(1, 1, 1.0), RMat::from_element(1, 1, 1.0)];
        let team = solve_team(&spec, TimeGrid::new(1.0, 20).unwrap(), DEFAULT_CONDITION_CAP).unwrap();
        let mut zero = spec.clone();
        let z = || RMat::zeros(1, 1);
        zero.r1_leader = [z(), z()];
        zero.r1_manager = std::array::from_fn(|_| std::array::from_fn(|_| z()));
        zero.r1_exec = std::array::from_fn(|_| std::array::from_fn(|_| z()));
        zero.r2_leader = [z(), z()];
        zero.r2_manager = std::array::from_fn(|_| std::array::from_fn(|_| z()));
        zero.r2_exec = std::array::from_fn(|_| std::array::from_fn(|_| z()));
        zero.r3_manager = std::array::from_fn(|_| std::array::from_fn(|_| z()));
        zero.r3_exec = std::array::from_fn(|_| std::array::from_fn(|_| z()));
        zero.gamma = 1.0;
        let noise = sample_brownian(team.grid(), 30, 5).unwrap();
        let bundle = simulate_hierarchy(&spec, &team, &noise, Mode::Team).unwrap();
        let report = estimate_costs(&zero, &team, &bundle, 5);
        // v ≡ 0 because P ≡ 0
        for e in [report.j1, report.jv, report.j2[0], report.j2[1], report.j3[0], report.j3[1], report.j3[2]] {
            assert_eq!(e, Estimate { mean: 0.0, se: 0.0 });
        }
    }

    #[test]
    fn monte_carlo_is_deterministic_and_matches_bundle() {
        let (spec, team) = bench(40);
        let noise = sample_brownian(team.grid(), 1200, 21).unwrap();
        let a = monte_carlo(&spec, &team, &noise, Mode::Team).unwrap();
        let b = monte_carlo(&spec, &team, &noise, Mode::Team).unwrap();
        assert_eq!(a.costs, b.costs);
        assert_eq!(a.bands, b.bands);
        let bundle = simulate_hierarchy(&spec, &team, &noise, Mode::Team).unwrap();
        let direct = estimate_costs(&spec, &team, &bundle, 21);
        assert_eq!(CostReport::from_paths(&a.costs, 21), direct);
    }

    #[test]
    fn se_shrinks_with_paths() {
        let (spec, team) = bench(40);
        let se = |n| {
            let noise = sample_brownian(team.grid(), n, 33).unwrap();
            CostReport::from_paths(&monte_carlo(&spec, &team, &noise, Mode::Team).unwrap().costs, 33).j1.se
        };
        let ratio = se(4000) / se(8000);
        assert!((ratio - 2f64.sqrt()).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn zero_deviation_gives_zero_paired_differences() {
        let (spec, team) = bench(40);
        let noise = sample_brownian(team.grid(), 30, 6).unwrap();
        let mc = team.central.mc();
        let devs: Vec<Deviation> = [Replay::None, Replay::Disturbance, Replay::Control]
            .into_iter()
            .map(|replay| Deviation { replay, ..Deviation::zero(mc, 1, 1) })
            .collect();
        for r in paired_differences(&spec, &team, &noise, &devs).unwrap() {
            assert_eq!(r.j1, Estimate { mean: 0.0, se: 0.0 });
            assert_eq!(r.jv, Estimate { mean: 0.0, se: 0.0 });
        }
    }

    #[test]
    fn replayed_disturbance_is_the_team_realization() {
        let (spec, team) = bench(40);
        let noise = sample_brownian(team.grid(), 3, 8).unwrap();
        let base = simulate_hierarchy(&spec, &team, &noise, Mode::Team).unwrap();
        let mut dev = Deviation::zero(team.central.mc(), 1, 1);
        dev.delta_kc.fill(0.1);
        dev.replay = Replay::Disturbance;
        let other = simulate_hierarchy(&spec, &team, &noise, Mode::Deviation(&dev)).unwrap();
        for p in 0..3 {
            assert_eq!(base.paths[p].v, other.paths[p].v);
            assert_ne!(base.paths[p].x, other.paths[p].x);
        }
    }
}
