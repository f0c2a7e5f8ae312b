//! Problem definition for the three-level hierarchy (one leader, two
//! managers, three executives) and assembly of the centralized, manager-view
//! and executive-view coefficient matrices.
//!
//! Index conventions are zero-based in code: manager `i ∈ {0,1}`, executive
//! `j ∈ {0,1,2}`. Labels written to files and reports are one-based.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{block_diag_c, block_diag_r, complexify, hcat_c, hcat_r, min_eigenvalue, CMat, RMat, RVec};

pub const MANAGERS: usize = 2;
pub const EXECUTIVES: usize = 3;

/// Tolerance on `|M - M^T|` for matrices that must be symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Slack for the positive-semidefinite check.
pub const PSD_TOL: f64 = -1e-10;
/// Default lower bound on the smallest eigenvalue of control weights.
pub const PD_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("matrix {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("matrix {name} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { name: String, asymmetry: f64 },
    #[error("dimension {name} must be strictly positive")]
    ZeroDimension { name: String },
    #[error("initial state has length {found}, expected {expected}")]
    InitialState { found: usize, expected: usize },
    #[error("{0} must be a positive finite number")]
    NonPositive(&'static str),
    #[error("non-finite entry in {name}")]
    NonFinite { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub n: usize,
    pub n_v: usize,
    /// Sizes of `u_1i` (leader control aimed at manager i).
    pub m1: [usize; MANAGERS],
    /// Sizes of `u_2ij`, indexed `[i][j]`.
    pub m2: [[usize; EXECUTIVES]; MANAGERS],
    /// Sizes of `u_3ji`, indexed `[j][i]`.
    pub m3: [[usize; MANAGERS]; EXECUTIVES],
}

impl Dimensions {
    pub fn scalar() -> Self {
        Self {
            n: 1,
            n_v: 1,
            m1: [1; MANAGERS],
            m2: [[1; EXECUTIVES]; MANAGERS],
            m3: [[1; MANAGERS]; EXECUTIVES],
        }
    }

    /// Size of the manager-i stacked control `u_ci = col(u_2i1, u_2i2, u_2i3, u_31i, u_32i, u_33i)`.
    pub fn mc_manager(&self, i: usize) -> usize {
        (0..EXECUTIVES).map(|j| self.m2[i][j] + self.m3[j][i]).sum()
    }

    /// Size of the executive-j stacked control `u_3j = col(u_3j1, u_3j2)`.
    pub fn m_exec(&self, j: usize) -> usize {
        self.m3[j].iter().sum()
    }

    pub fn total_controls(&self) -> usize {
        self.m1.iter().sum::<usize>()
            + self.m2.iter().flatten().sum::<usize>()
            + self.m3.iter().flatten().sum::<usize>()
    }

    fn check(&self) -> Result<(), ModelError> {
        let mut named = vec![("n".to_string(), self.n), ("n_v".to_string(), self.n_v)];
        for i in 0..MANAGERS {
            named.push((format!("m1[{}]", i + 1), self.m1[i]));
            for j in 0..EXECUTIVES {
                named.push((format!("m2[{}][{}]", i + 1, j + 1), self.m2[i][j]));
                named.push((format!("m3[{}][{}]", j + 1, i + 1), self.m3[j][i]));
            }
        }
        match named.into_iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ModelError::ZeroDimension { name }),
            None => Ok(()),
        }
    }
}

/// Full coefficient set of the game. Coefficients are constant in time.
///
/// Weight naming: `r{k}_{who}` is the weight in the level-k cost functional on
/// the control of `who` (`leader` = `u_1i`, `manager` = `u_2ij`, `exec` = `u_3ji`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub dims: Dimensions,
    #[serde(with = "crate::matrix_io::mat")]
    pub a: RMat,
    #[serde(with = "crate::matrix_io::mat")]
    pub c: RMat,
    #[serde(with = "crate::matrix_io::mat")]
    pub e: RMat,
    #[serde(with = "crate::matrix_io::mat2")]
    pub b1: [RMat; MANAGERS],
    #[serde(with = "crate::matrix_io::mat2")]
    pub d1: [RMat; MANAGERS],
    #[serde(with = "crate::matrix_io::mat23")]
    pub b2: [[RMat; EXECUTIVES]; MANAGERS],
    #[serde(with = "crate::matrix_io::mat23")]
    pub d2: [[RMat; EXECUTIVES]; MANAGERS],
    #[serde(with = "crate::matrix_io::mat32")]
    pub b3: [[RMat; MANAGERS]; EXECUTIVES],
    #[serde(with = "crate::matrix_io::mat32")]
    pub d3: [[RMat; MANAGERS]; EXECUTIVES],
    #[serde(with = "crate::matrix_io::mat")]
    pub q1: RMat,
    #[serde(with = "crate::matrix_io::mat2")]
    pub q2: [RMat; MANAGERS],
    #[serde(with = "crate::matrix_io::mat3")]
    pub q3: [RMat; EXECUTIVES],
    /// `R_i`
    #[serde(with = "crate::matrix_io::mat2")]
    pub r1_leader: [RMat; MANAGERS],
    /// `R_1ij`
    #[serde(with = "crate::matrix_io::mat23")]
    pub r1_manager: [[RMat; EXECUTIVES]; MANAGERS],
    /// `R̄_1ji`
    #[serde(with = "crate::matrix_io::mat32")]
    pub r1_exec: [[RMat; MANAGERS]; EXECUTIVES],
    /// `R_2i`
    #[serde(with = "crate::matrix_io::mat2")]
    pub r2_leader: [RMat; MANAGERS],
    /// `R_2ij`
    #[serde(with = "crate::matrix_io::mat23")]
    pub r2_manager: [[RMat; EXECUTIVES]; MANAGERS],
    /// `R̄_2ji`
    #[serde(with = "crate::matrix_io::mat32")]
    pub r2_exec: [[RMat; MANAGERS]; EXECUTIVES],
    /// `R_3ij`
    #[serde(with = "crate::matrix_io::mat23")]
    pub r3_manager: [[RMat; EXECUTIVES]; MANAGERS],
    /// `R̄_3ji`
    #[serde(with = "crate::matrix_io::mat32")]
    pub r3_exec: [[RMat; MANAGERS]; EXECUTIVES],
    #[serde(with = "crate::matrix_io::mat")]
    pub g1: RMat,
    #[serde(with = "crate::matrix_io::mat2")]
    pub g2: [RMat; MANAGERS],
    #[serde(with = "crate::matrix_io::mat3")]
    pub g3: [RMat; EXECUTIVES],
    pub gamma: f64,
    pub horizon: f64,
    #[serde(with = "crate::matrix_io::vector")]
    pub x0: RVec,
}

fn s(v: f64) -> RMat {
    RMat::from_element(1, 1, v)
}

fn s2(v: [f64; 2]) -> [RMat; 2] {
    v.map(s)
}

fn s3(v: [f64; 3]) -> [RMat; 3] {
    v.map(s)
}

fn s23(v: [[f64; 3]; 2]) -> [[RMat; 3]; 2] {
    v.map(s3)
}

fn s32(v: [[f64; 2]; 3]) -> [[RMat; 2]; 3] {
    v.map(s2)
}

impl ProblemSpec {
    /// The scalar benchmark instance (every block 1×1) used throughout the
    /// test-suite and the bundled example configuration.
    pub fn scalar_benchmark() -> Self {
        Self {
            dims: Dimensions::scalar(),
            a: s(0.8),
            c: s(1.0),
            e: s(-1.0),
            b1: s2([0.65, -1.0]),
            d1: s2([0.5, 1.0]),
            b2: s23([[-1.0, 0.2, 0.5], [0.2, -1.0, 0.2]]),
            d2: s23([[-0.1, 0.1, 0.2], [0.5, -2.0, 0.5]]),
            b3: s32([[0.5, 1.0], [0.5, 0.2], [0.5, 0.1]]),
            d3: s32([[0.2, 1.0], [0.2, 0.1], [0.5, 0.1]]),
            q1: s(1.0),
            q2: s2([0.8, 0.4]),
            q3: s3([0.5, 0.2, 0.5]),
            r1_leader: s2([1.0, 1.0]),
            r1_manager: s23([[0.5, 0.5, 1.0], [0.5, 1.0, 0.5]]),
            r1_exec: s32([[0.5, 0.1], [0.2, 0.1], [0.1, 0.1]]),
            r2_leader: s2([1.0, 1.0]),
            r2_manager: s23([[1.0, 0.8, 1.0], [0.9, 1.0, 1.0]]),
            r2_exec: s32([[0.3, 0.2], [0.4, 0.1], [0.2, 0.2]]),
            r3_manager: s23([[1.0, 0.2, 0.3], [1.0, 1.0, 1.0]]),
            r3_exec: s32([[1.0, 2.0], [1.0, 1.0], [0.5, 1.0]]),
            g1: s(1.0),
            g2: s2([1.0, 1.0]),
            g3: s3([0.5, 0.2, 0.5]),
            gamma: 1.0,
            horizon: 0.8,
            x0: RVec::from_element(1, 0.5),
        }
    }

    /// An instance of the given dimensions with every matrix zero, every
    /// control weight the identity, unit attenuation and horizon.
    pub fn zeros(dims: Dimensions) -> Self {
        let n = dims.n;
        let z = |r: usize, c: usize| RMat::zeros(r, c);
        let id = |k: usize| RMat::identity(k, k);
        let m1 = dims.m1;
        let m2 = dims.m2;
        let m3 = dims.m3;
        Self {
            a: z(n, n),
            c: z(n, n),
            e: z(n, dims.n_v),
            b1: [0, 1].map(|i| z(n, m1[i])),
            d1: [0, 1].map(|i| z(n, m1[i])),
            b2: [0, 1].map(|i| [0, 1, 2].map(|j| z(n, m2[i][j]))),
            d2: [0, 1].map(|i| [0, 1, 2].map(|j| z(n, m2[i][j]))),
            b3: [0, 1, 2].map(|j| [0, 1].map(|i| z(n, m3[j][i]))),
            d3: [0, 1, 2].map(|j| [0, 1].map(|i| z(n, m3[j][i]))),
            q1: z(n, n),
            q2: [z(n, n), z(n, n)],
            q3: [z(n, n), z(n, n), z(n, n)],
            r1_leader: [0, 1].map(|i| id(m1[i])),
            r1_manager: [0, 1].map(|i| [0, 1, 2].map(|j| id(m2[i][j]))),
            r1_exec: [0, 1, 2].map(|j| [0, 1].map(|i| id(m3[j][i]))),
            r2_leader: [0, 1].map(|i| id(m1[i])),
            r2_manager: [0, 1].map(|i| [0, 1, 2].map(|j| id(m2[i][j]))),
            r2_exec: [0, 1, 2].map(|j| [0, 1].map(|i| id(m3[j][i]))),
            r3_manager: [0, 1].map(|i| [0, 1, 2].map(|j| id(m2[i][j]))),
            r3_exec: [0, 1, 2].map(|j| [0, 1].map(|i| id(m3[j][i]))),
            g1: z(n, n),
            g2: [z(n, n), z(n, n)],
            g3: [z(n, n), z(n, n), z(n, n)],
            gamma: 1.0,
            horizon: 1.0,
            x0: RVec::zeros(n),
            dims,
        }
    }

    pub fn n(&self) -> usize {
        self.dims.n
    }

    /// `γ⁻² E Eᵀ P`
    pub fn attenuation_term(&self, p: &RMat) -> RMat {
        (&self.e * self.e.transpose() * p) / (self.gamma * self.gamma)
    }

    /// Every system/input matrix with its name and expected shape.
    fn shaped(&self) -> Vec<(String, &RMat, (usize, usize))> {
        let d = &self.dims;
        let n = d.n;
        let mut out = vec![
            ("A".to_string(), &self.a, (n, n)),
            ("C".to_string(), &self.c, (n, n)),
            ("E".to_string(), &self.e, (n, d.n_v)),
        ];
        for i in 0..MANAGERS {
            out.push((format!("B_1{}", i + 1), &self.b1[i], (n, d.m1[i])));
            out.push((format!("D_1{}", i + 1), &self.d1[i], (n, d.m1[i])));
            for j in 0..EXECUTIVES {
                out.push((format!("B_2{}{}", i + 1, j + 1), &self.b2[i][j], (n, d.m2[i][j])));
                out.push((format!("D_2{}{}", i + 1, j + 1), &self.d2[i][j], (n, d.m2[i][j])));
                out.push((format!("B_3{}{}", j + 1, i + 1), &self.b3[j][i], (n, d.m3[j][i])));
                out.push((format!("D_3{}{}", j + 1, i + 1), &self.d3[j][i], (n, d.m3[j][i])));
            }
        }
        out
    }

    /// State weights (must be PSD) with names.
    fn state_weights(&self) -> Vec<(String, &RMat)> {
        let mut out = vec![("Q_1".to_string(), &self.q1), ("G_1".to_string(), &self.g1)];
        for i in 0..MANAGERS {
            out.push((format!("Q_2{}", i + 1), &self.q2[i]));
            out.push((format!("G_2{}", i + 1), &self.g2[i]));
        }
        for j in 0..EXECUTIVES {
            out.push((format!("Q_3{}", j + 1), &self.q3[j]));
            out.push((format!("G_3{}", j + 1), &self.g3[j]));
        }
        out
    }

    /// Control weights (must be uniformly PD) with names and sizes.
    fn control_weights(&self) -> Vec<(String, &RMat, usize)> {
        let d = &self.dims;
        let mut out = Vec::new();
        for i in 0..MANAGERS {
            out.push((format!("R_{}", i + 1), &self.r1_leader[i], d.m1[i]));
            out.push((format!("R_2{}", i + 1), &self.r2_leader[i], d.m1[i]));
        }
        for i in 0..MANAGERS {
            for j in 0..EXECUTIVES {
                out.push((format!("R_1{}{}", i + 1, j + 1), &self.r1_manager[i][j], d.m2[i][j]));
                out.push((format!("R_2{}{}", i + 1, j + 1), &self.r2_manager[i][j], d.m2[i][j]));
                out.push((format!("R_3{}{}", i + 1, j + 1), &self.r3_manager[i][j], d.m2[i][j]));
            }
        }
        for j in 0..EXECUTIVES {
            for i in 0..MANAGERS {
                out.push((format!("Rbar_1{}{}", j + 1, i + 1), &self.r1_exec[j][i], d.m3[j][i]));
                out.push((format!("Rbar_2{}{}", j + 1, i + 1), &self.r2_exec[j][i], d.m3[j][i]));
                out.push((format!("Rbar_3{}{}", j + 1, i + 1), &self.r3_exec[j][i], d.m3[j][i]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assumption {
    /// State and terminal weights positive semidefinite.
    A1,
    /// Control weights uniformly positive definite.
    A2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub assumption: Assumption,
    pub matrix: String,
    pub min_eigenvalue: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:?} {:<10} min_eig={:+.6e} {}",
                c.assumption,
                c.matrix,
                c.min_eigenvalue,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Validate with the default positive-definiteness margin.
pub fn validate_problem(spec: &ProblemSpec) -> Result<ValidationReport, ModelError> {
    validate_problem_with(spec, PD_TOL)
}

/// Structural checks are hard errors; (A1)/(A2) outcomes are reported.
pub fn validate_problem_with(spec: &ProblemSpec, delta: f64) -> Result<ValidationReport, ModelError> {
    spec.dims.check()?;
    if !(spec.gamma.is_finite() && spec.gamma > 0.0) {
        return Err(ModelError::NonPositive("gamma"));
    }
    if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
        return Err(ModelError::NonPositive("horizon"));
    }
    if spec.x0.len() != spec.dims.n {
        return Err(ModelError::InitialState { found: spec.x0.len(), expected: spec.dims.n });
    }
    let n = spec.dims.n;
    let mut all: Vec<(String, &RMat, (usize, usize))> = spec.shaped();
    all.extend(spec.state_weights().into_iter().map(|(name, m)| (name, m, (n, n))));
    all.extend(spec.control_weights().into_iter().map(|(name, m, k)| (name, m, (k, k))));
    for (name, m, expected) in &all {
        if m.shape() != *expected {
            return Err(ModelError::Shape { name: name.clone(), found: m.shape(), expected: *expected });
        }
        if !m.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite { name: name.clone() });
        }
    }
    if !spec.x0.iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite { name: "x0".into() });
    }

    let mut checks = Vec::new();
    for (name, m) in spec.state_weights() {
        let asym = crate::linalg::asymmetry(m);
        if asym > SYMMETRY_TOL {
            return Err(ModelError::NotSymmetric { name, asymmetry: asym });
        }
        let ev = min_eigenvalue(m);
        checks.push(AssumptionCheck { assumption: Assumption::A1, matrix: name, min_eigenvalue: ev, passed: ev >= PSD_TOL });
    }
    for (name, m, _) in spec.control_weights() {
        let asym = crate::linalg::asymmetry(m);
        if asym > SYMMETRY_TOL {
            return Err(ModelError::NotSymmetric { name, asymmetry: asym });
        }
        let ev = min_eigenvalue(m);
        checks.push(AssumptionCheck { assumption: Assumption::A2, matrix: name, min_eigenvalue: ev, passed: ev >= delta });
    }
    Ok(ValidationReport { checks })
}

/// Identity of one block of the centralized control vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ControlId {
    /// `u_1i`
    Leader { i: usize },
    /// `u_2ij`
    Manager { i: usize, j: usize },
    /// `u_3ji`
    Executive { j: usize, i: usize },
}

impl ControlId {
    /// Blocks in the fixed centralized order
    /// `u_11 u_12 u_211 u_212 u_213 u_221 u_222 u_223 u_311 u_312 u_321 u_322 u_331 u_332`.
    pub fn all() -> Vec<ControlId> {
        let mut v: Vec<ControlId> = (0..MANAGERS).map(|i| ControlId::Leader { i }).collect();
        for i in 0..MANAGERS {
            for j in 0..EXECUTIVES {
                v.push(ControlId::Manager { i, j });
            }
        }
        for j in 0..EXECUTIVES {
            for i in 0..MANAGERS {
                v.push(ControlId::Executive { j, i });
            }
        }
        v
    }

    /// Blocks of manager i's stacked control `u_ci`.
    pub fn manager_stack(i: usize) -> [ControlId; 6] {
        [
            ControlId::Manager { i, j: 0 },
            ControlId::Manager { i, j: 1 },
            ControlId::Manager { i, j: 2 },
            ControlId::Executive { j: 0, i },
            ControlId::Executive { j: 1, i },
            ControlId::Executive { j: 2, i },
        ]
    }

    pub fn label(&self) -> String {
        match *self {
            ControlId::Leader { i } => format!("u_1_{}", i + 1),
            ControlId::Manager { i, j } => format!("u_2_{}_{}", i + 1, j + 1),
            ControlId::Executive { j, i } => format!("u_3_{}_{}", j + 1, i + 1),
        }
    }

    pub fn parse_label(s: &str) -> Option<ControlId> {
        let parts: Vec<&str> = s.split('_').collect();
        let idx = |k: usize| -> Option<usize> { parts.get(k)?.parse::<usize>().ok()?.checked_sub(1) };
        match (parts.first(), parts.get(1)) {
            (Some(&"u"), Some(&"1")) if parts.len() == 3 => {
                let i = idx(2)?;
                (i < MANAGERS).then_some(ControlId::Leader { i })
            }
            (Some(&"u"), Some(&"2")) if parts.len() == 4 => {
                let (i, j) = (idx(2)?, idx(3)?);
                (i < MANAGERS && j < EXECUTIVES).then_some(ControlId::Manager { i, j })
            }
            (Some(&"u"), Some(&"3")) if parts.len() == 4 => {
                let (j, i) = (idx(2)?, idx(3)?);
                (i < MANAGERS && j < EXECUTIVES).then_some(ControlId::Executive { j, i })
            }
            _ => None,
        }
    }

    pub fn size(&self, d: &Dimensions) -> usize {
        match *self {
            ControlId::Leader { i } => d.m1[i],
            ControlId::Manager { i, j } => d.m2[i][j],
            ControlId::Executive { j, i } => d.m3[j][i],
        }
    }
}

impl fmt::Display for ControlId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ControlBlock {
    pub id: ControlId,
    pub offset: usize,
    pub size: usize,
}

impl ProblemSpec {
    pub fn input_matrices(&self, id: ControlId) -> (&RMat, &RMat) {
        match id {
            ControlId::Leader { i } => (&self.b1[i], &self.d1[i]),
            ControlId::Manager { i, j } => (&self.b2[i][j], &self.d2[i][j]),
            ControlId::Executive { j, i } => (&self.b3[j][i], &self.d3[j][i]),
        }
    }

    /// Weight on this control inside the leader's cost `J¹`.
    pub fn leader_weight(&self, id: ControlId) -> &RMat {
        match id {
            ControlId::Leader { i } => &self.r1_leader[i],
            ControlId::Manager { i, j } => &self.r1_manager[i][j],
            ControlId::Executive { j, i } => &self.r1_exec[j][i],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentralizedForm {
    pub bc: RMat,
    pub dc: RMat,
    pub rc: RMat,
    pub rc_inv: RMat,
    pub blocks: Vec<ControlBlock>,
}

impl CentralizedForm {
    pub fn mc(&self) -> usize {
        self.rc.nrows()
    }

    pub fn block(&self, id: ControlId) -> ControlBlock {
        *self.blocks.iter().find(|b| b.id == id).expect("every control id has a block")
    }

    /// Rows of a centralized gain (`mc × n`) belonging to one control block.
    pub fn slice_rows<T: nalgebra::Scalar>(&self, m: &nalgebra::DMatrix<T>, id: ControlId) -> nalgebra::DMatrix<T> {
        let b = self.block(id);
        m.rows(b.offset, b.size).into_owned()
    }
}

pub fn assemble_centralized(spec: &ProblemSpec) -> CentralizedForm {
    let ids = ControlId::all();
    let mut blocks = Vec::with_capacity(ids.len());
    let mut offset = 0;
    for id in ids {
        let size = id.size(&spec.dims);
        blocks.push(ControlBlock { id, offset, size });
        offset += size;
    }
    let n = spec.n();
    let bs: Vec<&RMat> = blocks.iter().map(|b| spec.input_matrices(b.id).0).collect();
    let ds: Vec<&RMat> = blocks.iter().map(|b| spec.input_matrices(b.id).1).collect();
    let rs: Vec<&RMat> = blocks.iter().map(|b| spec.leader_weight(b.id)).collect();
    let rc = block_diag_r(&rs);
    let inv_blocks: Vec<RMat> = rs
        .iter()
        .map(|r| (*r).clone().try_inverse().expect("control weights are positive definite"))
        .collect();
    let rc_inv = block_diag_r(&inv_blocks.iter().collect::<Vec<_>>());
    CentralizedForm { bc: hcat_r(&bs, n), dc: hcat_r(&ds, n), rc, rc_inv, blocks }
}

/// Team-optimal feedback gain for one control block,
/// `K = R⁻¹(BᵀP + DᵀΛ)` with the control given by `u* = −K x̄`.
pub fn component_gain(spec: &ProblemSpec, id: ControlId, p: &RMat, lambda: &RMat) -> RMat {
    let (b, d) = spec.input_matrices(id);
    let r_inv = spec.leader_weight(id).clone().try_inverse().expect("control weights are positive definite");
    r_inv * (b.transpose() * p + d.transpose() * lambda)
}

/// Team quantities at one time node that the incentive layers consume.
#[derive(Debug, Clone)]
pub struct NodeTeamData {
    pub p: RMat,
    pub lambda: RMat,
    /// Centralized gain, `u*_c = −K_c x̄`.
    pub kc: RMat,
}

impl NodeTeamData {
    pub fn gain(&self, central: &CentralizedForm, id: ControlId) -> RMat {
        central.slice_rows(&self.kc, id)
    }

    /// Stacked team gain of manager i's control `u_ci` (`mc_i × n`).
    pub fn manager_gain(&self, central: &CentralizedForm, i: usize) -> RMat {
        let blocks: Vec<RMat> = ControlId::manager_stack(i).iter().map(|id| self.gain(central, *id)).collect();
        let refs: Vec<&RMat> = blocks.iter().collect();
        vstack_r(&refs)
    }
}

fn vstack_r(blocks: &[&RMat]) -> RMat {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = RMat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Leader incentive parameters at one node: `η_1ij`, `ζ_1ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct Level1Params {
    pub eta: [[CMat; EXECUTIVES]; MANAGERS],
    pub zeta: [[CMat; EXECUTIVES]; MANAGERS],
}

impl Level1Params {
    pub fn zeros(d: &Dimensions) -> Self {
        Self {
            eta: [0, 1].map(|i| [0, 1, 2].map(|j| CMat::zeros(d.m1[i], d.m2[i][j]))),
            zeta: [0, 1].map(|i| [0, 1, 2].map(|j| CMat::zeros(d.m1[i], d.m3[j][i]))),
        }
    }

    /// `N_i = [η_i1 η_i2 η_i3 ζ_i1 ζ_i2 ζ_i3]` (`m1_i × mc_i`).
    pub fn stacked(&self, i: usize) -> CMat {
        let rows = self.eta[i][0].nrows();
        hcat_c(
            &[&self.eta[i][0], &self.eta[i][1], &self.eta[i][2], &self.zeta[i][0], &self.zeta[i][1], &self.zeta[i][2]],
            rows,
        )
    }

    pub fn set_stacked(&mut self, i: usize, n_i: &CMat) {
        let mut c = 0;
        for j in 0..EXECUTIVES {
            let w = self.eta[i][j].ncols();
            self.eta[i][j] = n_i.columns(c, w).into_owned();
            c += w;
        }
        for j in 0..EXECUTIVES {
            let w = self.zeta[i][j].ncols();
            self.zeta[i][j] = n_i.columns(c, w).into_owned();
            c += w;
        }
    }

    pub fn to_vec(&self) -> Vec<Complex64> {
        (0..MANAGERS).flat_map(|i| crate::linalg::vec_c(&self.stacked(i))).collect()
    }

    pub fn from_vec(template: &Self, v: &[Complex64]) -> Self {
        let mut out = template.clone();
        let mut off = 0;
        for i in 0..MANAGERS {
            let s = template.stacked(i);
            let len = s.len();
            out.set_stacked(i, &crate::linalg::unvec_c(&v[off..off + len], s.nrows(), s.ncols()));
            off += len;
        }
        out
    }

    pub fn max_imag(&self) -> f64 {
        self.eta
            .iter()
            .chain(self.zeta.iter())
            .flatten()
            .map(crate::linalg::max_imag)
            .fold(0.0, f64::max)
    }
}

/// Manager incentive parameters at one node: `ρ_2ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct Level2Params {
    pub rho: [[CMat; EXECUTIVES]; MANAGERS],
}

impl Level2Params {
    pub fn zeros(d: &Dimensions) -> Self {
        Self { rho: [0, 1].map(|i| [0, 1, 2].map(|j| CMat::zeros(d.m2[i][j], d.m3[j][i]))) }
    }

    pub fn to_vec(&self) -> Vec<Complex64> {
        self.rho.iter().flatten().flat_map(crate::linalg::vec_c).collect()
    }

    pub fn from_vec(template: &Self, v: &[Complex64]) -> Self {
        let mut out = template.clone();
        let mut off = 0;
        for i in 0..MANAGERS {
            for j in 0..EXECUTIVES {
                let (r, c) = template.rho[i][j].shape();
                out.rho[i][j] = crate::linalg::unvec_c(&v[off..off + r * c], r, c);
                off += r * c;
            }
        }
        out
    }

    pub fn max_imag(&self) -> f64 {
        self.rho.iter().flatten().map(crate::linalg::max_imag).fold(0.0, f64::max)
    }
}

/// Leader feedback parameters `ξ_1ij` from their defining identity:
///
/// `ξ_1ij = −⅓·K_1i + η_1ij K_2ij + ζ_1ij K_3ji`
///
/// The leader's own team gain is split evenly over the three `j` terms so
/// that `Σ_j ξ_1ij x + Σ_j η_1ij u*_2ij + Σ_j ζ_1ij u*_3ji = u*_1i`.
pub fn level1_xi(
    central: &CentralizedForm,
    team: &NodeTeamData,
    params: &Level1Params,
) -> [[CMat; EXECUTIVES]; MANAGERS] {
    let third = Complex64::new(1.0 / EXECUTIVES as f64, 0.0);
    [0, 1].map(|i| {
        let k1 = complexify(&team.gain(central, ControlId::Leader { i }));
        [0, 1, 2].map(|j| {
            let k2 = complexify(&team.gain(central, ControlId::Manager { i, j }));
            let k3 = complexify(&team.gain(central, ControlId::Executive { j, i }));
            -(&k1 * third) + &params.eta[i][j] * k2 + &params.zeta[i][j] * k3
        })
    })
}

/// Manager feedback parameters `θ_2ij = −K_2ij + ρ_2ij K_3ji`.
pub fn level2_theta(
    central: &CentralizedForm,
    team: &NodeTeamData,
    params: &Level2Params,
) -> [[CMat; EXECUTIVES]; MANAGERS] {
    [0, 1].map(|i| {
        [0, 1, 2].map(|j| {
            let k2 = complexify(&team.gain(central, ControlId::Manager { i, j }));
            let k3 = complexify(&team.gain(central, ControlId::Executive { j, i }));
            -k2 + &params.rho[i][j] * k3
        })
    })
}

/// Manager i's view of the game after the leader's announced incentive.
#[derive(Debug, Clone)]
pub struct ManagerForm {
    /// `B̄_ci = [B̄_2i1 B̄_2i2 B̄_2i3 B̄_31i B̄_32i B̄_33i]`
    pub bbar: CMat,
    pub dbar: CMat,
    pub qbar: CMat,
    pub s: CMat,
    pub rc: CMat,
    /// Sizes of the η-part and ζ-part of `u_ci`, for splitting `rc`.
    pub split: usize,
}

impl ManagerForm {
    /// The four sub-blocks `(R¹, R², R³, R⁴)` of `R_ci`.
    pub fn rc_blocks(&self) -> [CMat; 4] {
        let k = self.split;
        let m = self.rc.nrows() - k;
        [
            self.rc.view((0, 0), (k, k)).into_owned(),
            self.rc.view((0, k), (k, m)).into_owned(),
            self.rc.view((k, 0), (m, k)).into_owned(),
            self.rc.view((k, k), (m, m)).into_owned(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ManagerView {
    pub abar: CMat,
    pub cbar: CMat,
    pub xi: [[CMat; EXECUTIVES]; MANAGERS],
    pub managers: [ManagerForm; MANAGERS],
}

pub fn assemble_manager_view(
    spec: &ProblemSpec,
    central: &CentralizedForm,
    team: &NodeTeamData,
    params: &Level1Params,
) -> ManagerView {
    let n = spec.n();
    let xi = level1_xi(central, team, params);
    let atten = complexify(&(&spec.a + spec.attenuation_term(&team.p)));
    let mut abar = atten;
    let mut cbar = complexify(&spec.c);
    let managers = [0, 1].map(|i| {
        let b1 = complexify(&spec.b1[i]);
        let d1 = complexify(&spec.d1[i]);
        let xi_sum = xi[i].iter().fold(CMat::zeros(spec.dims.m1[i], n), |acc, x| acc + x);
        abar += &b1 * &xi_sum;
        cbar += &d1 * &xi_sum;

        let stack = params.stacked(i);
        let ids = ControlId::manager_stack(i);
        let bs: Vec<CMat> = ids.iter().map(|id| complexify(spec.input_matrices(*id).0)).collect();
        let ds: Vec<CMat> = ids.iter().map(|id| complexify(spec.input_matrices(*id).1)).collect();
        let b_i = hcat_c(&bs.iter().collect::<Vec<_>>(), n);
        let d_i = hcat_c(&ds.iter().collect::<Vec<_>>(), n);
        let bbar = &b_i + &b1 * &stack;
        let dbar = &d_i + &d1 * &stack;

        let r2 = complexify(&spec.r2_leader[i]);
        let qbar = complexify(&spec.q2[i]) + xi_sum.transpose() * &r2 * &xi_sum;
        let s = xi_sum.transpose() * &r2 * &stack;
        let diag: Vec<CMat> = (0..EXECUTIVES)
            .map(|j| complexify(&spec.r2_manager[i][j]))
            .chain((0..EXECUTIVES).map(|j| complexify(&spec.r2_exec[j][i])))
            .collect();
        let rc = block_diag_c(&diag.iter().collect::<Vec<_>>()) + stack.transpose() * &r2 * &stack;
        let split = (0..EXECUTIVES).map(|j| spec.dims.m2[i][j]).sum();
        ManagerForm { bbar, dbar, qbar, s, rc, split }
    });
    ManagerView { abar, cbar, xi, managers }
}

/// Executive j's view after both upper levels announce their incentives.
#[derive(Debug, Clone)]
pub struct ExecutiveForm {
    /// `B̂_3j = [B̂_3j1 B̂_3j2]`
    pub bhat: CMat,
    pub dhat: CMat,
    pub qhat: CMat,
    pub s: CMat,
    pub r: CMat,
}

#[derive(Debug, Clone)]
pub struct ExecutiveView {
    pub ahat: CMat,
    pub chat: CMat,
    pub theta: [[CMat; EXECUTIVES]; MANAGERS],
    pub executives: [ExecutiveForm; EXECUTIVES],
}

/// Assemble the executive-level system. `xi` must be the leader's `ξ*` at the
/// same node (from [`level1_xi`] at the converged level-1 parameters).
pub fn assemble_executive_view(
    spec: &ProblemSpec,
    central: &CentralizedForm,
    team: &NodeTeamData,
    level1: &Level1Params,
    xi: &[[CMat; EXECUTIVES]; MANAGERS],
    level2: &Level2Params,
) -> ExecutiveView {
    let n = spec.n();
    let theta = level2_theta(central, team, level2);
    let mut ahat = complexify(&(&spec.a + spec.attenuation_term(&team.p)));
    let mut chat = complexify(&spec.c);
    for i in 0..MANAGERS {
        let b1 = complexify(&spec.b1[i]);
        let d1 = complexify(&spec.d1[i]);
        for j in 0..EXECUTIVES {
            let lead = &xi[i][j] + &level1.eta[i][j] * &theta[i][j];
            ahat += &b1 * &lead + complexify(&spec.b2[i][j]) * &theta[i][j];
            chat += &d1 * &lead + complexify(&spec.d2[i][j]) * &theta[i][j];
        }
    }
    let executives = [0, 1, 2].map(|j| {
        let mut bh = Vec::with_capacity(MANAGERS);
        let mut dh = Vec::with_capacity(MANAGERS);
        let mut sh = Vec::with_capacity(MANAGERS);
        let mut rh = Vec::with_capacity(MANAGERS);
        let mut qhat = complexify(&spec.q3[j]);
        for i in 0..MANAGERS {
            let rho = &level2.rho[i][j];
            let mix = &level1.eta[i][j] * rho + &level1.zeta[i][j];
            bh.push(complexify(&spec.b1[i]) * &mix + complexify(&spec.b2[i][j]) * rho + complexify(&spec.b3[j][i]));
            dh.push(complexify(&spec.d1[i]) * &mix + complexify(&spec.d2[i][j]) * rho + complexify(&spec.d3[j][i]));
            let r3 = complexify(&spec.r3_manager[i][j]);
            qhat += theta[i][j].transpose() * &r3 * &theta[i][j];
            sh.push(theta[i][j].transpose() * &r3 * rho);
            rh.push(complexify(&spec.r3_exec[j][i]) + rho.transpose() * &r3 * rho);
        }
        ExecutiveForm {
            bhat: hcat_c(&bh.iter().collect::<Vec<_>>(), n),
            dhat: hcat_c(&dh.iter().collect::<Vec<_>>(), n),
            qhat,
            s: hcat_c(&sh.iter().collect::<Vec<_>>(), n),
            r: block_diag_c(&rh.iter().collect::<Vec<_>>()),
        }
    });
    ExecutiveView { ahat, chat, theta, executives }
}
