//! Randomized property suites over generated problem instances.

use num_complex::Complex64;
use proptest::prelude::*;

use stackelberg_hinf::incentive::scalar_level1;
use stackelberg_hinf::linalg::{asymmetry, vcat_c, CMat, RMat, RVec};
use stackelberg_hinf::model::{
    component_gain, level1_xi, level2_theta, ControlId, Dimensions, Level2Params, ProblemSpec, EXECUTIVES, MANAGERS,
};
use stackelberg_hinf::pipeline::{fmt_num, gain_header, parse_gain_header};
use stackelberg_hinf::riccati::{TimeGrid, DEFAULT_CONDITION_CAP};
use stackelberg_hinf::simulate::{monte_carlo, sample_brownian, Mode};
use stackelberg_hinf::team::{solve_team, TeamSolution};
use stackelberg_hinf::verify::p_residual;

/// Draws entries in order from a pool of uniform values in [-1, 1].
struct Pool<'a> {
    v: &'a [f64],
    k: usize,
}

impl Pool<'_> {
    fn next(&mut self) -> f64 {
        let x = self.v[self.k % self.v.len()];
        self.k += 1;
        x
    }

    fn mat(&mut self, r: usize, c: usize, scale: f64) -> RMat {
        RMat::from_fn(r, c, |_, _| scale * self.next())
    }

    fn psd(&mut self, n: usize, scale: f64) -> RMat {
        let m = self.mat(n, n, 1.0);
        m.transpose() * m * scale
    }

    /// 1×1 weight in [0.5, 1.5].
    fn weight(&mut self) -> RMat {
        RMat::from_element(1, 1, 1.0 + 0.5 * self.next())
    }
}

/// Random well-posed instance with state dimension `n` and scalar controls.
fn random_spec(n: usize, pool: &[f64], gamma: f64) -> ProblemSpec {
    let mut d = Dimensions::scalar();
    d.n = n;
    let mut s = ProblemSpec::zeros(d);
    let mut p = Pool { v: pool, k: 0 };
    s.a = p.mat(n, n, 1.0);
    s.c = p.mat(n, n, 0.5);
    s.e = p.mat(n, 1, 0.5);
    for i in 0..MANAGERS {
        s.b1[i] = p.mat(n, 1, 1.0);
        s.d1[i] = p.mat(n, 1, 0.5);
        s.r1_leader[i] = p.weight();
        s.q2[i] = p.psd(n, 0.5);
        s.g2[i] = p.psd(n, 0.5);
        for j in 0..EXECUTIVES {
            s.b2[i][j] = p.mat(n, 1, 1.0);
            s.d2[i][j] = p.mat(n, 1, 0.5);
            s.b3[j][i] = p.mat(n, 1, 1.0);
            s.d3[j][i] = p.mat(n, 1, 0.5);
            s.r1_manager[i][j] = p.weight();
            s.r1_exec[j][i] = p.weight();
        }
    }
    s.q1 = p.psd(n, 1.0);
    s.g1 = p.psd(n, 1.0) + RMat::identity(n, n) * 0.1;
    s.gamma = gamma;
    s.horizon = 0.5;
    s.x0 = RVec::from_fn(n, |_, _| p.next());
    s
}

fn solve(spec: &ProblemSpec, steps: usize) -> TeamSolution {
    solve_team(spec, TimeGrid::new(spec.horizon, steps).unwrap(), DEFAULT_CONDITION_CAP).unwrap()
}

fn pool() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, 97)
}

fn c(v: f64) -> CMat {
    CMat::from_element(1, 1, Complex64::new(v, 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn riccati_path_stays_symmetric(vals in pool(), n in 1usize..=3, gamma in 2.0..5.0f64) {
        let spec = random_spec(n, &vals, gamma);
        let team = solve(&spec, 80);
        for p in &team.p.values {
            prop_assert!(p.iter().all(|v| v.is_finite()));
            prop_assert!(asymmetry(p) <= 1e-12 * (1.0 + p.amax()));
        }
    }

    #[test]
    fn solves_and_simulations_are_deterministic(vals in pool(), seed in any::<u64>()) {
        let spec = random_spec(2, &vals, 3.0);
        let a = solve(&spec, 60);
        let b = solve(&spec, 60);
        prop_assert_eq!(&a.p.values, &b.p.values);
        prop_assert_eq!(&a.kc, &b.kc);
        let noise = sample_brownian(a.grid(), 64, seed).unwrap();
        let x = monte_carlo(&spec, &a, &noise, Mode::Team).unwrap();
        let y = monte_carlo(&spec, &b, &noise, Mode::Team).unwrap();
        prop_assert_eq!(x.costs, y.costs);
        prop_assert_eq!(x.bands, y.bands);
    }

    #[test]
    fn noise_paths_do_not_depend_on_path_count(seed in any::<u64>(), p in 0usize..16) {
        let grid = TimeGrid::new(1.0, 30).unwrap();
        let small = sample_brownian(grid, 16, seed).unwrap();
        let large = sample_brownian(grid, 400, seed).unwrap();
        prop_assert_eq!(small.increments(p), large.increments(p));
    }

    #[test]
    fn gain_slices_agree_with_component_gains(vals in pool(), n in 1usize..=3) {
        let spec = random_spec(n, &vals, 3.0);
        let team = solve(&spec, 40);
        for k in [0, 17, 40] {
            let kc = &team.kc[k];
            let mut rows: Vec<CMat> = Vec::new();
            for id in ControlId::all() {
                let direct = component_gain(&spec, id, &team.p.values[k], &team.lambda[k]);
                let slice = team.gain(k, id);
                prop_assert!((&direct - &slice).amax() <= 1e-12 * (1.0 + kc.amax()));
                rows.push(stackelberg_hinf::linalg::complexify(&slice));
            }
            let stacked = vcat_c(&rows.iter().collect::<Vec<_>>(), n);
            prop_assert_eq!(stackelberg_hinf::linalg::real_part(&stacked), kc.clone());
        }
    }

    #[test]
    fn xi_and_theta_reproduce_team_controls(
        vals in pool(),
        eta in prop::array::uniform2(prop::array::uniform3(-5.0..5.0f64)),
        zeta in prop::array::uniform2(prop::array::uniform3(-5.0..5.0f64)),
        rho in prop::array::uniform2(prop::array::uniform3(-5.0..5.0f64)),
    ) {
        let spec = random_spec(1, &vals, 3.0);
        let team = solve(&spec, 20);
        let l1 = scalar_level1(eta, zeta);
        let l2 = Level2Params { rho: rho.map(|r| r.map(c)) };
        for k in [0, 7, 20] {
            let node = team.node(k);
            let g = |id| stackelberg_hinf::linalg::complexify(&team.gain(k, id));
            let xi = level1_xi(&team.central, &node, &l1);
            let theta = level2_theta(&team.central, &node, &l2);
            for i in 0..MANAGERS {
                // Σ_j (ξ x + η u2* + ζ u3*) = u1* with u* = −K x.
                let mut sum = CMat::zeros(1, 1);
                for j in 0..EXECUTIVES {
                    sum += &xi[i][j] - &l1.eta[i][j] * g(ControlId::Manager { i, j }) - &l1.zeta[i][j] * g(ControlId::Executive { j, i });
                    let u2 = &theta[i][j] - &l2.rho[i][j] * g(ControlId::Executive { j, i });
                    let err = (u2 + g(ControlId::Manager { i, j })).norm();
                    prop_assert!(err <= 1e-12 * (1.0 + rho[i][j].abs()) * (1.0 + team.kc[k].amax()));
                }
                let err = (sum + g(ControlId::Leader { i })).norm();
                prop_assert!(err <= 1e-12 * 10.0 * (1.0 + team.kc[k].amax()));
            }
        }
    }

    #[test]
    fn residual_does_not_grow_under_refinement(vals in pool(), gamma in 2.0..5.0f64) {
        let spec = random_spec(1, &vals, gamma);
        let coarse = p_residual(&spec, &solve(&spec, 100), DEFAULT_CONDITION_CAP).unwrap().max;
        let fine = p_residual(&spec, &solve(&spec, 200), DEFAULT_CONDITION_CAP).unwrap().max;
        prop_assert!(fine <= 1.05 * coarse + 1e-14, "coarse {} fine {}", coarse, fine);
    }

    #[test]
    fn csv_numbers_and_headers_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite()), r in 0usize..4, col in 0usize..4) {
        prop_assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        for id in ControlId::all() {
            prop_assert_eq!(parse_gain_header(&gain_header(id, 4, 4, r, col)), Some((id, r, col)));
        }
    }
}
