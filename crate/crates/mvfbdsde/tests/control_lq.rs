use std::sync::{Arc, OnceLock};

use mvfbdsde::control::*;
use mvfbdsde::measure::EmpiricalLaw;
use mvfbdsde::model::{At, Block, CoefficientSet};
use mvfbdsde::paths::{sample_driver_pair, BrownianPair, TimeGrid};
use mvfbdsde::regression::RegressionConfig;
use mvfbdsde::Error;

const STEPS: usize = 50;
const PARTICLES: usize = 64;

struct Fixture {
    params: LqParams,
    problem: ControlProblem,
    drivers: BrownianPair,
    oracle: LqOracle,
    candidate: ControlPath,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let params = LqParams::default();
        let problem = lq_problem(&params);
        let grid = TimeGrid::new(params.horizon, STEPS).unwrap();
        let drivers = sample_driver_pair(grid, 1, 1, PARTICLES, 11).unwrap();
        let oracle = lq_oracle(&params, grid).unwrap();
        let candidate = first_order_candidate(&problem, &oracle.control(), &drivers, RegressionConfig::default(), &ControlSolve::default(), 1e-9, 30).unwrap();
        Fixture { params, problem, drivers, oracle, candidate }
    })
}

fn reg() -> RegressionConfig {
    RegressionConfig::default()
}

#[test]
fn adjoint_tracks_the_two_point_reduction() {
    let f = fixture();
    let ctl = f.oracle.control();
    let s = ControlSolve::default();
    let state = solve_state(&f.problem, &ctl, &f.drivers, reg(), &s).unwrap();
    let adj = solve_adjoint(&f.problem, &state.final_state, &ctl, &f.drivers, reg(), &s).unwrap();
    let mut err: f64 = 0.0;
    for k in 0..=STEPS {
        let m = state.final_state.mean(k);
        let a = adj.chi.mean(k);
        err = err.max((m[0] - f.oracle.y[k]).abs()).max((m[1] - f.oracle.big_y[k]).abs());
        err = err.max((a[0] - f.oracle.p[k]).abs()).max((a[1] - f.oracle.big_p[k]).abs());
    }
    assert!(err <= 0.02, "max deviation {err}");
    assert!(adj.initial_residual <= 1e-10 && adj.terminal_residual <= 1e-10);
}

#[test]
fn adjoint_is_linear_in_the_costs() {
    let f = fixture();
    let mut doubled = f.problem.clone();
    let (l, phi, psi) = (f.problem.running_cost.clone(), f.problem.terminal_cost.clone(), f.problem.initial_cost.clone());
    doubled.running_cost = Arc::new(move |t, v, u, m| 2.0 * l(t, v, u, m));
    doubled.terminal_cost = Arc::new(move |y, m| 2.0 * phi(y, m));
    doubled.initial_cost = Arc::new(move |y, m| 2.0 * psi(y, m));
    let ctl = f.oracle.control();
    let s = ControlSolve::default();
    let state = solve_state(&f.problem, &ctl, &f.drivers, reg(), &s).unwrap().final_state;
    let one = solve_adjoint(&f.problem, &state, &ctl, &f.drivers, reg(), &s).unwrap();
    let two = solve_adjoint(&doubled, &state, &ctl, &f.drivers, reg(), &s).unwrap();
    for (a, b) in one.chi.data.iter().zip(&two.chi.data) {
        assert!((2.0 * a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} {b}");
    }
}

#[test]
fn law_free_problem_has_no_mean_field_adjoint_terms() {
    let f = fixture();
    let mut free = f.problem.clone();
    let k = f.params.k;
    free.dynamics = Arc::new(move |_, v, u, _, out: &mut [f64]| {
        out[0] = k * v[0];
        out[1] = -k * v[1] + u[0];
        out[2] = 0.0;
        out[3] = 0.0;
    });
    let ctl = ControlPath::Constant(vec![0.5]);
    let state = solve_state(&free, &ctl, &f.drivers, reg(), &ControlSolve::default()).unwrap().final_state;
    let sys = build_adjoint_coefficients(&free, &state, &ctl).unwrap();
    let chi = [0.4, -0.3, 0.2, 0.1];
    let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
    let at = At { t: 0.2, node: 10, particle: 3 };
    sys.coefficients.eval(at, &chi, &EmpiricalLaw::dirac(&[0.0; 4]), &mut a);
    sys.coefficients.eval(at, &chi, &EmpiricalLaw::dirac(&[5.0, -2.0, 1.0, 3.0]), &mut b);
    for i in 0..4 {
        assert!((a[i] - b[i]).abs() < 1e-8);
    }
}

#[test]
fn candidate_cost_matches_the_reduction() {
    let f = fixture();
    let est = estimate_cost(&f.problem, &f.candidate, &f.drivers, reg(), &ControlSolve::default()).unwrap();
    // Deterministic scenario: the gap is the O(Δt) time discretization, not sampling.
    assert!((est.j - f.oracle.cost).abs() <= 0.01, "{} vs {}", est.j, f.oracle.cost);
    assert!(est.se < 1e-6);
}

#[test]
fn smp_certifies_the_candidate() {
    let f = fixture();
    let r = verify_smp(&f.problem, &f.candidate, 20, &f.drivers, reg(), &SmpOptions::default()).unwrap();
    assert!(r.verdict, "{}", r.to_text());
    assert_eq!(r.checks.len(), 4);
    assert!(r.to_text().contains("sampled-certified"));
}

#[test]
fn suboptimal_constant_is_refuted() {
    let f = fixture();
    let r = verify_smp(&f.problem, &ControlPath::Constant(vec![1.0]), 10, &f.drivers, reg(), &SmpOptions::default()).unwrap();
    assert!(!r.verdict);
    let c = r.check("max_condition").unwrap();
    assert!(!c.pass && c.witness.contains("t="), "{}", r.to_text());
}

#[test]
fn candidate_leaving_the_box_is_rejected() {
    let f = fixture();
    let ControlPath::Deterministic { values, .. } = &f.candidate else { panic!() };
    let off = ControlPath::Deterministic { du: 1, values: values.iter().map(|u| u + 10.0).collect() };
    let err = verify_smp(&f.problem, &off, 1, &f.drivers, reg(), &SmpOptions::default());
    assert!(matches!(err, Err(Error::Inadmissible { node: 0 })));
}

#[test]
fn finite_differences_agree_with_the_adjoint_gradient() {
    let f = fixture();
    let s = ControlSolve::default();
    let zero = vec![0.0; STEPS + 1];
    let r = gradient_consistency(&f.problem, &ControlPath::Constant(vec![0.0]), &zero, 1e-3, &f.drivers, reg(), &s).unwrap();
    assert_eq!((r.finite_difference, r.adjoint, r.relative), (0.0, 0.0, 0.0));
    for (i, freq) in [0.7, 2.0, 5.0].into_iter().enumerate() {
        let dir: Vec<f64> = (0..=STEPS).map(|k| (freq * k as f64 / STEPS as f64 + i as f64).cos()).collect();
        let r = gradient_consistency(&f.problem, &ControlPath::Constant(vec![0.0]), &dir, 1e-3, &f.drivers, reg(), &s).unwrap();
        assert!(r.relative <= 0.05, "{r:?}");
    }
}

#[test]
fn first_order_condition_holds_at_the_candidate() {
    let f = fixture();
    let s = ControlSolve::default();
    let state = solve_state(&f.problem, &f.candidate, &f.drivers, reg(), &s).unwrap().final_state;
    let adj = solve_adjoint(&f.problem, &state, &f.candidate, &f.drivers, reg(), &s).unwrap();
    for freq in [1.0, 3.0, 8.0] {
        let dir: Vec<f64> = (0..=STEPS).map(|k| (freq * k as f64 / STEPS as f64).sin()).collect();
        let neg: Vec<f64> = dir.iter().map(|v| -v).collect();
        for d in [&dir, &neg] {
            let g = adjoint_directional_derivative(&f.problem, &state, &adj, &f.candidate, d);
            assert!(g >= -1e-6, "{g}");
        }
    }
    assert!(adj.p(0, 0).len() == 1 && adj.q(0, 0).len() == 1 && state.block(0, 0, Block::Z1).len() == 1);
}
