//! Pipelines behind each command and the exit-code contract: 0 when the
//! run succeeds and every check holds, 2 when checks ran and refuted a
//! property, 1 on operational errors.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use mvfbdsde::assumptions::{
    check_control_assumptions, check_integrability, check_monotonicity, estimate_lipschitz, AssumptionReport, ControlConstants, Direction, MonotonicityOptions, Sampler,
};
use mvfbdsde::control::{first_order_candidate, gradient_consistency, lq_oracle, lq_problem, solve_state, verify_smp, ControlPath, ControlSolve, SmpOptions};
use mvfbdsde::measure::EmpiricalLaw;
use mvfbdsde::model::{build_homotopy_case1, builtin_counterexample, builtin_example_meanfield, CoefficientSet, Dims, EnsembleState, HomotopyInputs, HomotopyProblem, LinearModel};
use mvfbdsde::paths::{backward_ito_integral, discrete_ito_product_check, forward_ito_integral, sample_driver_pair, BrownianPair, ItoProcess, TimeGrid};
use mvfbdsde::regression::RegressionConfig;
use mvfbdsde::solver::{continuation_solve, detect_nonuniqueness, linear_base_solve, moment_ode_oracle, ContinuationOptions, PicardOptions};

use crate::config::{Command, ConfigError, Scenario, ScenarioConfig};
use crate::report::{emit_report, ladder_csv, num, trajectory_csv, Csv};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Solver(#[from] mvfbdsde::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Unsupported(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_REFUTED: i32 = 2;

/// Distance and residual thresholds for calling two Picard limits distinct
/// solutions.
const DISTINCT_D: f64 = 0.5;
const LIMIT_RESIDUAL: f64 = 0.05;

#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

pub fn exit_code(r: &Result<Outcome, CliError>) -> i32 {
    match r {
        Ok(o) => o.code,
        Err(_) => EXIT_ERROR,
    }
}

pub fn run(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| CliError::Unsupported(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(cfg))
    }
    #[cfg(not(feature = "parallel"))]
    dispatch(cfg)
}

type Pipeline = fn(&ScenarioConfig) -> Result<Outcome, CliError>;

fn pipeline(cfg: &ScenarioConfig) -> Result<Pipeline, CliError> {
    Ok(match (cfg.command, cfg.scenario) {
        (Command::Solve, Scenario::LqControl) => solve_lq,
        (Command::Solve, Scenario::LinearBase) => solve_linear_base,
        (Command::Solve, _) => solve,
        (Command::CheckAssumptions, Scenario::LqControl) => check_control,
        (Command::CheckAssumptions, _) => check,
        (Command::DetectNonuniqueness, Scenario::LqControl) => {
            return Err(CliError::Unsupported("detect_nonuniqueness needs an uncontrolled scenario".into()))
        }
        (Command::DetectNonuniqueness, _) => nonuniqueness,
        (Command::VerifySmp, Scenario::LqControl) => smp,
        (Command::VerifySmp, s) => return Err(CliError::Unsupported(format!("verify_smp needs a control scenario, got {s}"))),
        (Command::ItoCheck, _) => ito,
    })
}

fn dispatch(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let f = pipeline(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.serialize())?;
    f(cfg)
}

fn model(cfg: &ScenarioConfig) -> LinearModel {
    match cfg.scenario {
        Scenario::Example2 => builtin_counterexample().0,
        Scenario::Custom => cfg.model.clone().expect("validated"),
        _ => builtin_example_meanfield(cfg.dims),
    }
}

fn grid(cfg: &ScenarioConfig) -> Result<TimeGrid, CliError> {
    let horizon = if cfg.scenario == Scenario::LqControl && cfg.override_horizon.is_none() { cfg.lq.horizon } else { cfg.effective_horizon() };
    Ok(TimeGrid::new(horizon, cfg.steps)?)
}

fn drivers(cfg: &ScenarioConfig) -> Result<BrownianPair, CliError> {
    Ok(sample_driver_pair(grid(cfg)?, cfg.dims.d_w, cfg.dims.d_b, cfg.particles, cfg.seed)?)
}

fn reg(cfg: &ScenarioConfig) -> RegressionConfig {
    RegressionConfig { basis: cfg.basis, ridge: cfg.ridge }
}

fn picard(cfg: &ScenarioConfig) -> PicardOptions {
    PicardOptions { tol: cfg.tol, max_iter: cfg.max_iter, damping: cfg.damping }
}

fn finish(cfg: &ScenarioConfig, code: i32, mut files: Vec<PathBuf>, summary: String) -> Result<Outcome, CliError> {
    let path = cfg.out.join("report.txt");
    fs::write(&path, &summary)?;
    files.push(path);
    Ok(Outcome { code, files, summary })
}

fn solve(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let drivers = drivers(cfg)?;
    let m = model(cfg);
    let template = HomotopyProblem { theta1: cfg.theta1, ..HomotopyProblem::base(Arc::new(m.clone()), cfg.x.clone()) };
    let opts = ContinuationOptions { delta: cfg.delta, picard: picard(cfg), max_halvings: 3 };
    let start = Instant::now();
    let mut s = format!("scenario {} command solve\n", cfg.scenario);
    let report = match continuation_solve(&template, &drivers, reg(cfg), opts) {
        Ok(r) => r,
        Err(e @ (mvfbdsde::Error::Rung { .. } | mvfbdsde::Error::Divergence { .. })) => {
            // Continuation breaking down is how a failed contraction shows up.
            let _ = writeln!(s, "continuation failed: {e}");
            let files = vec![ladder_csv(&[]).write(&cfg.out.join("ladder.csv"))?];
            return finish(cfg, EXIT_REFUTED, files, s);
        }
        Err(e) => return Err(e.into()),
    };
    let mut files = emit_report(&report, &cfg.out)?;
    let _ = writeln!(s, "rungs {} converged {}", report.alpha_ladder.len(), report.converged);
    let _ = writeln!(s, "residuals forward {:.6e} backward {:.6e} terminal {:.6e}", report.residuals.forward, report.residuals.backward, report.residuals.terminal);
    let _ = writeln!(s, "wallclock {:.3}s", start.elapsed().as_secs_f64());
    match moment_ode_oracle(&m, &cfg.x, drivers.grid) {
        Ok(o) if o.unique() => {
            let d = cfg.dims.d;
            let mut csv = Csv::new(&["t", "y", "Y"]);
            let mut err: f64 = 0.0;
            for k in 0..=cfg.steps {
                let mean = report.final_state.mean(k);
                for i in 0..d {
                    err = err.max((mean[i] - o.y[k * d + i]).abs()).max((mean[d + i] - o.big_y[k * d + i]).abs());
                }
                if d == 1 {
                    csv.push(vec![num(drivers.grid.t(k)), num(o.y[k]), num(o.big_y[k])]);
                }
            }
            if d == 1 {
                files.push(csv.write(&cfg.out.join("oracle.csv"))?);
            }
            let _ = writeln!(s, "moment oracle max mean error {err:.6e}");
        }
        Ok(_) => {
            let _ = writeln!(s, "moment reduction has several solutions; oracle comparison skipped");
        }
        Err(_) => {}
    }
    let code = if report.converged { EXIT_OK } else { EXIT_REFUTED };
    finish(cfg, code, files, s)
}

fn solve_linear_base(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let drivers = drivers(cfg)?;
    let p = build_homotopy_case1(Arc::new(model(cfg)), 0.0, cfg.theta1, HomotopyInputs { x: cfg.x.clone(), ..Default::default() })?;
    let state = linear_base_solve(&p, &drivers, reg(cfg), cfg.tol)?;
    let files = vec![
        trajectory_csv(&state).write(&cfg.out.join("trajectory.csv"))?,
        ladder_csv(&[]).write(&cfg.out.join("ladder.csv"))?,
    ];
    finish(cfg, EXIT_OK, files, format!("scenario linear_base command solve\nbase system solved directly at alpha 0\n"))
}

fn lq_candidate(cfg: &ScenarioConfig, drivers: &BrownianPair) -> Result<(ControlPath, ControlSolve, Option<f64>), CliError> {
    let problem = lq_problem(&cfg.lq);
    let settings = control_settings(cfg);
    let oracle = lq_oracle(&cfg.lq, drivers.grid).ok();
    let start = oracle.as_ref().map_or(ControlPath::Constant(vec![0.0]), |o| o.control());
    let candidate = first_order_candidate(&problem, &start, drivers, reg(cfg), &settings, 1e-9, 30)?;
    Ok((candidate, settings, oracle.map(|o| o.cost)))
}

fn control_settings(cfg: &ScenarioConfig) -> ControlSolve {
    let p = picard(cfg);
    ControlSolve { delta: cfg.delta, theta1: 1.0, state: p, adjoint: p }
}

fn solve_lq(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let drivers = drivers(cfg)?;
    let problem = lq_problem(&cfg.lq);
    let (candidate, settings, oracle_cost) = lq_candidate(cfg, &drivers)?;
    let report = solve_state(&problem, &candidate, &drivers, reg(cfg), &settings)?;
    let mut files = emit_report(&report, &cfg.out)?;
    let mut csv = Csv::new(&["t", "u"]);
    if let ControlPath::Deterministic { values, .. } = &candidate {
        for (k, u) in values.iter().enumerate() {
            csv.push(vec![num(drivers.grid.t(k)), num(*u)]);
        }
    }
    files.push(csv.write(&cfg.out.join("control.csv"))?);
    let cost = mvfbdsde::control::particle_costs(&problem, &candidate, &report.final_state);
    let j = cost.iter().sum::<f64>() / cost.len() as f64;
    let mut s = format!("scenario lq_control command solve\ncandidate cost {j:.10e}\n");
    if let Some(c) = oracle_cost {
        let _ = writeln!(s, "two-point reduction cost {c:.10e}");
    }
    finish(cfg, if report.converged { EXIT_OK } else { EXIT_REFUTED }, files, s)
}

fn sampler(cfg: &ScenarioConfig, horizon: f64) -> Sampler {
    Sampler { horizon, seed: cfg.seed, ..Sampler::default() }
}

fn assumption_files(cfg: &ScenarioConfig, report: &AssumptionReport, nv: usize) -> Result<Vec<PathBuf>, CliError> {
    let mut csv = Csv::new(&["key", "value"]);
    for (k, v) in report.key_values(nv) {
        csv.push(vec![k, v]);
    }
    Ok(vec![csv.write(&cfg.out.join("assumptions.csv"))?])
}

fn check(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let m = model(cfg);
    let g = grid(cfg)?;
    let nv = cfg.dims.nv();
    let smp = sampler(cfg, g.horizon());
    let lip = estimate_lipschitz(&m, &smp, cfg.pairs)?;
    let mut report = check_monotonicity(
        &m,
        &smp,
        &MonotonicityOptions { theta1: cfg.theta1, theta2: cfg.theta2, alpha1: cfg.alpha1, direction: Direction::A2, n_pairs: cfg.pairs, local_search: true },
    )?;
    report.estimated_c = Some(lip.c_hat);
    report.estimated_gamma = Some(lip.gamma_hat);
    report.pass.insert("A1".into(), lip.violations.is_empty());
    report.pass.insert("A1.gamma<1/2".into(), lip.gamma_below_half);
    report.witnesses.extend(lip.violations);
    let probe: Vec<f64> = (0..8 * nv).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let integ = check_integrability(&m, g, &EmpiricalLaw::uniform(probe, nv)?)?;
    report.pass.insert("A3".into(), integ.pass);
    let files = assumption_files(cfg, &report, nv)?;
    let code = if report.all_pass() { EXIT_OK } else { EXIT_REFUTED };
    finish(cfg, code, files, format!("scenario {} command check_assumptions\n{}", cfg.scenario, report.to_text(nv)))
}

fn check_control(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let problem = lq_problem(&cfg.lq);
    let k = ControlConstants { gamma: cfg.gamma, theta1: cfg.theta1, theta2: cfg.theta2, alpha1: cfg.alpha1, n_pairs: cfg.pairs, local_search: false };
    let report = check_control_assumptions(&problem, &sampler(cfg, cfg.lq.horizon), &k)?;
    let files = assumption_files(cfg, &report, 4)?;
    let code = if report.all_pass() { EXIT_OK } else { EXIT_REFUTED };
    finish(cfg, code, files, format!("scenario lq_control command check_assumptions\n{}", report.to_text(4)))
}

fn nonuniqueness(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let drivers = drivers(cfg)?;
    let g = drivers.grid;
    let dims: Dims = cfg.dims;
    let problem = HomotopyProblem::base(Arc::new(model(cfg)) as Arc<dyn CoefficientSet>, cfg.x.clone());
    let zero = EnsembleState::zeros(dims, g, cfg.particles);
    let wave = EnsembleState::from_fn(dims, g, cfg.particles, |k, _, v| {
        let t = g.t(k);
        v[dims.range(mvfbdsde::model::Block::Y0)].fill(t.sin());
        v[dims.range(mvfbdsde::model::Block::Y1)].fill(t.cos());
    });
    let r = detect_nonuniqueness(&problem, &[zero, wave], &drivers, reg(cfg), picard(cfg))?;
    let mut limits = Csv::new(&["limit", "iterations", "converged", "forward", "backward", "terminal"]);
    for (i, l) in r.limits.iter().enumerate() {
        limits.push(vec![i.to_string(), l.iterations.to_string(), l.converged.to_string(), num(l.residuals.forward), num(l.residuals.backward), num(l.residuals.terminal)]);
    }
    let mut dist = Csv::new(&["i", "j", "d_distance"]);
    for (i, j, d) in &r.distances {
        dist.push(vec![i.to_string(), j.to_string(), num(*d)]);
    }
    let files = vec![limits.write(&cfg.out.join("limits.csv"))?, dist.write(&cfg.out.join("distances.csv"))?];
    let solutions = r.limits.iter().all(|l| l.residuals.max() <= LIMIT_RESIDUAL);
    let distinct = r.max_distance() >= DISTINCT_D && solutions;
    let s = format!(
        "scenario {} command detect_nonuniqueness\nmax D-distance {:.6e}\nall limits solve the system: {solutions}\n{}\n",
        cfg.scenario,
        r.max_distance(),
        if distinct { "two distinct solutions found: uniqueness refuted" } else { "no distinct solutions found" }
    );
    finish(cfg, if distinct { EXIT_REFUTED } else { EXIT_OK }, files, s)
}

fn smp(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let drivers = drivers(cfg)?;
    let problem = lq_problem(&cfg.lq);
    let (candidate, settings, _) = lq_candidate(cfg, &drivers)?;
    let opts = SmpOptions { solve: settings, seed: cfg.seed, ..SmpOptions::default() };
    let r = verify_smp(&problem, &candidate, cfg.perturbations, &drivers, reg(cfg), &opts)?;
    let n = cfg.steps;
    let direction: Vec<f64> = (0..=n).map(|k| (2.0 * k as f64 / n as f64 + 0.3).cos()).collect();
    let grad = gradient_consistency(&problem, &ControlPath::Constant(vec![0.0]), &direction, 1e-3, &drivers, reg(cfg), &settings)?;
    let boundary = r.adjoint_initial_residual.max(r.adjoint_terminal_residual);
    let mut csv = Csv::new(&["check", "pass", "margin"]);
    for c in &r.checks {
        csv.push(vec![c.name.to_string(), c.pass.to_string(), num(c.margin)]);
    }
    let grad_ok = grad.relative <= 0.05;
    let boundary_ok = boundary <= cfg.tol.max(1e-10);
    csv.push(vec!["gradient_consistency".into(), grad_ok.to_string(), num(0.05 - grad.relative)]);
    csv.push(vec!["adjoint_boundary".into(), boundary_ok.to_string(), num(cfg.tol.max(1e-10) - boundary)]);
    let mut costs = Csv::new(&["perturbation", "cost"]);
    for (i, j) in r.perturbation_costs.iter().enumerate() {
        costs.push(vec![i.to_string(), num(*j)]);
    }
    let files = vec![csv.write(&cfg.out.join("smp.csv"))?, costs.write(&cfg.out.join("perturbations.csv"))?];
    let mut s = format!("scenario lq_control command verify_smp\n{}", r.to_text());
    let _ = writeln!(s, "gradient check       fd={:.6e} adjoint={:.6e} relative={:.3e}", grad.finite_difference, grad.adjoint, grad.relative);
    let ok = r.verdict && grad_ok && boundary_ok;
    finish(cfg, if ok { EXIT_OK } else { EXIT_REFUTED }, files, s)
}

fn ito(cfg: &ScenarioConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let drivers = sample_driver_pair(g, 1, 1, cfg.particles, cfg.seed)?;
    let one = |_: f64| 1.0;
    let cos = |t: f64| t.cos();
    let z = ItoProcess::zero_fn;
    let cases = [
        ("deterministic", ItoProcess { initial: 1.0, drift: &one, forward: &z, backward: &z }, ItoProcess { initial: 0.5, drift: &cos, forward: &z, backward: &z }),
        ("backward_square", ItoProcess { initial: 0.0, drift: &z, forward: &z, backward: &one }, ItoProcess { initial: 0.0, drift: &z, forward: &z, backward: &one }),
        ("forward_backward", ItoProcess { initial: 0.0, drift: &z, forward: &one, backward: &z }, ItoProcess { initial: 0.0, drift: &z, forward: &z, backward: &one }),
    ];
    let bound = 5.0 * g.dt();
    let mut ok = true;
    let mut csv = Csv::new(&["case", "lhs", "rhs", "residual", "bound"]);
    for (name, a, b) in &cases {
        let c = discrete_ito_product_check(a, b, g, &drivers)?;
        ok &= c.residual <= bound;
        csv.push(vec![name.to_string(), num(c.lhs), num(c.rhs), num(c.residual), num(bound)]);
    }
    let m = cfg.particles;
    let ones = vec![1.0; m * (g.steps() + 1)];
    let mut stats = Csv::new(&["integral", "mean", "std_error", "variance", "target_variance"]);
    for (name, vals) in [("forward", forward_ito_integral(&ones, 1, &drivers)?), ("backward", backward_ito_integral(&ones, 1, &drivers)?)] {
        let mean = vals.iter().sum::<f64>() / m as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let se = (var / m as f64).sqrt();
        ok &= mean.abs() <= 4.0 * se && (var - g.horizon()).abs() <= 0.1 * g.horizon();
        stats.push(vec![name.into(), num(mean), num(se), num(var), num(g.horizon())]);
    }
    let files = vec![csv.write(&cfg.out.join("ito.csv"))?, stats.write(&cfg.out.join("integrals.csv"))?];
    let s = format!("command ito_check\nproduct-rule residual bound {bound:.6e}\n{}{}", csv.render(), stats.render());
    finish(cfg, if ok { EXIT_OK } else { EXIT_REFUTED }, files, s)
}
