//! Full-freeze Picard sweeps, the linear base solve, the continuation
//! ladder in α, a deterministic moment-ODE oracle and multi-start probing.

use std::time::{Duration, Instant};

use crate::measure::EmpiricalLaw;
use crate::model::{check_finite, residual, Block, Case, EnsembleState, HomotopyProblem, LinearModel, Residuals};
use crate::paths::{BrownianPair, TimeGrid};
use crate::regression::{Projector, RegressionConfig};
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 100,
            damping: 1.0,
        }
    }
}

/// One rung of the α-ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct Rung {
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `D` between successive iterates, one entry per iteration.
    pub picard_residuals: Vec<f64>,
    /// `η_m = D_m / D_{m−1}`.
    pub contraction_ratios: Vec<f64>,
}

impl Rung {
    pub fn final_d(&self) -> f64 {
        self.picard_residuals.last().copied().unwrap_or(0.0)
    }

    /// Median of the ratios after the first two iterations (all ratios when
    /// fewer are available, zero when there are none).
    pub fn median_ratio(&self) -> f64 {
        let r = &self.contraction_ratios;
        let tail = if r.len() > 1 { &r[1..] } else { &r[..] };
        median(tail)
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub final_state: EnsembleState,
    pub picard_residuals: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub alpha_ladder: Vec<Rung>,
    pub residuals: Residuals,
    pub wallclock: Duration,
    pub converged: bool,
}

/// `D(u, v) = (1/M) Σ_p [Σ_{k<N} |Δv_{p,k}|² Δt + |Δy_{p,N}|²]`.
pub fn d_distance(a: &EnsembleState, b: &EnsembleState) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "ensembles differ in shape");
    let (m, n, nv, d) = (a.particles, a.grid.steps(), a.nv(), a.dims.d);
    let dt = a.grid.dt();
    let s = par::sum_rows(m, 1, |p, acc| {
        let mut run = 0.0;
        for k in 0..n {
            let (u, v) = (a.at(k, p), b.at(k, p));
            run += u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        let (u, v) = (a.at(n, p), b.at(n, p));
        let term: f64 = (0..d).map(|i| (u[i] - v[i]).powi(2)).sum();
        acc[0] += run * dt + term;
        let _ = nv;
    });
    s[0] / m as f64
}

/// `y ≡ x` (per particle), everything else zero.
pub fn initial_guess(problem: &HomotopyProblem, grid: TimeGrid, particles: usize) -> EnsembleState {
    let d = problem.dims().d;
    EnsembleState::from_fn(problem.dims(), grid, particles, |_, p, v| {
        v[..d].copy_from_slice(problem.initial(p));
    })
}

struct Sweep<'a> {
    drivers: &'a BrownianPair,
    b_tail: Vec<f64>,
    reg: RegressionConfig,
}

impl<'a> Sweep<'a> {
    fn new(drivers: &'a BrownianPair, reg: RegressionConfig) -> Self {
        Self {
            drivers,
            b_tail: drivers.b_tail(),
            reg,
        }
    }

    fn projector(&self, y: &[f64], d: usize, tail_node: usize, node: usize) -> Result<Projector> {
        let db = self.drivers.d_b;
        let n1 = self.drivers.grid.steps() + 1;
        let width = self.reg.basis.width(d, db);
        let m = self.drivers.particles;
        let mut feats = vec![0.0; m * width];
        par::for_each_row(&mut feats, width, |p, row| {
            let tail = &self.b_tail[(p * n1 + tail_node) * db..][..db];
            self.reg.basis.features(&y[p * d..(p + 1) * d], tail, row)
        });
        Projector::fit(feats, width, self.reg.ridge, node)
    }

    fn check(&self, problem: &HomotopyProblem, state: &EnsembleState) -> Result<()> {
        let dims = problem.dims();
        let d = self.drivers;
        if state.dims != dims || d.particles != state.particles || d.grid.steps() != state.grid.steps() || d.d_w != dims.d_w || d.d_b != dims.d_b {
            return Err(Error::Dimension("problem, state and drivers disagree".into()));
        }
        if let Some(xs) = &problem.x_particles {
            if xs.len() != state.particles * dims.d {
                return Err(Error::Dimension("per-particle initial values".into()));
            }
        }
        Ok(())
    }

    fn step(&self, problem: &HomotopyProblem, frozen: &EnsembleState) -> Result<EnsembleState> {
        self.check(problem, frozen)?;
        let dims = problem.dims();
        let (nv, d, dw, db) = (dims.nv(), dims.d, dims.d_w, dims.d_b);
        let grid = frozen.grid;
        let (m, n, dt) = (frozen.particles, grid.steps(), grid.dt());
        let (ry1, rz0, rz1) = (dims.range(Block::Y1), dims.range(Block::Z0), dims.range(Block::Z1));
        let ry0 = dims.range(Block::Y0);
        let drv = self.drivers;

        let mut coeff = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let mut out = vec![0.0; m * nv];
            problem.eval_node(grid.t(k), k, frozen.node(k), &frozen.law(k), &mut out);
            check_finite(dims, k, &out)?;
            coeff.push(out);
        }

        let mut out = EnsembleState::zeros(dims, grid, m);
        let mut y = vec![0.0; m * d];
        for p in 0..m {
            y[p * d..(p + 1) * d].copy_from_slice(problem.initial(p));
        }
        let mut z = vec![0.0; m * d * db];
        let mut ys = Vec::with_capacity(n + 1);
        let mut zs = Vec::with_capacity(n + 1);
        for k in 0..n {
            let a = &coeff[k];
            let mut yhat = vec![0.0; m * d];
            par::for_each_row(&mut yhat, d, |p, row| {
                let ap = &a[p * nv..(p + 1) * nv];
                let inc = drv.dw(p, k);
                for i in 0..d {
                    let mut v = y[p * d + i] + ap[ry1.start + i] * dt;
                    for j in 0..dw {
                        v += ap[rz1.start + i * dw + j] * inc[j];
                    }
                    row[i] = v;
                }
            });
            let proj = self.projector(&y, d, k + 1, k)?;
            let fit = proj.project(&yhat, d);
            let mut prod = vec![0.0; m * d * db];
            par::for_each_row(&mut prod, d * db, |p, row| {
                let inc = drv.db(p, k);
                for i in 0..d {
                    let r = yhat[p * d + i] - fit[p * d + i];
                    for j in 0..db {
                        row[i * db + j] = r * inc[j];
                    }
                }
            });
            z = proj.project(&prod, d * db);
            z.iter_mut().for_each(|v| *v /= dt);
            let mut next = yhat;
            par::for_each_row(&mut next, d, |p, row| {
                let inc = drv.db(p, k);
                for i in 0..d {
                    for j in 0..db {
                        row[i] -= z[p * d * db + i * db + j] * inc[j];
                    }
                }
            });
            ys.push(std::mem::replace(&mut y, next));
            zs.push(z.clone());
        }
        ys.push(y);
        zs.push(z);

        let law_y = EmpiricalLaw::uniform(ys[n].clone(), d)?;
        let mut big_y = vec![0.0; m * d];
        problem.terminal_node(grid.horizon(), n, &ys[n], &law_y, &mut big_y);
        let mut big_ys = vec![Vec::new(); n + 1];
        let mut big_zs = vec![Vec::new(); n + 1];
        for k in (0..n).rev() {
            let a = &coeff[k];
            let a1 = &coeff[k + 1];
            let proj = self.projector(&ys[k], d, k, k)?;
            let mut targets = vec![0.0; m * 2 * d];
            par::for_each_row(&mut targets, 2 * d, |p, row| {
                for i in 0..d {
                    let next = big_y[p * d + i];
                    row[i] = next - a[p * nv + ry0.start + i] * dt;
                    row[d + i] = next;
                }
            });
            let fit = proj.project(&targets, 2 * d);
            let mut prod = vec![0.0; m * d * dw];
            par::for_each_row(&mut prod, d * dw, |p, row| {
                let inc = drv.dw(p, k);
                for i in 0..d {
                    let r = big_y[p * d + i] - fit[p * 2 * d + d + i];
                    for j in 0..dw {
                        row[i * dw + j] = r * inc[j];
                    }
                }
            });
            let mut zz = proj.project(&prod, d * dw);
            zz.iter_mut().for_each(|v| *v /= dt);
            let mut cur = vec![0.0; m * d];
            par::for_each_row(&mut cur, d, |p, row| {
                let inc = drv.db(p, k);
                let g1 = &a1[p * nv + rz0.start..p * nv + rz0.end];
                for i in 0..d {
                    let mut v = fit[p * 2 * d + i];
                    for j in 0..db {
                        v -= g1[i * db + j] * inc[j];
                    }
                    row[i] = v;
                }
            });
            big_ys[k + 1] = std::mem::replace(&mut big_y, cur);
            big_zs[k] = zz;
        }
        big_ys[0] = big_y;
        big_zs[n] = big_zs[n - 1].clone();
        zs[n] = zs[n - 1].clone();

        for k in 0..=n {
            let node = out.node_mut(k);
            for p in 0..m {
                let v = &mut node[p * nv..(p + 1) * nv];
                v[ry0.clone()].copy_from_slice(&ys[k][p * d..(p + 1) * d]);
                v[ry1.clone()].copy_from_slice(&big_ys[k][p * d..(p + 1) * d]);
                v[rz0.clone()].copy_from_slice(&zs[k][p * d * db..(p + 1) * d * db]);
                v[rz1.clone()].copy_from_slice(&big_zs[k][p * d * dw..(p + 1) * d * dw]);
            }
        }
        if !out.is_finite() {
            return Err(Error::NonFinite { name: "state", node: n });
        }
        Ok(out)
    }

    fn picard(&self, problem: &HomotopyProblem, warm: &EnsembleState, opts: PicardOptions) -> Result<(EnsembleState, Rung)> {
        if !(opts.tol > 0.0) {
            return Err(Error::Invalid("tolerance must be positive".into()));
        }
        if !(opts.damping > 0.0 && opts.damping <= 1.0) {
            return Err(Error::Invalid(format!("damping {} outside (0, 1]", opts.damping)));
        }
        let mut v = warm.clone();
        let mut rung = Rung {
            alpha: problem.alpha,
            iterations: 0,
            converged: false,
            picard_residuals: vec![],
            contraction_ratios: vec![],
        };
        for it in 1..=opts.max_iter.max(1) {
            let mut next = self.step(problem, &v)?;
            if opts.damping < 1.0 {
                let a = opts.damping;
                for (x, old) in next.data.iter_mut().zip(&v.data) {
                    *x = (1.0 - a) * old + a * *x;
                }
            }
            let dm = d_distance(&next, &v);
            rung.iterations = it;
            if let Some(&prev) = rung.picard_residuals.last() {
                rung.contraction_ratios.push(if prev > 0.0 { dm / prev } else { 0.0 });
            }
            rung.picard_residuals.push(dm);
            let d0 = rung.picard_residuals[0];
            if !dm.is_finite() || (d0 > 0.0 && dm > 1e6 * d0) {
                return Err(Error::Divergence {
                    alpha: problem.alpha,
                    iterations: it,
                    residuals: rung.picard_residuals,
                });
            }
            v = next;
            if dm <= opts.tol {
                rung.converged = true;
                break;
            }
        }
        Ok((v, rung))
    }

    fn linear_base(&self, problem: &HomotopyProblem, tol: f64) -> Result<(EnsembleState, Rung)> {
        if problem.alpha != 0.0 {
            return Err(Error::Invalid(format!("linear base solve needs alpha = 0, got {}", problem.alpha)));
        }
        let grid = self.drivers.grid;
        let warm = initial_guess(problem, grid, self.drivers.particles);
        self.check(problem, &warm)?;
        let (state, mut rung) = self.picard(problem, &warm, PicardOptions { tol, max_iter: 5, damping: 1.0 })?;
        rung.converged = true;
        Ok((state, rung))
    }
}

/// One full-freeze Picard map: every coefficient, including the mean-field
/// terms, is evaluated at `frozen`.
///
/// Forward: `ŷ = y_k + f̂ Δt + ĝ ΔW_k`, `z_k = Ê[(ŷ − Ê ŷ) ΔB_kᵀ] / Δt`,
/// `y_{k+1} = ŷ − z_k ΔB_k`; the projection uses `y_k` and `B_T − B_{t_{k+1}}`
/// so that `y_{k+1}` carries no linear dependence on `ΔB_k`.
/// Backward: `Y_N = h(y_N) + ξ`, `Y_k = Ê_k[Y_{k+1} − F̂_k Δt] − Ĝ_{k+1} ΔB_k`,
/// `Z_k = Ê_k[(Y_{k+1} − Ê_k Y_{k+1}) ΔW_kᵀ] / Δt`.
pub fn solve_decoupled_step(problem: &HomotopyProblem, frozen: &EnsembleState, drivers: &BrownianPair, reg: RegressionConfig) -> Result<EnsembleState> {
    Sweep::new(drivers, reg).step(problem, frozen)
}

/// Solve the `α = 0` member. Its coefficients act only through the new
/// iterate's own `y` (or `Y`), so a few passes reach the fixed point; at most
/// five are run.
pub fn linear_base_solve(problem: &HomotopyProblem, drivers: &BrownianPair, reg: RegressionConfig, tol: f64) -> Result<EnsembleState> {
    Sweep::new(drivers, reg).linear_base(problem, tol).map(|(s, _)| s)
}

/// Iterate `v ← (1 − damping)·v + damping·step(v)` until successive iterates
/// are within `tol` in the `D` distance.
pub fn picard_solve(problem: &HomotopyProblem, warm: &EnsembleState, drivers: &BrownianPair, reg: RegressionConfig, opts: PicardOptions) -> Result<SolveReport> {
    let start = Instant::now();
    let sweep = Sweep::new(drivers, reg);
    let (state, rung) = sweep.picard(problem, warm, opts)?;
    let residuals = residual(problem, &state, drivers)?;
    Ok(SolveReport {
        final_state: state,
        picard_residuals: rung.picard_residuals.clone(),
        contraction_ratios: rung.contraction_ratios.clone(),
        converged: rung.converged,
        alpha_ladder: vec![rung],
        residuals,
        wallclock: start.elapsed(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuationOptions {
    pub delta: f64,
    pub picard: PicardOptions,
    /// Halvings of δ allowed when a rung fails.
    pub max_halvings: usize,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            delta: 0.2,
            picard: PicardOptions::default(),
            max_halvings: 3,
        }
    }
}

fn snap(alpha: f64) -> f64 {
    let a = (alpha * 1e12).round() / 1e12;
    a.min(1.0)
}

/// Walk `α = 0, δ, 2δ, …, 1`: the base rung by [`linear_base_solve`], later
/// rungs by Picard warm-started at the previous rung. A failing rung is
/// retried from the last good α with δ halved, at most `max_halvings` times.
/// Case and θ's come from `template`; its `alpha` is ignored.
pub fn continuation_solve(template: &HomotopyProblem, drivers: &BrownianPair, reg: RegressionConfig, opts: ContinuationOptions) -> Result<SolveReport> {
    if !(opts.delta > 0.0 && opts.delta <= 1.0) {
        return Err(Error::Invalid(format!("delta {} outside (0, 1]", opts.delta)));
    }
    let start = Instant::now();
    let sweep = Sweep::new(drivers, reg);
    let (mut state, base_rung) = sweep.linear_base(&template.with_alpha(0.0), opts.picard.tol)?;
    let mut ladder = vec![base_rung];
    let mut alpha = 0.0;
    let mut delta = opts.delta;
    let mut halvings = 0;
    let mut last = None;
    while alpha < 1.0 {
        let next_alpha = snap(alpha + delta);
        let problem = template.with_alpha(next_alpha);
        let attempt = sweep.picard(&problem, &state, opts.picard);
        let failure = match attempt {
            Ok((s, rung)) if rung.converged => {
                ladder.push(rung.clone());
                state = s;
                alpha = next_alpha;
                last = Some(rung);
                continue;
            }
            Ok((_, rung)) => {
                ladder.push(rung);
                Error::Invalid(format!("no convergence within {} iterations", opts.picard.max_iter))
            }
            Err(e) => {
                if let Error::Divergence { iterations, residuals, .. } = &e {
                    ladder.push(Rung {
                        alpha: next_alpha,
                        iterations: *iterations,
                        converged: false,
                        picard_residuals: residuals.clone(),
                        contraction_ratios: vec![],
                    });
                }
                e
            }
        };
        if halvings == opts.max_halvings {
            return Err(Error::Rung {
                alpha: next_alpha,
                ladder: ladder.iter().map(|r| (r.alpha, r.iterations, r.converged)).collect(),
                source: Box::new(failure),
            });
        }
        halvings += 1;
        delta *= 0.5;
    }
    let target = template.with_alpha(1.0);
    let residuals = residual(&target, &state, drivers)?;
    let last = last.unwrap_or_else(|| ladder[0].clone());
    let ladder: Vec<Rung> = ladder.into_iter().filter(|r| r.converged).collect();
    Ok(SolveReport {
        final_state: state,
        picard_residuals: last.picard_residuals,
        contraction_ratios: last.contraction_ratios,
        converged: true,
        alpha_ladder: ladder,
        residuals,
        wallclock: start.elapsed(),
    })
}

/// Convenience wrapper in terms of the base problem's own fields.
pub fn continuation_for(base: &HomotopyProblem, case: Case, theta1: f64, theta2: f64, delta: f64, drivers: &BrownianPair, reg: RegressionConfig, tol: f64) -> Result<SolveReport> {
    let template = HomotopyProblem {
        case,
        theta1,
        theta2,
        ..base.clone()
    };
    continuation_solve(&template, drivers, reg, ContinuationOptions { delta, picard: PicardOptions { tol, ..Default::default() }, ..Default::default() })
}

/// Scalar two-point problem `y' = a_yy y + a_yY Y + b_y`,
/// `Y' = a_Yy y + a_YY Y + b_Y`, `y(0) = x`, `Y(T) = h y(T) + h0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarMomentOde {
    pub a_yy: f64,
    pub a_yyy: f64,
    pub b_y: f64,
    pub a_yy_back: f64,
    pub a_back: f64,
    pub b_back: f64,
    pub h: f64,
    pub h0: f64,
}

impl ScalarMomentOde {
    fn rhs(&self, y: f64, yy: f64) -> (f64, f64) {
        (
            self.a_yy * y + self.a_yyy * yy + self.b_y,
            self.a_yy_back * y + self.a_back * yy + self.b_back,
        )
    }

    /// RK4 path from `(x, s)` sampled at the grid nodes.
    pub fn integrate(&self, x: f64, s: f64, grid: TimeGrid, sub: usize) -> Vec<(f64, f64)> {
        let h = grid.dt() / sub as f64;
        let mut out = Vec::with_capacity(grid.steps() + 1);
        let (mut y, mut yy) = (x, s);
        out.push((y, yy));
        for _ in 0..grid.steps() {
            for _ in 0..sub {
                let k1 = self.rhs(y, yy);
                let k2 = self.rhs(y + 0.5 * h * k1.0, yy + 0.5 * h * k1.1);
                let k3 = self.rhs(y + 0.5 * h * k2.0, yy + 0.5 * h * k2.1);
                let k4 = self.rhs(y + h * k3.0, yy + h * k3.1);
                y += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
                yy += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            }
            out.push((y, yy));
        }
        out
    }

    fn mismatch(&self, x: f64, s: f64, grid: TimeGrid, sub: usize) -> f64 {
        let (y, yy) = *self.integrate(x, s, grid, sub).last().expect("nonempty path");
        yy - self.h * y - self.h0
    }

    /// Roots of the terminal mismatch in `Y(0)`: a scan of `[-range, range]`
    /// followed by bisection on each sign change. Scan points where the
    /// mismatch already vanishes count as roots.
    pub fn shoot(&self, x: f64, grid: TimeGrid, range: f64) -> Vec<f64> {
        const SCAN: usize = 64;
        const SUB: usize = 64;
        let tol = |s: f64| 1e-9 * (1.0 + s.abs());
        let pts: Vec<(f64, f64)> = (0..=SCAN)
            .map(|i| {
                let s = -range + 2.0 * range * i as f64 / SCAN as f64;
                (s, self.mismatch(x, s, grid, SUB))
            })
            .collect();
        let mut roots: Vec<f64> = Vec::new();
        let push = |r: f64, roots: &mut Vec<f64>| {
            if roots.iter().all(|q| (q - r).abs() > 1e-8 * (1.0 + r.abs())) {
                roots.push(r);
            }
        };
        for &(s, r) in &pts {
            if r.abs() <= tol(s) {
                push(s, &mut roots);
            }
        }
        for w in pts.windows(2) {
            let ((mut lo, mut flo), (mut hi, _)) = (w[0], w[1]);
            if w[0].1.abs() <= tol(w[0].0) || w[1].1.abs() <= tol(w[1].0) || w[0].1.signum() == w[1].1.signum() {
                continue;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                let fm = self.mismatch(x, mid, grid, SUB);
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            push(0.5 * (lo + hi), &mut roots);
        }
        roots
    }
}

/// Deterministic paths of a moment-ODE reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentOracle {
    /// `(N + 1) × d`.
    pub y: Vec<f64>,
    pub big_y: Vec<f64>,
    /// Roots in `Y(0)` found for each component.
    pub roots: Vec<Vec<f64>>,
}

impl MomentOracle {
    pub fn unique(&self) -> bool {
        self.roots.iter().all(|r| r.len() == 1)
    }
}

/// Per-component scalar reduction of a linear first-moment model evaluated on
/// deterministic inputs with `z = Z = 0`.
pub fn moment_ode_reduction(model: &LinearModel) -> Result<Vec<ScalarMomentOde>> {
    let dims = model.dims;
    let (nv, d) = (dims.nv(), dims.d);
    let eff = |i: usize, j: usize| model.k[i * nv + j] + model.k_mean[i * nv + j];
    let (ry0, ry1) = (dims.range(Block::Y0), dims.range(Block::Y1));
    for b in [Block::Z0, Block::Z1] {
        for i in dims.range(b) {
            if model.offset[i] != 0.0 || (0..2 * d).any(|j| eff(i, j) != 0.0) {
                return Err(Error::Invalid("g and G must vanish on deterministic inputs".into()));
            }
        }
    }
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        for j in 0..d {
            let hh = model.h[c * d + j] + model.h_mean[c * d + j];
            let off = j != c && (eff(ry0.start + c, ry0.start + j) != 0.0 || eff(ry0.start + c, ry1.start + j) != 0.0 || eff(ry1.start + c, ry0.start + j) != 0.0 || eff(ry1.start + c, ry1.start + j) != 0.0 || hh != 0.0);
            if off {
                return Err(Error::Invalid("components are coupled".into()));
            }
        }
        out.push(ScalarMomentOde {
            a_yy: eff(ry1.start + c, ry0.start + c),
            a_yyy: eff(ry1.start + c, ry1.start + c),
            b_y: model.offset[ry1.start + c],
            a_yy_back: eff(ry0.start + c, ry0.start + c),
            a_back: eff(ry0.start + c, ry1.start + c),
            b_back: model.offset[ry0.start + c],
            h: model.h[c * d + c] + model.h_mean[c * d + c],
            h0: model.h_offset[c],
        });
    }
    Ok(out)
}

/// Solve the deterministic reduction by shooting on `Y(0)`. The returned
/// paths follow the first root; [`MomentOracle::unique`] is false when any
/// component has two or more roots.
pub fn moment_ode_oracle(model: &LinearModel, x: &[f64], grid: TimeGrid) -> Result<MomentOracle> {
    let odes = moment_ode_reduction(model)?;
    if x.len() != odes.len() {
        return Err(Error::Dimension(format!("x has {} entries for {} components", x.len(), odes.len())));
    }
    let d = odes.len();
    let n1 = grid.steps() + 1;
    let mut y = vec![0.0; n1 * d];
    let mut big_y = vec![0.0; n1 * d];
    let mut roots = Vec::with_capacity(d);
    for (c, ode) in odes.iter().enumerate() {
        let range = 10.0 * (1.0 + x[c].abs() + ode.h0.abs());
        let r = ode.shoot(x[c], grid, range);
        let Some(&s) = r.first() else {
            return Err(Error::Shooting(format!("no sign change for component {c} in [{}, {range}]", -range)));
        };
        for (k, (a, b)) in ode.integrate(x[c], s, grid, 64).into_iter().enumerate() {
            y[k * d + c] = a;
            big_y[k * d + c] = b;
        }
        roots.push(r);
    }
    Ok(MomentOracle { y, big_y, roots })
}

#[derive(Clone, Debug)]
pub struct Limit {
    pub state: EnsembleState,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Residuals,
}

#[derive(Clone, Debug)]
pub struct NonuniquenessReport {
    pub limits: Vec<Limit>,
    /// `(i, j, D(limit_i, limit_j))` for `i < j`.
    pub distances: Vec<(usize, usize, f64)>,
}

impl NonuniquenessReport {
    pub fn max_distance(&self) -> f64 {
        self.distances.iter().map(|d| d.2).fold(0.0, f64::max)
    }
}

/// Run Picard from every warm start and compare the limits pairwise.
pub fn detect_nonuniqueness(problem: &HomotopyProblem, warm_starts: &[EnsembleState], drivers: &BrownianPair, reg: RegressionConfig, opts: PicardOptions) -> Result<NonuniquenessReport> {
    let mut limits = Vec::with_capacity(warm_starts.len());
    for w in warm_starts {
        let r = picard_solve(problem, w, drivers, reg, opts)?;
        limits.push(Limit {
            iterations: r.alpha_ladder[0].iterations,
            converged: r.converged,
            residuals: r.residuals,
            state: r.final_state,
        });
    }
    let mut distances = Vec::new();
    for i in 0..limits.len() {
        for j in i + 1..limits.len() {
            distances.push((i, j, d_distance(&limits[i].state, &limits[j].state)));
        }
    }
    Ok(NonuniquenessReport { limits, distances })
}
