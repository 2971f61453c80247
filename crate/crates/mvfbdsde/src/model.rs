//! Coefficient systems, homotopy families, built-in models, particle
//! ensembles and pathwise residuals.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use crate::measure::EmpiricalLaw;
use crate::paths::{BrownianPair, TimeGrid};
use crate::{par, Error, Result};

/// State dimension `d`, forward driver dimension `d_W`, backward driver
/// dimension `d_B`. `z` is `d × d_B` and `Z` is `d × d_W`, both row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub d_w: usize,
    pub d_b: usize,
}

/// One of the four blocks of a quadruple. In coefficient output the same
/// slots hold `F`, `f`, `G`, `g` respectively, so that the pairing `(A, v)`
/// is a plain dot product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Y0,
    Y1,
    Z0,
    Z1,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Y0, Block::Y1, Block::Z0, Block::Z1];

    pub fn coefficient_name(self) -> &'static str {
        match self {
            Block::Y0 => "F",
            Block::Y1 => "f",
            Block::Z0 => "G",
            Block::Z1 => "g",
        }
    }
}

impl Dims {
    pub fn new(d: usize, d_w: usize, d_b: usize) -> Result<Self> {
        if d == 0 || d_w == 0 || d_b == 0 {
            return Err(Error::Invalid(format!("dimensions must be ≥ 1, got ({d}, {d_w}, {d_b})")));
        }
        Ok(Self { d, d_w, d_b })
    }

    pub fn scalar() -> Self {
        Self { d: 1, d_w: 1, d_b: 1 }
    }

    /// Length of a flattened quadruple `(y, Y, z, Z)`.
    pub fn nv(&self) -> usize {
        2 * self.d + self.d * self.d_b + self.d * self.d_w
    }

    pub fn range(&self, b: Block) -> Range<usize> {
        let d = self.d;
        match b {
            Block::Y0 => 0..d,
            Block::Y1 => d..2 * d,
            Block::Z0 => 2 * d..2 * d + d * self.d_b,
            Block::Z1 => 2 * d + d * self.d_b..self.nv(),
        }
    }
}

/// Pairing `(A, v) = ⟨F,y⟩ + ⟨f,Y⟩ + ⟨G,z⟩ + ⟨g,Z⟩` with Frobenius products.
pub fn pairing(a: &[f64], v: &[f64]) -> f64 {
    a.iter().zip(v).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LawDependence {
    None,
    FirstMoment,
    General,
}

/// Evaluation site: time, grid node and particle index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct At {
    pub t: f64,
    pub node: usize,
    pub particle: usize,
}

/// The mappings `A = (F, f, G, g)` and the terminal map `h`.
pub trait CoefficientSet: Send + Sync {
    fn dims(&self) -> Dims;

    fn law_dependence(&self) -> LawDependence;

    /// Write `A(t, v, μ)` into `out` (quadruple layout). `law` is over full
    /// quadruples.
    fn eval(&self, at: At, v: &[f64], law: &EmpiricalLaw, out: &mut [f64]);

    /// Write `h(y, μ_y)` into `out`; `law` is over `y` only.
    fn terminal(&self, at: At, y: &[f64], law: &EmpiricalLaw, out: &mut [f64]);

    /// Evaluate every particle of one node; `states` and `out` are `M × nv`.
    fn eval_node(&self, t: f64, node: usize, states: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        let nv = self.dims().nv();
        par::for_each_row(out, nv, |p, row| {
            self.eval(At { t, node, particle: p }, &states[p * nv..(p + 1) * nv], law, row)
        });
    }

    /// Terminal map for every particle; `y` and `out` are `M × d`.
    fn terminal_node(&self, t: f64, node: usize, y: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        let d = self.dims().d;
        par::for_each_row(out, d, |p, row| {
            self.terminal(At { t, node, particle: p }, &y[p * d..(p + 1) * d], law, row)
        });
    }
}

/// `A = K v + K̄ E[v] + c` and `h = H y + H̄ E[y] + h0` with dense matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub dims: Dims,
    pub k: Vec<f64>,
    pub k_mean: Vec<f64>,
    pub offset: Vec<f64>,
    pub h: Vec<f64>,
    pub h_mean: Vec<f64>,
    pub h_offset: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(dims: Dims) -> Self {
        let nv = dims.nv();
        let d = dims.d;
        Self {
            dims,
            k: vec![0.0; nv * nv],
            k_mean: vec![0.0; nv * nv],
            offset: vec![0.0; nv],
            h: vec![0.0; d * d],
            h_mean: vec![0.0; d * d],
            h_offset: vec![0.0; d],
        }
    }

    /// Add `a·I` from block `input` to output slot `output` and `a_mean·I`
    /// acting on the mean. Blocks must have equal size.
    pub fn couple(&mut self, output: Block, input: Block, a: f64, a_mean: f64) -> &mut Self {
        let ro = self.dims.range(output);
        let ri = self.dims.range(input);
        assert_eq!(ro.len(), ri.len(), "blocks {output:?} and {input:?} differ in size");
        let nv = self.dims.nv();
        for (i, j) in ro.zip(ri) {
            self.k[i * nv + j] += a;
            self.k_mean[i * nv + j] += a_mean;
        }
        self
    }

    /// Terminal map `h = a·y + a_mean·E[y]`.
    pub fn terminal_diag(&mut self, a: f64, a_mean: f64) -> &mut Self {
        let d = self.dims.d;
        for i in 0..d {
            self.h[i * d + i] += a;
            self.h_mean[i * d + i] += a_mean;
        }
        self
    }
}

fn matvec_add(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += pairing(&m[i * n..(i + 1) * n], x);
    }
}

impl CoefficientSet for LinearModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn law_dependence(&self) -> LawDependence {
        if self.k_mean.iter().chain(&self.h_mean).all(|&c| c == 0.0) {
            LawDependence::None
        } else {
            LawDependence::FirstMoment
        }
    }

    fn eval(&self, _at: At, v: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        out.copy_from_slice(&self.offset);
        matvec_add(&self.k, v, out);
        matvec_add(&self.k_mean, law.mean(), out);
    }

    fn terminal(&self, _at: At, y: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        out.copy_from_slice(&self.h_offset);
        matvec_add(&self.h, y, out);
        matvec_add(&self.h_mean, law.mean(), out);
    }
}

type EvalFn = dyn Fn(At, &[f64], &EmpiricalLaw, &mut [f64]) + Send + Sync;

/// Coefficients given by closures, for models outside the linear family.
pub struct FnModel {
    pub dims: Dims,
    pub dependence: LawDependence,
    pub eval: Box<EvalFn>,
    pub terminal: Box<EvalFn>,
}

impl CoefficientSet for FnModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn law_dependence(&self) -> LawDependence {
        self.dependence
    }

    fn eval(&self, at: At, v: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        (self.eval)(at, v, law, out)
    }

    fn terminal(&self, at: At, y: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        (self.terminal)(at, y, law, out)
    }
}

/// Mean-field linear system with `f = ½E[Y] − Y`, `g = ¼E[Z] − ½Z`,
/// `F = ½E[y] − y`, `G = ¼E[z] − ½z` and `h = −½E[y_T] + y_T`.
pub fn builtin_example_meanfield(dims: Dims) -> LinearModel {
    let mut m = LinearModel::zeros(dims);
    m.couple(Block::Y0, Block::Y0, -1.0, 0.5)
        .couple(Block::Y1, Block::Y1, -1.0, 0.5)
        .couple(Block::Z0, Block::Z0, -0.5, 0.25)
        .couple(Block::Z1, Block::Z1, -0.5, 0.25)
        .terminal_diag(1.0, -0.5);
    m
}

pub const COUNTEREXAMPLE_HORIZON: f64 = 3.0 * PI / 4.0;

/// Scalar system `dy = E[Y] dt − z dB̄`, `dY = −E[y] dt − z dB̄ + Z dW`,
/// `Y_T = −E[y_T]`, together with its horizon `3π/4` and start `x = 0`.
/// It has the two solutions `(0, 0, 0, 0)` and `(sin t, cos t, 0, 0)`.
pub fn builtin_counterexample() -> (LinearModel, f64, Vec<f64>) {
    let mut m = LinearModel::zeros(Dims::scalar());
    m.couple(Block::Y1, Block::Y1, 0.0, 1.0)
        .couple(Block::Y0, Block::Y0, 0.0, -1.0)
        .couple(Block::Z0, Block::Z0, -1.0, 0.0)
        .terminal_diag(0.0, -1.0);
    (m, COUNTEREXAMPLE_HORIZON, vec![0.0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    /// Damping `−θ1·(y, z)` enters `(F, G)`; the base terminal map blends
    /// towards `y_T`.
    One,
    /// Damping `−θ2·(Y, Z)` enters `(f, g)`; the terminal map is scaled by α.
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Terminal {
    /// `h` from the coefficient set.
    Coefficient,
    /// `h(y) = c·y`.
    Linear(f64),
}

/// A coefficient set embedded in the homotopy family at level `alpha`, with
/// forcing terms and terminal shift.
#[derive(Clone)]
pub struct HomotopyProblem {
    pub base: Arc<dyn CoefficientSet>,
    pub alpha: f64,
    pub case: Case,
    pub theta1: f64,
    pub theta2: f64,
    /// Added to `(F, f, G, g)`; node-major `(N + 1) × M × nv`. In the usual
    /// names the slots carry `ψ`, `φ`, `κ` and `ϕ`.
    pub forcing: Option<Arc<Vec<f64>>>,
    /// Terminal shift `ξ`, `M × d`.
    pub xi: Option<Arc<Vec<f64>>>,
    pub terminal: Terminal,
    pub x: Vec<f64>,
    /// Per-particle initial values overriding `x`, `M × d`.
    pub x_particles: Option<Arc<Vec<f64>>>,
}

impl HomotopyProblem {
    /// The base system itself: `alpha = 1`, no forcing.
    pub fn base(base: Arc<dyn CoefficientSet>, x: Vec<f64>) -> Self {
        Self {
            base,
            alpha: 1.0,
            case: Case::One,
            theta1: 0.0,
            theta2: 0.0,
            forcing: None,
            xi: None,
            terminal: Terminal::Coefficient,
            x,
            x_particles: None,
        }
    }

    pub fn dims(&self) -> Dims {
        self.base.dims()
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        match self.case {
            Case::One if self.alpha < 1.0 && !(self.theta1 > 0.0) => {
                Err(Error::Invalid("case 1 needs theta1 > 0".into()))
            }
            Case::Two if self.alpha < 1.0 && !(self.theta2 > 0.0) => {
                Err(Error::Invalid("case 2 needs theta2 > 0".into()))
            }
            _ if self.x.len() != self.dims().d => {
                Err(Error::Dimension(format!("x has {} entries", self.x.len())))
            }
            _ => Ok(()),
        }
    }

    pub fn initial(&self, p: usize) -> &[f64] {
        let d = self.x.len();
        match &self.x_particles {
            Some(xs) => &xs[p * d..(p + 1) * d],
            None => &self.x,
        }
    }

    /// Coefficients `A^α` (plus forcing) for every particle at one node.
    pub fn eval_node(&self, t: f64, node: usize, states: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        let dims = self.dims();
        let nv = dims.nv();
        let a = self.alpha;
        if a > 0.0 {
            self.base.eval_node(t, node, states, law, out);
        } else {
            out.fill(0.0);
        }
        if a < 1.0 {
            let (damped, theta) = match self.case {
                Case::One => ([Block::Y0, Block::Z0], self.theta1),
                Case::Two => ([Block::Y1, Block::Z1], self.theta2),
            };
            for (row, v) in out.chunks_mut(nv).zip(states.chunks(nv)) {
                for r in row.iter_mut() {
                    *r *= a;
                }
                for b in damped {
                    for i in dims.range(b) {
                        row[i] -= (1.0 - a) * theta * v[i];
                    }
                }
            }
        }
        if let Some(f) = &self.forcing {
            let m = states.len() / nv;
            let src = &f[node * m * nv..(node + 1) * m * nv];
            for (o, s) in out.iter_mut().zip(src) {
                *o += s;
            }
        }
    }

    /// `Y_N` for every particle from the terminal states `y` (`M × d`).
    pub fn terminal_node(&self, t: f64, node: usize, y: &[f64], law: &EmpiricalLaw, out: &mut [f64]) {
        let a = self.alpha;
        match self.terminal {
            Terminal::Coefficient => self.base.terminal_node(t, node, y, law, out),
            Terminal::Linear(c) => {
                for (o, v) in out.iter_mut().zip(y) {
                    *o = c * v;
                }
            }
        }
        if a < 1.0 {
            for (o, v) in out.iter_mut().zip(y) {
                *o = match self.case {
                    Case::One => a * *o + (1.0 - a) * v,
                    Case::Two => a * *o,
                };
            }
        }
        if let Some(xi) = &self.xi {
            for (o, s) in out.iter_mut().zip(xi.iter()) {
                *o += s;
            }
        }
    }
}

/// Forcing, terminal shift and start shared by both homotopy builders.
#[derive(Clone, Default)]
pub struct HomotopyInputs {
    pub forcing: Option<Arc<Vec<f64>>>,
    pub xi: Option<Arc<Vec<f64>>>,
    pub x: Vec<f64>,
}

fn build(base: Arc<dyn CoefficientSet>, alpha: f64, case: Case, theta: f64, inputs: HomotopyInputs) -> Result<HomotopyProblem> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(theta > 0.0) {
        return Err(Error::Invalid(format!("theta must be positive, got {theta}")));
    }
    let (theta1, theta2) = match case {
        Case::One => (theta, 0.0),
        Case::Two => (0.0, theta),
    };
    let p = HomotopyProblem {
        base,
        alpha,
        case,
        theta1,
        theta2,
        forcing: inputs.forcing,
        xi: inputs.xi,
        terminal: Terminal::Coefficient,
        x: inputs.x,
        x_particles: None,
    };
    p.validate()?;
    Ok(p)
}

/// `f^α = αf`, `g^α = αg`, `F^α = αF − (1−α)θ1·y`, `G^α = αG − (1−α)θ1·z`,
/// `h^α = αh + (1−α)·y_T`.
pub fn build_homotopy_case1(base: Arc<dyn CoefficientSet>, alpha: f64, theta1: f64, inputs: HomotopyInputs) -> Result<HomotopyProblem> {
    build(base, alpha, Case::One, theta1, inputs)
}

/// `f̆ = αf − (1−α)θ2·Y`, `ğ = αg − (1−α)θ2·Z`, `F̆ = αF`, `Ğ = αG`, `h̆ = αh`.
pub fn build_homotopy_case2(base: Arc<dyn CoefficientSet>, alpha: f64, theta2: f64, inputs: HomotopyInputs) -> Result<HomotopyProblem> {
    build(base, alpha, Case::Two, theta2, inputs)
}

/// Particle ensemble of quadruples on a grid, node-major `(N + 1) × M × nv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub dims: Dims,
    pub grid: TimeGrid,
    pub particles: usize,
    pub data: Vec<f64>,
}

impl EnsembleState {
    pub fn zeros(dims: Dims, grid: TimeGrid, particles: usize) -> Self {
        Self {
            dims,
            grid,
            particles,
            data: vec![0.0; (grid.steps() + 1) * particles * dims.nv()],
        }
    }

    /// Build from `f(node, particle, quadruple)`.
    pub fn from_fn(dims: Dims, grid: TimeGrid, particles: usize, f: impl Fn(usize, usize, &mut [f64]) + Sync + Send) -> Self {
        let mut s = Self::zeros(dims, grid, particles);
        let nv = dims.nv();
        par::for_each_row(&mut s.data, nv, |i, row| f(i / particles, i % particles, row));
        s
    }

    /// Every particle follows the deterministic path `f(t) = (y, Y)` with
    /// `z = Z = 0`.
    pub fn deterministic(dims: Dims, grid: TimeGrid, particles: usize, f: impl Fn(f64) -> (Vec<f64>, Vec<f64>) + Sync + Send) -> Self {
        let d = dims.d;
        Self::from_fn(dims, grid, particles, |k, _, v| {
            let (y, yy) = f(grid.t(k));
            v[..d].copy_from_slice(&y);
            v[d..2 * d].copy_from_slice(&yy);
        })
    }

    pub fn nv(&self) -> usize {
        self.dims.nv()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        let w = self.particles * self.nv();
        &self.data[k * w..(k + 1) * w]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.particles * self.nv();
        &mut self.data[k * w..(k + 1) * w]
    }

    pub fn at(&self, k: usize, p: usize) -> &[f64] {
        let nv = self.nv();
        &self.data[(k * self.particles + p) * nv..][..nv]
    }

    pub fn block(&self, k: usize, p: usize, b: Block) -> &[f64] {
        &self.at(k, p)[self.dims.range(b)]
    }

    /// Law of the full quadruple at node `k`.
    pub fn law(&self, k: usize) -> EmpiricalLaw {
        EmpiricalLaw::uniform(self.node(k).to_vec(), self.nv()).expect("nonempty ensemble")
    }

    /// `M × len(b)` values of one block at node `k`.
    pub fn block_values(&self, k: usize, b: Block) -> Vec<f64> {
        (0..self.particles).flat_map(|p| self.block(k, p, b).iter().copied()).collect()
    }

    pub fn block_law(&self, k: usize, b: Block) -> EmpiricalLaw {
        let r = self.dims.range(b);
        EmpiricalLaw::uniform(self.block_values(k, b), r.len()).expect("nonempty ensemble")
    }

    /// Cross-particle mean of every coordinate at node `k`.
    pub fn mean(&self, k: usize) -> Vec<f64> {
        let nv = self.nv();
        let node = self.node(k);
        let s = par::sum_rows(self.particles, nv, |p, acc| {
            for (a, v) in acc.iter_mut().zip(&node[p * nv..(p + 1) * nv]) {
                *a += v;
            }
        });
        s.into_iter().map(|v| v / self.particles as f64).collect()
    }

    /// Cross-particle standard deviation of every coordinate at node `k`.
    pub fn std(&self, k: usize) -> Vec<f64> {
        let nv = self.nv();
        let mean = self.mean(k);
        let node = self.node(k);
        let s = par::sum_rows(self.particles, nv, |p, acc| {
            for ((a, v), m) in acc.iter_mut().zip(&node[p * nv..(p + 1) * nv]).zip(&mean) {
                *a += (v - m) * (v - m);
            }
        });
        s.into_iter().map(|v| (v / self.particles as f64).sqrt()).collect()
    }

    /// Root mean square of the Frobenius norm of block `b` at node `k`.
    pub fn rms(&self, k: usize, b: Block) -> f64 {
        let node = self.node(k);
        let nv = self.nv();
        let r = self.dims.range(b);
        let s = par::sum_rows(self.particles, 1, |p, acc| {
            acc[0] += node[p * nv..][r.clone()].iter().map(|v| v * v).sum::<f64>();
        });
        (s[0] / self.particles as f64).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Vectorized `A(t, v, μ)` for `M` quadruples. The law defaults to the
/// empirical law of `states`.
pub fn eval_system(
    coeffs: &dyn CoefficientSet,
    t: f64,
    node: usize,
    states: &[f64],
    law: Option<&EmpiricalLaw>,
) -> Result<Vec<f64>> {
    let dims = coeffs.dims();
    let nv = dims.nv();
    if states.is_empty() || states.len() % nv != 0 {
        return Err(Error::Dimension(format!("{} values for quadruples of length {nv}", states.len())));
    }
    let own;
    let law = match law {
        Some(l) => l,
        None => {
            own = EmpiricalLaw::uniform(states.to_vec(), nv)?;
            &own
        }
    };
    let mut out = vec![0.0; states.len()];
    coeffs.eval_node(t, node, states, law, &mut out);
    check_finite(dims, node, &out)?;
    Ok(out)
}

pub(crate) fn check_finite(dims: Dims, node: usize, out: &[f64]) -> Result<()> {
    let nv = dims.nv();
    for row in out.chunks(nv) {
        for b in Block::ALL {
            if row[dims.range(b)].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name: b.coefficient_name(), node });
            }
        }
    }
    Ok(())
}

/// Per-equation residual norms of a discrete state.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Residuals {
    pub forward: f64,
    pub backward: f64,
    pub terminal: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.forward.max(self.backward).max(self.terminal)
    }
}

fn matvec_driver(m: &[f64], inc: &[f64], d: usize, out: &mut [f64], sign: f64) {
    let k = inc.len();
    for i in 0..d {
        for j in 0..k {
            out[i] += sign * m[i * k + j] * inc[j];
        }
    }
}

/// Residuals of `state` against the Euler form of the system.
///
/// Forward: `y_{k+1} − [y_k + f_k Δt + g_k ΔW_k − z_k ΔB_k]`.
/// Backward: `Y_k − [Y_{k+1} − F_k Δt − G_{k+1} ΔB_k − Z_k ΔW_k]`.
/// Terminal: `Y_N − h(y_N) − ξ`.
/// Each is the root mean square over particles, maximized over nodes.
/// Coefficients use the state's own law at each node; `dB̄` integrands sit at
/// the right endpoint.
pub fn residual(problem: &HomotopyProblem, state: &EnsembleState, drivers: &BrownianPair) -> Result<Residuals> {
    let dims = problem.dims();
    let (m, n) = (state.particles, state.grid.steps());
    if drivers.particles != m || drivers.grid.steps() != n || state.dims != dims || drivers.d_w != dims.d_w || drivers.d_b != dims.d_b {
        return Err(Error::Dimension("state, drivers and problem disagree".into()));
    }
    let nv = dims.nv();
    let d = dims.d;
    let dt = state.grid.dt();
    let coeff: Vec<Vec<f64>> = (0..=n)
        .map(|k| {
            let mut out = vec![0.0; m * nv];
            problem.eval_node(state.grid.t(k), k, state.node(k), &state.law(k), &mut out);
            check_finite(dims, k, &out).map(|_| out)
        })
        .collect::<Result<_>>()?;
    let (ry0, ry1, rz0, rz1) = (dims.range(Block::Y0), dims.range(Block::Y1), dims.range(Block::Z0), dims.range(Block::Z1));
    let mut forward: f64 = 0.0;
    let mut backward: f64 = 0.0;
    for k in 0..n {
        let s = par::sum_rows(m, 2, |p, acc| {
            let v0 = state.at(k, p);
            let v1 = state.at(k + 1, p);
            let a0 = &coeff[k][p * nv..(p + 1) * nv];
            let a1 = &coeff[k + 1][p * nv..(p + 1) * nv];
            let (dw, db) = (drivers.dw(p, k), drivers.db(p, k));
            let mut fy: Vec<f64> = (0..d).map(|i| v0[i] + a0[ry1.start + i] * dt).collect();
            matvec_driver(&a0[rz1.clone()], dw, d, &mut fy, 1.0);
            matvec_driver(&v0[rz0.clone()], db, d, &mut fy, -1.0);
            let mut by: Vec<f64> = (0..d).map(|i| v1[ry1.start + i] - a0[ry0.start + i] * dt).collect();
            matvec_driver(&a1[rz0.clone()], db, d, &mut by, -1.0);
            matvec_driver(&v0[rz1.clone()], dw, d, &mut by, -1.0);
            for i in 0..d {
                acc[0] += (v1[i] - fy[i]).powi(2);
                acc[1] += (v0[ry1.start + i] - by[i]).powi(2);
            }
        });
        forward = forward.max((s[0] / m as f64).sqrt());
        backward = backward.max((s[1] / m as f64).sqrt());
    }
    let y_n = state.block_values(n, Block::Y0);
    let law_y = EmpiricalLaw::uniform(y_n.clone(), d)?;
    let mut h = vec![0.0; m * d];
    problem.terminal_node(state.grid.horizon(), n, &y_n, &law_y, &mut h);
    let yy_n = state.block_values(n, Block::Y1);
    let term: f64 = yy_n.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m as f64;
    Ok(Residuals {
        forward,
        backward,
        terminal: term.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_law(v: &[f64]) -> EmpiricalLaw {
        EmpiricalLaw::uniform(v.to_vec(), 4).unwrap()
    }

    fn eval1(model: &dyn CoefficientSet, v: [f64; 4]) -> Vec<f64> {
        eval_system(model, 0.0, 0, &v, None).unwrap()
    }

    #[test]
    fn example1_point_values() {
        let m = builtin_example_meanfield(Dims::scalar());
        assert_eq!(eval1(&m, [0.0; 4]), vec![0.0; 4]);
        // Deterministic inputs: the mean equals the value.
        assert_eq!(eval1(&m, [0.0, 2.0, 0.0, 0.0])[1], -1.0);
        assert_eq!(eval1(&m, [0.0, 0.0, 0.0, 4.0])[3], -1.0);
        assert_eq!(eval1(&m, [1.0, 0.0, 0.0, 0.0])[0], -0.5);
        let mut h = [0.0];
        m.terminal(At { t: 1.0, node: 0, particle: 0 }, &[2.0], &EmpiricalLaw::dirac(&[2.0]), &mut h);
        assert_eq!(h[0], 1.0);
    }

    #[test]
    fn example1_pairing_on_deterministic_displacement() {
        let m = builtin_example_meanfield(Dims::scalar());
        let v1 = [0.3, -1.2, 0.7, 2.0];
        let v2 = [-0.4, 0.5, 0.1, -1.0];
        let a1 = eval1(&m, v1);
        let a2 = eval1(&m, v2);
        let dv: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a - b).collect();
        let da: Vec<f64> = a1.iter().zip(&a2).map(|(a, b)| a - b).collect();
        let want = -0.5 * dv[0] * dv[0] - 0.5 * dv[1] * dv[1] - 0.25 * dv[2] * dv[2] - 0.25 * dv[3] * dv[3];
        assert!((pairing(&da, &dv) - want).abs() < 1e-12);
    }

    #[test]
    fn counterexample_coefficients() {
        let (m, t, x) = builtin_counterexample();
        assert_eq!(x, vec![0.0]);
        assert!((t - 3.0 * PI / 4.0).abs() < 1e-15);
        // (y, Y, z, Z) = (sin t, cos t, 0, 0): f = cos t, F = −sin t.
        let s = 0.4f64;
        let a = eval1(&m, [s.sin(), s.cos(), 0.0, 0.0]);
        assert!((a[1] - s.cos()).abs() < 1e-15);
        assert!((a[0] + s.sin()).abs() < 1e-15);
        assert_eq!(eval1(&m, [0.0, 0.0, 2.0, 0.0])[2], -2.0);
        let mut h = [0.0];
        let y_t = t.sin();
        m.terminal(At { t, node: 0, particle: 0 }, &[y_t], &EmpiricalLaw::dirac(&[y_t]), &mut h);
        assert!((h[0] - t.cos()).abs() < 1e-15);
    }

    #[test]
    fn first_moment_models_ignore_resampling() {
        let m = builtin_example_meanfield(Dims::scalar());
        let a = scalar_law(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = scalar_law(&[5.0, 6.0, 7.0, 8.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut oa = [0.0; 4];
        let mut ob = [0.0; 4];
        let at = At { t: 0.0, node: 0, particle: 0 };
        m.eval(at, &[0.1, 0.2, 0.3, 0.4], &a, &mut oa);
        m.eval(at, &[0.1, 0.2, 0.3, 0.4], &b, &mut ob);
        assert_eq!(oa, ob);
        assert_eq!(m.law_dependence(), LawDependence::FirstMoment);
        assert_eq!(LinearModel::zeros(Dims::scalar()).law_dependence(), LawDependence::None);
    }

    #[test]
    fn homotopy_endpoints() {
        let base: Arc<dyn CoefficientSet> = Arc::new(builtin_example_meanfield(Dims::scalar()));
        let inputs = HomotopyInputs { x: vec![1.0], ..Default::default() };
        let v = [0.7, -0.3, 0.2, 0.5];
        let law = scalar_law(&v);
        let eval = |p: &HomotopyProblem| {
            let mut out = [0.0; 4];
            p.eval_node(0.0, 0, &v, &law, &mut out);
            out
        };
        let p0 = build_homotopy_case1(base.clone(), 0.0, 0.25, inputs.clone()).unwrap();
        assert_eq!(eval(&p0), [-0.25 * 0.7, 0.0, -0.25 * 0.2, 0.0]);
        let p1 = build_homotopy_case1(base.clone(), 1.0, 0.25, inputs.clone()).unwrap();
        let mut want = [0.0; 4];
        base.eval(At { t: 0.0, node: 0, particle: 0 }, &v, &law, &mut want);
        assert_eq!(eval(&p1), want);
        let half = build_homotopy_case1(base.clone(), 0.5, 0.25, inputs.clone()).unwrap();
        assert_eq!(eval(&half)[1], 0.5 * want[1]);

        let q0 = build_homotopy_case2(base.clone(), 0.0, 0.5, inputs.clone()).unwrap();
        assert_eq!(eval(&q0), [0.0, 0.5 * 0.3, 0.0, -0.25]);
        let mut h = [9.0];
        q0.terminal_node(1.0, 0, &[3.0], &EmpiricalLaw::dirac(&[3.0]), &mut h);
        assert_eq!(h[0], 0.0);
        p0.terminal_node(1.0, 0, &[3.0], &EmpiricalLaw::dirac(&[3.0]), &mut h);
        assert_eq!(h[0], 3.0);

        assert!(build_homotopy_case1(base.clone(), 1.5, 0.25, inputs.clone()).is_err());
        assert!(build_homotopy_case1(base.clone(), 0.5, 0.0, inputs.clone()).is_err());
        assert!(build_homotopy_case2(base, -0.1, 0.5, inputs).is_err());
    }

    #[test]
    fn forcing_and_shift_are_added() {
        let base: Arc<dyn CoefficientSet> = Arc::new(LinearModel::zeros(Dims::scalar()));
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let forcing = Arc::new(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let p = build_homotopy_case1(
            base,
            0.3,
            1.0,
            HomotopyInputs { forcing: Some(forcing), xi: Some(Arc::new(vec![5.0])), x: vec![0.0] },
        )
        .unwrap();
        let mut out = [0.0; 4];
        let zero = [0.0; 4];
        p.eval_node(grid.t(1), 1, &zero, &scalar_law(&zero), &mut out);
        assert_eq!(out, [10.0, 20.0, 30.0, 40.0]);
        let mut h = [0.0];
        p.terminal_node(1.0, 1, &[0.0], &EmpiricalLaw::dirac(&[0.0]), &mut h);
        assert_eq!(h[0], 5.0);
    }

    #[test]
    fn nonfinite_coefficient_named() {
        let model = FnModel {
            dims: Dims::scalar(),
            dependence: LawDependence::None,
            eval: Box::new(|_, _, _, out| {
                out.fill(0.0);
                out[3] = f64::NAN;
            }),
            terminal: Box::new(|_, _, _, out| out.fill(0.0)),
        };
        match eval_system(&model, 0.0, 7, &[0.0; 4], None) {
            Err(Error::NonFinite { name, node }) => assert_eq!((name, node), ("g", 7)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn residuals_of_known_counterexample_states() {
        let (m, t, x) = builtin_counterexample();
        let grid = TimeGrid::new(t, 300).unwrap();
        let drivers = crate::paths::sample_driver_pair(grid, 1, 1, 8, 1).unwrap();
        let problem = HomotopyProblem::base(Arc::new(m), x);
        let zero = EnsembleState::zeros(Dims::scalar(), grid, 8);
        let r0 = residual(&problem, &zero, &drivers).unwrap();
        assert_eq!(r0, Residuals::default());
        let sc = EnsembleState::deterministic(Dims::scalar(), grid, 8, |s| (vec![s.sin()], vec![s.cos()]));
        let r = residual(&problem, &sc, &drivers).unwrap();
        let dt = grid.dt();
        // Local Taylor remainders are at most Δt²/2.
        assert!(r.forward <= 0.5 * dt * dt + 1e-14, "{r:?}");
        assert!(r.backward <= 0.5 * dt * dt + 1e-14, "{r:?}");
        assert!(r.terminal < 1e-12, "{r:?}");
    }

    #[test]
    fn ensemble_statistics() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let s = EnsembleState::from_fn(Dims::scalar(), grid, 2, |k, p, v| {
            v[0] = k as f64 + p as f64;
            v[2] = 3.0;
            v[3] = 4.0;
        });
        assert_eq!(s.mean(1), vec![1.5, 0.0, 3.0, 4.0]);
        assert_eq!(s.std(1)[0], 0.5);
        assert_eq!(s.rms(0, Block::Z1), 4.0);
        assert_eq!(s.block_values(2, Block::Y0), vec![2.0, 3.0]);
    }
}
