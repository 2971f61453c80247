//! Sampling checks of the Lipschitz, monotonicity and integrability
//! conditions, with worst-case witnesses.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::control::{ControlPath, ControlProblem, ControlledModel};
use crate::measure::{wasserstein2_exact, EmpiricalLaw};
use crate::model::{eval_system, pairing, At, Block, CoefficientSet, Dims};
use crate::paths::TimeGrid;
use crate::{Error, Result};

/// Margins above `REL_TOL · (1 + quadratic scale)` count as violations.
pub const REL_TOL: f64 = 1e-10;

/// How the second ensemble of a pair is derived from the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Displacement {
    /// Two independent ensembles.
    Independent,
    /// Random per-particle displacement of one ensemble.
    Coupled,
    /// The same constant added to one coordinate of every particle.
    Axis(usize),
    /// A constant vector added to every particle.
    MeanShift,
    /// Ensemble supported on one coordinate, compared with its own reversal
    /// (same law, different random variable).
    Swap(usize),
}

impl fmt::Display for Displacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Displacement::Independent => write!(f, "independent"),
            Displacement::Coupled => write!(f, "coupled"),
            Displacement::Axis(j) => write!(f, "axis{j}"),
            Displacement::MeanShift => write!(f, "mean_shift"),
            Displacement::Swap(j) => write!(f, "swap{j}"),
        }
    }
}

/// Generator of ensemble pairs. Pair `i` depends only on `(seed, i)`, so a
/// larger sample budget extends a smaller one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampler {
    /// Particles per ensemble.
    pub ensemble: usize,
    pub scale: f64,
    /// Times are drawn uniformly from `[0, horizon]`.
    pub horizon: f64,
    pub seed: u64,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            ensemble: 8,
            scale: 1.0,
            horizon: 1.0,
            seed: 0,
        }
    }
}

/// Two ensembles of quadruples (`ensemble × nv` each) at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub t: f64,
    pub kind: Displacement,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl Sampler {
    fn validate(&self) -> Result<()> {
        if self.ensemble == 0 || !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Invalid("degenerate sampler: zero variance".into()));
        }
        Ok(())
    }

    pub fn pair(&self, nv: usize, i: usize) -> SamplePair {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        let m = self.ensemble;
        let s = self.scale;
        let t = self.horizon * rng.random::<f64>();
        let normal = |rng: &mut ChaCha8Rng| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
        let center: Vec<f64> = (0..nv).map(|_| normal(&mut rng)).collect();
        let mut v1: Vec<f64> = (0..m * nv).map(|q| center[q % nv] + normal(&mut rng)).collect();
        let axis = (i / 5) % nv;
        let kind = match i % 5 {
            0 => Displacement::Independent,
            1 => Displacement::Coupled,
            2 => Displacement::Axis(axis),
            3 => Displacement::MeanShift,
            _ => Displacement::Swap(axis),
        };
        let v2 = match kind {
            Displacement::Independent => {
                let c2: Vec<f64> = (0..nv).map(|_| normal(&mut rng)).collect();
                (0..m * nv).map(|q| c2[q % nv] + normal(&mut rng)).collect()
            }
            Displacement::Coupled => {
                let r = 10f64.powf(-2.0 * rng.random::<f64>());
                v1.iter().map(|v| v + r * normal(&mut rng)).collect()
            }
            Displacement::Axis(j) => {
                let c = normal(&mut rng);
                let mut v2 = v1.clone();
                v2.iter_mut().skip(j).step_by(nv).for_each(|v| *v += c);
                v2
            }
            Displacement::MeanShift => {
                let shift: Vec<f64> = (0..nv).map(|_| normal(&mut rng)).collect();
                v1.iter().enumerate().map(|(q, v)| v + shift[q % nv]).collect()
            }
            Displacement::Swap(j) => {
                for (q, v) in v1.iter_mut().enumerate() {
                    if q % nv != j {
                        *v = 0.0;
                    }
                }
                let mut v2 = vec![0.0; m * nv];
                for p in 0..m {
                    v2[p * nv..(p + 1) * nv].copy_from_slice(&v1[(m - 1 - p) * nv..(m - p) * nv]);
                }
                v2
            }
        };
        SamplePair { t, kind, v1, v2 }
    }
}

/// A sampled pair together with the value it attains for one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub condition: String,
    pub kind: Displacement,
    pub t: f64,
    pub value: f64,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl Witness {
    fn from_pair(condition: &str, pair: &SamplePair, value: f64) -> Self {
        Self {
            condition: condition.into(),
            kind: pair.kind,
            t: pair.t,
            value,
            v1: pair.v1.clone(),
            v2: pair.v2.clone(),
        }
    }

    /// Mean displacement `E[v2 − v1]`.
    pub fn mean_displacement(&self, nv: usize) -> Vec<f64> {
        let m = self.v1.len() / nv;
        let mut out = vec![0.0; nv];
        for (q, (a, b)) in self.v1.iter().zip(&self.v2).enumerate() {
            out[q % nv] += (b - a) / m as f64;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AssumptionReport {
    pub estimated_c: Option<f64>,
    pub estimated_gamma: Option<f64>,
    /// Largest observed functional plus the required θ-quadratic (sign-flipped
    /// for the reversed condition). Positive means violated.
    pub monotonicity_margin: Option<f64>,
    /// Largest observed terminal-map margin. Positive means violated.
    pub alpha1_margin: Option<f64>,
    pub pass: BTreeMap<String, bool>,
    pub witnesses: Vec<Witness>,
    pub samples_used: usize,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.pass.values().all(|&p| p)
    }

    /// Fold another report into this one: maxima of margins and estimates,
    /// conjunction of pass flags.
    pub fn merge(&mut self, other: AssumptionReport) {
        fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
            match (a, b) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, None) => x,
                (None, y) => y,
            }
        }
        self.estimated_c = max_opt(self.estimated_c, other.estimated_c);
        self.estimated_gamma = max_opt(self.estimated_gamma, other.estimated_gamma);
        self.monotonicity_margin = max_opt(self.monotonicity_margin, other.monotonicity_margin);
        self.alpha1_margin = max_opt(self.alpha1_margin, other.alpha1_margin);
        for (k, v) in other.pass {
            let e = self.pass.entry(k).or_insert(true);
            *e &= v;
        }
        self.witnesses.extend(other.witnesses);
        self.samples_used = self.samples_used.max(other.samples_used);
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self, nv: usize) -> Vec<(String, String)> {
        let mut kv = vec![];
        let opt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.17e}"));
        kv.push(("samples_used".into(), self.samples_used.to_string()));
        kv.push(("estimated_C".into(), opt(self.estimated_c)));
        kv.push(("estimated_gamma".into(), opt(self.estimated_gamma)));
        kv.push(("monotonicity_margin".into(), opt(self.monotonicity_margin)));
        kv.push(("alpha1_margin".into(), opt(self.alpha1_margin)));
        for (k, v) in &self.pass {
            kv.push((format!("pass.{k}"), v.to_string()));
        }
        for (i, w) in self.witnesses.iter().enumerate() {
            kv.push((format!("witness.{i}.condition"), w.condition.clone()));
            kv.push((format!("witness.{i}.kind"), w.kind.to_string()));
            kv.push((format!("witness.{i}.t"), format!("{:.17e}", w.t)));
            kv.push((format!("witness.{i}.value"), format!("{:.17e}", w.value)));
            let md: Vec<String> = w.mean_displacement(nv).iter().map(|x| format!("{x:.17e}")).collect();
            kv.push((format!("witness.{i}.mean_displacement"), md.join(" ")));
        }
        kv
    }

    /// Human-readable block.
    pub fn to_text(&self, nv: usize) -> String {
        let mut s = String::new();
        let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6e}"));
        s += &format!("samples used         {}\n", self.samples_used);
        s += &format!("estimated C          {}\n", fmt_opt(self.estimated_c));
        s += &format!("estimated gamma      {}\n", fmt_opt(self.estimated_gamma));
        s += &format!("monotonicity margin  {}\n", fmt_opt(self.monotonicity_margin));
        s += &format!("alpha1 margin        {}\n", fmt_opt(self.alpha1_margin));
        for (k, v) in &self.pass {
            s += &format!("{k:<20} {}\n", if *v { "pass" } else { "FAIL" });
        }
        const SHOWN: usize = 20;
        for w in self.witnesses.iter().take(SHOWN) {
            let md: Vec<String> = w.mean_displacement(nv).iter().map(|x| format!("{x:.4}")).collect();
            s += &format!("witness {} [{}] t={:.4} value={:.6e} mean shift=({})\n", w.condition, w.kind, w.t, w.value, md.join(", "));
        }
        if self.witnesses.len() > SHOWN {
            s += &format!("({} more witnesses)\n", self.witnesses.len() - SHOWN);
        }
        s
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn y_values(v: &[f64], dims: Dims) -> Vec<f64> {
    let (nv, d) = (dims.nv(), dims.d);
    v.chunks(nv).flat_map(|row| row[..d].to_vec()).collect()
}

fn eval_terminal(coeffs: &dyn CoefficientSet, y: &[f64], d: usize) -> Result<Vec<f64>> {
    let law = EmpiricalLaw::uniform(y.to_vec(), d)?;
    let mut out = vec![0.0; y.len()];
    coeffs.terminal_node(0.0, 0, y, &law, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "h", node: 0 });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub c_hat: f64,
    pub gamma_hat: f64,
    /// The required range `0 < γ < 1/2` holds (`γ = 0` is accepted when the
    /// noise coefficients need no `γ` at all).
    pub gamma_below_half: bool,
    /// Pairs where a bound cannot hold for any finite constant.
    pub violations: Vec<Witness>,
    pub samples_used: usize,
}

/// Estimate the Lipschitz constants of `(f, F)` and `h`, then the smallest `γ`
/// for which the squared bounds on `G` and `g` hold with that constant.
///
/// For `G` the constant multiplies `|Δ(y, Y, z)|²` and `γ` multiplies
/// `‖ΔZ‖² + w2²`; for `g` the roles of `z` and `Z` swap.
pub fn estimate_lipschitz(coeffs: &dyn CoefficientSet, sampler: &Sampler, n_pairs: usize) -> Result<LipschitzEstimate> {
    sampler.validate()?;
    let dims = coeffs.dims();
    let (nv, d) = (dims.nv(), dims.d);
    let (ry0, ry1, rz0, rz1) = (dims.range(Block::Y0), dims.range(Block::Y1), dims.range(Block::Z0), dims.range(Block::Z1));
    let mut c_hat: f64 = 0.0;
    let mut violations = vec![];
    // (lhs, C-weighted part, γ-weighted part, pair index)
    let mut squared: Vec<(f64, f64, f64, usize)> = vec![];
    for i in 0..n_pairs {
        let pair = sampler.pair(nv, i);
        let a1 = eval_system(coeffs, pair.t, 0, &pair.v1, None)?;
        let a2 = eval_system(coeffs, pair.t, 0, &pair.v2, None)?;
        let l1 = EmpiricalLaw::uniform(pair.v1.clone(), nv)?;
        let l2 = EmpiricalLaw::uniform(pair.v2.clone(), nv)?;
        let w = wasserstein2_exact(&l1, &l2)?;
        let (y1, y2) = (y_values(&pair.v1, dims), y_values(&pair.v2, dims));
        let wy = wasserstein2_exact(&EmpiricalLaw::uniform(y1.clone(), d)?, &EmpiricalLaw::uniform(y2.clone(), d)?)?;
        let h1 = eval_terminal(coeffs, &y1, d)?;
        let h2 = eval_terminal(coeffs, &y2, d)?;
        let mut ratio = |num: f64, den: f64, name: &str| {
            if den > 0.0 {
                c_hat = c_hat.max(num / den);
            } else if num > REL_TOL {
                violations.push(Witness::from_pair(name, &pair, f64::INFINITY));
            }
        };
        for p in 0..sampler.ensemble {
            let row = p * nv..(p + 1) * nv;
            let dv = diff(&pair.v1[row.clone()], &pair.v2[row.clone()]);
            let da = diff(&a1[row.clone()], &a2[row]);
            let dff = (sq(&da[ry0.clone()]) + sq(&da[ry1.clone()])).sqrt();
            ratio(dff, sq(&dv).sqrt() + w, "lipschitz.fF");
            let dh = sq(&diff(&h1[p * d..(p + 1) * d], &h2[p * d..(p + 1) * d])).sqrt();
            ratio(dh, sq(&dv[..d]).sqrt() + wy, "lipschitz.h");
            let base = sq(&dv[ry0.clone()]) + sq(&dv[ry1.clone()]);
            let (dz, dzz) = (sq(&dv[rz0.clone()]), sq(&dv[rz1.clone()]));
            squared.push((sq(&da[rz0.clone()]), base + dz, dzz + w * w, i));
            squared.push((sq(&da[rz1.clone()]), base + dzz, dz + w * w, i));
        }
    }
    // Rows whose γ-weighted part vanishes bound the shared C directly.
    for &(lhs, a, b, _) in &squared {
        if b == 0.0 && a > 0.0 {
            c_hat = c_hat.max(lhs / a);
        }
    }
    let mut gamma_hat: f64 = 0.0;
    for &(lhs, a, b, i) in &squared {
        let excess = lhs - c_hat * a;
        if excess <= REL_TOL * (1.0 + lhs) {
            continue;
        }
        if b > 0.0 {
            gamma_hat = gamma_hat.max(excess / b);
        } else {
            violations.push(Witness::from_pair("lipschitz.gG", &sampler.pair(nv, i), f64::INFINITY));
        }
    }
    Ok(LipschitzEstimate {
        c_hat,
        gamma_hat,
        gamma_below_half: gamma_hat < 0.5 && violations.is_empty(),
        violations,
        samples_used: n_pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `E(ΔA, Δv) ≤ −θ-quadratic` and `E⟨Δh, Δy⟩ ≥ α1 E|Δy|²`.
    A2,
    /// `E(ΔA, Δv) ≥ θ-quadratic` and `E⟨Δh, Δy⟩ ≤ −α1 E|Δy|²`.
    A2Prime,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::A2 => "A2",
            Direction::A2Prime => "A2'",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonotonicityOptions {
    pub theta1: f64,
    pub theta2: f64,
    pub alpha1: f64,
    pub direction: Direction,
    pub n_pairs: usize,
    /// Random ascent from the worst pair, keeping the displacement size fixed.
    pub local_search: bool,
}

struct Margins {
    main: f64,
    terminal: f64,
    scale: f64,
    scale_y: f64,
}

fn margins(coeffs: &dyn CoefficientSet, pair: &SamplePair, o: &MonotonicityOptions) -> Result<Margins> {
    let dims = coeffs.dims();
    let (nv, d) = (dims.nv(), dims.d);
    let m = pair.v1.len() / nv;
    let a1 = eval_system(coeffs, pair.t, 0, &pair.v1, None)?;
    let a2 = eval_system(coeffs, pair.t, 0, &pair.v2, None)?;
    let (mut func, mut qy, mut qyy) = (0.0, 0.0, 0.0);
    for p in 0..m {
        let row = p * nv..(p + 1) * nv;
        let dv = diff(&pair.v1[row.clone()], &pair.v2[row.clone()]);
        let da = diff(&a1[row.clone()], &a2[row]);
        func += pairing(&da, &dv);
        qy += sq(&dv[dims.range(Block::Y0)]) + sq(&dv[dims.range(Block::Z0)]);
        qyy += sq(&dv[dims.range(Block::Y1)]) + sq(&dv[dims.range(Block::Z1)]);
    }
    let mf = m as f64;
    let (func, qy, qyy) = (func / mf, qy / mf, qyy / mf);
    let quad = o.theta1 * qy + o.theta2 * qyy;
    let (y1, y2) = (y_values(&pair.v1, dims), y_values(&pair.v2, dims));
    let h1 = eval_terminal(coeffs, &y1, d)?;
    let h2 = eval_terminal(coeffs, &y2, d)?;
    let dy = diff(&y1, &y2);
    let hf = pairing(&diff(&h1, &h2), &dy) / mf;
    let qh = sq(&dy) / mf;
    let (main, terminal) = match o.direction {
        Direction::A2 => (func + quad, o.alpha1 * qh - hf),
        Direction::A2Prime => (quad - func, hf + o.alpha1 * qh),
    };
    Ok(Margins {
        main,
        terminal,
        scale: qy + qyy,
        scale_y: qh,
    })
}

fn ascend(coeffs: &dyn CoefficientSet, start: &SamplePair, o: &MonotonicityOptions, seed: u64, pick: fn(&Margins) -> f64) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut best = start.clone();
    let mut best_val = pick(&margins(coeffs, &best, o)?);
    let dv = diff(&start.v2, &start.v1);
    let norm = sq(&dv).sqrt();
    if norm == 0.0 {
        return Ok(best);
    }
    for it in 0..200 {
        let step = 0.2 * norm / (1.0 + it as f64 / 50.0);
        let mut cand_d = diff(&best.v2, &best.v1);
        let width = (cand_d.len() as f64).sqrt();
        for v in cand_d.iter_mut() {
            *v += step * rng.sample::<f64, _>(StandardNormal) / width;
        }
        let n = sq(&cand_d).sqrt();
        if n == 0.0 {
            continue;
        }
        let cand = SamplePair {
            v2: best.v1.iter().zip(&cand_d).map(|(a, d)| a + d * norm / n).collect(),
            ..best.clone()
        };
        let val = pick(&margins(coeffs, &cand, o)?);
        if val > best_val {
            best = cand;
            best_val = val;
        }
    }
    Ok(best)
}

/// Sample the monotonicity conditions over `n_pairs` ensemble pairs.
pub fn check_monotonicity(coeffs: &dyn CoefficientSet, sampler: &Sampler, o: &MonotonicityOptions) -> Result<AssumptionReport> {
    sampler.validate()?;
    let (t1, t2, a1) = (o.theta1, o.theta2, o.alpha1);
    if !(t1 >= 0.0 && t2 >= 0.0 && a1 >= 0.0) || !(t1 + t2 > 0.0) || !(a1 + t2 > 0.0) {
        return Err(Error::Invalid(format!(
            "need theta1, theta2, alpha1 >= 0 with theta1 + theta2 > 0 and alpha1 + theta2 > 0, got ({t1}, {t2}, {a1})"
        )));
    }
    let nv = coeffs.dims().nv();
    let label = o.direction.label();
    let mut worst: Option<(f64, f64, SamplePair)> = None;
    let mut worst_h: Option<(f64, f64, SamplePair)> = None;
    for i in 0..o.n_pairs {
        let pair = sampler.pair(nv, i);
        let mg = margins(coeffs, &pair, o)?;
        if worst.as_ref().is_none_or(|w| mg.main > w.0) {
            worst = Some((mg.main, mg.scale, pair.clone()));
        }
        if worst_h.as_ref().is_none_or(|w| mg.terminal > w.0) {
            worst_h = Some((mg.terminal, mg.scale_y, pair));
        }
    }
    let mut report = AssumptionReport {
        samples_used: o.n_pairs,
        ..Default::default()
    };
    for (name, slot, pick) in [
        (label.to_string(), worst, (|m: &Margins| m.main) as fn(&Margins) -> f64),
        (format!("{label}.h"), worst_h, |m: &Margins| m.terminal),
    ] {
        let Some((mut value, mut scale, mut pair)) = slot else { continue };
        if o.local_search {
            pair = ascend(coeffs, &pair, o, sampler.seed, pick)?;
            let mg = margins(coeffs, &pair, o)?;
            value = pick(&mg);
            scale = if name.ends_with(".h") { mg.scale_y } else { mg.scale };
        }
        let ok = value <= REL_TOL * (1.0 + scale);
        report.pass.insert(name.clone(), ok);
        report.witnesses.push(Witness::from_pair(&name, &pair, value));
        if name.ends_with(".h") {
            report.alpha1_margin = Some(value);
        } else {
            report.monotonicity_margin = Some(value);
        }
    }
    Ok(report)
}

/// Constants of the control-side conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlConstants {
    /// Bound on the squared derivative norms of `g`, `G` in `z`, `Z`; must lie in `(0, 1/6)`.
    pub gamma: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub alpha1: f64,
    pub n_pairs: usize,
    pub local_search: bool,
}

/// Derivative bounds on the noise coefficients plus monotonicity of the
/// state system at a fixed admissible control.
///
/// `‖∂g/∂z‖², ‖∂g/∂Z‖², ‖∂G/∂z‖², ‖∂G/∂Z‖² < γ` and the same blocks of the
/// mean Jacobian `< γ/3`, all in Frobenius norm at sampled points. For
/// mean-only law dependence the L-derivative is the mean Jacobian, so its
/// second moment is its square. Monotonicity uses `h = c·y` with the direct
/// condition when `c > 0` and the reversed one when `c < 0`.
pub fn check_control_assumptions(problem: &ControlProblem, sampler: &Sampler, k: &ControlConstants) -> Result<AssumptionReport> {
    problem.validate()?;
    sampler.validate()?;
    if problem.c == 0.0 {
        return Err(Error::ZeroTerminalCoefficient);
    }
    if !(k.gamma > 0.0 && k.gamma < 1.0 / 6.0) {
        return Err(Error::Invalid(format!("gamma must lie in (0, 1/6), got {}", k.gamma)));
    }
    let dims = problem.dims;
    let nv = dims.nv();
    let blocks = [("G", Block::Z0), ("g", Block::Z1)];
    let args = [("z", Block::Z0), ("Z", Block::Z1)];
    let mut worst = BTreeMap::<String, (f64, f64, Vec<f64>)>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    for i in 0..k.n_pairs {
        let pair = sampler.pair(nv, i);
        let v = pair.v1[..nv].to_vec();
        let mean: Vec<f64> = pair.v2[..nv].to_vec();
        let u: Vec<f64> = problem.lower.iter().zip(&problem.upper).map(|(l, h)| l + (h - l) * rng.random::<f64>()).collect();
        let (jv, jm) = problem.jacobians(pair.t, &v, &u, &mean);
        for (out_name, out_b) in blocks {
            for (arg_name, arg_b) in args {
                for (jac, suffix, bound) in [(&jv, "", k.gamma), (&jm, ".mean", k.gamma / 3.0)] {
                    let norm: f64 = dims.range(out_b).flat_map(|r| dims.range(arg_b).map(move |c| (r, c))).map(|(r, c)| jac[r * nv + c].powi(2)).sum();
                    let key = format!("A4.d{out_name}/d{arg_name}{suffix}");
                    let e = worst.entry(key).or_insert((f64::NEG_INFINITY, bound, vec![]));
                    if norm > e.0 {
                        *e = (norm, bound, [pair.t].into_iter().chain(v.iter().copied()).collect());
                    }
                }
            }
        }
    }
    let mut report = AssumptionReport {
        samples_used: k.n_pairs,
        ..Default::default()
    };
    let mut gamma_hat = 0.0f64;
    for (key, (norm, bound, at)) in worst {
        report.pass.insert(key.clone(), norm < bound);
        gamma_hat = gamma_hat.max(if key.ends_with(".mean") { 3.0 * norm } else { norm });
        if norm >= bound {
            report.witnesses.push(Witness {
                condition: key,
                kind: Displacement::Independent,
                t: at[0],
                value: norm - bound,
                v1: at[1..].to_vec(),
                v2: at[1..].to_vec(),
            });
        }
    }
    report.estimated_gamma = Some(gamma_hat);
    let mut u0 = vec![0.0; problem.du];
    problem.project(&mut u0);
    let fixed = ControlledModel::new(problem.clone(), ControlPath::Constant(u0));
    let direction = if problem.c > 0.0 { Direction::A2 } else { Direction::A2Prime };
    report.merge(check_monotonicity(
        &fixed,
        sampler,
        &MonotonicityOptions {
            theta1: k.theta1,
            theta2: k.theta2,
            alpha1: k.alpha1,
            direction,
            n_pairs: k.n_pairs,
            local_search: k.local_search,
        },
    )?);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrabilityReport {
    pub pass: bool,
    pub offending_node: Option<usize>,
    /// `Σ_k E|A(t_k, v, μ)|² Δt` over the probe law.
    pub integral: f64,
}

/// Evaluate the coefficients at the atoms of `probe` along `grid` and the
/// terminal map at their `y` parts.
pub fn check_integrability(coeffs: &dyn CoefficientSet, grid: TimeGrid, probe: &EmpiricalLaw) -> Result<IntegrabilityReport> {
    let dims = coeffs.dims();
    if probe.dim() != dims.nv() {
        return Err(Error::Dimension(format!("probe law has dimension {}", probe.dim())));
    }
    let fail = |k| IntegrabilityReport {
        pass: false,
        offending_node: Some(k),
        integral: f64::INFINITY,
    };
    let mut integral = 0.0;
    for k in 0..=grid.steps() {
        let a = match eval_system(coeffs, grid.t(k), k, probe.samples(), Some(probe)) {
            Ok(a) => a,
            Err(Error::NonFinite { .. }) => return Ok(fail(k)),
            Err(e) => return Err(e),
        };
        let e2: f64 = a.chunks(dims.nv()).zip(probe.weights()).map(|(r, w)| w * sq(r)).sum();
        if k < grid.steps() {
            integral += e2 * grid.dt();
        }
        if !integral.is_finite() {
            return Ok(fail(k));
        }
    }
    let y = y_values(probe.samples(), dims);
    let law_y = EmpiricalLaw::weighted(y.clone(), dims.d, probe.weights().to_vec())?;
    let mut h = vec![0.0; y.len()];
    let n = grid.steps();
    for (p, row) in h.chunks_mut(dims.d).enumerate() {
        coeffs.terminal(At { t: grid.horizon(), node: n, particle: p }, &y[p * dims.d..(p + 1) * dims.d], &law_y, row);
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Ok(fail(n));
    }
    Ok(IntegrabilityReport {
        pass: true,
        offending_node: None,
        integral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use crate::model::{builtin_counterexample, builtin_example_meanfield, FnModel, LawDependence, LinearModel};

    fn mono(theta1: f64, theta2: f64, alpha1: f64, direction: Direction, n_pairs: usize) -> MonotonicityOptions {
        MonotonicityOptions { theta1, theta2, alpha1, direction, n_pairs, local_search: false }
    }

    #[test]
    fn sampler_is_prefix_stable() {
        let s = Sampler::default();
        assert_eq!(s.pair(4, 17), s.pair(4, 17));
        assert_ne!(s.pair(4, 17).v1, s.pair(4, 18).v1);
        let swap = s.pair(4, 4);
        assert_eq!(swap.kind, Displacement::Swap(0));
        let l1 = EmpiricalLaw::uniform(swap.v1.clone(), 4).unwrap();
        let l2 = EmpiricalLaw::uniform(swap.v2.clone(), 4).unwrap();
        assert!(wasserstein2_exact(&l1, &l2).unwrap() < 1e-12);
    }

    #[test]
    fn example1_passes_monotonicity() {
        let m = builtin_example_meanfield(Dims::scalar());
        let r = check_monotonicity(&m, &Sampler::default(), &mono(0.25, 0.25, 0.5, Direction::A2, 2000)).unwrap();
        assert!(r.all_pass(), "{}", r.to_text(4));
        assert!(r.monotonicity_margin.unwrap() <= 1e-9);
    }

    #[test]
    fn counterexample_fails_with_positive_witness() {
        let (m, _, _) = builtin_counterexample();
        let r = check_monotonicity(&m, &Sampler::default(), &mono(0.25, 0.25, 0.5, Direction::A2, 100)).unwrap();
        assert!(!r.pass["A2"]);
        let w = &r.witnesses[0];
        assert!(w.value > 0.0);
        // A pure Y shift gives (E ΔY)² plus the θ2 term.
        let axis = r.witnesses.iter().find(|w| w.kind == Displacement::Axis(1));
        if let Some(w) = axis {
            let c = w.mean_displacement(4)[1];
            assert!((w.value - 1.25 * c * c).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_thetas() {
        let m = LinearModel::zeros(Dims::scalar());
        assert!(check_monotonicity(&m, &Sampler::default(), &mono(0.0, 0.0, 1.0, Direction::A2, 10)).is_err());
        assert!(check_monotonicity(&m, &Sampler::default(), &mono(1.0, 0.0, 0.0, Direction::A2, 10)).is_err());
    }

    #[test]
    fn reversed_conditions_disagree_on_example1() {
        let m = builtin_example_meanfield(Dims::scalar());
        let r = check_monotonicity(&m, &Sampler::default(), &mono(0.25, 0.25, 0.5, Direction::A2Prime, 200)).unwrap();
        assert!(!r.pass["A2'"] && !r.pass["A2'.h"]);
    }

    #[test]
    fn lipschitz_of_example1() {
        let m = builtin_example_meanfield(Dims::scalar());
        let e = estimate_lipschitz(&m, &Sampler::default(), 2000).unwrap();
        assert!(e.c_hat <= 1.0 + 1e-12 && e.c_hat > 0.99, "{}", e.c_hat);
        assert!(e.gamma_hat <= 0.125 + 0.02, "{}", e.gamma_hat);
        assert!(e.gamma_below_half);
    }

    #[test]
    fn lipschitz_trivial_and_linear() {
        let z = LinearModel::zeros(Dims::scalar());
        let e = estimate_lipschitz(&z, &Sampler::default(), 200).unwrap();
        assert_eq!((e.c_hat, e.gamma_hat), (0.0, 0.0));
        let mut m = LinearModel::zeros(Dims::scalar());
        m.k[1 * 4] = 2.0;
        let e = estimate_lipschitz(&m, &Sampler::default(), 200).unwrap();
        assert!(e.c_hat <= 2.0 + 1e-12 && e.c_hat >= 2.0 - 1e-9, "{}", e.c_hat);
        let bad = Sampler { scale: 0.0, ..Default::default() };
        assert!(estimate_lipschitz(&z, &bad, 10).is_err());
    }

    #[test]
    fn integrability_flags_singular_drift() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let probe = EmpiricalLaw::uniform(vec![1.0, 0.5, 0.0, 0.0, -1.0, 0.2, 0.1, 0.0], 4).unwrap();
        let singular = FnModel {
            dims: Dims::scalar(),
            dependence: LawDependence::None,
            eval: Box::new(|at, v, _, out| {
                out.fill(0.0);
                out[1] = v[0] / at.t;
            }),
            terminal: Box::new(|_, y, _, out| out.copy_from_slice(y)),
        };
        let r = check_integrability(&singular, grid, &probe).unwrap();
        assert!(!r.pass);
        assert_eq!(r.offending_node, Some(0));
        let ok = check_integrability(&builtin_example_meanfield(Dims::scalar()), grid, &probe).unwrap();
        assert!(ok.pass && ok.integral.is_finite());
        let zero = check_integrability(&LinearModel::zeros(Dims::scalar()), grid, &probe).unwrap();
        assert!(zero.pass && zero.integral == 0.0);
    }

    fn lq_constants(gamma: f64) -> ControlConstants {
        ControlConstants { gamma, theta1: 0.25, theta2: 0.25, alpha1: 0.5, n_pairs: 2000, local_search: false }
    }

    #[test]
    fn lq_control_scenario_is_certified() {
        let pr = crate::control::lq_problem(&crate::control::LqParams::default());
        let r = check_control_assumptions(&pr, &Sampler::default(), &lq_constants(0.1)).unwrap();
        assert!(r.all_pass(), "{}", r.to_text(4));
        assert!((r.estimated_gamma.unwrap() - 0.0625).abs() < 1e-6);
        assert!(r.pass.contains_key("A2") && r.pass.contains_key("A2.h"));
    }

    #[test]
    fn noise_derivative_above_gamma_fails() {
        let mut pr = crate::control::lq_problem(&crate::control::LqParams::default());
        pr.dynamics = Arc::new(|_, v, _, _, out: &mut [f64]| {
            out.fill(0.0);
            out[3] = 0.5 * v[3];
        });
        let r = check_control_assumptions(&pr, &Sampler::default(), &lq_constants(0.125)).unwrap();
        assert_eq!(r.pass["A4.dg/dZ"], false);
        assert!(r.pass["A4.dG/dz"] && r.pass["A4.dg/dz"]);
        assert!(r.witnesses.iter().any(|w| w.condition == "A4.dg/dZ" && (w.value - 0.125).abs() < 1e-6));
    }

    #[test]
    fn noise_free_of_z_passes_any_gamma_and_c_zero_is_rejected() {
        let mut pr = crate::control::lq_problem(&crate::control::LqParams::default());
        pr.dynamics = Arc::new(|_, v, u, m, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = v[0] - 0.5 * m[0];
            out[1] = -v[1] + 0.5 * m[1] + u[0];
        });
        let r = check_control_assumptions(&pr, &Sampler::default(), &lq_constants(1e-6)).unwrap();
        assert!(r.pass.iter().filter(|(k, _)| k.starts_with("A4")).all(|(_, v)| *v));
        pr.c = 0.0;
        assert!(matches!(check_control_assumptions(&pr, &Sampler::default(), &lq_constants(0.1)), Err(Error::ZeroTerminalCoefficient)));
    }
}
