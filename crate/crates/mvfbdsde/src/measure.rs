//! Empirical probability measures and the 2-Wasserstein distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Largest atom count accepted by the exact assignment solver.
pub const ASSIGNMENT_CAP: usize = 512;
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Weighted sample cloud with cached first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalLaw {
    dim: usize,
    samples: Vec<f64>,
    weights: Vec<f64>,
    mean: Vec<f64>,
    second_moment: f64,
    uniform: bool,
}

impl EmpiricalLaw {
    /// Uniform law over the rows of `samples` (row-major, `dim` columns).
    pub fn uniform(samples: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("zero-dimensional samples".into()));
        }
        if samples.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} values do not split into rows of {dim}",
                samples.len()
            )));
        }
        let n = samples.len() / dim;
        if n == 0 {
            return Err(Error::EmptyMeasure);
        }
        let w = 1.0 / n as f64;
        Ok(Self::build(samples, dim, vec![w; n], true))
    }

    /// Weighted law; weights must be nonnegative with a positive sum and are
    /// normalized to one.
    pub fn weighted(samples: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || samples.len() != weights.len() * dim {
            return Err(Error::Dimension(format!(
                "{} values, {} weights, dim {dim}",
                samples.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid("weights sum to zero".into()));
        }
        let first = weights[0];
        let uniform = weights.iter().all(|&w| w == first);
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self::build(samples, dim, weights, uniform))
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self::build(point.to_vec(), point.len(), vec![1.0], true)
    }

    fn build(samples: Vec<f64>, dim: usize, weights: Vec<f64>, uniform: bool) -> Self {
        let mut mean = vec![0.0; dim];
        let mut second_moment = 0.0;
        for (row, &w) in samples.chunks(dim).zip(&weights) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += w * x;
                second_moment += w * x * x;
            }
        }
        Self {
            dim,
            samples,
            weights,
            mean,
            second_moment,
            uniform,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `E|X|²`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Marginal law of the coordinates `start..end`.
    pub fn marginal(&self, start: usize, end: usize) -> Self {
        let samples = self
            .samples
            .chunks(self.dim)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        Self::build(samples, end - start, self.weights.clone(), self.uniform)
    }

    /// Pushforward under multiplication by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self::build(
            self.samples.iter().map(|x| c * x).collect(),
            self.dim,
            self.weights.clone(),
            self.uniform,
        )
    }
}

/// Weighted sample mean.
pub fn empirical_mean(law: &EmpiricalLaw) -> Result<Vec<f64>> {
    if law.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    Ok(law.mean().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum W2Method {
    Exact1d,
    Assignment,
    Sliced { projections: usize, seed: u64 },
}

impl W2Method {
    pub fn sliced() -> Self {
        W2Method::Sliced {
            projections: DEFAULT_PROJECTIONS,
            seed: 0,
        }
    }
}

/// 2-Wasserstein distance between two sample clouds.
pub fn wasserstein2(a: &EmpiricalLaw, b: &EmpiricalLaw, method: W2Method) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{} vs {}", a.dim(), b.dim())));
    }
    match method {
        W2Method::Exact1d => {
            if a.dim() != 1 {
                return Err(Error::Unsupported(format!(
                    "exact_1d needs dimension 1, got {}",
                    a.dim()
                )));
            }
            Ok(quantile_cost(a.samples(), a.weights(), b.samples(), b.weights()).sqrt())
        }
        W2Method::Assignment => {
            if a.len() != b.len() || a.len() > ASSIGNMENT_CAP || !a.is_uniform() || !b.is_uniform()
            {
                return Err(Error::Unsupported(format!(
                    "assignment needs equal uniform atom counts ≤ {ASSIGNMENT_CAP}, got {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            let n = a.len();
            let cost: Vec<f64> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| sq_dist(a.sample(i), b.sample(j)))
                .collect();
            let (total, _) = min_cost_assignment(&cost, n);
            Ok((total / n as f64).max(0.0).sqrt())
        }
        W2Method::Sliced { projections, seed } => Ok(sliced(a, b, projections, seed)),
    }
}

/// Exact distance when the inputs allow it: quantile matching in one
/// dimension, optimal assignment otherwise.
pub fn wasserstein2_exact(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<f64> {
    if a.dim() == 1 {
        wasserstein2(a, b, W2Method::Exact1d)
    } else {
        wasserstein2(a, b, W2Method::Assignment)
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn sorted_atoms(x: &[f64], w: &[f64]) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = x.iter().copied().zip(w.iter().copied()).collect();
    atoms.sort_by(|p, q| p.0.total_cmp(&q.0));
    atoms
}

/// Squared W2 between weighted 1-D clouds via the monotone coupling.
fn quantile_cost(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> f64 {
    let a = sorted_atoms(xa, wa);
    let b = sorted_atoms(xb, wb);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let m = ra.min(rb);
        let d = a[i].0 - b[j].0;
        cost += m * d * d;
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra += a[i].1;
        }
        if rb <= 1e-15 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb += b[j].1;
        }
    }
    cost
}

fn sliced(a: &EmpiricalLaw, b: &EmpiricalLaw, projections: usize, seed: u64) -> f64 {
    let d = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir = vec![0.0; d];
    let mut total = 0.0;
    let projections = projections.max(1);
    for _ in 0..projections {
        let mut norm = 0.0;
        while norm < 1e-12 {
            for c in dir.iter_mut() {
                *c = rng.sample(StandardNormal);
            }
            norm = dir.iter().map(|c| c * c).sum::<f64>().sqrt();
        }
        let project = |law: &EmpiricalLaw| -> Vec<f64> {
            (0..law.len())
                .map(|i| law.sample(i).iter().zip(&dir).map(|(x, u)| x * u).sum::<f64>() / norm)
                .collect()
        };
        total += quantile_cost(&project(a), a.weights(), &project(b), b.weights());
    }
    // A random unit direction captures 1/d of a squared displacement on average.
    (d as f64 * total / projections as f64).sqrt()
}

/// Minimum-cost perfect matching for a dense `n × n` cost matrix
/// (Hungarian method with potentials). Returns the cost and `col_of_row`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (f64, Vec<usize>) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i * n + col_of_row[i]]).sum();
    (total, col_of_row)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanW2Bounds {
    pub mean_gap: f64,
    pub w2: f64,
    pub coupling_l2: f64,
    pub holds: bool,
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Mean gap, W2 and the L2 cost of a given coupling, with a flag telling
/// whether `mean_gap ≤ w2 ≤ coupling_l2` holds up to [`BOUND_SLACK`].
///
/// `coupling` lists equally weighted pairs `(x_i, y_i)` whose marginals are
/// expected to be `a` and `b`.
pub fn check_mean_w2_bounds(
    a: &EmpiricalLaw,
    b: &EmpiricalLaw,
    coupling: &[(Vec<f64>, Vec<f64>)],
) -> Result<MeanW2Bounds> {
    let d = a.dim();
    if b.dim() != d || coupling.iter().any(|(x, y)| x.len() != d || y.len() != d) {
        return Err(Error::Dimension("coupling and laws disagree".into()));
    }
    if coupling.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let n = coupling.len() as f64;
    let mut mx = vec![0.0; d];
    let mut my = vec![0.0; d];
    let mut l2 = 0.0;
    for (x, y) in coupling {
        for k in 0..d {
            mx[k] += x[k] / n;
            my[k] += y[k] / n;
        }
        l2 += sq_dist(x, y) / n;
    }
    let scale = 1.0 + a.second_moment().sqrt() + b.second_moment().sqrt();
    let discrepancy = sq_dist(&mx, a.mean()).sqrt() + sq_dist(&my, b.mean()).sqrt();
    if discrepancy > 1e-9 * scale {
        return Err(Error::Marginal(discrepancy));
    }
    let mean_gap = sq_dist(a.mean(), b.mean()).sqrt();
    let w2 = wasserstein2_exact(a, b)?;
    let coupling_l2 = l2.sqrt();
    let holds = mean_gap <= w2 + BOUND_SLACK && w2 <= coupling_l2 + BOUND_SLACK;
    Ok(MeanW2Bounds {
        mean_gap,
        w2,
        coupling_l2,
        holds,
    })
}
