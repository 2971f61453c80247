//! Brownian drivers, forward and backward Itô sums, and the discrete
//! integration-by-parts check.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{par, Error, Result};

/// Uniform grid `t_k = k·T/N` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Invalid("zero steps".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

/// Increments of the forward driver `W` and backward driver `B`, stored
/// particle-major: entry `[p][k][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPair {
    pub grid: TimeGrid,
    pub particles: usize,
    pub d_w: usize,
    pub d_b: usize,
    pub seed: u64,
    dw: Vec<f64>,
    db: Vec<f64>,
}

impl BrownianPair {
    pub fn dw(&self, p: usize, k: usize) -> &[f64] {
        let n = self.grid.steps();
        let o = (p * n + k) * self.d_w;
        &self.dw[o..o + self.d_w]
    }

    pub fn db(&self, p: usize, k: usize) -> &[f64] {
        let n = self.grid.steps();
        let o = (p * n + k) * self.d_b;
        &self.db[o..o + self.d_b]
    }

    pub fn dw_all(&self) -> &[f64] {
        &self.dw
    }

    pub fn db_all(&self) -> &[f64] {
        &self.db
    }

    /// `B_T − B_{t_k}` for every particle and node, laid out `[p][k][j]` with
    /// `N + 1` nodes.
    pub fn b_tail(&self) -> Vec<f64> {
        let n = self.grid.steps();
        let db = self.d_b;
        let mut out = vec![0.0; self.particles * (n + 1) * db];
        par::for_each_row(&mut out, (n + 1) * db, |p, row| {
            for k in (0..n).rev() {
                for j in 0..db {
                    row[k * db + j] = row[(k + 1) * db + j] + self.db(p, k)[j];
                }
            }
        });
        out
    }

    /// `W_{t_k}` for every particle and node, laid out `[p][k][j]`.
    pub fn w_path(&self) -> Vec<f64> {
        let n = self.grid.steps();
        let dw = self.d_w;
        let mut out = vec![0.0; self.particles * (n + 1) * dw];
        par::for_each_row(&mut out, (n + 1) * dw, |p, row| {
            for k in 0..n {
                for j in 0..dw {
                    row[(k + 1) * dw + j] = row[k * dw + j] + self.dw(p, k)[j];
                }
            }
        });
        out
    }

    /// Write one driver as `MVFB`, then `M`, `N`, `d` as little-endian u64,
    /// then the increments as little-endian f64.
    pub fn dump(&self, driver: Driver, out: &mut impl Write) -> Result<()> {
        let (d, data) = match driver {
            Driver::W => (self.d_w, &self.dw),
            Driver::B => (self.d_b, &self.db),
        };
        out.write_all(b"MVFB")?;
        for v in [self.particles, self.grid.steps(), d] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for x in data {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Driver {
    W,
    B,
}

/// Read a dump produced by [`BrownianPair::dump`]: `(M, N, d, values)`.
pub fn read_dump(input: &mut impl Read) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != b"MVFB" {
        return Err(Error::Invalid("bad magic".into()));
    }
    let mut dims = [0usize; 3];
    let mut word = [0u8; 8];
    for d in dims.iter_mut() {
        input.read_exact(&mut word)?;
        *d = u64::from_le_bytes(word) as usize;
    }
    let mut values = vec![0.0; dims[0] * dims[1] * dims[2]];
    for v in values.iter_mut() {
        input.read_exact(&mut word)?;
        *v = f64::from_le_bytes(word);
    }
    Ok((dims[0], dims[1], dims[2], values))
}

/// Gaussian increments with variance `Δt`; particle `p` draws from ChaCha
/// stream `p` of `seed`, so the result does not depend on scheduling.
pub fn sample_driver_pair(
    grid: TimeGrid,
    d_w: usize,
    d_b: usize,
    particles: usize,
    seed: u64,
) -> Result<BrownianPair> {
    if particles == 0 || d_w == 0 || d_b == 0 {
        return Err(Error::Invalid("particle and driver counts must be positive".into()));
    }
    let n = grid.steps();
    let sd = grid.dt().sqrt();
    let width = n * (d_w + d_b);
    let mut both = vec![0.0; particles * width];
    par::for_each_row(&mut both, width, |p, row| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        for x in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = sd * z;
        }
    });
    let mut dw = Vec::with_capacity(particles * n * d_w);
    let mut db = Vec::with_capacity(particles * n * d_b);
    for row in both.chunks(width) {
        dw.extend_from_slice(&row[..n * d_w]);
        db.extend_from_slice(&row[n * d_w..]);
    }
    Ok(BrownianPair {
        grid,
        particles,
        d_w,
        d_b,
        seed,
        dw,
        db,
    })
}

fn integral(
    integrand: &[f64],
    out_dim: usize,
    drivers: &BrownianPair,
    driver: Driver,
) -> Result<Vec<f64>> {
    let n = drivers.grid.steps();
    let m = drivers.particles;
    let dd = match driver {
        Driver::W => drivers.d_w,
        Driver::B => drivers.d_b,
    };
    let width = out_dim * dd;
    if out_dim == 0 || integrand.len() != m * (n + 1) * width {
        return Err(Error::Dimension(format!(
            "integrand has {} values, expected {m}×{}×{width}",
            integrand.len(),
            n + 1
        )));
    }
    let mut out = vec![0.0; m * out_dim];
    par::for_each_row(&mut out, out_dim, |p, acc| {
        for k in 0..n {
            let (node, inc) = match driver {
                Driver::W => (k, drivers.dw(p, k)),
                Driver::B => (k + 1, drivers.db(p, k)),
            };
            let h = &integrand[(p * (n + 1) + node) * width..][..width];
            for (i, a) in acc.iter_mut().enumerate() {
                for (j, dx) in inc.iter().enumerate() {
                    *a += h[i * dd + j] * dx;
                }
            }
        }
    });
    Ok(out)
}

/// `Σ_k h_k ΔW_k` per particle with the integrand taken at left endpoints.
///
/// `integrand` is `[p][k][i][j]` over `N + 1` nodes, an `out_dim × d_W`
/// matrix per node; the result is `[p][i]`.
pub fn forward_ito_integral(
    integrand: &[f64],
    out_dim: usize,
    drivers: &BrownianPair,
) -> Result<Vec<f64>> {
    integral(integrand, out_dim, drivers, Driver::W)
}

/// `Σ_k h_{k+1} ΔB_k` per particle with the integrand taken at right
/// endpoints. Layout as in [`forward_ito_integral`] with `d_B` columns.
pub fn backward_ito_integral(
    integrand: &[f64],
    out_dim: usize,
    drivers: &BrownianPair,
) -> Result<Vec<f64>> {
    integral(integrand, out_dim, drivers, Driver::B)
}

/// Scalar process `α_t = α_0 + ∫β ds + ∫γ dW + ∫δ dB̄` with deterministic
/// time-dependent coefficients, driven by the first component of each driver.
pub struct ItoProcess<'a> {
    pub initial: f64,
    pub drift: &'a (dyn Fn(f64) -> f64 + Sync),
    pub forward: &'a (dyn Fn(f64) -> f64 + Sync),
    pub backward: &'a (dyn Fn(f64) -> f64 + Sync),
}

impl ItoProcess<'_> {
    pub fn zero_fn(_: f64) -> f64 {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItoCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Both sides of the expectation form of the product rule at `t = T`:
///
/// `E⟨α_T, α̃_T⟩ = ⟨α_0, α̃_0⟩ + E∫⟨α, dα̃⟩ + E∫⟨α̃, dα⟩ − E∫δ δ̃ ds + E∫γ γ̃ ds`.
///
/// Both processes are stepped by Euler; the `dB̄` parts of `∫⟨α, dα̃⟩` use
/// right endpoints, the `dW` parts left endpoints.
pub fn discrete_ito_product_check(
    a: &ItoProcess,
    b: &ItoProcess,
    grid: TimeGrid,
    drivers: &BrownianPair,
) -> Result<ItoCheck> {
    if drivers.grid.steps() != grid.steps() || drivers.grid.horizon() != grid.horizon() {
        return Err(Error::Dimension("drivers were sampled on another grid".into()));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let m = drivers.particles;
    let mut cov = 0.0;
    for k in 0..n {
        let t = grid.t(k);
        cov += ((a.forward)(t) * (b.forward)(t) - (a.backward)(grid.t(k + 1)) * (b.backward)(grid.t(k + 1))) * dt;
    }
    let sums = par::sum_rows(m, 2, |p, acc| {
        let (mut x, mut y) = (a.initial, b.initial);
        let mut cross = 0.0;
        for k in 0..n {
            let (t, t1) = (grid.t(k), grid.t(k + 1));
            let dw = drivers.dw(p, k)[0];
            let db = drivers.db(p, k)[0];
            let dx_left = (a.drift)(t) * dt + (a.forward)(t) * dw;
            let dy_left = (b.drift)(t) * dt + (b.forward)(t) * dw;
            let x1 = x + dx_left + (a.backward)(t1) * db;
            let y1 = y + dy_left + (b.backward)(t1) * db;
            cross += x * dy_left + x1 * (b.backward)(t1) * db;
            cross += y * dx_left + y1 * (a.backward)(t1) * db;
            x = x1;
            y = y1;
        }
        acc[0] += x * y;
        acc[1] += cross;
    });
    let lhs = sums[0] / m as f64;
    let rhs = a.initial * b.initial + sums[1] / m as f64 + cov;
    Ok(ItoCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}
