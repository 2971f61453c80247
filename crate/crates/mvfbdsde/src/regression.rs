//! Least-squares projection onto a small feature basis, the particle proxy
//! for conditional expectations.

use nalgebra::{DMatrix, DVector};

use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Basis {
    Constant,
    #[default]
    AffineY,
    /// `y`, pairwise products of `y`, and `B_T − B_t` with its squares.
    Poly2YPlusBtail,
}

impl Basis {
    pub fn name(self) -> &'static str {
        match self {
            Basis::Constant => "constant",
            Basis::AffineY => "affine_y",
            Basis::Poly2YPlusBtail => "poly2_y_plus_Btail",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Basis::Constant),
            "affine_y" => Some(Basis::AffineY),
            "poly2_y_plus_Btail" => Some(Basis::Poly2YPlusBtail),
            _ => None,
        }
    }

    /// Number of non-constant features for state dimension `d`.
    pub fn width(self, d: usize, d_b: usize) -> usize {
        match self {
            Basis::Constant => 0,
            Basis::AffineY => d,
            Basis::Poly2YPlusBtail => d + d * (d + 1) / 2 + 2 * d_b,
        }
    }

    /// Append the non-constant features of one particle to `out`.
    pub fn features(self, y: &[f64], b_tail: &[f64], out: &mut [f64]) {
        match self {
            Basis::Constant => {}
            Basis::AffineY => out.copy_from_slice(y),
            Basis::Poly2YPlusBtail => {
                let mut i = 0;
                for &v in y {
                    out[i] = v;
                    i += 1;
                }
                for a in 0..y.len() {
                    for b in a..y.len() {
                        out[i] = y[a] * y[b];
                        i += 1;
                    }
                }
                for &v in b_tail {
                    out[i] = v;
                    out[i + 1] = v * v;
                    i += 2;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionConfig {
    pub basis: Basis,
    pub ridge: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            basis: Basis::AffineY,
            ridge: 0.0,
        }
    }
}

/// Fitted projection onto `span{1, features}` for one time node.
pub struct Projector {
    keep: Vec<usize>,
    x: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Projector {
    /// `features` is `m × width`, row-major. Near-constant columns are dropped
    /// before solving the normal equations of the standardized design.
    pub fn fit(features: Vec<f64>, width: usize, ridge: f64, node: usize) -> Result<Self> {
        let m = if width == 0 { 0 } else { features.len() / width };
        if width == 0 {
            return Ok(Self {
                keep: vec![],
                x: vec![],
                chol: None,
            });
        }
        let mf = m as f64;
        let sums = par::sum_rows(m, width, |p, acc| {
            for (a, x) in acc.iter_mut().zip(&features[p * width..(p + 1) * width]) {
                *a += x;
            }
        });
        let mus: Vec<f64> = sums.iter().map(|s| s / mf).collect();
        // Centered second pass: E[x²] − μ² cancels and lets round-off pass as signal.
        let sq = par::sum_rows(m, width, |p, acc| {
            for ((a, x), mu) in acc.iter_mut().zip(&features[p * width..(p + 1) * width]).zip(&mus) {
                *a += (x - mu) * (x - mu);
            }
        });
        let mut keep = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for j in 0..width {
            let mu = mus[j];
            let sd = (sq[j] / mf).sqrt();
            if sd > 1e-10 * mu.abs().max(1.0) {
                keep.push(j);
                center.push(mu);
                scale.push(sd);
            }
        }
        let q = keep.len();
        let mut x = vec![0.0; m * q];
        par::for_each_row(&mut x, q, |p, row| {
            let src = &features[p * width..(p + 1) * width];
            for (a, r) in row.iter_mut().enumerate() {
                *r = (src[keep[a]] - center[a]) / scale[a];
            }
        });
        let mut proj = Self {
            keep,
            x,
            chol: None,
        };
        if q == 0 {
            return Ok(proj);
        }
        let gram = par::sum_rows(m, q * q, |p, acc| {
            let x = proj.row(p);
            for a in 0..q {
                for b in 0..q {
                    acc[a * q + b] += x[a] * x[b];
                }
            }
        });
        let g = DMatrix::from_row_slice(q, q, &gram) / mf;
        for r in [ridge, ridge + 1e-10, ridge + 1e-6] {
            let mut gr = g.clone();
            for a in 0..q {
                gr[(a, a)] += r;
            }
            if let Some(c) = gr.cholesky() {
                proj.chol = Some(c);
                return Ok(proj);
            }
        }
        Err(Error::Singular(node))
    }

    fn row(&self, p: usize) -> &[f64] {
        let q = self.keep.len();
        &self.x[p * q..(p + 1) * q]
    }

    /// Number of features kept after dropping near-constant columns.
    pub fn rank(&self) -> usize {
        self.keep.len()
    }

    /// Project each of the `cols` columns of `targets` (`m × cols`) and return
    /// the fitted values with the same layout.
    pub fn project(&self, targets: &[f64], cols: usize) -> Vec<f64> {
        let m = targets.len() / cols.max(1);
        let mf = m as f64;
        let q = self.keep.len();
        let sums = par::sum_rows(m, cols * (1 + q), |p, acc| {
            let t = &targets[p * cols..(p + 1) * cols];
            let x = self.row(p);
            for c in 0..cols {
                acc[c] += t[c];
                for a in 0..q {
                    acc[cols + c * q + a] += x[a] * t[c];
                }
            }
        });
        let means: Vec<f64> = sums[..cols].iter().map(|s| s / mf).collect();
        let betas: Vec<DVector<f64>> = match &self.chol {
            Some(ch) => (0..cols)
                .map(|c| {
                    // Centering the target is implicit: standardized columns have zero mean.
                    let rhs = DVector::from_iterator(
                        q,
                        (0..q).map(|a| sums[cols + c * q + a] / mf),
                    );
                    ch.solve(&rhs)
                })
                .collect(),
            None => vec![],
        };
        let mut out = vec![0.0; m * cols];
        par::for_each_row(&mut out, cols, |p, row| {
            let x = self.row(p);
            for c in 0..cols {
                let mut v = means[c];
                if let Some(b) = betas.get(c) {
                    for a in 0..q {
                        v += b[a] * x[a];
                    }
                }
                row[c] = v;
            }
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_off_spread_is_not_a_feature() {
        // Values that agree to the last bit or two, as a deterministic path
        // accumulated in different orders produces.
        let feats: Vec<f64> = (0..2000).map(|i| 0.0392626415145627 + if i % 3 == 0 { 6.9e-18 } else { 0.0 }).collect();
        let p = Projector::fit(feats, 1, 0.0, 5).unwrap();
        assert_eq!(p.rank(), 0);
    }

    #[test]
    fn reproduces_affine_targets_exactly() {
        let m = 50;
        let feats: Vec<f64> = (0..m).map(|i| (i as f64 * 0.37).sin()).collect();
        let targets: Vec<f64> = feats
            .iter()
            .flat_map(|&x| [3.0 - 2.0 * x, 7.0])
            .collect();
        let p = Projector::fit(feats, 1, 0.0, 0).unwrap();
        let fit = p.project(&targets, 2);
        for (a, b) in fit.iter().zip(&targets) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_feature_column_dropped() {
        let feats = vec![1.0; 10];
        let targets: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let p = Projector::fit(feats, 1, 0.0, 3).unwrap();
        let fit = p.project(&targets, 1);
        assert!(fit.iter().all(|&v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn constant_basis_returns_mean() {
        let p = Projector::fit(vec![], 0, 0.0, 0).unwrap();
        let fit = p.project(&[1.0, 2.0, 6.0], 1);
        assert_eq!(fit, vec![3.0; 3]);
    }

    #[test]
    fn poly2_feature_layout() {
        let mut out = vec![0.0; Basis::Poly2YPlusBtail.width(2, 1)];
        Basis::Poly2YPlusBtail.features(&[2.0, 3.0], &[5.0], &mut out);
        assert_eq!(out, vec![2.0, 3.0, 4.0, 6.0, 9.0, 5.0, 25.0]);
    }

    #[test]
    fn basis_names_round_trip() {
        for b in [Basis::Constant, Basis::AffineY, Basis::Poly2YPlusBtail] {
            assert_eq!(Basis::parse(b.name()), Some(b));
        }
    }
}
