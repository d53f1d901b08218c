//! Regression bases and least-squares fits for conditional expectations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Basis family requested for the per-step regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisSpec {
    /// Monomials of total degree `<= degree` in the standardized state.
    Polynomial { degree: usize },
    /// Local affine functions on a uniform grid of `cells` per coordinate.
    PiecewiseLinear { cells: usize },
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec::Polynomial { degree: 2 }
    }
}

/// A basis fixed to one design: standardization and cell boxes are taken
/// from the sample the basis is built on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Features {
    /// Used when every design point coincides.
    Constant,
    Polynomial {
        center: Vec<f64>,
        scale: Vec<f64>,
        /// Multi-indices in lexicographic order; the first is all zeros.
        exponents: Vec<Vec<u32>>,
    },
    PiecewiseLinear { lo: Vec<f64>, hi: Vec<f64>, cells: usize },
}

/// Multi-indices of total degree `<= degree` in `dim` variables, sorted
/// lexicographically.
pub fn multi_indices(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; dim];
    fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[pos] = e;
            rec(pos + 1, left - e, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, degree as u32, &mut cur, &mut out);
    out.sort();
    out
}

impl Features {
    /// Builds the basis for design `points` (row-major, `dim` columns).
    pub fn build(spec: BasisSpec, points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        let mut mean = vec![0.0; dim];
        for row in points.chunks(dim) {
            for c in 0..dim {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
                mean[c] += row[c];
            }
        }
        if n == 0 || lo.iter().zip(&hi).all(|(a, b)| a == b) {
            return Features::Constant;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        match spec {
            BasisSpec::Polynomial { degree } => {
                let mut var = vec![0.0; dim];
                for row in points.chunks(dim) {
                    for c in 0..dim {
                        var[c] += (row[c] - mean[c]).powi(2);
                    }
                }
                let scale = var.iter().map(|v| (v / n as f64).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
                // Degenerate coordinates only get the zero exponent.
                let exponents = multi_indices(dim, degree)
                    .into_iter()
                    .filter(|e| e.iter().zip(lo.iter().zip(&hi)).all(|(&p, (a, b))| p == 0 || a < b))
                    .collect();
                Features::Polynomial {
                    center: mean,
                    scale,
                    exponents,
                }
            }
            BasisSpec::PiecewiseLinear { cells } => Features::PiecewiseLinear {
                lo,
                hi,
                cells: cells.max(1),
            },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Features::Constant => 1,
            Features::Polynomial { exponents, .. } => exponents.len(),
            Features::PiecewiseLinear { lo, cells, .. } => cells.pow(lo.len() as u32) * (lo.len() + 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when the spanned space is closed under translations `x -> x + b`.
    pub fn translation_invariant(&self) -> bool {
        !matches!(self, Features::PiecewiseLinear { .. })
    }

    /// Box of the design the basis was built on, when it records one.
    pub fn design_box(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Features::PiecewiseLinear { lo, hi, .. } => Some((lo, hi)),
            _ => None,
        }
    }

    /// Writes the basis vector at `x` into `out` (length [`len`](Self::len)).
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Features::Constant => out[0] = 1.0,
            Features::Polynomial {
                center,
                scale,
                exponents,
            } => {
                let dim = center.len();
                if dim == 1 {
                    let s = (x[0] - center[0]) / scale[0];
                    let mut p = 1.0;
                    for (i, o) in out.iter_mut().enumerate() {
                        // Exponents are 0, 1, 2, ... in one dimension.
                        if i > 0 {
                            p *= s;
                        }
                        *o = p;
                    }
                    return;
                }
                let s: Vec<f64> = (0..dim).map(|c| (x[c] - center[c]) / scale[c]).collect();
                for (o, e) in out.iter_mut().zip(exponents) {
                    *o = e.iter().zip(&s).map(|(&p, v)| v.powi(p as i32)).product();
                }
            }
            Features::PiecewiseLinear { lo, hi, cells } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let dim = lo.len();
                let mut cell = 0usize;
                let mut local = vec![0.0; dim];
                for c in 0..dim {
                    let width = (hi[c] - lo[c]) / *cells as f64;
                    let (idx, mid) = if width > 0.0 {
                        let i = (((x[c] - lo[c]) / width).floor().max(0.0) as usize).min(cells - 1);
                        (i, lo[c] + (i as f64 + 0.5) * width)
                    } else {
                        (0, lo[c])
                    };
                    cell = cell * cells + idx;
                    local[c] = if width > 0.0 { (x[c] - mid) / width } else { 0.0 };
                }
                let at = cell * (dim + 1);
                out[at] = 1.0;
                out[at + 1..at + 1 + dim].copy_from_slice(&local);
            }
        }
    }

    pub fn value(&self, coefs: &[f64], x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.len()];
        self.eval(x, &mut phi);
        phi.iter().zip(coefs).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionOptions {
    /// Ridge is added when the design condition number exceeds this.
    pub condition_threshold: f64,
    /// Ridge strength relative to the largest Gram eigenvalue.
    pub ridge: f64,
    /// Condition number that remains unacceptable even after the ridge.
    pub condition_cap: f64,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            condition_threshold: 1e8,
            ridge: 1e-8,
            condition_cap: 1e12,
        }
    }
}

/// Least-squares fit of several target columns on one design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    /// One coefficient vector per target column.
    pub coefs: Vec<Vec<f64>>,
    /// Condition number of the normalized Gram matrix before any ridge.
    pub condition: f64,
    pub ridge_applied: bool,
    /// Mean squared residual per target column.
    pub residual_var: Vec<f64>,
    /// Inverse of the normalized Gram matrix `ΦᵀΦ/n`, row-major.
    pub gram_inv: Vec<f64>,
    pub n: usize,
}

impl Regression {
    /// Standard error of the fitted value of column `col` at basis vector `phi`.
    pub fn std_error(&self, col: usize, phi: &[f64]) -> f64 {
        let p = phi.len();
        let mut q = 0.0;
        for a in 0..p {
            for b in 0..p {
                q += phi[a] * self.gram_inv[a * p + b] * phi[b];
            }
        }
        (self.residual_var[col] * q.max(0.0) / self.n as f64).sqrt()
    }
}

const CHUNK: usize = 4096;

/// Regresses the `r` target columns (row-major `n × r`) on `features`
/// evaluated at `points` (row-major `n × dim`). Partial sums are formed on
/// fixed chunks and added in chunk order, so the result does not depend on
/// the number of threads.
pub fn regress(
    features: &Features,
    points: &[f64],
    dim: usize,
    targets: &[f64],
    r: usize,
    opts: &RegressionOptions,
    step: usize,
) -> Result<Regression> {
    let n = points.len() / dim;
    assert_eq!(targets.len(), n * r, "target shape");
    let p = features.len();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = points
        .par_chunks(CHUNK * dim)
        .zip(targets.par_chunks(CHUNK * r))
        .map(|(xs, ys)| {
            let mut g = vec![0.0; p * p];
            let mut b = vec![0.0; p * r];
            let mut phi = vec![0.0; p];
            for (x, y) in xs.chunks(dim).zip(ys.chunks(r)) {
                features.eval(x, &mut phi);
                for a in 0..p {
                    if phi[a] == 0.0 {
                        continue;
                    }
                    for c in a..p {
                        g[a * p + c] += phi[a] * phi[c];
                    }
                    for (col, yv) in y.iter().enumerate() {
                        b[a * r + col] += phi[a] * yv;
                    }
                }
            }
            (g, b)
        })
        .collect();
    let mut g = vec![0.0; p * p];
    let mut b = vec![0.0; p * r];
    for (pg, pb) in partials {
        g.iter_mut().zip(&pg).for_each(|(a, v)| *a += v);
        b.iter_mut().zip(&pb).for_each(|(a, v)| *a += v);
    }
    let inv_n = 1.0 / n as f64;
    let mut gram = DMatrix::from_fn(p, p, |a, c| {
        let (lo, hi) = if a <= c { (a, c) } else { (c, a) };
        g[lo * p + hi] * inv_n
    });
    let ill = |condition: f64| Error::IllConditioned {
        step,
        equation: 0,
        condition,
    };
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (mut lmin, mut lmax) = (f64::INFINITY, 0.0f64);
    for v in eig.iter() {
        lmin = lmin.min(*v);
        lmax = lmax.max(*v);
    }
    if !(lmax > 0.0) || !lmax.is_finite() {
        return Err(ill(f64::INFINITY));
    }
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let mut ridge_applied = false;
    if condition > opts.condition_threshold {
        let shift = opts.ridge * lmax;
        for a in 0..p {
            gram[(a, a)] += shift;
        }
        ridge_applied = true;
        let after = (lmax + shift) / (lmin.max(0.0) + shift);
        if after > opts.condition_cap {
            return Err(ill(condition));
        }
    }
    let chol = gram.clone().cholesky().ok_or_else(|| ill(condition))?;
    let mut coefs = Vec::with_capacity(r);
    for col in 0..r {
        let rhs = DVector::from_fn(p, |a, _| b[a * r + col] * inv_n);
        let sol = chol.solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(ill(condition));
        }
        coefs.push(sol.iter().copied().collect::<Vec<f64>>());
    }
    let inv = chol.inverse();
    let gram_inv: Vec<f64> = (0..p * p).map(|i| inv[(i / p, i % p)]).collect();

    let res_partials: Vec<Vec<f64>> = points
        .par_chunks(CHUNK * dim)
        .zip(targets.par_chunks(CHUNK * r))
        .map(|(xs, ys)| {
            let mut acc = vec![0.0; r];
            let mut phi = vec![0.0; p];
            for (x, y) in xs.chunks(dim).zip(ys.chunks(r)) {
                features.eval(x, &mut phi);
                for (col, yv) in y.iter().enumerate() {
                    let fit: f64 = phi.iter().zip(&coefs[col]).map(|(a, c)| a * c).sum();
                    acc[col] += (yv - fit).powi(2);
                }
            }
            acc
        })
        .collect();
    let mut residual_var = vec![0.0; r];
    for part in res_partials {
        residual_var.iter_mut().zip(&part).for_each(|(a, v)| *a += v);
    }
    residual_var.iter_mut().for_each(|v| *v *= inv_n);
    Ok(Regression {
        coefs,
        condition,
        ridge_applied,
        residual_var,
        gram_inv,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_indices_are_lexicographic() {
        let m = multi_indices(2, 2);
        assert_eq!(m.len(), 6);
        assert_eq!(m[0], vec![0, 0]);
        assert!(m.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(multi_indices(1, 3), vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn identical_points_give_constant_basis() {
        let f = Features::build(BasisSpec::Polynomial { degree: 3 }, &[2.0; 10], 1);
        assert_eq!(f, Features::Constant);
    }

    #[test]
    fn quadratic_is_fitted_exactly() {
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 0.5 * x + 3.0 * x * x).collect();
        let f = Features::build(BasisSpec::Polynomial { degree: 2 }, &xs, 1);
        let r = regress(&f, &xs, 1, &ys, 1, &RegressionOptions::default(), 0).unwrap();
        for x in [-1.5, 0.3, 1.9] {
            let v = f.value(&r.coefs[0], &[x]);
            assert!((v - (1.0 - 0.5 * x + 3.0 * x * x)).abs() < 1e-10);
        }
        assert!(r.residual_var[0] < 1e-20);
        assert!(!r.ridge_applied);
    }

    #[test]
    fn piecewise_fits_affine_exactly_and_ridges_empty_cells() {
        // Points only in the left half leave cells empty.
        let xs: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).chain([4.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let f = Features::build(BasisSpec::PiecewiseLinear { cells: 8 }, &xs, 1);
        let r = regress(&f, &xs, 1, &ys, 1, &RegressionOptions::default(), 3).unwrap();
        assert!(r.ridge_applied);
        assert!((f.value(&r.coefs[0], &[0.25]) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn two_dimensional_fit() {
        let mut pts = Vec::new();
        let mut ys = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                let (a, b) = (i as f64 / 10.0, j as f64 / 7.0);
                pts.extend([a, b]);
                ys.push(a * b - b + 2.0);
            }
        }
        let f = Features::build(BasisSpec::Polynomial { degree: 2 }, &pts, 2);
        assert_eq!(f.len(), 6);
        let r = regress(&f, &pts, 2, &ys, 1, &RegressionOptions::default(), 0).unwrap();
        assert!((f.value(&r.coefs[0], &[1.0, 1.0]) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn thread_count_does_not_change_fit() {
        let xs: Vec<f64> = (0..20_000).map(|i| ((i * 7919) % 10_007) as f64 / 1000.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x * 1.3).sin()).collect();
        let f = Features::build(BasisSpec::Polynomial { degree: 4 }, &xs, 1);
        let run = |t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| regress(&f, &xs, 1, &ys, 1, &RegressionOptions::default(), 0).unwrap())
        };
        assert_eq!(run(1), run(3));
    }
}
