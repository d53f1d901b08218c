//! Gauss–Legendre rules and adaptive panel integration on intervals.

use std::sync::OnceLock;

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Shared 16-point rule.
    pub fn g16() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(16))
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Outcome of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Adaptive {
    pub value: f64,
    pub error_estimate: f64,
    pub converged: bool,
    pub panels: usize,
}

/// Adaptive bisection with a 16-point rule per panel; a panel is accepted
/// when its value agrees with the sum over its two halves.
pub fn adaptive<F: FnMut(f64) -> f64>(
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_depth: u32,
    mut f: F,
) -> Adaptive {
    let rule = GaussLegendre::g16();
    let mut stack = vec![(a, b, rule.integrate(a, b, &mut f), 0u32)];
    let mut value = 0.0;
    let mut err = 0.0;
    let mut converged = true;
    let mut panels = 0;
    while let Some((lo, hi, whole, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = rule.integrate(lo, mid, &mut f);
        let right = rule.integrate(mid, hi, &mut f);
        let refined = left + right;
        let diff = (refined - whole).abs();
        let scale = (b - a).abs().max(f64::MIN_POSITIVE);
        let local_tol = (rel_tol * refined.abs()).max(abs_tol * (hi - lo).abs() / scale);
        // A non-finite panel cannot be repaired by subdivision.
        let hopeless = !refined.is_finite();
        if hopeless || diff <= local_tol || depth >= max_depth {
            if hopeless || diff > local_tol {
                converged = false;
            }
            value += refined;
            err += diff;
            panels += 2;
        } else {
            stack.push((mid, hi, right, depth + 1));
            stack.push((lo, mid, left, depth + 1));
        }
    }
    Adaptive {
        value,
        error_estimate: err,
        converged,
        panels,
    }
}

/// Vector-valued adaptive integration on [a, b]; panels are accepted on the
/// max-norm of the disagreement between one panel and its halves.
pub fn adaptive_vec<F>(
    a: f64,
    b: f64,
    dim: usize,
    rel_tol: f64,
    abs_tol: f64,
    max_depth: u32,
    mut f: F,
) -> Result<(Vec<f64>, bool), crate::Error>
where
    F: FnMut(f64, &mut [f64]) -> Result<(), crate::Error>,
{
    let rule = GaussLegendre::g16();
    let mut buf = vec![0.0; dim];
    let mut panel = |lo: f64, hi: f64, f: &mut F| -> Result<Vec<f64>, crate::Error> {
        let mut acc = vec![0.0; dim];
        for (x, w) in rule.mapped(lo, hi) {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(x, &mut buf)?;
            for (a, v) in acc.iter_mut().zip(&buf) {
                *a += w * v;
            }
        }
        Ok(acc)
    };
    let whole = panel(a, b, &mut f)?;
    let mut stack = vec![(a, b, whole, 0u32)];
    let mut total = vec![0.0; dim];
    let mut converged = true;
    while let Some((lo, hi, whole, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = panel(lo, mid, &mut f)?;
        let right = panel(mid, hi, &mut f)?;
        let mut diff: f64 = 0.0;
        let mut mag: f64 = 0.0;
        for d in 0..dim {
            let r = left[d] + right[d];
            diff = diff.max((r - whole[d]).abs());
            mag = mag.max(r.abs());
        }
        let tol = (rel_tol * mag).max(abs_tol * (hi - lo) / (b - a));
        let hopeless = left.iter().chain(&right).any(|v| !v.is_finite());
        if hopeless || diff <= tol || depth >= max_depth {
            if hopeless || diff > tol {
                converged = false;
            }
            for d in 0..dim {
                total[d] += left[d] + right[d];
            }
        } else {
            stack.push((mid, hi, right, depth + 1));
            stack.push((lo, mid, left, depth + 1));
        }
    }
    Ok((total, converged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in [1, 2, 5, 16, 33] {
            let r = GaussLegendre::new(n);
            let s: f64 = r.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}: {s}");
        }
    }

    #[test]
    fn exact_for_polynomials() {
        let r = GaussLegendre::new(8);
        // degree 15 is the limit for 8 points
        let v = r.integrate(0.0, 2.0, |x| x.powi(15));
        assert!((v - 2f64.powi(16) / 16.0).abs() < 1e-9);
    }

    #[test]
    fn adaptive_handles_singular_density() {
        // ∫_{1e-6}^1 x^{-1.5} dx = 2 (1e3 - 1)
        let a = adaptive(1e-6, 1.0, 1e-10, 0.0, 60, |x| x.powf(-1.5));
        assert!(a.converged);
        assert!((a.value - 1998.0).abs() / 1998.0 < 1e-9);
    }
}
