//! Least-squares backward dynamic program and the mesh solution it produces.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::basis::{regress, BasisSpec, Features, Regression, RegressionOptions};
use crate::coefficients::ModelCoefficients;
use crate::levy::{LevyMeasure, QuadratureRule, TruncationIndex};
use crate::sde::{PathEnsemble, TimeGrid};
use crate::stats::Estimate;
use crate::{Error, Result};

/// How the `z` layers are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ZMethod {
    /// Regression of `(Y_{j+1} - u_{j+1}(X_j)) ΔB_j / Δt`.
    Regression,
    /// `σᵀ D_x u_{j+1}` by central differences of step `step`, projected on
    /// the basis.
    FiniteDifference { step: f64 },
}

/// How layers are combined between grid times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    Nearest,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub basis: BasisSpec,
    pub regression: RegressionOptions,
    /// Subtract the Brownian and jump martingale increments from the
    /// continuation targets. Lowers the regression noise of every layer; the
    /// plain scheme keeps `u(t0, x0)` an unbiased sample mean.
    pub control_variates: bool,
    pub z_method: ZMethod,
    pub interpolation: Interpolation,
    /// Points further than this fraction of the design width outside a
    /// layer's design box are flagged as extrapolated.
    pub extrapolation_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            basis: BasisSpec::default(),
            regression: RegressionOptions::default(),
            control_variates: false,
            z_method: ZMethod::Regression,
            interpolation: Interpolation::Nearest,
            extrapolation_margin: 0.1,
        }
    }
}

/// One time layer: `u_j` and `z_j` as basis expansions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub time: f64,
    pub features: Features,
    /// One column per equation.
    pub u: Regression,
    /// Columns `i * d + q` for equation `i`, Brownian coordinate `q`; absent
    /// on the terminal layer.
    pub z: Option<Regression>,
    /// Added to every equation's value; zero unless deliberately perturbed.
    pub offset: Vec<f64>,
    /// Bounding box of the design points.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Layer {
    pub fn equations(&self) -> usize {
        self.u.coefs.len()
    }

    fn u_into(&self, x: &[f64], phi: &mut [f64], out: &mut [f64]) {
        self.features.eval(x, phi);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(phi, &self.u.coefs[i]) + self.offset[i];
        }
    }

    pub fn u(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = vec![0.0; self.features.len()];
        let mut out = vec![0.0; self.equations()];
        self.u_into(x, &mut phi, &mut out);
        out
    }

    /// `z_j(x)`, row-major `m × d`.
    pub fn z(&self, x: &[f64], brownian: usize) -> Vec<f64> {
        let m = self.equations();
        match &self.z {
            None => vec![0.0; m * brownian],
            Some(r) => {
                let mut phi = vec![0.0; self.features.len()];
                self.features.eval(x, &mut phi);
                r.coefs.iter().map(|c| dot(&phi, c)).collect()
            }
        }
    }

    /// Regression standard error of `u_j^i(x)`.
    pub fn u_std_error(&self, i: usize, x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.features.len()];
        self.features.eval(x, &mut phi);
        self.u.std_error(i, &phi)
    }

    fn outside(&self, x: &[f64], margin: f64) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).any(|(v, (a, b))| {
            let slack = margin * (b - a).max(0.0);
            *v < a - slack - 1e-12 || *v > b + slack + 1e-12
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Value of an evaluation together with an extrapolation flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: Vec<f64>,
    pub extrapolated: bool,
}

/// The regression layers `u_j, z_j`, `j = 0..=N`, plus fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSolution {
    pub grid: TimeGrid,
    pub k: TruncationIndex,
    pub state_dim: usize,
    pub brownian_dim: usize,
    pub equations: usize,
    pub options: SolverOptions,
    pub n_paths: usize,
    pub seed: u64,
    pub layers: Vec<Layer>,
    /// Per equation, `max |u_N - g|` over the terminal design points.
    pub terminal_fit_residual: Vec<f64>,
    /// Per equation, sample mean and standard error of the pathwise
    /// backward recursion started from `g(X_N)`.
    pub pathwise: Vec<Estimate>,
    /// Regression of the pathwise values on the first layer's features;
    /// absent with a point start. Its standard errors carry the noise of
    /// every step, unlike those of the first layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathwise_fit: Option<Regression>,
}

impl MeshSolution {
    /// Index of the layer at or just before `t`, and the weight on the next
    /// one.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let g = &self.grid;
        let tol = 1e-9 * g.horizon().max(1.0);
        if t < g.t0 - tol || t > g.t_end + tol {
            return Err(Error::config(format!("t = {t} outside [{}, {}]", g.t0, g.t_end)));
        }
        let s = ((t - g.t0) / g.dt()).clamp(0.0, g.n_steps as f64);
        Ok(match self.options.interpolation {
            Interpolation::Nearest => ((s.round() as usize).min(g.n_steps), 0.0),
            Interpolation::Linear => {
                let j = (s.floor() as usize).min(g.n_steps);
                let w = if j == g.n_steps { 0.0 } else { s - j as f64 };
                (j, w)
            }
        })
    }

    /// Layer index used at time `t` (nearest node).
    pub fn layer_index(&self, t: f64) -> Result<usize> {
        let g = &self.grid;
        self.locate(t)?;
        Ok((((t - g.t0) / g.dt()).round().max(0.0) as usize).min(g.n_steps))
    }

    pub fn layer(&self, j: usize) -> &Layer {
        &self.layers[j]
    }

    pub fn evaluate_u(&self, t: f64, x: &[f64]) -> Result<Evaluation> {
        let (j, w) = self.locate(t)?;
        let a = &self.layers[j];
        let mut extrapolated = a.outside(x, self.options.extrapolation_margin);
        let mut values = a.u(x);
        if w > 0.0 {
            let b = &self.layers[j + 1];
            extrapolated |= b.outside(x, self.options.extrapolation_margin);
            for (v, u) in values.iter_mut().zip(b.u(x)) {
                *v = (1.0 - w) * *v + w * u;
            }
        }
        Ok(Evaluation { values, extrapolated })
    }

    /// `u^i(t, x)`, ignoring the extrapolation flag.
    pub fn u(&self, i: usize, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate_u(t, x)?.values[i])
    }

    /// `z(t, x)`, row-major `m × d`. The terminal layer has no `z`; the
    /// previous one is used there.
    pub fn evaluate_z(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let j = self.layer_index(t)?.min(self.grid.n_steps.saturating_sub(1));
        Ok(self.layers[j].z(x, self.brownian_dim))
    }

    /// `u(t0, ·)` at the start with its Monte Carlo standard error, taken
    /// from the pathwise recursion (its mean for a point start, its
    /// regression on the first layer's features otherwise).
    pub fn value_at_start(&self, i: usize, x: &[f64]) -> Estimate {
        let layer = &self.layers[0];
        let mean = layer.u(x)[i];
        let std_error = match &self.pathwise_fit {
            Some(fit) if !matches!(layer.features, Features::Constant) => {
                let mut phi = vec![0.0; layer.features.len()];
                layer.features.eval(x, &mut phi);
                fit.std_error(i, &phi)
            }
            _ if matches!(layer.features, Features::Constant) => self.pathwise[i].std_error,
            _ => layer.u_std_error(i, x),
        };
        Estimate { mean, std_error }
    }

    /// Copy with `delta` added to every equation of layer `j`.
    pub fn with_layer_shift(&self, j: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.layers[j].offset.iter_mut().for_each(|o| *o += delta);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::report::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `u^i(t, x + β(t,x,e)) - u^i(t, x)`.
pub fn jump_increment_field(
    solution: &MeshSolution,
    coeffs: &ModelCoefficients,
    i: usize,
    t: f64,
    x: &[f64],
    e: &[f64],
) -> Result<f64> {
    let mut b = vec![0.0; x.len()];
    coeffs.beta(t, x, e, &mut b);
    let shifted: Vec<f64> = x.iter().zip(&b).map(|(a, c)| a + c).collect();
    Ok(solution.u(i, t, &shifted)? - solution.u(i, t, x)?)
}

/// Polynomial-growth envelope `|u(t, x)| <= C (1 + |x|^p)` on a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthEnvelope {
    pub c: f64,
    pub p: f64,
}

/// Fits the envelope at time `t` on `samples` points per coordinate of the
/// box `[lo, hi]`: for each `p` on a grid of half-integers up to 6 the
/// smallest admissible `C`, keeping the pair with the lowest mean envelope
/// height over the box.
pub fn growth_envelope(
    solution: &MeshSolution,
    t: f64,
    lo: &[f64],
    hi: &[f64],
    samples: usize,
) -> Result<GrowthEnvelope> {
    let pts = box_grid(lo, hi, samples.max(2));
    let mut vals = Vec::with_capacity(pts.len());
    for x in &pts {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = solution.evaluate_u(t, x)?.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        vals.push((n, u));
    }
    let mut best: Option<(f64, GrowthEnvelope)> = None;
    for step in 0..=12 {
        let p = step as f64 * 0.5;
        let c = vals.iter().map(|(n, u)| u / (1.0 + n.powf(p))).fold(0.0, f64::max);
        let height = vals.iter().map(|(n, _)| c * (1.0 + n.powf(p))).sum::<f64>();
        if best.as_ref().is_none_or(|(h, _)| height < *h) {
            best = Some((height, GrowthEnvelope { c, p }));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

pub(crate) fn box_grid(lo: &[f64], hi: &[f64], per_dim: usize) -> Vec<Vec<f64>> {
    let dim = lo.len();
    let total = per_dim.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            (0..dim)
                .map(|c| {
                    let i = idx % per_dim;
                    idx /= per_dim;
                    lo[c] + (hi[c] - lo[c]) * i as f64 / (per_dim - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// `x ↦ ∫ w_i(e) [u_i(x + β(t,x,e)) - u_i(x)] λ_k(de)` for one layer, with
/// `w_i = γ^i` or `w_i = 1`.
///
/// When neither `β` nor the weights depend on `x` and the layer basis is
/// polynomial, the integral is again a polynomial of the same degree, so it
/// is fitted once exactly and evaluated cheaply afterwards. Otherwise every
/// call integrates with the fixed rule.
pub(crate) struct NonlocalField<'a> {
    layer: &'a Layer,
    coeffs: &'a ModelCoefficients,
    rule: &'a QuadratureRule,
    t: f64,
    weighted: bool,
    projected: Option<Vec<Vec<f64>>>,
}

impl<'a> NonlocalField<'a> {
    pub(crate) fn new(
        layer: &'a Layer,
        coeffs: &'a ModelCoefficients,
        rule: &'a QuadratureRule,
        t: f64,
        weighted: bool,
    ) -> Self {
        let mut f = Self {
            layer,
            coeffs,
            rule,
            t,
            weighted,
            projected: None,
        };
        let weights_fixed = !weighted || coeffs.mark_weights.iter().all(|w| w.is_state_independent());
        if coeffs.jump.is_state_independent() && weights_fixed && layer.features.translation_invariant() {
            f.projected = f.project();
        }
        f
    }

    fn direct(&self, x: &[f64], out: &mut [f64]) {
        let m = self.layer.equations();
        let dim = x.len();
        let mut phi = vec![0.0; self.layer.features.len()];
        let mut base = vec![0.0; m];
        self.layer.u_into(x, &mut phi, &mut base);
        let mut b = vec![0.0; dim];
        let mut xb = vec![0.0; dim];
        let mut ub = vec![0.0; m];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (e, w) in self.rule.iter() {
            self.coeffs.beta(self.t, x, e, &mut b);
            for c in 0..dim {
                xb[c] = x[c] + b[c];
            }
            self.layer.u_into(&xb, &mut phi, &mut ub);
            for i in 0..m {
                let g = if self.weighted { self.coeffs.gamma(i, self.t, x, e) } else { 1.0 };
                out[i] += w * g * (ub[i] - base[i]);
            }
        }
    }

    fn project(&self) -> Option<Vec<Vec<f64>>> {
        let feats = &self.layer.features;
        let m = self.layer.equations();
        let (center, scale) = match feats {
            Features::Constant => return Some(vec![vec![0.0]; m]),
            Features::Polynomial { center, scale, .. } => (center, scale),
            Features::PiecewiseLinear { .. } => return None,
        };
        let dim = center.len();
        let p = feats.len();
        let n_fit = (3 * p).max(8);
        let point = |s: usize| -> Vec<f64> {
            (0..dim)
                .map(|c| center[c] + scale[c] * (6.0 * halton(s + 1, PRIMES[c % PRIMES.len()]) - 3.0))
                .collect()
        };
        let mut pts = Vec::with_capacity(n_fit * dim);
        let mut targets = Vec::with_capacity(n_fit * m);
        let mut v = vec![0.0; m];
        for s in 0..n_fit {
            let x = point(s);
            self.direct(&x, &mut v);
            pts.extend_from_slice(&x);
            targets.extend_from_slice(&v);
        }
        let opts = RegressionOptions {
            condition_threshold: f64::INFINITY,
            ridge: 0.0,
            condition_cap: f64::INFINITY,
        };
        let fit = regress(feats, &pts, dim, &targets, m, &opts, 0).ok()?;
        // Confirm on points not used in the fit.
        let mut phi = vec![0.0; p];
        for s in n_fit..n_fit + 3 {
            let x = point(s);
            self.direct(&x, &mut v);
            feats.eval(&x, &mut phi);
            for i in 0..m {
                let got = dot(&phi, &fit.coefs[i]);
                if (got - v[i]).abs() > 1e-8 * (1.0 + v[i].abs()) {
                    return None;
                }
            }
        }
        Some(fit.coefs)
    }

    pub(crate) fn eval(&self, x: &[f64], phi: &mut [f64], out: &mut [f64]) {
        match &self.projected {
            Some(coefs) => {
                self.layer.features.eval(x, phi);
                for (o, c) in out.iter_mut().zip(coefs) {
                    *o = dot(phi, c);
                }
            }
            None => self.direct(x, out),
        }
    }
}

const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn halton(mut i: usize, base: usize) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// `Σ_{jumps in step j} [u(x + β(τ_j, x, e)) - u(x)]` for one path.
pub(crate) fn jump_sum(
    layer: &Layer,
    coeffs: &ModelCoefficients,
    ensemble: &PathEnsemble,
    path: usize,
    j: usize,
    base: &[f64],
    out: &mut [f64],
) {
    let t = ensemble.grid.node(j);
    let x = ensemble.state(path, j);
    let train = &ensemble.jump_trains[path];
    let mut phi = vec![0.0; layer.features.len()];
    let mut b = vec![0.0; x.len()];
    let mut xb = vec![0.0; x.len()];
    let mut ub = vec![0.0; out.len()];
    out.iter_mut().for_each(|o| *o = 0.0);
    for idx in ensemble.jumps_in_step(path, j) {
        coeffs.beta(t, x, train.mark(idx), &mut b);
        for c in 0..x.len() {
            xb[c] = x[c] + b[c];
        }
        layer.u_into(&xb, &mut phi, &mut ub);
        for i in 0..out.len() {
            out[i] += ub[i] - base[i];
        }
    }
}

fn check_finite(values: &[f64], width: usize, step: usize, equations: usize) -> Result<()> {
    for row in values.chunks(width) {
        for (c, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteTarget {
                    step,
                    equation: c * equations / width,
                });
            }
        }
    }
    Ok(())
}

fn layer_from(time: f64, features: Features, u: Regression, z: Option<Regression>, pts: &[f64], dim: usize) -> Layer {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in pts.chunks(dim) {
        for c in 0..dim {
            lo[c] = lo[c].min(row[c]);
            hi[c] = hi[c].max(row[c]);
        }
    }
    let m = u.coefs.len();
    Layer {
        time,
        features,
        u,
        z,
        offset: vec![0.0; m],
        lo,
        hi,
    }
}

fn fitted(features: &Features, fit: &Regression, pts: &[f64], dim: usize) -> Vec<f64> {
    let r = fit.coefs.len();
    let p = features.len();
    let mut out = vec![0.0; pts.len() / dim * r];
    out.par_chunks_mut(r).zip(pts.par_chunks(dim)).for_each_init(
        || vec![0.0; p],
        |phi, (o, x)| {
            features.eval(x, phi);
            for (v, c) in o.iter_mut().zip(&fit.coefs) {
                *v = dot(phi, c);
            }
        },
    );
    out
}

/// Runs the explicit least-squares dynamic program on `ensemble`.
///
/// Per step, with `Y = u_{j+1}(X_{j+1})`:
/// `z_j` regresses `(Y - u_{j+1}(X_j)) ΔB_j / Δt`; the continuation `c_j`
/// regresses `Y` (minus the martingale increments when control variates are
/// on); the nonlocal argument is `∫ γ^i [u_{j+1}(x+β) - u_{j+1}(x)] dλ_k`;
/// and `u_j` is the projection of `c_j + Δt h(τ_j, x, c_j, z_j, Γ_j)`.
pub fn solve_backward(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    k: TruncationIndex,
    grid: &TimeGrid,
    ensemble: &PathEnsemble,
    opts: &SolverOptions,
) -> Result<MeshSolution> {
    coeffs.check_dims()?;
    if ensemble.k != k {
        return Err(Error::config(format!("ensemble simulated at k={}, solver asked for k={k}", ensemble.k)));
    }
    if ensemble.grid != *grid {
        return Err(Error::config("ensemble grid differs from the solver grid"));
    }
    if ensemble.dim != coeffs.dims.state || ensemble.brownian_dim != coeffs.dims.brownian {
        return Err(Error::config("ensemble dimensions differ from the model"));
    }
    if ensemble.n_paths == 0 {
        return Err(Error::config("empty ensemble"));
    }
    let (n, dim, d, m) = (ensemble.n_paths, coeffs.dims.state, coeffs.dims.brownian, coeffs.dims.equations);
    let steps = grid.n_steps;
    let dt = grid.dt();
    let cv = opts.control_variates;
    let need_gamma = coeffs.needs_nonlocal();
    let driver_zero = coeffs.drivers.iter().all(|h| h.is_zero());
    let jumps_on = !coeffs.jump.is_zero();
    let rule = measure.rule(k)?;
    let gather = |j: usize| -> Vec<f64> {
        let mut pts = Vec::with_capacity(n * dim);
        for p in 0..n {
            pts.extend_from_slice(ensemble.state(p, j));
        }
        pts
    };

    // Terminal layer.
    let pts = gather(steps);
    let g_vals: Vec<f64> = pts.chunks(dim).flat_map(|x| (0..m).map(move |i| coeffs.g(i, x))).collect();
    check_finite(&g_vals, m, steps, m)?;
    let features = Features::build(opts.basis, &pts, dim);
    let fit = regress(&features, &pts, dim, &g_vals, m, &opts.regression, steps)?;
    let mut y_next = fitted(&features, &fit, &pts, dim);
    let terminal_fit_residual = (0..m)
        .map(|i| {
            y_next
                .iter()
                .skip(i)
                .step_by(m)
                .zip(g_vals.iter().skip(i).step_by(m))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let mut yhat = g_vals;
    let mut layers = vec![layer_from(grid.node(steps), features, fit, None, &pts, dim)];

    for j in (0..steps).rev() {
        let t = grid.node(j);
        let next = layers.last().expect("terminal layer");
        let pts = gather(j);
        let features = Features::build(opts.basis, &pts, dim);
        let mass_field = (cv && jumps_on).then(|| NonlocalField::new(next, coeffs, &rule, t, false));
        let gamma_field = (need_gamma && jumps_on).then(|| NonlocalField::new(next, coeffs, &rule, t, true));

        // Per path: u_{j+1}(X_j), the jump martingale increment, Γ(X_j).
        let w = 3 * m;
        let mut aux = vec![0.0; n * w];
        aux.par_chunks_mut(w).enumerate().for_each_init(
            || (vec![0.0; next.features.len()], vec![0.0; m]),
            |(phi, tmp), (p, row)| {
                let x = ensemble.state(p, j);
                let (base, rest) = row.split_at_mut(m);
                let (jm, gam) = rest.split_at_mut(m);
                next.u_into(x, phi, base);
                if let Some(f) = &mass_field {
                    jump_sum(next, coeffs, ensemble, p, j, base, jm);
                    f.eval(x, phi, tmp);
                    for i in 0..m {
                        jm[i] -= dt * tmp[i];
                    }
                }
                if let Some(f) = &gamma_field {
                    f.eval(x, phi, gam);
                }
            },
        );

        // z targets.
        let md = m * d;
        let mut zt = vec![0.0; n * md];
        match opts.z_method {
            ZMethod::Regression => {
                zt.par_chunks_mut(md).enumerate().for_each(|(p, row)| {
                    let db = ensemble.increment(p, j);
                    let a = &aux[p * w..(p + 1) * w];
                    for i in 0..m {
                        let mut y = y_next[p * m + i] - a[i];
                        if cv {
                            y -= a[m + i];
                        }
                        for q in 0..d {
                            row[i * d + q] = y * db[q] / dt;
                        }
                    }
                });
            }
            ZMethod::FiniteDifference { step } => {
                if !(step > 0.0) {
                    return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
                }
                zt.par_chunks_mut(md).enumerate().for_each(|(p, row)| {
                    let x = ensemble.state(p, j);
                    let grad = gradient(next, x, step);
                    let mut sig = vec![0.0; dim * d];
                    coeffs.sigma(t, x, &mut sig);
                    for i in 0..m {
                        for q in 0..d {
                            row[i * d + q] = (0..dim).map(|c| sig[c * d + q] * grad[i * dim + c]).sum();
                        }
                    }
                });
            }
        }
        check_finite(&zt, md, j, m)?;
        let z_fit = regress(&features, &pts, dim, &zt, md, &opts.regression, j)?;
        let zhat = fitted(&features, &z_fit, &pts, dim);
        drop(zt);

        // Continuation targets.
        let mut ct = vec![0.0; n * m];
        ct.par_chunks_mut(m).enumerate().for_each(|(p, row)| {
            for i in 0..m {
                row[i] = y_next[p * m + i];
            }
            if cv {
                let db = ensemble.increment(p, j);
                let a = &aux[p * w..(p + 1) * w];
                for i in 0..m {
                    let zdb: f64 = (0..d).map(|q| zhat[p * md + i * d + q] * db[q]).sum();
                    row[i] -= zdb + a[m + i];
                }
            }
        });
        check_finite(&ct, m, j, m)?;
        let c_fit = regress(&features, &pts, dim, &ct, m, &opts.regression, j)?;

        let (u_fit, hvals) = if driver_zero {
            (c_fit, vec![0.0; n * m])
        } else {
            let chat = fitted(&features, &c_fit, &pts, dim);
            let hv: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let x = ensemble.state(p, j);
                    let y = &chat[p * m..(p + 1) * m];
                    (0..m)
                        .map(|i| {
                            let z = &zhat[p * md + i * d..p * md + (i + 1) * d];
                            coeffs.checked_h(i, t, x, y, z, aux[p * w + 2 * m + i])
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?
                .concat();
            let ut: Vec<f64> = chat.iter().zip(&hv).map(|(c, h)| c + dt * h).collect();
            check_finite(&ut, m, j, m)?;
            (regress(&features, &pts, dim, &ut, m, &opts.regression, j)?, hv)
        };

        for p in 0..n {
            let db = ensemble.increment(p, j);
            for i in 0..m {
                let mut v = yhat[p * m + i] + dt * hvals[p * m + i];
                if cv {
                    let zdb: f64 = (0..d).map(|q| zhat[p * md + i * d + q] * db[q]).sum();
                    v -= zdb + aux[p * w + m + i];
                }
                yhat[p * m + i] = v;
            }
        }
        y_next = fitted(&features, &u_fit, &pts, dim);
        let layer = layer_from(t, features, u_fit, Some(z_fit), &pts, dim);
        layers.push(layer);
    }
    layers.reverse();

    let pathwise = (0..m)
        .map(|i| Estimate::from_samples(&yhat.iter().skip(i).step_by(m).copied().collect::<Vec<_>>()))
        .collect();
    let first = &layers[0].features;
    let pathwise_fit = if matches!(first, Features::Constant) {
        None
    } else {
        let pts = gather(0);
        Some(regress(first, &pts, dim, &yhat, m, &opts.regression, 0)?)
    };
    Ok(MeshSolution {
        grid: *grid,
        k,
        state_dim: dim,
        brownian_dim: d,
        equations: m,
        options: *opts,
        n_paths: n,
        seed: ensemble.seed,
        layers,
        terminal_fit_residual,
        pathwise,
        pathwise_fit,
    })
}

/// Central-difference gradient of every equation of `layer`, row-major
/// `m × dim`.
pub(crate) fn gradient(layer: &Layer, x: &[f64], h: f64) -> Vec<f64> {
    let dim = x.len();
    let m = layer.equations();
    let mut out = vec![0.0; m * dim];
    let mut xp = x.to_vec();
    for c in 0..dim {
        xp[c] = x[c] + h;
        let up = layer.u(&xp);
        xp[c] = x[c] - h;
        let um = layer.u(&xp);
        xp[c] = x[c];
        for i in 0..m {
            out[i * dim + c] = (up[i] - um[i]) / (2.0 * h);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Diffusion, Drift, Driver, JumpCoefficient, MarkWeight, Terminal};
    use crate::sde::{simulate_forward, InitialState};

    fn reference() -> LevyMeasure {
        LevyMeasure::reference(0.5).unwrap()
    }

    fn k8() -> TruncationIndex {
        TruncationIndex::new(8).unwrap()
    }

    fn constant_model() -> ModelCoefficients {
        ModelCoefficients::scalar(
            Drift::Zero,
            Diffusion::Zero,
            JumpCoefficient::Zero,
            Terminal::Constant(5.0),
            Driver::Zero,
        )
    }

    fn linear_model(driver: Driver) -> ModelCoefficients {
        ModelCoefficients::scalar(
            Drift::Constant(0.1),
            Diffusion::Constant(0.2),
            JumpCoefficient::Linear { scale: 1.0 },
            Terminal::Linear { slope: 1.0, offset: 0.0 },
            driver,
        )
    }

    fn solve(coeffs: &ModelCoefficients, init: InitialState, n: usize, steps: usize, opts: &SolverOptions) -> MeshSolution {
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let ens = simulate_forward(coeffs, &reference(), k8(), &grid, &init, n, 11).unwrap();
        solve_backward(coeffs, &reference(), k8(), &grid, &ens, opts).unwrap()
    }

    #[test]
    fn constant_scenario_is_five_everywhere() {
        let sol = solve(
            &constant_model(),
            InitialState::Dispersed { lo: vec![-1.0], hi: vec![1.0] },
            500,
            5,
            &SolverOptions::default(),
        );
        for j in 0..=5 {
            for x in [-1.0, 0.0, 0.7] {
                assert!((sol.layer(j).u(&[x])[0] - 5.0).abs() < 1e-9);
            }
        }
        assert!(sol.terminal_fit_residual[0] < 1e-9);
    }

    #[test]
    fn linear_benchmark_small() {
        let sol = solve(&linear_model(Driver::Zero), InitialState::Point(vec![2.0]), 20_000, 10, &SolverOptions::default());
        let est = sol.value_at_start(0, &[2.0]);
        assert!((est.mean - 2.1).abs() < 4.0 * est.std_error, "{est:?}");
        // Near the terminal time the jump field of u(T, x) = x is e.
        let f = jump_increment_field(&sol, &linear_model(Driver::Zero), 0, 1.0, &[2.0], &[0.3]).unwrap();
        assert!((f - 0.3).abs() < 1e-6, "{f}");
    }

    #[test]
    fn control_variates_agree_with_plain() {
        let model = linear_model(Driver::Own { y: 0.5, q: 0.0 });
        let init = InitialState::Dispersed { lo: vec![1.0], hi: vec![3.0] };
        let plain = solve(&model, init.clone(), 20_000, 10, &SolverOptions::default());
        let cv = solve(&model, init, 20_000, 10, &SolverOptions { control_variates: true, ..Default::default() });
        // Explicit scheme on ten steps: the growth factor is (1 + 0.05)^10.
        let exact = |x: f64| 1.05f64.powi(10) * (x + 0.1);
        for x in [1.5, 2.0, 2.5] {
            let a = plain.u(0, 0.0, &[x]).unwrap();
            let b = cv.u(0, 0.0, &[x]).unwrap();
            assert!((a - exact(x)).abs() < 0.05, "plain {a} vs {}", exact(x));
            assert!((b - exact(x)).abs() < 0.02, "cv {b} vs {}", exact(x));
        }
    }

    #[test]
    fn linear_interpolation_is_convex_combination() {
        let mut sol = solve(
            &linear_model(Driver::Own { y: 0.5, q: 0.0 }),
            InitialState::Dispersed { lo: vec![1.0], hi: vec![3.0] },
            2_000,
            4,
            &SolverOptions::default(),
        );
        sol.options.interpolation = Interpolation::Linear;
        let a = sol.layer(1).u(&[2.0])[0];
        let b = sol.layer(2).u(&[2.0])[0];
        let mid = sol.u(0, 0.25 + 0.25 * 0.3, &[2.0]).unwrap();
        assert!((mid - (0.7 * a + 0.3 * b)).abs() < 1e-12);
    }

    #[test]
    fn projected_field_matches_direct_quadrature() {
        let model = linear_model(Driver::Zero).with_mark_weights(vec![MarkWeight::Square { scale: 1.0 }]);
        let sol = solve(
            &ModelCoefficients {
                terminals: vec![Terminal::Quadratic { scale: 1.0, offset: 0.0 }],
                ..model.clone()
            },
            InitialState::Dispersed { lo: vec![-1.0], hi: vec![1.0] },
            2_000,
            4,
            &SolverOptions::default(),
        );
        let rule = reference().rule(k8()).unwrap();
        let layer = sol.layer(2);
        let fast = NonlocalField::new(layer, &model, &rule, 0.5, true);
        assert!(fast.projected.is_some());
        let slow = NonlocalField { projected: None, ..NonlocalField::new(layer, &model, &rule, 0.5, true) };
        let (mut a, mut b, mut phi) = ([0.0], [0.0], vec![0.0; layer.features.len()]);
        for x in [-2.0, 0.3, 4.0] {
            fast.eval(&[x], &mut phi, &mut a);
            slow.eval(&[x], &mut phi, &mut b);
            assert!((a[0] - b[0]).abs() < 1e-8 * (1.0 + b[0].abs()), "{a:?} {b:?}");
        }
    }

    #[test]
    fn json_round_trip_and_shift() {
        let sol = solve(&constant_model(), InitialState::Point(vec![0.0]), 100, 3, &SolverOptions::default());
        let back = MeshSolution::from_json(&sol.to_json().unwrap()).unwrap();
        assert_eq!(back, sol);
        let shifted = sol.with_layer_shift(1, 1.0);
        assert!((shifted.layer(1).u(&[0.0])[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn extrapolation_is_flagged() {
        let sol = solve(
            &constant_model(),
            InitialState::Dispersed { lo: vec![-1.0], hi: vec![1.0] },
            200,
            2,
            &SolverOptions::default(),
        );
        assert!(!sol.evaluate_u(0.0, &[0.5]).unwrap().extrapolated);
        assert!(sol.evaluate_u(0.0, &[5.0]).unwrap().extrapolated);
        assert!(sol.evaluate_u(2.0, &[0.0]).is_err());
    }

    #[test]
    fn mismatched_k_is_rejected() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let m = constant_model();
        let ens = simulate_forward(&m, &reference(), k8(), &grid, &InitialState::Point(vec![0.0]), 10, 1).unwrap();
        let k4 = TruncationIndex::new(4).unwrap();
        assert!(solve_backward(&m, &reference(), k4, &grid, &ens, &SolverOptions::default()).is_err());
    }

    #[test]
    fn growth_envelope_of_quadratic() {
        let model = ModelCoefficients {
            terminals: vec![Terminal::Quadratic { scale: 1.0, offset: 0.0 }],
            ..linear_model(Driver::Zero)
        };
        let sol = solve(&model, InitialState::Dispersed { lo: vec![-2.0], hi: vec![2.0] }, 2_000, 2, &SolverOptions::default());
        let env = growth_envelope(&sol, 1.0, &[-2.0], &[2.0], 41).unwrap();
        assert!(env.p >= 1.5 && env.c.is_finite(), "{env:?}");
    }
}
