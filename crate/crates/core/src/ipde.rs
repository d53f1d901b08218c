//! Nonlocal operators `B_i`, `K_i`, the generator of `X` and the viscosity
//! residual of a solved mesh.

use rayon::prelude::*;

use crate::bsde::{Interpolation, MeshSolution};
use crate::coefficients::ModelCoefficients;
use crate::levy::{LevyMeasure, QuadSettings, TruncationIndex};
use crate::report::{fmt_f64, Csv, DiagnosticEntry, DiagnosticsReport};
use crate::stats::median;
use crate::{Error, Result};

/// A candidate solution `u: [t0, T] × R^{k_x} -> R^m`.
pub trait SolutionField: Sync {
    fn equations(&self) -> usize;
    /// Time span `(t0, T)` on which the field is defined.
    fn span(&self) -> (f64, f64);
    fn value(&self, t: f64, x: &[f64]) -> Result<Vec<f64>>;
    /// Whether `x` lies outside the region the field was fitted on.
    fn extrapolated(&self, _t: f64, _x: &[f64]) -> bool {
        false
    }
    /// The time whose values `value(t, ·)` returns; a mesh without time
    /// interpolation answers with the nearest node.
    fn represented_time(&self, t: f64) -> f64 {
        t
    }
}

impl SolutionField for MeshSolution {
    fn equations(&self) -> usize {
        self.equations
    }

    fn span(&self) -> (f64, f64) {
        (self.grid.t0, self.grid.t_end)
    }

    fn value(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate_u(t, x)?.values)
    }

    fn extrapolated(&self, t: f64, x: &[f64]) -> bool {
        self.evaluate_u(t, x).map(|e| e.extrapolated).unwrap_or(true)
    }

    fn represented_time(&self, t: f64) -> f64 {
        match (self.options.interpolation, self.layer_index(t)) {
            (Interpolation::Nearest, Ok(j)) => self.grid.node(j),
            _ => t,
        }
    }
}

/// A closed-form field, for tests and exact comparisons.
pub struct FnField<F> {
    equations: usize,
    span: (f64, f64),
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    pub fn new(equations: usize, span: (f64, f64), f: F) -> Self {
        Self { equations, span, f }
    }
}

impl<F> SolutionField for FnField<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    fn equations(&self) -> usize {
        self.equations
    }

    fn span(&self) -> (f64, f64) {
        self.span
    }

    fn value(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(t, x))
    }
}

/// Integrates `e ↦ w(e) · inc(x + β(t,x,e))` against `λ_k`, holding on to
/// the first evaluation error.
fn integrate_increment<W, G>(
    field: &dyn SolutionField,
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    i: usize,
    t: f64,
    x: &[f64],
    k: TruncationIndex,
    mut weight: W,
    mut correction: G,
) -> Result<f64>
where
    W: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> f64,
{
    if coeffs.jump.is_zero() {
        return Ok(0.0);
    }
    let base = field.value(t, x)?[i];
    let mut failure = None;
    let mut shift = vec![0.0; x.len()];
    let mut xb = vec![0.0; x.len()];
    let v = measure.quad_integrate(k, 1, |e, out| {
        coeffs.beta(t, x, e, &mut shift);
        for c in 0..x.len() {
            xb[c] = x[c] + shift[c];
        }
        out[0] = match field.value(t, &xb) {
            Ok(u) => weight(e) * (u[i] - base - correction(&shift)),
            Err(err) => {
                failure.get_or_insert(err);
                0.0
            }
        };
    });
    match failure {
        Some(err) => Err(err),
        None => Ok(v?[0]),
    }
}

/// `B_i u(t,x) = ∫ γ^i(t,x,e) [u^i(t, x+β(t,x,e)) - u^i(t,x)] λ_k(de)`.
#[allow(clippy::too_many_arguments)]
pub fn operator_b(
    field: &dyn SolutionField,
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    i: usize,
    t: f64,
    x: &[f64],
    k: TruncationIndex,
) -> Result<f64> {
    if coeffs.mark_weights[i].is_zero() {
        return Ok(0.0);
    }
    integrate_increment(field, coeffs, measure, i, t, x, k, |e| coeffs.gamma(i, t, x, e), |_| 0.0)
}

/// `K_i u(t,x) = ∫ [u^i(t, x+β) - u^i(t,x) - βᵀ D_x u^i(t,x)] λ_k(de)`, the
/// gradient by central differences of step `fd_step`.
#[allow(clippy::too_many_arguments)]
pub fn operator_k(
    field: &dyn SolutionField,
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    i: usize,
    t: f64,
    x: &[f64],
    k: TruncationIndex,
    fd_step: f64,
) -> Result<f64> {
    if !(fd_step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {fd_step}")));
    }
    let grad = gradient(field, i, t, x, fd_step)?;
    integrate_increment(
        field,
        coeffs,
        measure,
        i,
        t,
        x,
        k,
        |_| 1.0,
        |shift| shift.iter().zip(&grad).map(|(a, b)| a * b).sum(),
    )
}

fn gradient(field: &dyn SolutionField, i: usize, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|c| {
            xp[c] = x[c] + h;
            let up = field.value(t, &xp)?[i];
            xp[c] = x[c] - h;
            let um = field.value(t, &xp)?[i];
            xp[c] = x[c];
            Ok((up - um) / (2.0 * h))
        })
        .collect()
}

/// Row-major Hessian of `u^i(t, ·)` by central differences.
fn hessian(field: &dyn SolutionField, i: usize, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let at = |dx: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(c, s) in dx {
            y[c] += s;
        }
        Ok(field.value(t, &y)?[i])
    };
    let u0 = at(&[])?;
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        out[a * n + a] = (at(&[(a, h)])? - 2.0 * u0 + at(&[(a, -h)])?) / (h * h);
        for b in a + 1..n {
            let v = (at(&[(a, h), (b, h)])? - at(&[(a, h), (b, -h)])? - at(&[(a, -h), (b, h)])?
                + at(&[(a, -h), (b, -h)])?)
                / (4.0 * h * h);
            out[a * n + b] = v;
            out[b * n + a] = v;
        }
    }
    Ok(out)
}

/// Finite-difference steps in time and space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps {
    pub t: f64,
    pub x: f64,
}

impl FdSteps {
    /// `fd_t = Δt` of the mesh and `fd_x` a two-hundredth of the widest
    /// side of the first layer's design box.
    pub fn for_solution(solution: &MeshSolution) -> Self {
        let layer = solution.layer(0);
        let width = layer
            .lo
            .iter()
            .zip(&layer.hi)
            .map(|(a, b)| b - a)
            .fold(0.0, f64::max);
        Self {
            t: solution.grid.dt(),
            x: if width > 0.0 { width / 200.0 } else { 1e-2 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeClass {
    Interior,
    /// Too close to the terminal time for a central difference in `t`.
    NearTerminal,
    /// Outside the region the field was fitted on.
    Extrapolated,
}

impl ProbeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeClass::Interior => "interior",
            ProbeClass::NearTerminal => "near-terminal",
            ProbeClass::Extrapolated => "extrapolated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResidual {
    pub t: f64,
    pub x: Vec<f64>,
    /// One residual per equation.
    pub values: Vec<f64>,
    pub class: ProbeClass,
}

/// `R_i(t,x) = -∂_t u^i - bᵀD_x u^i - ½Tr(σσᵀD²u^i) - K_i u^i
///             - h^(i)(t, x, u, σᵀD_x u^i, B_i u^i)`
/// by finite differences in `t`, `x` and `λ_k` quadrature.
#[allow(clippy::too_many_arguments)]
pub fn viscosity_residual(
    field: &dyn SolutionField,
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    k: TruncationIndex,
    t: f64,
    x: &[f64],
    fd: FdSteps,
) -> Result<ProbeResidual> {
    let (t0, t_end) = field.span();
    let (dim, d, m) = (coeffs.dims.state, coeffs.dims.brownian, field.equations());
    let near_terminal = t + fd.t > t_end + 1e-12;
    let class = if field.extrapolated(t, x) {
        ProbeClass::Extrapolated
    } else if near_terminal {
        ProbeClass::NearTerminal
    } else {
        ProbeClass::Interior
    };
    let u = field.value(t, x)?;
    let (ta, tb) = if near_terminal {
        ((t - fd.t).max(t0), t)
    } else if t - fd.t < t0 - 1e-12 {
        (t, t + fd.t)
    } else {
        (t - fd.t, t + fd.t)
    };
    let (ua, ub) = (field.value(ta, x)?, field.value(tb, x)?);
    let (sa, sb) = (field.represented_time(ta), field.represented_time(tb));
    let span = if sb > sa { sb - sa } else { tb - ta };
    let mut b = vec![0.0; dim];
    coeffs.b(t, x, &mut b);
    let mut sig = vec![0.0; dim * d];
    coeffs.sigma(t, x, &mut sig);
    let values = (0..m)
        .map(|i| {
            let ut = (ub[i] - ua[i]) / span;
            let grad = gradient(field, i, t, x, fd.x)?;
            let hess = hessian(field, i, t, x, fd.x)?;
            let mut trace = 0.0;
            for a in 0..dim {
                for c in 0..dim {
                    let ss: f64 = (0..d).map(|q| sig[a * d + q] * sig[c * d + q]).sum();
                    trace += ss * hess[a * dim + c];
                }
            }
            let z: Vec<f64> = (0..d).map(|q| (0..dim).map(|a| sig[a * d + q] * grad[a]).sum()).collect();
            let kk = operator_k(field, coeffs, measure, i, t, x, k, fd.x)?;
            let bb = if coeffs.drivers[i].depends_on_q() {
                operator_b(field, coeffs, measure, i, t, x, k)?
            } else {
                0.0
            };
            let h = coeffs.checked_h(i, t, x, &u, &z, bb)?;
            let drift: f64 = b.iter().zip(&grad).map(|(p, q)| p * q).sum();
            Ok(-ut - drift - 0.5 * trace - kk - h)
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::model(format!("viscosity residual at t={t}, x={x:?}"), "non-finite value"));
    }
    Ok(ProbeResidual {
        t,
        x: x.to_vec(),
        values,
        class,
    })
}

/// Residuals at a batch of probes with the numerical parameters they used.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub probes: Vec<ProbeResidual>,
    pub fd: FdSteps,
    pub quad: QuadSettings,
    pub k: TruncationIndex,
    /// `∫_{|e|<1/k} |e|² λ(de)`, the part of the measure the truncated
    /// operators leave out.
    pub omitted_second_moment: f64,
}

impl ResidualReport {
    /// Largest `|R_i|` over interior probes and all equations.
    pub fn max_interior(&self) -> f64 {
        self.probes
            .iter()
            .filter(|p| p.class == ProbeClass::Interior)
            .flat_map(|p| p.values.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }

    /// Per equation, `(max, median)` of `|R_i|` over interior probes.
    pub fn summary(&self) -> Vec<(f64, f64)> {
        let m = self.probes.first().map_or(0, |p| p.values.len());
        (0..m)
            .map(|i| {
                let v: Vec<f64> = self
                    .probes
                    .iter()
                    .filter(|p| p.class == ProbeClass::Interior)
                    .map(|p| p.values[i].abs())
                    .collect();
                (v.iter().copied().fold(0.0, f64::max), median(&v))
            })
            .collect()
    }

    pub fn summary_line(&self) -> String {
        self.summary()
            .iter()
            .enumerate()
            .map(|(i, (mx, md))| format!("equation {i}: max |R| {mx:.3e}, median |R| {md:.3e}"))
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&[
            "t",
            "x",
            "equation",
            "residual",
            "classification",
            "fd_t",
            "fd_x",
            "quad_rel_tol",
            "k",
        ]);
        for p in &self.probes {
            let x = p.x.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";");
            for (i, v) in p.values.iter().enumerate() {
                csv.row(&[
                    fmt_f64(p.t),
                    x.clone(),
                    i.to_string(),
                    fmt_f64(*v),
                    p.class.as_str().into(),
                    fmt_f64(self.fd.t),
                    fmt_f64(self.fd.x),
                    fmt_f64(self.quad.rel_tol),
                    self.k.to_string(),
                ]);
            }
        }
        csv
    }
}

/// Evaluates [`viscosity_residual`] at every probe concurrently, keeping
/// probe order.
pub fn viscosity_report(
    field: &dyn SolutionField,
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    k: TruncationIndex,
    probes: &[(f64, Vec<f64>)],
    fd: FdSteps,
) -> Result<ResidualReport> {
    let results = probes
        .par_iter()
        .map(|(t, x)| viscosity_residual(field, coeffs, measure, k, *t, x, fd))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualReport {
        probes: results,
        fd,
        quad: measure.quad_settings(),
        k,
        omitted_second_moment: measure.small_jump_second_moment(k)?,
    })
}

/// Per equation, `max_x |u^i(T, x) - g^i(x)|` over `probes`; passes when
/// within `tol`.
pub fn terminal_consistency(
    field: &dyn SolutionField,
    coeffs: &ModelCoefficients,
    probes: &[Vec<f64>],
    tol: f64,
) -> Result<DiagnosticsReport> {
    let t_end = field.span().1;
    let mut report = DiagnosticsReport::new("terminal consistency");
    for i in 0..field.equations() {
        let mut worst = 0.0f64;
        let mut at = None;
        for x in probes {
            let gap = (field.value(t_end, x)?[i] - coeffs.g(i, x)).abs();
            if gap >= worst {
                worst = gap;
                at = Some(x.clone());
            }
        }
        report.push(
            DiagnosticEntry::check(format!("terminal gap, equation {i}"), worst <= tol, worst).with_witness(at),
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Diffusion, Drift, Driver, JumpCoefficient, MarkWeight, Terminal};

    fn reference() -> LevyMeasure {
        LevyMeasure::reference(0.5).unwrap()
    }

    fn k4() -> TruncationIndex {
        TruncationIndex::new(4).unwrap()
    }

    fn model(jump: JumpCoefficient) -> ModelCoefficients {
        ModelCoefficients::scalar(
            Drift::Constant(0.1),
            Diffusion::Constant(0.2),
            jump,
            Terminal::Linear { slope: 1.0, offset: 0.0 },
            Driver::Zero,
        )
        .with_mark_weights(vec![MarkWeight::Constant(1.0)])
    }

    #[test]
    fn operators_on_simple_fields() {
        let m = model(JumpCoefficient::Linear { scale: 1.0 });
        let constant = FnField::new(1, (0.0, 1.0), |_, _| vec![5.0]);
        let linear = FnField::new(1, (0.0, 1.0), |_, x: &[f64]| vec![x[0]]);
        let square = FnField::new(1, (0.0, 1.0), |_, x: &[f64]| vec![x[0] * x[0]]);
        let b = |f: &dyn SolutionField, x: f64| operator_b(f, &m, &reference(), 0, 0.5, &[x], k4()).unwrap();
        let k = |f: &dyn SolutionField, x: f64| operator_k(f, &m, &reference(), 0, 0.5, &[x], k4(), 1e-3).unwrap();
        assert_eq!(b(&constant, 1.0), 0.0);
        assert!(b(&linear, 1.0).abs() < 1e-10);
        assert!((b(&square, 0.7) - 7.0 / 6.0).abs() < 1e-8);
        assert!(k(&linear, 0.3).abs() < 1e-8);
        assert!((k(&square, -1.2) - 7.0 / 6.0).abs() < 1e-8);
        let flat = model(JumpCoefficient::Zero);
        assert_eq!(operator_k(&square, &flat, &reference(), 0, 0.5, &[1.0], k4(), 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn operator_b_is_linear() {
        let m = model(JumpCoefficient::Linear { scale: 1.0 });
        let f = FnField::new(1, (0.0, 1.0), |_, x: &[f64]| vec![x[0].sin()]);
        let g = FnField::new(1, (0.0, 1.0), |_, x: &[f64]| vec![x[0].powi(3)]);
        let h = FnField::new(1, (0.0, 1.0), |_, x: &[f64]| vec![2.5 * x[0].sin() + x[0].powi(3)]);
        let b = |f: &dyn SolutionField| operator_b(f, &m, &reference(), 0, 0.5, &[0.4], k4()).unwrap();
        assert!((b(&h) - (2.5 * b(&f) + b(&g))).abs() < 1e-8);
    }

    #[test]
    fn exact_linear_solution_has_zero_residual() {
        let m = model(JumpCoefficient::Linear { scale: 1.0 });
        let u = FnField::new(1, (0.0, 1.0), |t, x: &[f64]| vec![x[0] + 0.1 * (1.0 - t)]);
        let fd = FdSteps { t: 0.01, x: 0.01 };
        let r = viscosity_residual(&u, &m, &reference(), k4(), 0.5, &[2.0], fd).unwrap();
        assert!(r.values[0].abs() < 1e-8, "{r:?}");
        assert_eq!(r.class, ProbeClass::Interior);
        let near = viscosity_residual(&u, &m, &reference(), k4(), 0.995, &[2.0], fd).unwrap();
        assert_eq!(near.class, ProbeClass::NearTerminal);
        assert!(near.values[0].abs() < 1e-8);
    }

    #[test]
    fn exact_linear_driver_solution_has_small_residual() {
        let mut m = model(JumpCoefficient::Linear { scale: 1.0 });
        m.drivers = vec![Driver::Own { y: 0.5, q: 0.0 }];
        let u = FnField::new(1, (0.0, 1.0), |t, x: &[f64]| vec![(0.5 * (1.0 - t)).exp() * (x[0] + 0.1 * (1.0 - t))]);
        let fd = FdSteps { t: 1e-3, x: 1e-3 };
        let r = viscosity_residual(&u, &m, &reference(), k4(), 0.3, &[1.0], fd).unwrap();
        assert!(r.values[0].abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn terminal_gap_of_abs_matches_projection() {
        let m = ModelCoefficients::scalar(
            Drift::Zero,
            Diffusion::Zero,
            JumpCoefficient::Zero,
            Terminal::Abs { scale: 1.0 },
            Driver::Zero,
        );
        let exact = FnField::new(1, (0.0, 1.0), |_, x: &[f64]| vec![x[0].abs()]);
        let probes: Vec<Vec<f64>> = (0..41).map(|i| vec![-2.0 + 0.1 * i as f64]).collect();
        let rep = terminal_consistency(&exact, &m, &probes, 1e-12).unwrap();
        assert!(rep.all_passed());
    }

    #[test]
    fn solver_nonlocal_term_matches_operator_b() {
        use crate::bsde::{solve_backward, SolverOptions};
        use crate::bsde::NonlocalField;
        use crate::sde::{simulate_forward, InitialState, TimeGrid};
        let mut m = model(JumpCoefficient::Linear { scale: 1.0 });
        m.terminals = vec![Terminal::Quadratic { scale: 1.0, offset: 0.0 }];
        m.drivers = vec![Driver::Own { y: 0.0, q: 1.0 }];
        m.mark_weights = vec![MarkWeight::Square { scale: 1.0 }];
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let init = InitialState::Dispersed { lo: vec![-1.0], hi: vec![1.0] };
        let ens = simulate_forward(&m, &reference(), k4(), &grid, &init, 1_000, 3).unwrap();
        let sol = solve_backward(&m, &reference(), k4(), &grid, &ens, &SolverOptions::default()).unwrap();
        let rule = reference().rule(k4()).unwrap();
        let t = grid.node(2);
        let field = NonlocalField::new(sol.layer(2), &m, &rule, grid.node(1), true);
        let (mut phi, mut out) = (vec![0.0; sol.layer(2).features.len()], [0.0]);
        for x in [-0.8, 0.1, 0.9] {
            field.eval(&[x], &mut phi, &mut out);
            let b = operator_b(&sol, &m, &reference(), 0, t, &[x], k4()).unwrap();
            assert!((out[0] - b).abs() < 1e-7 * (1.0 + b.abs()), "{} vs {b}", out[0]);
        }
    }
}
