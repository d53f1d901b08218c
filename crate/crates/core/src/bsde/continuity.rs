//! Empirical continuity modulus of `u(t0, ·)`.

use super::solver::{box_grid, MeshSolution};
use crate::coefficients::ConcaveModulus;
use crate::report::{DiagnosticEntry, DiagnosticsReport};
use crate::stats::median;

/// Envelope `|u(t0,x) - u(t0,x')|² <= ρ(M₂|x-x'|²(1+|x-x'|²)) C (1+|x|^κ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityFit {
    pub c: f64,
    pub kappa: f64,
}

impl ContinuityFit {
    pub fn bound(&self, rho: &ConcaveModulus, m2: f64, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        rho.eval(m2 * d2 * (1.0 + d2)) * self.c * (1.0 + norm(x).powf(self.kappa))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityProbe {
    pub fit: ContinuityFit,
    pub report: DiagnosticsReport,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const KAPPAS: usize = 16;

/// Fits the smallest `C` for each `κ` in `0.25, 0.5, ..., 4` over `pairs`
/// at the first layer, keeping the `κ` whose envelope has the lowest mean
/// over `fit_box`. A pair violates the envelope (the fitted one, or
/// `reference` when given) when its left side exceeds the bound by more
/// than three regression standard errors.
pub fn continuity_modulus_probe(
    solution: &MeshSolution,
    rho: &ConcaveModulus,
    m2: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
    fit_box: (&[f64], &[f64]),
    reference: Option<ContinuityFit>,
) -> ContinuityProbe {
    let layer = solution.layer(0);
    let p = layer.features.len();
    let mut report = DiagnosticsReport::new("continuity modulus probe");

    struct Sample {
        lhs: f64,
        se: f64,
        base: f64,
        xnorm: f64,
    }
    let mut samples = Vec::new();
    let mut outside = 0usize;
    let (lo, hi) = fit_box;
    let inside = |x: &[f64]| x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| v >= a && v <= b);
    let (mut phi_a, mut phi_b) = (vec![0.0; p], vec![0.0; p]);
    for (x, y) in pairs {
        if !inside(x) || !inside(y) {
            outside += 1;
        }
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
        let base = rho.eval(m2 * d2 * (1.0 + d2));
        if !(base > 0.0) {
            continue;
        }
        let (ua, ub) = (layer.u(x), layer.u(y));
        layer.features.eval(x, &mut phi_a);
        layer.features.eval(y, &mut phi_b);
        let diff: Vec<f64> = phi_a.iter().zip(&phi_b).map(|(a, b)| a - b).collect();
        let (mut lhs, mut se) = (0.0f64, 0.0);
        for i in 0..solution.equations {
            let du = ua[i] - ub[i];
            if du * du >= lhs {
                lhs = du * du;
                se = 2.0 * du.abs() * layer.u.std_error(i, &diff);
            }
        }
        samples.push(Sample {
            lhs,
            se,
            base,
            xnorm: norm(x),
        });
    }

    let grid = box_grid(lo, hi, 21);
    let mut best: Option<(f64, ContinuityFit)> = None;
    for s in 1..=KAPPAS {
        let kappa = 0.25 * s as f64;
        let c = samples
            .iter()
            .map(|q| q.lhs / (q.base * (1.0 + q.xnorm.powf(kappa))))
            .fold(0.0, f64::max);
        let height = c * grid.iter().map(|x| 1.0 + norm(x).powf(kappa)).sum::<f64>() / grid.len() as f64;
        if best.as_ref().is_none_or(|(h, _)| height < *h) {
            best = Some((height, ContinuityFit { c, kappa }));
        }
    }
    let fit = best.expect("kappa grid").1;
    let check = reference.unwrap_or(fit);
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    let mut ratios = Vec::with_capacity(samples.len());
    for q in &samples {
        let bound = q.base * check.c * (1.0 + q.xnorm.powf(check.kappa));
        if q.lhs - 3.0 * q.se > bound * (1.0 + 1e-12) {
            violations += 1;
        }
        if q.se > 0.0 {
            worst = worst.max((q.lhs - bound) / q.se);
        }
        if bound > 0.0 {
            ratios.push(q.lhs / bound);
        }
    }

    report.push(DiagnosticEntry::check("envelope C", fit.c.is_finite(), fit.c));
    report.push(DiagnosticEntry::info("envelope kappa", fit.kappa));
    report.push(
        DiagnosticEntry::info("fit quality", if ratios.is_empty() { 0.0 } else { median(&ratios) })
            .with_detail("median of left side over envelope"),
    );
    report.push(
        DiagnosticEntry::check("violations beyond 3 sigma", violations == 0, violations as f64)
            .with_detail(format!("largest excess {worst:.2} sigma over {} pairs", samples.len())),
    );
    report.push(DiagnosticEntry::check("pairs inside fit box", outside == 0, (pairs.len() - outside) as f64));
    ContinuityProbe { fit, report }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_backward, SolverOptions};
    use crate::coefficients::{Diffusion, Drift, Driver, JumpCoefficient, ModelCoefficients, Terminal};
    use crate::levy::{LevyMeasure, TruncationIndex};
    use crate::sde::{simulate_forward, InitialState, TimeGrid};

    fn solve(terminal: Terminal) -> MeshSolution {
        let model = ModelCoefficients::scalar(Drift::Zero, Diffusion::Zero, JumpCoefficient::Zero, terminal, Driver::Zero);
        let measure = LevyMeasure::reference(0.5).unwrap();
        let k = TruncationIndex::new(4).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let init = InitialState::Dispersed { lo: vec![-2.0], hi: vec![2.0] };
        let ens = simulate_forward(&model, &measure, k, &grid, &init, 500, 2).unwrap();
        solve_backward(&model, &measure, k, &grid, &ens, &SolverOptions::default()).unwrap()
    }

    fn pairs(sep: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..21).map(|i| {
            let x = -1.5 + 0.15 * i as f64;
            (vec![x], vec![x + sep])
        }).collect()
    }

    #[test]
    fn constant_solution_fits_zero() {
        let sol = solve(Terminal::Constant(5.0));
        let probe = continuity_modulus_probe(&sol, &ConcaveModulus::linear(1.0), 1.0, &pairs(0.1), (&[-2.0], &[2.0]), None);
        assert!(probe.fit.c.abs() < 1e-20, "{:?}", probe.fit);
        assert!(probe.report.all_passed(), "{}", probe.report);
    }

    #[test]
    fn affine_solution_gives_slope_over_m2() {
        let sol = solve(Terminal::Linear { slope: 3.0, offset: 1.0 });
        let m2 = 2.0;
        let probe = continuity_modulus_probe(&sol, &ConcaveModulus::linear(1.0), m2, &pairs(1e-3), (&[-2.0], &[2.0]), None);
        assert!((probe.fit.c - 9.0 / m2).abs() < 1e-3, "{:?}", probe.fit);
        assert!(probe.report.all_passed(), "{}", probe.report);
    }
}
