//! Out-of-sample checks of a mesh solution: the pathwise BSDE residual and
//! an independent regression estimate of the jump field.

use rayon::prelude::*;

use super::basis::{regress, BasisSpec, Features, RegressionOptions};
use super::solver::{jump_sum, MeshSolution, NonlocalField};
use crate::coefficients::ModelCoefficients;
use crate::levy::LevyMeasure;
use crate::report::{fmt_f64, Csv};
use crate::rng::Substream;
use crate::sde::PathEnsemble;
use crate::{Error, Result};

/// Root-mean-square BSDE residual per equation, overall and per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStat {
    pub rms: Vec<f64>,
    /// `per_step[j][i]`: RMS over paths at step `j`.
    pub per_step: Vec<Vec<f64>>,
    pub n_paths: usize,
}

impl ResidualStat {
    /// Largest overall RMS across equations.
    pub fn max_rms(&self) -> f64 {
        self.rms.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> Csv {
        let m = self.rms.len();
        let mut csv = Csv::new(&["step", "equation", "rms"]);
        for (j, row) in self.per_step.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                csv.row(&[j.to_string(), i.to_string(), fmt_f64(*v)]);
            }
        }
        for i in 0..m {
            csv.row(&["all".into(), i.to_string(), fmt_f64(self.rms[i])]);
        }
        csv
    }
}

fn check_fresh(solution: &MeshSolution, fresh: &PathEnsemble) -> Result<()> {
    if fresh.k != solution.k {
        return Err(Error::config(format!(
            "fresh ensemble at k={}, solution at k={}",
            fresh.k, solution.k
        )));
    }
    if fresh.grid != solution.grid {
        return Err(Error::config("fresh ensemble grid differs from the solution grid"));
    }
    if fresh.dim != solution.state_dim || fresh.brownian_dim != solution.brownian_dim {
        return Err(Error::config("fresh ensemble dimensions differ from the solution"));
    }
    if fresh.seed == solution.seed && fresh.streams.brownian == Substream::Brownian {
        return Err(Error::config(
            "fresh ensemble reuses the training seed and streams; use another seed or the fresh streams",
        ));
    }
    Ok(())
}

/// Per path and step, the one-step residual
/// `u_{j+1}(X_{j+1}) - u_j(X_j) + Δt f - z_j ΔB_j - (Σ U - Δt ∫ U dλ_k)`
/// with `U = u_{j+1}(X_j + β) - u_{j+1}(X_j)` and
/// `f = h(τ_j, X_j, u_j, z_j, ∫ γ U dλ_k)`, reduced to its RMS.
pub fn bsde_residual(
    solution: &MeshSolution,
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    fresh: &PathEnsemble,
) -> Result<ResidualStat> {
    check_fresh(solution, fresh)?;
    let (n, m, d) = (fresh.n_paths, solution.equations, solution.brownian_dim);
    let steps = solution.grid.n_steps;
    let dt = solution.grid.dt();
    let rule = measure.rule(solution.k)?;
    let jumps_on = !coeffs.jump.is_zero();
    let need_gamma = coeffs.needs_nonlocal();
    let mut per_step = Vec::with_capacity(steps);
    let mut total = vec![0.0; m];
    for j in 0..steps {
        let t = solution.grid.node(j);
        let here = solution.layer(j);
        let next = solution.layer(j + 1);
        let mass = jumps_on.then(|| NonlocalField::new(next, coeffs, &rule, t, false));
        let gamma = (jumps_on && need_gamma).then(|| NonlocalField::new(next, coeffs, &rule, t, true));
        let sq: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|p| {
                let x = fresh.state(p, j);
                let x1 = fresh.state(p, j + 1);
                let u1 = next.u(x1);
                let u0 = here.u(x);
                let z = here.z(x, d);
                let base = next.u(x);
                let mut phi = vec![0.0; next.features.len()];
                let mut jm = vec![0.0; m];
                let mut integral = vec![0.0; m];
                let mut q = vec![0.0; m];
                if let Some(f) = &mass {
                    jump_sum(next, coeffs, fresh, p, j, &base, &mut jm);
                    f.eval(x, &mut phi, &mut integral);
                }
                if let Some(f) = &gamma {
                    f.eval(x, &mut phi, &mut q);
                }
                let db = fresh.increment(p, j);
                (0..m)
                    .map(|i| {
                        let zi = &z[i * d..(i + 1) * d];
                        let f = coeffs.checked_h(i, t, x, &u0, zi, q[i])?;
                        let zdb: f64 = zi.iter().zip(db).map(|(a, b)| a * b).sum();
                        let r = u1[i] - u0[i] + dt * f - zdb - (jm[i] - dt * integral[i]);
                        Ok(r * r)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let row: Vec<f64> = (0..m)
            .map(|i| {
                let s: f64 = sq.iter().map(|v| v[i]).sum();
                total[i] += s;
                (s / n as f64).sqrt()
            })
            .collect();
        per_step.push(row);
    }
    Ok(ResidualStat {
        rms: total.iter().map(|s| (s / (n * steps) as f64).sqrt()).collect(),
        per_step,
        n_paths: n,
    })
}

/// Agreement between the jump field of a solution and a direct regression
/// estimate of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepresentationCheck {
    pub rms_discrepancy: f64,
    pub rms_field: f64,
    pub samples: usize,
}

impl RepresentationCheck {
    pub fn relative(&self) -> f64 {
        self.rms_discrepancy / self.rms_field
    }
}

/// Re-estimates `U^i(x, e)` without the representation identity: on each
/// step, paths of `fresh` without jumps give the continuation
/// `c(x) ≈ E[u_{j+1}(X_{j+1}) | X_j = x, no jump]`; paths with exactly one
/// jump of mark `e` give samples `u_{j+1}(X_{j+1}) - c(X_j)`, which are
/// regressed on polynomials of total degree `degree` in `(t, x, e)`. The
/// fit is compared with `u_{j+1}(x + β) - u_{j+1}(x)` on the single-jump
/// samples.
pub fn reestimate_jump_field(
    solution: &MeshSolution,
    coeffs: &ModelCoefficients,
    fresh: &PathEnsemble,
    i: usize,
    degree: usize,
) -> Result<RepresentationCheck> {
    check_fresh(solution, fresh)?;
    let n = fresh.n_paths;
    let dim = solution.state_dim;
    let ell = coeffs.dims.marks;
    let opts = RegressionOptions::default();
    let width = 1 + dim + ell;
    let mut design = Vec::new();
    let mut samples = Vec::new();
    let mut field = Vec::new();
    for j in 0..solution.grid.n_steps {
        let t = solution.grid.node(j);
        let next = solution.layer(j + 1);
        let counts: Vec<usize> = (0..n).map(|p| fresh.jumps_in_step(p, j).len()).collect();
        let mut quiet_x = Vec::new();
        let mut quiet_y = Vec::new();
        for p in (0..n).filter(|&p| counts[p] == 0) {
            quiet_x.extend_from_slice(fresh.state(p, j));
            quiet_y.push(next.u(fresh.state(p, j + 1))[i]);
        }
        if quiet_y.len() < 10 * solution.layer(j).features.len() {
            continue;
        }
        let feats = Features::build(solution.options.basis, &quiet_x, dim);
        let cont = regress(&feats, &quiet_x, dim, &quiet_y, 1, &opts, j)?;
        let mut b = vec![0.0; dim];
        for p in (0..n).filter(|&p| counts[p] == 1) {
            let x = fresh.state(p, j);
            let idx = fresh.jumps_in_step(p, j).start;
            let e = fresh.jump_trains[p].mark(idx);
            design.push(t);
            design.extend_from_slice(x);
            design.extend_from_slice(e);
            samples.push(next.u(fresh.state(p, j + 1))[i] - feats.value(&cont.coefs[0], x));
            coeffs.beta(t, x, e, &mut b);
            let xb: Vec<f64> = x.iter().zip(&b).map(|(a, c)| a + c).collect();
            field.push(next.u(&xb)[i] - next.u(x)[i]);
        }
    }
    if samples.is_empty() {
        return Err(Error::config("no single-jump steps in the fresh ensemble"));
    }
    let feats = Features::build(BasisSpec::Polynomial { degree }, &design, width);
    let fit = regress(&feats, &design, width, &samples, 1, &opts, 0)?;
    let est: Vec<f64> = design.par_chunks(width).map(|row| feats.value(&fit.coefs[0], row)).collect();
    let count = field.len() as f64;
    let rms_discrepancy = (est.iter().zip(&field).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / count).sqrt();
    let rms_field = (field.iter().map(|v| v * v).sum::<f64>() / count).sqrt();
    Ok(RepresentationCheck {
        rms_discrepancy,
        rms_field,
        samples: field.len(),
    })
}
