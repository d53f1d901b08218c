//! Convergence of the truncated problems along a ladder of levels `k`.

use super::solver::{solve_backward, MeshSolution, SolverOptions};
use crate::coefficients::ModelCoefficients;
use crate::levy::{LevyMeasure, TruncationIndex};
use crate::report::{fmt_f64, Csv};
use crate::rng::{derive_seed, Substream};
use crate::sde::{simulate_coupled_with_streams, sup_gap, InitialState, PathEnsemble, Streams, TimeGrid};
use crate::stats::Estimate;
use crate::{Error, Result};

/// Shared numerics of every rung.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderConfig {
    pub grid: TimeGrid,
    pub init: InitialState,
    pub n_paths: usize,
    pub seed: u64,
    pub solver: SolverOptions,
    /// Points at which `u(t0, ·)` and the jump fields are compared.
    pub probes: Vec<Vec<f64>>,
    /// Independent coupled replicates; gap standard errors come from their
    /// spread.
    pub replicates: usize,
}

/// One rung of the ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub k: TruncationIndex,
    pub small_jump_second_moment: f64,
    /// `u(t0, probe)` averaged over replicates.
    pub probe_values: Vec<f64>,
    pub error: Option<String>,
}

/// Gaps between consecutive rungs `k < k'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RungGap {
    pub k_low: TruncationIndex,
    pub k_high: TruncationIndex,
    /// `E sup_j |X^{k'}_j - X^k_j|²`.
    pub forward: Estimate,
    /// `max_probe |u^{k'}(t0, x) - u^k(t0, x)|`.
    pub solution: Estimate,
    /// `Σ_j Δt · mean_probe ∫ |U^{k'}_j(x,e) - U^k_j(x,e) 1{|e|>=1/k}|² λ_{k'}(de)`.
    pub jump_field: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rungs: Vec<Rung>,
    pub gaps: Vec<RungGap>,
}

impl ConvergenceReport {
    /// True when consecutive values of a gap column decrease at `sigmas`
    /// standard errors.
    pub fn decreasing(&self, column: fn(&RungGap) -> Estimate, sigmas: f64) -> bool {
        self.gaps.windows(2).all(|w| column(&w[0]).exceeds(&column(&w[1]), sigmas))
    }

    pub fn all_rungs_solved(&self) -> bool {
        self.rungs.iter().all(|r| r.error.is_none())
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&[
            "k",
            "small_jump_second_moment",
            "forward_gap",
            "forward_gap_se",
            "solution_gap",
            "solution_gap_se",
            "jump_field_gap",
            "jump_field_gap_se",
            "error",
        ]);
        for (r, rung) in self.rungs.iter().enumerate() {
            let gap = r.checked_sub(1).and_then(|g| self.gaps.get(g));
            let cells = |e: Option<Estimate>| match e {
                Some(e) => [fmt_f64(e.mean), fmt_f64(e.std_error)],
                None => [String::new(), String::new()],
            };
            let [f, fs] = cells(gap.map(|g| g.forward));
            let [s, ss] = cells(gap.map(|g| g.solution));
            let [u, us] = cells(gap.map(|g| g.jump_field));
            csv.row(&[
                rung.k.to_string(),
                fmt_f64(rung.small_jump_second_moment),
                f,
                fs,
                s,
                ss,
                u,
                us,
                rung.error.clone().unwrap_or_default(),
            ]);
        }
        csv
    }
}

/// Solves at every level of `ks` on coupled ensembles (shared Brownian
/// increments, nested jump sets) and reports the Cauchy gaps between
/// consecutive levels.
pub fn ladder_study(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    ks: &[TruncationIndex],
    cfg: &LadderConfig,
) -> Result<ConvergenceReport> {
    if ks.len() < 3 {
        return Err(Error::config(format!("ladder needs at least 3 levels, got {}", ks.len())));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("ladder not strictly increasing"));
    }
    if cfg.probes.is_empty() {
        return Err(Error::config("ladder needs at least one probe point"));
    }
    let reps = cfg.replicates.max(1);
    let levels = ks.len();
    let np = cfg.probes.len();
    let mut errors: Vec<Option<String>> = vec![None; levels];
    let mut values = vec![vec![0.0; np]; levels];
    let mut forward: Vec<Vec<f64>> = vec![Vec::new(); levels - 1];
    let mut solution: Vec<Vec<f64>> = vec![Vec::new(); levels - 1];
    let mut field: Vec<Vec<f64>> = vec![Vec::new(); levels - 1];
    let rules = ks.iter().map(|&k| measure.rule(k)).collect::<Result<Vec<_>>>()?;

    for r in 0..reps {
        let seed = if reps == 1 { cfg.seed } else { derive_seed(cfg.seed, r as u64) };
        let streams = if reps == 1 {
            Streams::TRAINING
        } else {
            Streams {
                brownian: Substream::Replicate(2 * r as u32),
                jumps: Substream::Replicate(2 * r as u32 + 1),
                fine_steps: None,
            }
        };
        let ens: Vec<PathEnsemble> =
            simulate_coupled_with_streams(coeffs, measure, ks, &cfg.grid, &cfg.init, cfg.n_paths, seed, streams)?;
        let sols: Vec<Option<MeshSolution>> = ks
            .iter()
            .zip(&ens)
            .enumerate()
            .map(|(l, (&k, e))| match solve_backward(coeffs, measure, k, &cfg.grid, e, &cfg.solver) {
                Ok(s) => Some(s),
                Err(err) => {
                    errors[l].get_or_insert_with(|| format!("replicate {r}: {err}"));
                    None
                }
            })
            .collect();
        for (l, s) in sols.iter().enumerate() {
            if let Some(s) = s {
                for (v, x) in values[l].iter_mut().zip(&cfg.probes) {
                    *v += s.u(0, cfg.grid.t0, x)? / reps as f64;
                }
            }
        }
        for l in 0..levels - 1 {
            forward[l].push(sup_gap(&ens[l], &ens[l + 1]).mean);
            let (Some(a), Some(b)) = (&sols[l], &sols[l + 1]) else { continue };
            let mut worst = 0.0f64;
            for x in &cfg.probes {
                for i in 0..a.equations {
                    worst = worst.max((a.u(i, cfg.grid.t0, x)? - b.u(i, cfg.grid.t0, x)?).abs());
                }
            }
            solution[l].push(worst);
            field[l].push(field_gap(coeffs, a, b, ks[l], &rules[l + 1], &cfg.probes));
        }
    }

    let rungs = ks
        .iter()
        .zip(values)
        .zip(errors)
        .map(|((&k, probe_values), error)| {
            Ok(Rung {
                k,
                small_jump_second_moment: measure.small_jump_second_moment(k)?,
                probe_values,
                error,
            })
        })
        .collect::<Result<_>>()?;
    let est = |xs: &[f64]| {
        if xs.is_empty() {
            Estimate {
                mean: f64::NAN,
                std_error: f64::NAN,
            }
        } else {
            Estimate::from_samples(xs)
        }
    };
    let gaps = (0..levels - 1)
        .map(|l| RungGap {
            k_low: ks[l],
            k_high: ks[l + 1],
            forward: est(&forward[l]),
            solution: est(&solution[l]),
            jump_field: est(&field[l]),
        })
        .collect();
    Ok(ConvergenceReport { rungs, gaps })
}

fn field_gap(
    coeffs: &ModelCoefficients,
    low: &MeshSolution,
    high: &MeshSolution,
    k_low: TruncationIndex,
    rule_high: &crate::levy::QuadratureRule,
    probes: &[Vec<f64>],
) -> f64 {
    let grid = low.grid;
    let cut = k_low.threshold();
    let m = low.equations;
    let mut total = 0.0;
    for j in 0..grid.n_steps {
        let t = grid.node(j);
        let (a, b) = (low.layer(j + 1), high.layer(j + 1));
        let mut sum = 0.0;
        for x in probes {
            let (ua, ub) = (a.u(x), b.u(x));
            let mut shift = vec![0.0; x.len()];
            sum += rule_high.integrate(|e| {
                coeffs.beta(t, x, e, &mut shift);
                let xb: Vec<f64> = x.iter().zip(&shift).map(|(p, s)| p + s).collect();
                let keep = crate::levy::norm(e) >= cut;
                let (va, vb) = (a.u(&xb), b.u(&xb));
                (0..m)
                    .map(|i| {
                        let fa = if keep { va[i] - ua[i] } else { 0.0 };
                        (vb[i] - ub[i] - fa).powi(2)
                    })
                    .sum()
            });
        }
        total += grid.dt() * sum / probes.len() as f64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Diffusion, Drift, Driver, JumpCoefficient, Terminal};

    fn ks(v: &[u32]) -> Vec<TruncationIndex> {
        v.iter().map(|&k| TruncationIndex::new(k).unwrap()).collect()
    }

    fn cfg() -> LadderConfig {
        LadderConfig {
            grid: TimeGrid::new(0.0, 1.0, 5).unwrap(),
            init: InitialState::Dispersed { lo: vec![-1.0], hi: vec![1.0] },
            n_paths: 2_000,
            seed: 5,
            solver: SolverOptions::default(),
            probes: vec![vec![-0.5], vec![0.0], vec![0.5]],
            replicates: 2,
        }
    }

    #[test]
    fn no_jumps_means_no_gaps() {
        let model = ModelCoefficients::scalar(
            Drift::Zero,
            Diffusion::Constant(0.2),
            JumpCoefficient::Zero,
            Terminal::Quadratic { scale: 1.0, offset: 0.0 },
            Driver::Zero,
        );
        let measure = LevyMeasure::reference(0.5).unwrap();
        let rep = ladder_study(&model, &measure, &ks(&[2, 4, 8]), &cfg()).unwrap();
        for g in &rep.gaps {
            assert_eq!(g.forward.mean, 0.0);
            assert_eq!(g.solution.mean, 0.0);
            assert_eq!(g.jump_field.mean, 0.0);
        }
        assert_eq!(rep.to_csv().len(), 3);
    }

    #[test]
    fn bad_ladders_are_rejected() {
        let model = ModelCoefficients::scalar(
            Drift::Zero,
            Diffusion::Zero,
            JumpCoefficient::Zero,
            Terminal::Constant(1.0),
            Driver::Zero,
        );
        let measure = LevyMeasure::reference(0.5).unwrap();
        let err = ladder_study(&model, &measure, &ks(&[4, 4, 8]), &cfg()).unwrap_err().to_string();
        assert!(err.contains("ladder not strictly increasing"), "{err}");
        assert!(ladder_study(&model, &measure, &ks(&[2, 4]), &cfg()).is_err());
    }
}
