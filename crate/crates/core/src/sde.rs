//! Euler–Maruyama simulation of the forward jump-diffusion under `λ_k`,
//! shared-randomness coupling across truncation levels, and the moment
//! diagnostics of the forward estimates.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::ModelCoefficients;
use crate::levy::{JumpTrain, LevyMeasure, TruncationIndex};
use crate::report::{fmt_f64, Csv, DiagnosticEntry, DiagnosticsReport};
use crate::rng::{StreamKey, Substream};
use crate::stats::Estimate;
use crate::{Error, Result};

/// Uniform grid `t0 = τ_0 < … < τ_N = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::config(format!("time grid needs t0 < T, got [{t0}, {t_end}]")));
        }
        if n_steps == 0 {
            return Err(Error::config("time grid needs at least one step"));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    /// Elapsed time `τ_j - t0`; the last node is exactly the horizon.
    pub fn elapsed(&self, j: usize) -> f64 {
        if j >= self.n_steps {
            self.horizon()
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn node(&self, j: usize) -> f64 {
        if j >= self.n_steps {
            self.t_end
        } else {
            self.t0 + self.elapsed(j)
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| self.node(j)).collect()
    }

    /// Index of the last node `<= t`, clamped to the grid.
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= self.t0 {
            return 0;
        }
        let j = ((t - self.t0) / self.dt()).floor() as usize;
        // Guard against rounding just below a node.
        let j = j.min(self.n_steps);
        if j < self.n_steps && self.node(j + 1) <= t {
            j + 1
        } else {
            j
        }
    }

    pub fn refined(&self, factor: usize) -> Self {
        Self {
            n_steps: self.n_steps * factor,
            ..*self
        }
    }
}

/// Starting states of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialState {
    /// Every path starts at the same point.
    Point(Vec<f64>),
    /// Path starts spread over the box `[lo, hi]`; the first coordinate is
    /// stratified across paths, the others uniform.
    Dispersed { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Point(x) => x.len(),
            InitialState::Dispersed { lo, .. } => lo.len(),
        }
    }

    pub fn is_point(&self) -> bool {
        matches!(self, InitialState::Point(_))
    }

    fn draw(&self, seed: u64, path: usize, n_paths: usize) -> Vec<f64> {
        match self {
            InitialState::Point(x) => x.clone(),
            InitialState::Dispersed { lo, hi } => {
                let mut rng = StreamKey::new(seed, Substream::InitialState, path as u64).rng();
                lo.iter()
                    .zip(hi)
                    .enumerate()
                    .map(|(c, (a, b))| {
                        let u: f64 = rng.random();
                        let frac = if c == 0 { (path as f64 + u) / n_paths as f64 } else { u };
                        a + (b - a) * frac
                    })
                    .collect()
            }
        }
    }
}

/// Which sub-streams an ensemble draws its Brownian and jump noise from.
///
/// With `fine_steps = Some(M)` the Brownian path is drawn on a uniform grid
/// of `M` steps and summed down to the simulation grid, so ensembles on
/// every grid whose step count divides `M` share one Brownian path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub brownian: Substream,
    pub jumps: Substream,
    pub fine_steps: Option<usize>,
}

impl Streams {
    pub const TRAINING: Streams = Streams {
        brownian: Substream::Brownian,
        jumps: Substream::Jumps,
        fine_steps: None,
    };
    pub const FRESH: Streams = Streams {
        brownian: Substream::FreshBrownian,
        jumps: Substream::FreshJumps,
        fine_steps: None,
    };

    pub fn with_fine_steps(mut self, m: usize) -> Self {
        self.fine_steps = Some(m);
        self
    }
}

/// Simulated paths. States are stored flat, path-major:
/// `states[(path * (N+1) + j) * dim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub dim: usize,
    pub brownian_dim: usize,
    pub n_paths: usize,
    pub states: Vec<f64>,
    pub brownian_increments: Vec<f64>,
    pub jump_trains: Vec<JumpTrain>,
    pub k: TruncationIndex,
    pub seed: u64,
    pub coupling_id: Option<u64>,
    pub initial: InitialState,
    pub streams: Streams,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, j: usize) -> &[f64] {
        let at = (path * (self.grid.n_steps + 1) + j) * self.dim;
        &self.states[at..at + self.dim]
    }

    pub fn increment(&self, path: usize, j: usize) -> &[f64] {
        let at = (path * self.grid.n_steps + j) * self.brownian_dim;
        &self.brownian_increments[at..at + self.brownian_dim]
    }

    /// Indices into `jump_trains[path]` of the jumps attached to step `j`,
    /// i.e. with elapsed time in `(τ_j - t0, τ_{j+1} - t0]`.
    pub fn jumps_in_step(&self, path: usize, j: usize) -> std::ops::Range<usize> {
        self.jump_trains[path].in_window(self.grid.elapsed(j), self.grid.elapsed(j + 1))
    }

    pub fn start(&self, path: usize) -> &[f64] {
        self.state(path, 0)
    }

    /// `X_s` on the path, piecewise constant between nodes; `X_s = x` for
    /// `s <= t0`.
    pub fn state_at(&self, path: usize, s: f64) -> &[f64] {
        self.state(path, self.grid.floor_index(s))
    }

    /// One row per `(path, step)`: time, state and cumulative jump count.
    pub fn to_csv(&self) -> Csv {
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..self.dim).map(|c| format!("x{c}")));
        header.push("jumps".into());
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut csv = Csv::new(&refs);
        for p in 0..self.n_paths {
            let mut count = 0;
            for j in 0..=self.grid.n_steps {
                if j > 0 {
                    count += self.jumps_in_step(p, j - 1).len();
                }
                let mut row = vec![p.to_string(), j.to_string(), fmt_f64(self.grid.node(j))];
                row.extend(self.state(p, j).iter().map(|v| fmt_f64(*v)));
                row.push(count.to_string());
                csv.row(&row);
            }
        }
        csv
    }
}

/// `∫ β(t, x, e) λ_k(de)`, by adaptive quadrature.
pub fn compensator_drift(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    k: TruncationIndex,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let n = coeffs.dims.state;
    if coeffs.jump.is_zero() {
        return Ok(vec![0.0; n]);
    }
    measure.quad_integrate(k, n, |e, out| coeffs.beta(t, x, e, out))
}

enum Compensator {
    Fixed(Vec<f64>),
    Rule(crate::levy::QuadratureRule),
}

impl Compensator {
    fn new(coeffs: &ModelCoefficients, measure: &LevyMeasure, k: TruncationIndex, t0: f64, x: &[f64]) -> Result<Self> {
        if coeffs.jump.is_state_independent() {
            Ok(Compensator::Fixed(compensator_drift(coeffs, measure, k, t0, x)?))
        } else {
            Ok(Compensator::Rule(measure.rule(k)?))
        }
    }

    fn eval(&self, coeffs: &ModelCoefficients, t: f64, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        match self {
            Compensator::Fixed(v) => out.copy_from_slice(v),
            Compensator::Rule(rule) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (e, w) in rule.iter() {
                    coeffs.beta(t, x, e, scratch);
                    for (o, s) in out.iter_mut().zip(scratch.iter()) {
                        *o += w * s;
                    }
                }
            }
        }
    }
}

struct PathOut {
    states: Vec<f64>,
    increments: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn euler_path(
    coeffs: &ModelCoefficients,
    comp: &Compensator,
    grid: &TimeGrid,
    x0: &[f64],
    increments: Vec<f64>,
    train: &JumpTrain,
    path: usize,
) -> Result<PathOut> {
    let (n, d) = (coeffs.dims.state, coeffs.dims.brownian);
    let steps = grid.n_steps;
    let dt = grid.dt();
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let (mut b, mut sig, mut beta, mut c, mut scratch) =
        (vec![0.0; n], vec![0.0; n * d], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..steps {
        let t = grid.node(j);
        coeffs.b(t, &x, &mut b);
        coeffs.sigma(t, &x, &mut sig);
        comp.eval(coeffs, t, &x, &mut c, &mut scratch);
        let db = &increments[j * d..(j + 1) * d];
        let mut next: Vec<f64> = (0..n)
            .map(|r| {
                let diff: f64 = (0..d).map(|q| sig[r * d + q] * db[q]).sum();
                x[r] + (b[r] - c[r]) * dt + diff
            })
            .collect();
        for i in train.in_window(grid.elapsed(j), grid.elapsed(j + 1)) {
            coeffs.beta(t, &x, train.mark(i), &mut beta);
            for (v, bj) in next.iter_mut().zip(&beta) {
                *v += bj;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation { path, step: j + 1 });
        }
        states.extend_from_slice(&next);
        x = next;
    }
    Ok(PathOut { states, increments })
}

fn brownian_increments(seed: u64, streams: Streams, path: usize, steps: usize, d: usize, dt: f64) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, streams.brownian, path as u64).rng();
    let fine = streams.fine_steps.unwrap_or(steps);
    let per = fine / steps;
    let s = (dt / per as f64).sqrt();
    let mut out = vec![0.0; steps * d];
    for j in 0..steps {
        for _ in 0..per {
            for q in 0..d {
                out[j * d + q] += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

fn check_inputs(coeffs: &ModelCoefficients, measure: &LevyMeasure, init: &InitialState, n_paths: usize) -> Result<()> {
    coeffs.check_dims()?;
    if init.dim() != coeffs.dims.state {
        return Err(Error::config(format!(
            "initial state has dimension {} but the model has {}",
            init.dim(),
            coeffs.dims.state
        )));
    }
    if measure.dim_e() != coeffs.dims.marks {
        return Err(Error::config(format!(
            "measure mark dimension {} differs from model's {}",
            measure.dim_e(),
            coeffs.dims.marks
        )));
    }
    if n_paths == 0 {
        return Err(Error::config("need at least one path"));
    }
    Ok(())
}

fn check_streams(streams: &Streams, grid: &TimeGrid) -> Result<()> {
    match streams.fine_steps {
        Some(m) if m == 0 || m % grid.n_steps != 0 => Err(Error::config(format!(
            "fine Brownian grid of {m} steps is not a multiple of {}",
            grid.n_steps
        ))),
        _ => Ok(()),
    }
}

/// Simulates `n_paths` Euler paths at truncation level `k` from the
/// training sub-streams.
#[allow(clippy::too_many_arguments)]
pub fn simulate_forward(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    k: TruncationIndex,
    grid: &TimeGrid,
    init: &InitialState,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_with_streams(coeffs, measure, k, grid, init, n_paths, seed, Streams::TRAINING)
}

/// Same as [`simulate_forward`] on an explicit pair of sub-streams; use
/// [`Streams::FRESH`] for out-of-sample ensembles.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_streams(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    k: TruncationIndex,
    grid: &TimeGrid,
    init: &InitialState,
    n_paths: usize,
    seed: u64,
    streams: Streams,
) -> Result<PathEnsemble> {
    let mut out = simulate_coupled_with_streams(coeffs, measure, &[k], grid, init, n_paths, seed, streams)?;
    let mut e = out.pop().expect("one level");
    e.coupling_id = None;
    Ok(e)
}

/// Simulates one ensemble per level in `ks` from shared randomness: the same
/// Brownian increments, and one jump reservoir drawn at the largest level
/// from which each level keeps the marks with `|e| >= 1/k`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    ks: &[TruncationIndex],
    grid: &TimeGrid,
    init: &InitialState,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathEnsemble>> {
    simulate_coupled_with_streams(coeffs, measure, ks, grid, init, n_paths, seed, Streams::TRAINING)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_with_streams(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    ks: &[TruncationIndex],
    grid: &TimeGrid,
    init: &InitialState,
    n_paths: usize,
    seed: u64,
    streams: Streams,
) -> Result<Vec<PathEnsemble>> {
    check_inputs(coeffs, measure, init, n_paths)?;
    check_streams(&streams, grid)?;
    let k_top = *ks.iter().max().ok_or_else(|| Error::config("no truncation levels given"))?;
    let sampler = measure.sampler(k_top)?;
    let horizon = grid.horizon();
    let (steps, d) = (grid.n_steps, coeffs.dims.brownian);
    let x_ref = match init {
        InitialState::Point(x) => x.clone(),
        InitialState::Dispersed { lo, .. } => lo.clone(),
    };
    let comps: Vec<Compensator> = ks
        .iter()
        .map(|&k| Compensator::new(coeffs, measure, k, grid.t0, &x_ref))
        .collect::<Result<_>>()?;

    let per_path: Vec<Vec<(PathOut, JumpTrain)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let x0 = init.draw(seed, p, n_paths);
            let inc = brownian_increments(seed, streams, p, steps, d, grid.dt());
            let mut jrng = StreamKey::new(seed, streams.jumps, p as u64).rng();
            let reservoir = sampler.sample(horizon, &mut jrng);
            ks.iter()
                .zip(&comps)
                .map(|(&k, comp)| {
                    let train = if k == k_top { reservoir.clone() } else { reservoir.thinned(k) };
                    let out = euler_path(coeffs, comp, grid, &x0, inc.clone(), &train, p)?;
                    Ok((out, train))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let coupling_id = (ks.len() > 1).then_some(seed);
    let mut ensembles: Vec<PathEnsemble> = ks
        .iter()
        .map(|&k| PathEnsemble {
            grid: *grid,
            dim: coeffs.dims.state,
            brownian_dim: d,
            n_paths,
            states: Vec::with_capacity(n_paths * (steps + 1) * coeffs.dims.state),
            brownian_increments: Vec::with_capacity(n_paths * steps * d),
            jump_trains: Vec::with_capacity(n_paths),
            k,
            seed,
            coupling_id,
            initial: init.clone(),
            streams,
        })
        .collect();
    for path in per_path {
        for (ens, (out, train)) in ensembles.iter_mut().zip(path) {
            ens.states.extend_from_slice(&out.states);
            ens.brownian_increments.extend_from_slice(&out.increments);
            ens.jump_trains.push(train);
        }
    }
    Ok(ensembles)
}

/// `E[sup_j |X^{k_high}_{τ_j} - X^{k_low}_{τ_j}|²]` over coupled paths, a
/// computable Cauchy proxy for the convergence of the truncated forward
/// process.
#[allow(clippy::too_many_arguments)]
pub fn coupled_truncation_gap(
    coeffs: &ModelCoefficients,
    measure: &LevyMeasure,
    k_low: TruncationIndex,
    k_high: TruncationIndex,
    grid: &TimeGrid,
    init: &InitialState,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    if k_low > k_high {
        return Err(Error::config(format!("need k_low <= k_high, got {k_low} > {k_high}")));
    }
    let ens = simulate_coupled(coeffs, measure, &[k_low, k_high], grid, init, n_paths, seed)?;
    Ok(sup_gap(&ens[0], &ens[1]))
}

/// Per-path `sup_j |X_j - X'_j|²` between two coupled ensembles.
pub fn sup_gap(a: &PathEnsemble, b: &PathEnsemble) -> Estimate {
    let samples: Vec<f64> = (0..a.n_paths)
        .map(|p| {
            (0..=a.grid.n_steps)
                .map(|j| {
                    a.state(p, j)
                        .iter()
                        .zip(b.state(p, j))
                        .map(|(u, v)| (u - v).powi(2))
                        .sum::<f64>()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Estimate::from_samples(&samples)
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

/// Fits the smallest `M_p` with `E[sup_{r<=s}|X_r - x|^p] <= M_p (s-t)(1+|x|^p)`
/// at every grid time. With `pair`, an ensemble driven by the same noise
/// from other starting points, also fits
/// `E[sup_{r<=s}|X_r - X'_r - (x - x')|^p] <= M_p (s-t) |x - x'|^p`.
pub fn moment_diagnostics(ensemble: &PathEnsemble, p: f64, pair: Option<&PathEnsemble>) -> DiagnosticsReport {
    assert!(p >= 2.0, "moment order must be >= 2");
    let mut report = DiagnosticsReport::new(format!("forward moment estimates, p={p}"));
    let steps = ensemble.grid.n_steps;
    let n = ensemble.n_paths;

    // Running sup per path, normalized by (1 + |x|^p).
    let mut running = vec![0.0f64; n];
    let mut best = (0.0f64, 0.0f64, 0usize);
    for j in 1..=steps {
        let elapsed = ensemble.grid.elapsed(j);
        let samples: Vec<f64> = (0..n)
            .map(|path| {
                let x = ensemble.start(path);
                let dev = norm_diff(ensemble.state(path, j), x).powf(p);
                running[path] = running[path].max(dev);
                running[path] / (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p))
            })
            .collect();
        let est = Estimate::from_samples(&samples);
        let ratio = est.mean / elapsed;
        if ratio > best.0 {
            best = (ratio, est.std_error / elapsed, j);
        }
    }
    report.push(
        DiagnosticEntry::info("M_p", best.0)
            .with_std_error(best.1)
            .with_detail(format!("attained at step {}", best.2)),
    );

    if let Some(other) = pair {
        let compatible = other.n_paths == n && other.grid == ensemble.grid && other.seed == ensemble.seed;
        if !compatible {
            report.push(
                DiagnosticEntry::check("pair M_p", false, f64::NAN)
                    .with_detail("pair ensemble must share seed, grid and path count"),
            );
            return report;
        }
        let mut running = vec![0.0f64; n];
        let mut best = (0.0f64, 0.0f64, 0usize);
        let mut degenerate = false;
        for j in 1..=steps {
            let elapsed = ensemble.grid.elapsed(j);
            let samples: Vec<f64> = (0..n)
                .map(|path| {
                    let (x, xp) = (ensemble.start(path), other.start(path));
                    let sep = norm_diff(x, xp);
                    if sep == 0.0 {
                        degenerate = true;
                        return 0.0;
                    }
                    let d: Vec<f64> = ensemble
                        .state(path, j)
                        .iter()
                        .zip(other.state(path, j))
                        .zip(x.iter().zip(xp))
                        .map(|((a, b), (u, v))| a - b - (u - v))
                        .collect();
                    let dev = d.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p);
                    running[path] = running[path].max(dev);
                    running[path] / sep.powf(p)
                })
                .collect();
            let est = Estimate::from_samples(&samples);
            let ratio = est.mean / elapsed;
            if ratio > best.0 {
                best = (ratio, est.std_error / elapsed, j);
            }
        }
        report.push(
            DiagnosticEntry::check("pair M_p", !degenerate && best.0.is_finite(), best.0)
                .with_std_error(best.1)
                .with_detail(format!("attained at step {}", best.2)),
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Diffusion, Drift, Driver, JumpCoefficient, Terminal};

    fn model(drift: Drift, diffusion: Diffusion, jump: JumpCoefficient) -> ModelCoefficients {
        ModelCoefficients::scalar(drift, diffusion, jump, Terminal::Linear { slope: 1.0, offset: 0.0 }, Driver::Zero)
    }

    fn k(v: u32) -> TruncationIndex {
        TruncationIndex::new(v).unwrap()
    }

    fn reference() -> LevyMeasure {
        LevyMeasure::reference(0.5).unwrap()
    }

    #[test]
    fn compensator_examples() {
        let mu = reference();
        let odd = model(Drift::Zero, Diffusion::Zero, JumpCoefficient::Linear { scale: 1.0 });
        assert!(compensator_drift(&odd, &mu, k(4), 0.0, &[0.0]).unwrap()[0].abs() < 1e-10);
        let abs = model(Drift::Zero, Diffusion::Zero, JumpCoefficient::Norm { scale: 1.0 });
        let v = compensator_drift(&abs, &mu, k(4), 0.0, &[0.0]).unwrap()[0];
        assert!((v - 2.0).abs() < 1e-8, "{v}");
        let none = model(Drift::Zero, Diffusion::Zero, JumpCoefficient::Zero);
        assert_eq!(compensator_drift(&none, &mu, k(4), 0.0, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_dynamics_stay_put() {
        let m = model(Drift::Zero, Diffusion::Zero, JumpCoefficient::Zero);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let e = simulate_forward(&m, &reference(), k(8), &grid, &InitialState::Point(vec![1.5]), 50, 3).unwrap();
        assert!(e.states.iter().all(|&v| v == 1.5));
        let r = moment_diagnostics(&e, 2.0, None);
        assert_eq!(r.entry("M_p").unwrap().value, 0.0);
    }

    #[test]
    fn constant_drift_is_exact() {
        let m = model(Drift::Constant(0.1), Diffusion::Zero, JumpCoefficient::Zero);
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let e = simulate_forward(&m, &reference(), k(8), &grid, &InitialState::Point(vec![2.0]), 10, 1).unwrap();
        for p in 0..10 {
            assert!((e.state(p, 50)[0] - 2.1).abs() < 1e-13);
        }
        let r = moment_diagnostics(&e, 2.0, None);
        let m2 = r.entry("M_p").unwrap().value;
        // sup|X_r - x|² = 0.01 (s-t)², maximal ratio at s-t = 1.
        assert!((m2 - 0.01 / 5.0).abs() < 1e-12, "{m2}");
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let m = model(Drift::Constant(0.1), Diffusion::Constant(0.2), JumpCoefficient::Linear { scale: 1.0 });
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_forward(&m, &reference(), k(8), &grid, &InitialState::Point(vec![0.0]), 300, 9).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn coupled_equal_levels_have_zero_gap() {
        let m = model(Drift::Zero, Diffusion::Constant(0.2), JumpCoefficient::Linear { scale: 1.0 });
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let init = InitialState::Point(vec![0.0]);
        let g = coupled_truncation_gap(&m, &reference(), k(4), k(4), &grid, &init, 200, 1).unwrap();
        assert_eq!(g.mean, 0.0);
        let flat = model(Drift::Zero, Diffusion::Constant(0.2), JumpCoefficient::Zero);
        let g = coupled_truncation_gap(&flat, &reference(), k(2), k(16), &grid, &init, 200, 1).unwrap();
        assert_eq!(g.mean, 0.0);
    }

    #[test]
    fn states_before_start_are_initial() {
        let m = model(Drift::Constant(1.0), Diffusion::Zero, JumpCoefficient::Zero);
        let grid = TimeGrid::new(0.5, 1.0, 5).unwrap();
        let e = simulate_forward(&m, &reference(), k(2), &grid, &InitialState::Point(vec![3.0]), 2, 0).unwrap();
        assert_eq!(e.state_at(0, 0.1), &[3.0]);
        assert_eq!(e.state_at(1, 0.5), &[3.0]);
        assert!((e.state_at(0, 1.0)[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn fine_noise_is_shared_across_grids() {
        let m = model(Drift::Zero, Diffusion::Constant(1.0), JumpCoefficient::Zero);
        let streams = Streams::TRAINING.with_fine_steps(8);
        let init = InitialState::Point(vec![0.0]);
        let run = |n| {
            let g = TimeGrid::new(0.0, 1.0, n).unwrap();
            simulate_with_streams(&m, &reference(), k(2), &g, &init, 5, 4, streams).unwrap()
        };
        let (a, b) = (run(2), run(8));
        for p in 0..5 {
            assert!((a.state(p, 2)[0] - b.state(p, 8)[0]).abs() < 1e-12);
            assert!((a.state(p, 1)[0] - b.state(p, 4)[0]).abs() < 1e-12);
        }
        let g = TimeGrid::new(0.0, 1.0, 3).unwrap();
        assert!(simulate_with_streams(&m, &reference(), k(2), &g, &init, 5, 4, streams).is_err());
    }

    #[test]
    fn grid_floor_index_hits_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        for j in 0..=10 {
            assert_eq!(g.floor_index(g.node(j)), j);
        }
        assert_eq!(g.floor_index(0.55), 5);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let m = model(Drift::Zero, Diffusion::Constant(1.0), JumpCoefficient::Linear { scale: 1.0 });
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let e = simulate_forward(&m, &reference(), k(4), &grid, &InitialState::Point(vec![0.0]), 3, 0).unwrap();
        let csv = e.to_csv();
        assert_eq!(csv.len(), 15);
        let last = csv.body().lines().last().unwrap().to_string();
        let count: usize = last.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(count, e.jump_trains[2].len());
    }
}
