//! Sampled witness search for the coefficient assumptions.
//!
//! The assumptions are universally quantified, so sampling can only falsify
//! them. Each check draws points from the validation sub-stream, evaluates
//! one ratio per sample (bound satisfied iff ratio <= 1) and keeps the worst
//! sample as witness. Samples are evaluated in parallel but reduced in index
//! order, so reports do not depend on the thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{mao_bound, ConcaveModulus, ModelCoefficients};
use crate::levy::{norm, LevyMeasure};
use crate::report::{DiagnosticEntry, DiagnosticsReport};
use crate::rng::{derive_seed, StreamKey, Substream};

const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    /// Samples per check.
    pub pairs: usize,
    /// Coordinate box `[lo, hi]` for states and for `(y, z, q)`.
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
    /// Cap for `∫(1∧|e|²)λ(de)`.
    pub measure_cap: f64,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            lo: -5.0,
            hi: 5.0,
            seed: 0,
            measure_cap: 1e6,
        }
    }
}

struct Sampler<'a> {
    plan: &'a SamplePlan,
    horizon: f64,
    mark_radius: f64,
}

impl Sampler<'_> {
    fn time(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.random::<f64>() * self.horizon
    }

    fn point(&self, rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(self.plan.lo..=self.plan.hi)).collect()
    }

    /// Pairs from three families: independent points in the box, a point and
    /// a tiny displacement of it, and two points both close to the origin.
    fn pair(&self, rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let log_uniform = |rng: &mut ChaCha8Rng| 10f64.powf(rng.random_range(-8.0..0.0));
        match rng.random_range(0..3) {
            0 => (self.point(rng, dim), self.point(rng, dim)),
            1 => {
                let x = self.point(rng, dim);
                let s = log_uniform(rng);
                let xp = x.iter().map(|v| v + s * rng.random_range(-1.0..1.0)).collect();
                (x, xp)
            }
            _ => {
                let s = log_uniform(rng);
                let x = (0..dim).map(|_| s * rng.random_range(-1.0..1.0)).collect();
                let xp = (0..dim).map(|_| s * rng.random_range(-1.0..1.0)).collect();
                (x, xp)
            }
        }
    }

    /// Marks with log-uniform radius in `[1e-6 R, R]` and uniform direction.
    fn mark(&self, rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let r = self.mark_radius * 10f64.powf(rng.random_range(-6.0..=0.0));
        let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&dir).max(1e-12);
        dir.iter().map(|d| r * d / n).collect()
    }
}

/// Worst ratio over `n` samples; ties resolve to the lowest index.
fn worst<F>(plan: &SamplePlan, salt: u64, f: F) -> (f64, Vec<f64>)
where
    F: Fn(&mut ChaCha8Rng) -> (f64, Vec<f64>) + Sync,
{
    let seed = derive_seed(plan.seed, salt);
    let samples: Vec<(f64, Vec<f64>)> = (0..plan.pairs as u64)
        .into_par_iter()
        .map(|i| f(&mut StreamKey::new(seed, Substream::Validation, i).rng()))
        .collect();
    let mut best = (0.0, Vec::new());
    for (r, w) in samples {
        let r = if r.is_nan() { f64::INFINITY } else { r };
        if r > best.0 {
            best = (r, w);
        }
    }
    best
}

fn ratio(lhs: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        lhs / bound
    } else if lhs <= 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn entry(name: String, (value, witness): (f64, Vec<f64>)) -> DiagnosticEntry {
    let passed = value <= 1.0 + SLACK;
    DiagnosticEntry::check(name, passed, value).with_witness((!passed).then_some(witness))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mao_ratio(rho: &ConcaveModulus, p: f64, x: &[f64], xp: &[f64], fx: &[f64], fxp: &[f64]) -> f64 {
    let d = dist(x, xp);
    if d == 0.0 {
        return 0.0;
    }
    ratio(dist(fx, fxp), mao_bound(rho, p, d))
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Runs every sampled assumption check. Witness layouts: jump bounds
/// `[t, x.., e..]`; Mao checks `[t, x.., x'..]` (plus `e..` for `β`, `γ`
/// and `(y.., z.., q)` for `h`); driver Lipschitz `[t, x.., y.., z.., q, y'.., z'.., q']`.
pub fn validate_assumptions(coeffs: &ModelCoefficients, measure: &LevyMeasure, plan: &SamplePlan) -> DiagnosticsReport {
    let dims = coeffs.dims;
    let (kx, d, m, l) = (dims.state, dims.brownian, dims.equations, dims.marks);
    let c = coeffs.lipschitz;
    let p = coeffs.moduli.order;
    let s = Sampler {
        plan,
        horizon: coeffs.horizon,
        mark_radius: measure.support_radius().unwrap_or(10.0),
    };
    let mut report = DiagnosticsReport::new("assumption validation");

    if let Err(e) = coeffs.check_dims() {
        report.push(DiagnosticEntry::check("dimensions", false, 0.0).with_detail(e.to_string()));
        return report;
    }
    if measure.dim_e() != l {
        report.push(
            DiagnosticEntry::check("dimensions", false, 0.0)
                .with_detail(format!("measure mark dimension {} but model declares {l}", measure.dim_e())),
        );
        return report;
    }

    match measure.admissibility(plan.measure_cap) {
        Ok(a) => {
            report.push(DiagnosticEntry::check(
                "measure integrates 1∧|e|²",
                a.integrable,
                a.small_second_moment + a.large_mass,
            ));
            let top = a.mass_ladder.last().map_or(0.0, |v| v.1);
            report.push(DiagnosticEntry::check("measure has infinite mass", a.infinite_mass, top));
        }
        Err(e) => report.push(DiagnosticEntry::check("measure integrates 1∧|e|²", false, f64::NAN).with_detail(e.to_string())),
    }

    for (name, rho) in coeffs.moduli.named() {
        let r = rho.check_samples(1e3);
        report.absorb(&format!("modulus {name}"), r);
        report.push(DiagnosticEntry::check(format!("modulus {name}: declared Osgood"), rho.osgood, 0.0));
    }

    // |β(t,x,e)| <= C (1 ∧ |e|)
    report.push(entry(
        "jump bound".into(),
        worst(plan, 1, |rng| {
            let (t, x, e) = (s.time(rng), s.point(rng, kx), s.mark(rng, l));
            let mut out = vec![0.0; kx];
            coeffs.beta(t, &x, &e, &mut out);
            (ratio(norm(&out), c * norm(&e).min(1.0)), cat(&[&[t], &x, &e]))
        }),
    ));
    for i in 0..m {
        report.push(entry(
            format!("mark-weight bound, equation {i}"),
            worst(plan, 10 + i as u64, |rng| {
                let (t, x, e) = (s.time(rng), s.point(rng, kx), s.mark(rng, l));
                (ratio(coeffs.gamma(i, t, &x, &e).abs(), c * norm(&e).min(1.0)), cat(&[&[t], &x, &e]))
            }),
        ));
    }

    // Driver Lipschitz in (y, z, q), uniformly in (t, x).
    for i in 0..m {
        report.push(entry(
            format!("driver Lipschitz, equation {i}"),
            worst(plan, 100 + i as u64, |rng| {
                let (t, x) = (s.time(rng), s.point(rng, kx));
                let (y, yp) = s.pair(rng, m);
                let (z, zp) = s.pair(rng, d);
                let (q, qp) = s.pair(rng, 1);
                let lhs = (coeffs.h(i, t, &x, &y, &z, q[0]) - coeffs.h(i, t, &x, &yp, &zp, qp[0])).abs();
                let rhs = c * (dist(&y, &yp) + dist(&z, &zp) + (q[0] - qp[0]).abs());
                (ratio(lhs, rhs), cat(&[&[t], &x, &y, &z, &q, &yp, &zp, &qp]))
            }),
        ));
    }

    let mods = &coeffs.moduli;
    report.push(entry(
        "mao: drift".into(),
        worst(plan, 200, |rng| {
            let t = s.time(rng);
            let (x, xp) = s.pair(rng, kx);
            let (mut a, mut b) = (vec![0.0; kx], vec![0.0; kx]);
            coeffs.b(t, &x, &mut a);
            coeffs.b(t, &xp, &mut b);
            (mao_ratio(&mods.drift, p, &x, &xp, &a, &b), cat(&[&[t], &x, &xp]))
        }),
    ));
    report.push(entry(
        "mao: diffusion".into(),
        worst(plan, 201, |rng| {
            let t = s.time(rng);
            let (x, xp) = s.pair(rng, kx);
            let (mut a, mut b) = (vec![0.0; kx * d], vec![0.0; kx * d]);
            coeffs.sigma(t, &x, &mut a);
            coeffs.sigma(t, &xp, &mut b);
            (mao_ratio(&mods.diffusion, p, &x, &xp, &a, &b), cat(&[&[t], &x, &xp]))
        }),
    ));
    report.push(entry(
        "mao: jump".into(),
        worst(plan, 202, |rng| {
            let (t, e) = (s.time(rng), s.mark(rng, l));
            let (x, xp) = s.pair(rng, kx);
            let (mut a, mut b) = (vec![0.0; kx], vec![0.0; kx]);
            coeffs.beta(t, &x, &e, &mut a);
            coeffs.beta(t, &xp, &e, &mut b);
            (mao_ratio(&mods.jump, p, &x, &xp, &a, &b), cat(&[&[t], &x, &xp, &e]))
        }),
    ));
    for i in 0..m {
        report.push(entry(
            format!("mao: mark weight, equation {i}"),
            worst(plan, 300 + i as u64, |rng| {
                let (t, e) = (s.time(rng), s.mark(rng, l));
                let (x, xp) = s.pair(rng, kx);
                let (a, b) = (coeffs.gamma(i, t, &x, &e), coeffs.gamma(i, t, &xp, &e));
                (mao_ratio(&mods.mark_weight, p, &x, &xp, &[a], &[b]), cat(&[&[t], &x, &xp, &e]))
            }),
        ));
        report.push(entry(
            format!("mao: terminal, equation {i}"),
            worst(plan, 400 + i as u64, |rng| {
                let (x, xp) = s.pair(rng, kx);
                let (a, b) = (coeffs.g(i, &x), coeffs.g(i, &xp));
                (mao_ratio(&mods.terminal, p, &x, &xp, &[a], &[b]), cat(&[&[0.0], &x, &xp]))
            }),
        ));
        report.push(entry(
            format!("mao: driver in x, equation {i}"),
            worst(plan, 500 + i as u64, |rng| {
                let t = s.time(rng);
                let (x, xp) = s.pair(rng, kx);
                let (y, z, q) = (s.point(rng, m), s.point(rng, d), s.point(rng, 1));
                let a = coeffs.h(i, t, &x, &y, &z, q[0]);
                let b = coeffs.h(i, t, &xp, &y, &z, q[0]);
                (mao_ratio(&mods.driver, p, &x, &xp, &[a], &[b]), cat(&[&[t], &x, &xp, &y, &z, &q]))
            }),
        ));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientModuli, Diffusion, Drift, Driver, JumpCoefficient, Terminal};

    fn plan() -> SamplePlan {
        SamplePlan {
            pairs: 2000,
            ..SamplePlan::default()
        }
    }

    fn linear_model() -> ModelCoefficients {
        ModelCoefficients::scalar(
            Drift::Constant(0.1),
            Diffusion::Constant(0.2),
            JumpCoefficient::Linear { scale: 1.0 },
            Terminal::Linear { slope: 1.0, offset: 0.0 },
            Driver::Own { y: 0.5, q: 0.0 },
        )
    }

    #[test]
    fn linear_model_passes() {
        let r = validate_assumptions(&linear_model(), &LevyMeasure::reference(0.5).unwrap(), &plan());
        assert!(r.all_passed(), "{r}");
    }

    #[test]
    fn quadratic_in_q_fails_lipschitz() {
        let mut m = linear_model();
        m.drivers = vec![Driver::QuadraticQ { scale: 1.0 }];
        let r = validate_assumptions(&m, &LevyMeasure::reference(0.5).unwrap(), &plan());
        let e = r.entry("driver Lipschitz, equation 0").unwrap();
        assert!(!e.passed);
        assert!(e.value > 1.0);
        let w = e.witness.as_ref().unwrap();
        // q and q' sit at positions 4 and 7 of [t, x, y, z, q, y', z', q'].
        let (q, qp) = (w[4], w[7]);
        assert!((q * q - qp * qp).abs() > (q - qp).abs());
    }

    #[test]
    fn square_root_terminal_fails_near_origin() {
        let mut m = linear_model();
        m.terminals = vec![Terminal::SqrtAbs];
        let r = validate_assumptions(&m, &LevyMeasure::reference(0.5).unwrap(), &plan());
        let e = r.entry("mao: terminal, equation 0").unwrap();
        assert!(!e.passed);
        let w = e.witness.as_ref().unwrap();
        assert!(w[1].abs() < 1e-2 || w[2].abs() < 1e-2, "{w:?}");
    }

    #[test]
    fn report_independent_of_thread_count() {
        let m = linear_model().with_moduli(CoefficientModuli::lipschitz(0.5, 2.0));
        let mu = LevyMeasure::reference(0.5).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| validate_assumptions(&m, &mu, &plan()))
        };
        assert_eq!(run(1), run(3));
    }
}
