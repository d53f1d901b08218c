//! Concave moduli, pairwise Mao-condition checks and the Bihari comparison
//! envelope.

use serde::{Deserialize, Serialize};

use crate::levy::norm;
use crate::quadrature::GaussLegendre;
use crate::report::{DiagnosticEntry, DiagnosticsReport};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModulusKind {
    /// `ρ(u) = L u`
    Linear { scale: f64 },
    /// `ρ(u) = L u ln(1/u)` for `u <= 1/e`, constant `L/e` above.
    LogLinear { scale: f64 },
    /// `ρ(u) = L u^θ`, `0 < θ <= 1`
    Power { scale: f64, exponent: f64 },
}

/// A nondecreasing concave modulus `ρ` with `ρ(0) = 0`.
///
/// `osgood` records whether `∫_{0+} du/ρ(u) = ∞` holds analytically; it is a
/// declared attribute, not something the sampling checks can certify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcaveModulus {
    pub kind: ModulusKind,
    pub name: String,
    pub osgood: bool,
}

impl ConcaveModulus {
    pub fn linear(scale: f64) -> Self {
        Self {
            kind: ModulusKind::Linear { scale },
            name: format!("linear({scale})"),
            osgood: true,
        }
    }

    pub fn log_linear(scale: f64) -> Self {
        Self {
            kind: ModulusKind::LogLinear { scale },
            name: format!("log-linear({scale})"),
            osgood: true,
        }
    }

    pub fn power(scale: f64, exponent: f64) -> Self {
        Self {
            kind: ModulusKind::Power { scale, exponent },
            name: format!("power({scale}, {exponent})"),
            osgood: exponent >= 1.0,
        }
    }

    /// Modulus recovering a Lipschitz bound `L` under the `p`-order condition:
    /// `ρ(u) = L^p u` gives `ρ^{1/p}(|d|^p) = L |d|`.
    pub fn lipschitz(l: f64, p: f64) -> Self {
        Self::linear(l.powf(p))
    }

    pub fn with_osgood_flag(mut self, flag: bool) -> Self {
        self.osgood = flag;
        self
    }

    pub fn eval(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        match self.kind {
            ModulusKind::Linear { scale } => scale * u,
            ModulusKind::LogLinear { scale } => {
                let knee = (-1.0f64).exp();
                if u <= knee {
                    scale * u * (1.0 / u).ln()
                } else {
                    scale * knee
                }
            }
            ModulusKind::Power { scale, exponent } => scale * u.powf(exponent),
        }
    }

    /// Sampled checks of `ρ(0)=0`, monotonicity, midpoint concavity and
    /// positivity on a log grid over `[1e-8, upper]`.
    pub fn check_samples(&self, upper: f64) -> DiagnosticsReport {
        let grid: Vec<f64> = (0..=400).map(|i| 1e-8 * (upper / 1e-8).powf(i as f64 / 400.0)).collect();
        let vals: Vec<f64> = grid.iter().map(|&u| self.eval(u)).collect();
        let mut report = DiagnosticsReport::new(format!("modulus {}", self.name));
        let zero = self.eval(0.0);
        report.push(DiagnosticEntry::check("vanishes at zero", zero == 0.0, zero));
        let mono = vals
            .windows(2)
            .enumerate()
            .find(|(_, w)| w[1] < w[0] * (1.0 - 1e-12));
        report.push(
            DiagnosticEntry::check("nondecreasing", mono.is_none(), 0.0)
                .with_witness(mono.map(|(i, _)| vec![grid[i], grid[i + 1]])),
        );
        let mut worst = 0.0f64;
        let mut witness = None;
        for i in (0..grid.len()).step_by(7) {
            for j in (i..grid.len()).step_by(11) {
                let (a, b) = (grid[i], grid[j]);
                let gap = 0.5 * (vals[i] + vals[j]) - self.eval(0.5 * (a + b));
                let rel = gap / self.eval(0.5 * (a + b)).max(1e-300);
                if rel > worst {
                    worst = rel;
                    witness = Some(vec![a, b]);
                }
            }
        }
        report.push(
            DiagnosticEntry::check("midpoint concave", worst <= 1e-10, worst)
                .with_witness(if worst > 1e-10 { witness } else { None }),
        );
        let pos = vals.iter().position(|&v| !(v > 0.0));
        report.push(
            DiagnosticEntry::check("positive away from zero", pos.is_none(), 0.0)
                .with_witness(pos.map(|i| vec![grid[i]])),
        );
        report
    }
}

/// One pair `(x, x')` for a pairwise continuity check.
pub type PointPair = (Vec<f64>, Vec<f64>);

pub(crate) fn mao_bound(rho: &ConcaveModulus, p: f64, dist: f64) -> f64 {
    rho.eval(dist.powf(p)).powf(1.0 / p)
}

/// Checks `|f(x) - f(x')| <= ρ^{1/p}(|x - x'|^p)` on every pair.
///
/// The report's single entry carries the largest violation ratio
/// `|f(x)-f(x')| / ρ^{1/p}(|x-x'|^p)` and the worst pair as witness.
pub fn mao_distance_test<F>(f: F, rho: &ConcaveModulus, p: f64, pairs: &[PointPair]) -> DiagnosticsReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    assert!(p >= 2.0, "Mao order must be >= 2");
    let mut worst = 0.0f64;
    let mut witness = None;
    for (x, xp) in pairs {
        let dist = distance(x, xp);
        if dist == 0.0 {
            continue;
        }
        let diff = distance(&f(x), &f(xp));
        let ratio = ratio(diff, mao_bound(rho, p, dist));
        if ratio > worst {
            worst = ratio;
            witness = Some(concat(x, xp));
        }
    }
    let mut report = DiagnosticsReport::new(format!("mao condition, p={p}, modulus {}", rho.name));
    let passed = worst <= 1.0 + 1e-9;
    report.push(
        DiagnosticEntry::check("two-sided", passed, worst).with_witness(if passed { None } else { witness }),
    );
    report
}

/// Checks the one-sided form `<(x-x')/|x-x'|, f(x)-f(x')> <= ρ^{1/p}(|x-x'|^p)`
/// and, on the same pairs, that any two-sided pass implies a one-sided pass.
pub fn one_sided_mao_test<F>(f: F, rho: &ConcaveModulus, p: f64, pairs: &[PointPair]) -> DiagnosticsReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    assert!(p >= 2.0, "Mao order must be >= 2");
    let mut worst_one = f64::NEG_INFINITY;
    let mut witness = None;
    let mut worst_two = 0.0f64;
    for (x, xp) in pairs {
        let dist = distance(x, xp);
        if dist == 0.0 {
            continue;
        }
        let (fx, fxp) = (f(x), f(xp));
        let signed: f64 = x
            .iter()
            .zip(xp)
            .zip(fx.iter().zip(&fxp))
            .map(|((a, b), (fa, fb))| (a - b) / dist * (fa - fb))
            .sum();
        let bound = mao_bound(rho, p, dist);
        let r = ratio(signed, bound);
        if r > worst_one {
            worst_one = r;
            witness = Some(concat(x, xp));
        }
        worst_two = worst_two.max(ratio(distance(&fx, &fxp), bound));
    }
    let one_pass = worst_one <= 1.0 + 1e-9;
    let two_pass = worst_two <= 1.0 + 1e-9;
    let mut report = DiagnosticsReport::new(format!("one-sided mao condition, p={p}, modulus {}", rho.name));
    report.push(
        DiagnosticEntry::check("one-sided", one_pass, worst_one.max(0.0))
            .with_witness(if one_pass { None } else { witness }),
    );
    report.push(DiagnosticEntry::check(
        "two-sided implies one-sided",
        !two_pass || one_pass,
        worst_two,
    ));
    report
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

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Solution at time `t` of `y' = c ρ(y)`, `y(0) = a0`.
///
/// Inverts `G(u) = ∫_{a0}^{u} ds/ρ(s) = c t`. The integral is taken in the
/// logarithmic variable `s = a0 e^v`, where it is exactly linear for linear
/// moduli, and the crossing is located by Newton's method inside the
/// Gauss–Legendre panel that brackets it.
pub fn bihari_envelope(a0: f64, c: f64, rho: &ConcaveModulus, t: f64) -> Result<f64> {
    if !(a0 >= 0.0 && a0.is_finite()) || !(c > 0.0) || !(t >= 0.0) {
        return Err(Error::Envelope(format!(
            "need a0 >= 0, c > 0, t >= 0 (got a0={a0}, c={c}, t={t})"
        )));
    }
    if a0 == 0.0 {
        return if rho.osgood {
            Ok(0.0)
        } else {
            Err(Error::Envelope(format!(
                "modulus {} is not declared Osgood; the comparison solution from 0 is not unique",
                rho.name
            )))
        };
    }
    let target = c * t;
    if target == 0.0 {
        return Ok(a0);
    }
    let integrand = |v: f64| {
        let s = a0 * v.exp();
        s / rho.eval(s)
    };
    let rule = GaussLegendre::g16();
    const WIDTH: f64 = 0.25;
    let mut acc = 0.0;
    let mut lo = 0.0;
    for _ in 0..4_000_000 {
        let piece = rule.integrate(lo, lo + WIDTH, integrand);
        if !piece.is_finite() || piece <= 0.0 {
            return Err(Error::Envelope(format!("1/ρ not integrable near {}", a0 * lo.exp())));
        }
        if acc + piece >= target {
            // Newton for H(v) = acc + ∫_lo^v integrand = target inside [lo, lo+WIDTH].
            let mut v = lo + WIDTH * (target - acc) / piece;
            for _ in 0..60 {
                let h = acc + rule.integrate(lo, v, integrand) - target;
                let step = h / integrand(v);
                v = (v - step).clamp(lo, lo + WIDTH);
                if step.abs() < 1e-15 * v.abs().max(1.0) {
                    break;
                }
            }
            return Ok(a0 * v.exp());
        }
        acc += piece;
        lo += WIDTH;
    }
    Err(Error::Envelope("comparison solution did not reach the target time".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs_1d(n: usize) -> Vec<PointPair> {
        (0..n)
            .map(|i| {
                let a = -3.0 + 6.0 * (i as f64 * 0.618_033_988_7).fract();
                let b = -3.0 + 6.0 * (i as f64 * 0.414_213_562_3 + 0.1).fract();
                (vec![a], vec![b])
            })
            .collect()
    }

    #[test]
    fn identity_passes_with_equality() {
        let r = mao_distance_test(|x| x.to_vec(), &ConcaveModulus::linear(1.0), 2.0, &pairs_1d(50));
        assert!(r.all_passed());
        assert!((r.entries[0].value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_two_fails_against_unit_modulus() {
        let r = mao_distance_test(|x| vec![2.0 * x[0]], &ConcaveModulus::linear(1.0), 2.0, &pairs_1d(50));
        assert!(!r.all_passed());
        assert!((r.entries[0].value - 2.0).abs() < 1e-12);
        assert!(r.entries[0].witness.is_some());
        let r = mao_distance_test(|x| vec![2.0 * x[0]], &ConcaveModulus::linear(4.0), 2.0, &pairs_1d(50));
        assert!(r.all_passed());
    }

    #[test]
    fn decreasing_map_passes_one_sided_with_tiny_modulus() {
        let r = one_sided_mao_test(|x| vec![-x[0]], &ConcaveModulus::linear(1e-12), 2.0, &pairs_1d(50));
        assert!(r.entry("one-sided").unwrap().passed);
        let two = mao_distance_test(|x| vec![-x[0]], &ConcaveModulus::linear(1e-12), 2.0, &pairs_1d(50));
        assert!(!two.all_passed());
    }

    #[test]
    fn bihari_linear_is_exponential() {
        let y = bihari_envelope(1.0, 1.0, &ConcaveModulus::linear(1.0), 1.0).unwrap();
        assert!((y - std::f64::consts::E).abs() / std::f64::consts::E < 1e-12);
    }

    #[test]
    fn bihari_zero_start() {
        assert_eq!(bihari_envelope(0.0, 2.0, &ConcaveModulus::log_linear(1.0), 3.0).unwrap(), 0.0);
        assert!(bihari_envelope(0.0, 2.0, &ConcaveModulus::power(1.0, 0.5), 3.0).is_err());
    }

    #[test]
    fn shipped_moduli_pass_sample_checks() {
        for m in [
            ConcaveModulus::linear(2.0),
            ConcaveModulus::log_linear(1.0),
            ConcaveModulus::power(1.0, 0.5),
        ] {
            assert!(m.check_samples(10.0).all_passed(), "{}", m.name);
        }
    }

    #[test]
    fn convex_function_fails_concavity() {
        // u^2 is not concave; fake it through a power modulus with exponent > 1.
        let m = ConcaveModulus::power(1.0, 2.0);
        let r = m.check_samples(10.0);
        assert!(!r.entry("midpoint concave").unwrap().passed);
    }
}
