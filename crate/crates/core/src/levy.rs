//! Lévy measures with infinite mass at the origin, their truncations to
//! `{|e| >= 1/k}`, quadrature against the truncated measure, and exact
//! sampling of the truncated compound-Poisson jump train.
//!
//! Every measure factorizes as a radial law times a uniform direction law on
//! the unit sphere of `R^ℓ`. The radial density is the density of `|e|`
//! summed over all directions, so in one dimension the reference family
//! `λ(de) = c|e|^{-1-α} de` has radial density `2c r^{-1-α}`.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::quadrature::{adaptive, adaptive_vec, GaussLegendre};
use crate::rng::StreamKey;
use crate::{Error, Result};

/// Truncation level `k >= 1`; jumps with `|e| < 1/k` are discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct TruncationIndex(u32);

impl TruncationIndex {
    pub fn new(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("truncation index must be >= 1"));
        }
        Ok(Self(k))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Smallest retained jump size `1/k`.
    pub fn threshold(self) -> f64 {
        1.0 / self.0 as f64
    }
}

impl TryFrom<u32> for TruncationIndex {
    type Error = Error;
    fn try_from(k: u32) -> Result<Self> {
        Self::new(k)
    }
}

impl From<TruncationIndex> for u32 {
    fn from(k: TruncationIndex) -> u32 {
        k.0
    }
}

impl std::fmt::Display for TruncationIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RadialLaw {
    /// `c S_{ℓ-1} r^{-1-α}` on `(0, R]`; `radius = None` means unbounded.
    PowerLaw {
        alpha: f64,
        scale: f64,
        radius: Option<f64>,
    },
    /// Tabulated radial density, interpolated log-log between nodes,
    /// extended below the first node by the first segment's power law and
    /// zero beyond the last node.
    Table { radii: Vec<f64>, density: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadSettings {
    pub rel_tol: f64,
    /// Absolute floor per radial shell, so integrands that vanish up to
    /// rounding are accepted.
    pub abs_tol: f64,
    pub max_depth: u32,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-13,
            max_depth: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasure {
    dim_e: usize,
    law: RadialLaw,
    #[serde(default)]
    quad: QuadSettings,
}

/// Result of checking the integrability and infinite-mass assumptions.
#[derive(Debug, Clone, PartialEq)]
pub struct Admissibility {
    /// `∫_{|e|<1} |e|² λ(de)`
    pub small_second_moment: f64,
    /// `λ(|e| >= 1)`
    pub large_mass: f64,
    pub integrable: bool,
    /// Masses `λ(|e| >= 1/k)` for `k = 1, 2, 4, ...` used for the check.
    pub mass_ladder: Vec<(u32, f64)>,
    pub infinite_mass: bool,
}

impl LevyMeasure {
    pub fn power_law(alpha: f64, scale: f64, radius: Option<f64>, dim_e: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::config(format!("power-law alpha must lie in (0,2), got {alpha}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("power-law scale must be positive, got {scale}")));
        }
        if let Some(r) = radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config(format!("support radius must be positive, got {r}")));
            }
        }
        check_dim(dim_e)?;
        Ok(Self {
            dim_e,
            law: RadialLaw::PowerLaw {
                alpha,
                scale,
                radius,
            },
            quad: QuadSettings::default(),
        })
    }

    /// `λ(de) = |e|^{-1-α} 1{0<|e|<=1} de` on the real line.
    pub fn reference(alpha: f64) -> Result<Self> {
        Self::power_law(alpha, 1.0, Some(1.0), 1)
    }

    pub fn table(radii: Vec<f64>, density: Vec<f64>, dim_e: usize) -> Result<Self> {
        check_dim(dim_e)?;
        if radii.len() < 2 || radii.len() != density.len() {
            return Err(Error::config(
                "tabulated density needs at least two (radius, density) pairs of equal length",
            ));
        }
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0))
            || radii.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::config("tabulated radii must be positive and strictly increasing"));
        }
        if density.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::config(
                "tabulated density is not normalizable: entries must be finite and positive",
            ));
        }
        Ok(Self {
            dim_e,
            law: RadialLaw::Table { radii, density },
            quad: QuadSettings::default(),
        })
    }

    pub fn with_quad_settings(mut self, quad: QuadSettings) -> Self {
        self.quad = quad;
        self
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn law(&self) -> &RadialLaw {
        &self.law
    }

    pub fn quad_settings(&self) -> QuadSettings {
        self.quad
    }

    pub fn name(&self) -> String {
        match &self.law {
            RadialLaw::PowerLaw {
                alpha,
                scale,
                radius,
            } => match radius {
                Some(r) => format!("power-law(alpha={alpha}, scale={scale}, radius={r}, dim={})", self.dim_e),
                None => format!("power-law(alpha={alpha}, scale={scale}, unbounded, dim={})", self.dim_e),
            },
            RadialLaw::Table { radii, .. } => {
                format!("table({} nodes, dim={})", radii.len(), self.dim_e)
            }
        }
    }

    pub fn support_radius(&self) -> Option<f64> {
        match &self.law {
            RadialLaw::PowerLaw { radius, .. } => *radius,
            RadialLaw::Table { radii, .. } => radii.last().copied(),
        }
    }

    /// Density of `|e|` summed over directions.
    pub fn radial_density(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        match &self.law {
            RadialLaw::PowerLaw {
                alpha,
                scale,
                radius,
            } => {
                if radius.is_some_and(|big| r > big) {
                    0.0
                } else {
                    scale * sphere_area(self.dim_e) * r.powf(-1.0 - alpha)
                }
            }
            RadialLaw::Table { radii, density } => table_density(radii, density, r),
        }
    }

    /// Radon–Nikodym density of λ with respect to Lebesgue measure on `R^ℓ`.
    pub fn density(&self, e: &[f64]) -> f64 {
        let r = norm(e);
        if r == 0.0 {
            return 0.0;
        }
        self.radial_density(r) / (sphere_area(self.dim_e) * r.powi(self.dim_e as i32 - 1))
    }

    /// Closed-form `λ(|e| >= 1/k)`, when the law has one.
    pub fn analytic_truncated_mass(&self, k: TruncationIndex) -> Option<f64> {
        match &self.law {
            RadialLaw::PowerLaw {
                alpha,
                scale,
                radius,
            } => {
                let a = k.threshold();
                let outer = match radius {
                    Some(big) if a >= *big => return Some(0.0),
                    Some(big) => big.powf(-alpha),
                    None => 0.0,
                };
                Some(scale * sphere_area(self.dim_e) * (a.powf(-alpha) - outer) / alpha)
            }
            RadialLaw::Table { .. } => None,
        }
    }

    /// Closed-form `∫_{|e|<1/k} |e|² λ(de)`, when the law has one.
    pub fn analytic_small_jump_second_moment(&self, k: TruncationIndex) -> Option<f64> {
        match &self.law {
            RadialLaw::PowerLaw {
                alpha,
                scale,
                radius,
            } => {
                let b = radius.map_or(k.threshold(), |big| big.min(k.threshold()));
                Some(scale * sphere_area(self.dim_e) * b.powf(2.0 - alpha) / (2.0 - alpha))
            }
            RadialLaw::Table { .. } => None,
        }
    }

    /// `λ(|e| >= 1/k)`: closed form when available, quadrature otherwise.
    pub fn truncated_mass(&self, k: TruncationIndex) -> Result<f64> {
        match self.analytic_truncated_mass(k) {
            Some(m) => Ok(m),
            None => self.truncated_mass_quadrature(k),
        }
    }

    /// `λ(|e| >= 1/k)` by adaptive radial quadrature only.
    pub fn truncated_mass_quadrature(&self, k: TruncationIndex) -> Result<f64> {
        let Some((lo, hi)) = self.shell_bounds(k) else {
            return Ok(0.0);
        };
        self.radial_integral(k, lo, hi, |_| 1.0)
    }

    /// `∫_{|e|<1/k} |e|² λ(de)`: closed form when available, quadrature otherwise.
    pub fn small_jump_second_moment(&self, k: TruncationIndex) -> Result<f64> {
        match self.analytic_small_jump_second_moment(k) {
            Some(m) => Ok(m),
            None => self.small_jump_second_moment_quadrature(k),
        }
    }

    /// `∫_{|e|<1/k} |e|² λ(de)` by quadrature on shells halving towards 0.
    pub fn small_jump_second_moment_quadrature(&self, k: TruncationIndex) -> Result<f64> {
        let top = self
            .support_radius()
            .map_or(k.threshold(), |big| big.min(k.threshold()));
        let mut total = 0.0;
        let mut quiet = 0;
        let mut hi = top;
        for shell in 0..1100 {
            let lo = 0.5 * hi;
            let part = self.radial_integral(k, lo, hi, |r| r * r)?;
            total += part;
            if part.abs() <= 1e-16 * total.abs() {
                quiet += 1;
                if quiet >= 3 && shell >= 8 {
                    return Ok(total);
                }
            } else {
                quiet = 0;
            }
            hi = lo;
        }
        Err(Error::Quadrature {
            measure: self.name(),
            k: k.get(),
            detail: "second moment near the origin does not converge; |e|^2 is not integrable".into(),
        })
    }

    /// `∫_{1/k_high <= |e| < 1/k_low} |e|² λ(de)`.
    pub fn band_second_moment(&self, k_low: TruncationIndex, k_high: TruncationIndex) -> Result<f64> {
        Ok(self.small_jump_second_moment(k_low)? - self.small_jump_second_moment(k_high)?)
    }

    /// Checks `∫(1∧|e|²)λ(de) <= cap` and that `λ(|e| >= 1/k)` keeps growing.
    pub fn admissibility(&self, cap: f64) -> Result<Admissibility> {
        let one = TruncationIndex(1);
        let small = self.small_jump_second_moment(one)?;
        let large = self.truncated_mass(one)?;
        let mut ladder = Vec::new();
        let mut k = 1u32;
        while k <= 1 << 20 {
            ladder.push((k, self.truncated_mass(TruncationIndex(k))?));
            k <<= 2;
        }
        let increasing = ladder.windows(2).all(|w| w[1].1 > w[0].1 || w[0].1 == 0.0 && w[1].1 > 0.0);
        let last = ladder.last().map_or(0.0, |l| l.1);
        Ok(Admissibility {
            small_second_moment: small,
            large_mass: large,
            integrable: (small + large).is_finite() && small + large <= cap,
            infinite_mass: increasing && last > 100.0 * ladder[1].1.max(1e-300),
            mass_ladder: ladder,
        })
    }

    fn shell_bounds(&self, k: TruncationIndex) -> Option<(f64, f64)> {
        let lo = k.threshold();
        let hi = match self.support_radius() {
            Some(big) => big,
            None => self.effective_outer_radius(lo),
        };
        (hi > lo).then_some((lo, hi))
    }

    fn effective_outer_radius(&self, lo: f64) -> f64 {
        match &self.law {
            // Tail beyond R carries a fraction <= 1e-14 of the mass above lo.
            RadialLaw::PowerLaw { alpha, .. } => lo * 1e-14f64.powf(-1.0 / alpha),
            RadialLaw::Table { radii, .. } => *radii.last().unwrap(),
        }
    }

    /// Log-spaced radial shells `[lo, 2lo], [2lo, 4lo], ...` clipped at `hi`.
    fn shells(lo: f64, hi: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut a = lo;
        while a < hi {
            let b = (2.0 * a).min(hi);
            // Avoid a sliver shell at the end.
            let b = if hi / b < 1.05 { hi } else { b };
            out.push((a, b));
            a = b;
        }
        out
    }

    fn radial_integral<F: Fn(f64) -> f64>(&self, k: TruncationIndex, lo: f64, hi: f64, f: F) -> Result<f64> {
        let mut total = 0.0;
        for (a, b) in Self::shells(lo, hi) {
            let res = adaptive(a, b, self.quad.rel_tol, 0.0, self.quad.max_depth, |r| {
                f(r) * self.radial_density(r)
            });
            if !res.converged || !res.value.is_finite() {
                return Err(Error::Quadrature {
                    measure: self.name(),
                    k: k.get(),
                    detail: format!("shell [{a:.3e}, {b:.3e}] error estimate {:.3e}", res.error_estimate),
                });
            }
            total += res.value;
        }
        Ok(total)
    }

    /// Adaptive integral of a vector-valued integrand against `λ_k`.
    ///
    /// The integrand writes its value at mark `e` into `out`. Each radial
    /// shell is refined until the relative tolerance of the measure's
    /// [`QuadSettings`] is met; the direction integral uses a fixed rule.
    pub fn quad_integrate<F>(&self, k: TruncationIndex, n_out: usize, mut integrand: F) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let mut total = vec![0.0; n_out];
        let Some((lo, hi)) = self.shell_bounds(k) else {
            return Ok(total);
        };
        let dirs = DirectionRule::new(self.dim_e)?;
        let mut e = vec![0.0; self.dim_e];
        let mut buf = vec![0.0; n_out];
        let mut radial_fn = |r: f64, out: &mut [f64], abs_only: bool| -> Result<()> {
            let dens = self.radial_density(r);
            for (dir, w) in dirs.iter() {
                for (ei, di) in e.iter_mut().zip(dir) {
                    *ei = r * di;
                }
                buf.iter_mut().for_each(|v| *v = 0.0);
                integrand(&e, &mut buf);
                for (o, v) in out.iter_mut().zip(&buf) {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteIntegrand { node: e.clone() });
                    }
                    *o += w * dens * if abs_only { v.abs() } else { *v };
                }
            }
            Ok(())
        };
        for (a, b) in Self::shells(lo, hi) {
            // Scale for the absolute floor: ∫|f| over the shell on one panel.
            let mut scale = vec![0.0; n_out];
            for (r, w) in GaussLegendre::g16().mapped(a, b) {
                let mut tmp = vec![0.0; n_out];
                radial_fn(r, &mut tmp, true)?;
                for (s, t) in scale.iter_mut().zip(&tmp) {
                    *s += w * t;
                }
            }
            let abs_tol = (self.quad.rel_tol * scale.iter().cloned().fold(0.0, f64::max)).max(self.quad.abs_tol);
            let (part, converged) = adaptive_vec(a, b, n_out, self.quad.rel_tol, abs_tol, self.quad.max_depth, |r, out| {
                radial_fn(r, out, false)
            })?;
            if !converged {
                return Err(Error::Quadrature {
                    measure: self.name(),
                    k: k.get(),
                    detail: format!("integrand not resolved on shell [{a:.3e}, {b:.3e}]"),
                });
            }
            for (t, p) in total.iter_mut().zip(&part) {
                *t += p;
            }
        }
        Ok(total)
    }

    /// Fixed product rule for `λ_k`: 16 Gauss points per radial shell times
    /// the direction rule. Used on hot paths where the same measure is
    /// integrated against many smooth integrands.
    pub fn rule(&self, k: TruncationIndex) -> Result<QuadratureRule> {
        let mut rule = QuadratureRule {
            dim_e: self.dim_e,
            nodes: Vec::new(),
            weights: Vec::new(),
        };
        let Some((lo, hi)) = self.shell_bounds(k) else {
            return Ok(rule);
        };
        let dirs = DirectionRule::new(self.dim_e)?;
        for (a, b) in Self::shells(lo, hi) {
            for (r, w) in GaussLegendre::g16().mapped(a, b) {
                let dens = self.radial_density(r);
                for (dir, wd) in dirs.iter() {
                    rule.nodes.extend(dir.iter().map(|d| r * d));
                    rule.weights.push(w * wd * dens);
                }
            }
        }
        Ok(rule)
    }

    pub fn sampler(&self, k: TruncationIndex) -> Result<JumpSampler> {
        let mass = self.truncated_mass(k)?;
        let radial = if mass <= 0.0 {
            RadialSampler::Empty
        } else {
            match &self.law {
                RadialLaw::PowerLaw { alpha, radius, .. } => RadialSampler::PowerLaw {
                    alpha: *alpha,
                    inner: k.threshold().powf(-alpha),
                    outer: radius.map_or(0.0, |r| r.powf(-alpha)),
                },
                RadialLaw::Table { .. } => {
                    let (lo, hi) = self.shell_bounds(k).expect("positive mass implies a shell");
                    self.tabulate_radial_cdf(k, lo, hi)?
                }
            }
        };
        Ok(JumpSampler {
            k,
            dim_e: self.dim_e,
            mass,
            radial,
        })
    }

    fn tabulate_radial_cdf(&self, k: TruncationIndex, lo: f64, hi: f64) -> Result<RadialSampler> {
        const PER_SHELL: usize = 64;
        let mut log_r = vec![lo.ln()];
        let mut cdf = vec![0.0];
        let rule = GaussLegendre::new(8);
        for (a, b) in Self::shells(lo, hi) {
            let (la, lb) = (a.ln(), b.ln());
            for j in 0..PER_SHELL {
                let l0 = la + (lb - la) * j as f64 / PER_SHELL as f64;
                let l1 = la + (lb - la) * (j + 1) as f64 / PER_SHELL as f64;
                let piece = rule.integrate(l0.exp(), l1.exp(), |r| self.radial_density(r));
                cdf.push(cdf.last().unwrap() + piece);
                log_r.push(l1);
            }
        }
        let total = *cdf.last().unwrap();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Quadrature {
                measure: self.name(),
                k: k.get(),
                detail: "tabulated radial law has no mass to sample".into(),
            });
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(RadialSampler::Table { cdf, log_r })
    }

    /// Draws the jumps of `μ_k` on `(0, horizon]`.
    pub fn sample_truncated_jumps(&self, k: TruncationIndex, horizon: f64, stream: &StreamKey) -> Result<JumpTrain> {
        let sampler = self.sampler(k)?;
        let mut rng = stream.rng();
        Ok(sampler.sample(horizon, &mut rng))
    }
}

fn check_dim(dim_e: usize) -> Result<()> {
    if !(1..=3).contains(&dim_e) {
        return Err(Error::config(format!(
            "mark-space dimension {dim_e} unsupported; quadrature is implemented for 1 <= dim <= 3"
        )));
    }
    Ok(())
}

fn table_density(radii: &[f64], density: &[f64], r: f64) -> f64 {
    let n = radii.len();
    if r > radii[n - 1] {
        return 0.0;
    }
    let seg = if r <= radii[0] {
        0
    } else {
        radii.partition_point(|&x| x < r).saturating_sub(1).min(n - 2)
    };
    let (r0, r1) = (radii[seg].ln(), radii[seg + 1].ln());
    let (d0, d1) = (density[seg].ln(), density[seg + 1].ln());
    let slope = (d1 - d0) / (r1 - r0);
    (d0 + slope * (r.ln() - r0)).exp()
}

/// Surface area of the unit sphere in `R^dim`.
pub fn sphere_area(dim: usize) -> f64 {
    use std::f64::consts::PI;
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        d => {
            // S_{d-1} = 2π/(d-2) S_{d-3}
            2.0 * PI / (d as f64 - 2.0) * sphere_area(d - 2)
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fixed quadrature on the unit sphere, weights summing to one.
struct DirectionRule {
    dim: usize,
    dirs: Vec<f64>,
    weights: Vec<f64>,
}

impl DirectionRule {
    fn new(dim: usize) -> Result<Self> {
        use std::f64::consts::PI;
        let (dirs, weights) = match dim {
            1 => (vec![1.0, -1.0], vec![0.5, 0.5]),
            2 => {
                let n = 32;
                let dirs = (0..n)
                    .flat_map(|i| {
                        let a = 2.0 * PI * i as f64 / n as f64;
                        [a.cos(), a.sin()]
                    })
                    .collect();
                (dirs, vec![1.0 / n as f64; n])
            }
            3 => {
                let polar = GaussLegendre::new(12);
                let n_az = 24;
                let mut dirs = Vec::new();
                let mut weights = Vec::new();
                for (c, w) in polar.nodes.iter().zip(&polar.weights) {
                    let s = (1.0 - c * c).sqrt();
                    for j in 0..n_az {
                        let a = 2.0 * PI * j as f64 / n_az as f64;
                        dirs.extend([s * a.cos(), s * a.sin(), *c]);
                        weights.push(0.5 * w / n_az as f64);
                    }
                }
                (dirs, weights)
            }
            _ => return Err(Error::config(format!("no direction rule for dimension {dim}"))),
        };
        Ok(Self { dim, dirs, weights })
    }

    fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.dirs.chunks(self.dim).zip(self.weights.iter().copied())
    }
}

/// Nodes and weights of a fixed rule for `∫ · λ_k(de)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim_e: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.nodes.chunks(self.dim_e.max(1)).zip(self.weights.iter().copied())
    }

    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.iter().map(|(e, w)| w * f(e)).sum()
    }

    /// Same rule with every node below `threshold` in norm removed.
    pub fn restricted(&self, threshold: f64) -> QuadratureRule {
        let mut out = QuadratureRule {
            dim_e: self.dim_e,
            nodes: Vec::new(),
            weights: Vec::new(),
        };
        for (e, w) in self.iter() {
            if norm(e) >= threshold {
                out.nodes.extend_from_slice(e);
                out.weights.push(w);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum RadialSampler {
    Empty,
    /// Inverse of `F(r) = (a^{-α} - r^{-α}) / (a^{-α} - R^{-α})`.
    PowerLaw { alpha: f64, inner: f64, outer: f64 },
    Table { cdf: Vec<f64>, log_r: Vec<f64> },
}

impl RadialSampler {
    fn invert(&self, u: f64) -> f64 {
        match self {
            RadialSampler::Empty => f64::NAN,
            RadialSampler::PowerLaw { alpha, inner, outer } => (inner - u * (inner - outer)).powf(-1.0 / alpha),
            RadialSampler::Table { cdf, log_r } => {
                let i = cdf.partition_point(|&c| c <= u).clamp(1, cdf.len() - 1);
                let (c0, c1) = (cdf[i - 1], cdf[i]);
                let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
                (log_r[i - 1] + t * (log_r[i] - log_r[i - 1])).exp()
            }
        }
    }
}

/// Sampler for the jumps of `μ_k`, built once per `(measure, k)`.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    k: TruncationIndex,
    dim_e: usize,
    mass: f64,
    radial: RadialSampler,
}

impl JumpSampler {
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn k(&self) -> TruncationIndex {
        self.k
    }

    /// Normalized radial CDF of `|e|` under `λ_k / λ_k(E)`, for the power-law
    /// family (used by goodness-of-fit tests).
    pub fn radial_cdf(&self, r: f64) -> Option<f64> {
        match &self.radial {
            RadialSampler::PowerLaw { alpha, inner, outer } => {
                let v = (inner - r.powf(-alpha)) / (inner - outer);
                Some(v.clamp(0.0, 1.0))
            }
            _ => None,
        }
    }

    pub fn sample_mark<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let r = self.radial.invert(u);
        if self.dim_e == 1 {
            out[0] = if rng.random::<bool>() { r } else { -r };
        } else {
            let mut n2 = 0.0;
            while n2 < 1e-24 {
                n2 = 0.0;
                for o in out.iter_mut() {
                    *o = rng.sample(StandardNormal);
                    n2 += *o * *o;
                }
            }
            let s = r / n2.sqrt();
            out.iter_mut().for_each(|o| *o *= s);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, horizon: f64, rng: &mut R) -> JumpTrain {
        let rate = self.mass * horizon;
        let mut train = JumpTrain {
            k: self.k,
            dim_e: self.dim_e,
            times: Vec::new(),
            marks: Vec::new(),
        };
        if !(rate > 0.0) || matches!(self.radial, RadialSampler::Empty) {
            return train;
        }
        let count = Poisson::new(rate).expect("positive finite rate").sample(rng) as usize;
        train.times = (0..count)
            .map(|_| horizon * (1.0 - rng.random::<f64>()))
            .collect();
        train.times.sort_by(f64::total_cmp);
        train.marks = vec![0.0; count * self.dim_e];
        for chunk in train.marks.chunks_mut(self.dim_e) {
            self.sample_mark(rng, chunk);
        }
        train
    }
}

/// Realized jumps of `μ_k` on `(0, horizon]`: increasing times with marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpTrain {
    pub k: TruncationIndex,
    pub dim_e: usize,
    pub times: Vec<f64>,
    pub marks: Vec<f64>,
}

impl JumpTrain {
    pub fn empty(k: TruncationIndex, dim_e: usize) -> Self {
        Self {
            k,
            dim_e,
            times: Vec::new(),
            marks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mark(&self, i: usize) -> &[f64] {
        &self.marks[i * self.dim_e..(i + 1) * self.dim_e]
    }

    /// Indices of jumps with time in `(lo, hi]`.
    pub fn in_window(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = self.times.partition_point(|&t| t <= lo);
        let b = self.times.partition_point(|&t| t <= hi);
        a..b
    }

    /// Keeps only jumps with `|mark| >= 1/k`; the thinned train realizes `μ_k`
    /// whenever `k` is not above this train's level.
    pub fn thinned(&self, k: TruncationIndex) -> JumpTrain {
        let mut out = JumpTrain::empty(k, self.dim_e);
        let thr = k.threshold();
        for i in 0..self.len() {
            if norm(self.mark(i)) >= thr {
                out.times.push(self.times[i]);
                out.marks.extend_from_slice(self.mark(i));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Substream;

    fn k(v: u32) -> TruncationIndex {
        TruncationIndex::new(v).unwrap()
    }

    fn reference() -> LevyMeasure {
        LevyMeasure::reference(0.5).unwrap()
    }

    #[test]
    fn truncated_mass_examples() {
        let m = reference();
        assert!((m.truncated_mass(k(4)).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(m.truncated_mass(k(1)).unwrap(), 0.0);
        assert!((m.truncated_mass(k(16)).unwrap() - 12.0).abs() < 1e-12);
        // quadrature route agrees with the closed form
        assert!((m.truncated_mass_quadrature(k(4)).unwrap() - 4.0).abs() < 1e-7);
        assert!((m.truncated_mass_quadrature(k(16)).unwrap() - 12.0).abs() < 1e-7);
    }

    #[test]
    fn small_jump_moment_examples() {
        let m = reference();
        let v4 = m.small_jump_second_moment(k(4)).unwrap();
        assert!((v4 - 1.0 / 6.0).abs() < 1e-12);
        let v1 = m.small_jump_second_moment(k(1)).unwrap();
        assert!((v1 - 4.0 / 3.0).abs() < 1e-12);
        let q4 = m.small_jump_second_moment_quadrature(k(4)).unwrap();
        assert!((q4 - 1.0 / 6.0).abs() < 1e-9, "{q4}");
        let big = m.small_jump_second_moment(k(1_000_000)).unwrap();
        assert!(big < 1e-8);
    }

    #[test]
    fn zero_index_rejected() {
        assert!(TruncationIndex::new(0).is_err());
    }

    #[test]
    fn quad_integrate_examples() {
        let m = reference();
        let one = m.quad_integrate(k(4), 1, |_, o| o[0] = 1.0).unwrap();
        assert!((one[0] - 4.0).abs() < 1e-7);
        let odd = m.quad_integrate(k(4), 1, |e, o| o[0] = e[0]).unwrap();
        assert!(odd[0].abs() < 1e-10);
        let sq = m.quad_integrate(k(4), 1, |e, o| o[0] = e[0] * e[0]).unwrap();
        assert!((sq[0] - 7.0 / 6.0).abs() < 1e-8);
    }

    #[test]
    fn quad_integrate_reports_non_finite_node() {
        let m = reference();
        let err = m
            .quad_integrate(k(4), 1, |e, o| o[0] = if e[0] > 0.5 { f64::NAN } else { 1.0 })
            .unwrap_err();
        match err {
            Error::NonFiniteIntegrand { node } => assert!(node[0] > 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shell_plus_small_moment_gives_full_second_moment() {
        let m = reference();
        for kk in [1, 2, 4, 8, 32] {
            let shell = m.quad_integrate(k(kk), 1, |e, o| o[0] = e[0] * e[0]).unwrap()[0];
            let small = m.small_jump_second_moment(k(kk)).unwrap();
            assert!((shell + small - 4.0 / 3.0).abs() < 1e-8, "k={kk}");
        }
    }

    #[test]
    fn fixed_rule_matches_closed_forms() {
        let m = reference();
        let rule = m.rule(k(8)).unwrap();
        let mass = rule.integrate(|_| 1.0);
        assert!((mass - m.truncated_mass(k(8)).unwrap()).abs() < 1e-10);
        let sq = rule.integrate(|e| e[0] * e[0]);
        let expect = 4.0 / 3.0 - m.small_jump_second_moment(k(8)).unwrap();
        assert!((sq - expect).abs() < 1e-10);
        let restricted = rule.restricted(0.25);
        assert!((restricted.integrate(|_| 1.0) - 4.0).abs() < 1e-10);
    }

    #[test]
    fn admissibility_of_reference() {
        let a = reference().admissibility(10.0).unwrap();
        assert!(a.integrable && a.infinite_mass);
        assert!((a.small_second_moment - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.large_mass, 0.0);
    }

    #[test]
    fn table_matches_power_law() {
        // Tabulating the exact reference density reproduces its moments.
        let radii: Vec<f64> = (0..=20).map(|i| 10f64.powf(-4.0 + 0.2 * i as f64)).collect();
        let dens: Vec<f64> = radii.iter().map(|r| 2.0 * r.powf(-1.5)).collect();
        let t = LevyMeasure::table(radii, dens, 1).unwrap();
        assert!((t.truncated_mass(k(4)).unwrap() - 4.0).abs() < 1e-7);
        assert!((t.small_jump_second_moment(k(4)).unwrap() - 1.0 / 6.0).abs() < 1e-8);
    }

    #[test]
    fn table_rejects_bad_density() {
        assert!(LevyMeasure::table(vec![0.1, 1.0], vec![1.0, -1.0], 1).is_err());
        assert!(LevyMeasure::table(vec![1.0, 0.1], vec![1.0, 1.0], 1).is_err());
    }

    #[test]
    fn non_integrable_table_second_moment_errors() {
        // density ~ r^{-4}: r^2 density not integrable at 0
        let t = LevyMeasure::table(vec![0.1, 1.0], vec![1e4, 1.0], 1).unwrap();
        assert!(matches!(
            t.small_jump_second_moment(k(2)),
            Err(Error::Quadrature { .. })
        ));
    }

    #[test]
    fn empty_train_when_threshold_exceeds_support() {
        let m = reference();
        let train = m
            .sample_truncated_jumps(k(1), 1.0, &StreamKey::new(1, Substream::Jumps, 0))
            .unwrap();
        assert!(train.is_empty());
    }

    #[test]
    fn train_marks_respect_threshold_and_sorted_times() {
        let m = reference();
        let s = m.sampler(k(8)).unwrap();
        let mut rng = StreamKey::new(3, Substream::Jumps, 0).rng();
        for _ in 0..200 {
            let t = s.sample(2.0, &mut rng);
            assert!(t.times.windows(2).all(|w| w[0] < w[1]));
            assert!(t.times.iter().all(|&x| x > 0.0 && x <= 2.0));
            assert!((0..t.len()).all(|i| t.mark(i)[0].abs() >= 0.125 && t.mark(i)[0].abs() <= 1.0));
        }
    }

    #[test]
    fn thinning_keeps_large_marks() {
        let m = reference();
        let s = m.sampler(k(16)).unwrap();
        let mut rng = StreamKey::new(5, Substream::Jumps, 0).rng();
        let t = s.sample(5.0, &mut rng);
        let th = t.thinned(k(4));
        assert!(th.len() <= t.len());
        assert!((0..th.len()).all(|i| th.mark(i)[0].abs() >= 0.25));
        let n_big = (0..t.len()).filter(|&i| t.mark(i)[0].abs() >= 0.25).count();
        assert_eq!(th.len(), n_big);
    }

    #[test]
    fn two_dimensional_measure_moments() {
        let m = LevyMeasure::power_law(0.5, 1.0, Some(1.0), 2).unwrap();
        let mass = m.truncated_mass(k(4)).unwrap();
        let q = m.quad_integrate(k(4), 1, |_, o| o[0] = 1.0).unwrap()[0];
        assert!((mass - q).abs() / mass < 1e-8);
        let odd = m.quad_integrate(k(4), 2, |e, o| o.copy_from_slice(e)).unwrap();
        assert!(odd.iter().all(|v| v.abs() < 1e-10));
    }
}
