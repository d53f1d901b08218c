//! The model coefficient bundle `(b, σ, β, γ^i, g^i, h^(i))`, its declared
//! moduli, assumption validators and the effective driver
//! `f^(i)(t,x,y,z,ζ) = h^(i)(t,x,y,z,∫γ^i ζ dλ_k)`.

mod mao;
mod registry;
mod validate;

pub use mao::{bihari_envelope, mao_distance_test, one_sided_mao_test, ConcaveModulus, ModulusKind, PointPair};
pub use registry::{Diffusion, Drift, Driver, FnSpec, JumpCoefficient, MarkWeight, Terminal};
pub use validate::{validate_assumptions, SamplePlan};

pub(crate) use mao::mao_bound;

use serde::{Deserialize, Serialize};

use crate::levy::{LevyMeasure, QuadratureRule, TruncationIndex};
use crate::{Error, Result};

/// Problem dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// State dimension of `X`.
    pub state: usize,
    /// Brownian dimension `d`.
    pub brownian: usize,
    /// Number of equations `m`.
    pub equations: usize,
    /// Mark dimension `ℓ`.
    pub marks: usize,
}

impl Dims {
    pub fn scalar() -> Self {
        Self {
            state: 1,
            brownian: 1,
            equations: 1,
            marks: 1,
        }
    }
}

/// Declared moduli for the Mao condition of each coefficient, all of the
/// same order `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientModuli {
    pub order: f64,
    pub drift: ConcaveModulus,
    pub diffusion: ConcaveModulus,
    pub jump: ConcaveModulus,
    pub mark_weight: ConcaveModulus,
    pub terminal: ConcaveModulus,
    pub driver: ConcaveModulus,
}

impl CoefficientModuli {
    /// Every coefficient declared Lipschitz with constant `l` at order `p`.
    pub fn lipschitz(l: f64, p: f64) -> Self {
        let m = ConcaveModulus::lipschitz(l, p);
        Self {
            order: p,
            drift: m.clone(),
            diffusion: m.clone(),
            jump: m.clone(),
            mark_weight: m.clone(),
            terminal: m.clone(),
            driver: m,
        }
    }

    pub fn named(&self) -> [(&'static str, &ConcaveModulus); 6] {
        [
            ("drift", &self.drift),
            ("diffusion", &self.diffusion),
            ("jump", &self.jump),
            ("mark weight", &self.mark_weight),
            ("terminal", &self.terminal),
            ("driver", &self.driver),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCoefficients {
    pub dims: Dims,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub jump: JumpCoefficient,
    /// `γ^i`, one per equation.
    pub mark_weights: Vec<MarkWeight>,
    /// `g^i`, one per equation.
    pub terminals: Vec<Terminal>,
    /// `h^(i)`, one per equation.
    pub drivers: Vec<Driver>,
    pub moduli: CoefficientModuli,
    /// The constant `C` of the jump bounds and of the driver Lipschitz bound.
    pub lipschitz: f64,
    pub horizon: f64,
}

impl ModelCoefficients {
    /// Scalar model (`k_x = d = m = ℓ = 1`) with `γ(e) = |e|`, Lipschitz
    /// moduli of constant `lipschitz` and horizon 1.
    pub fn scalar(drift: Drift, diffusion: Diffusion, jump: JumpCoefficient, terminal: Terminal, driver: Driver) -> Self {
        Self {
            dims: Dims::scalar(),
            drift,
            diffusion,
            jump,
            mark_weights: vec![MarkWeight::Norm { scale: 1.0 }],
            terminals: vec![terminal],
            drivers: vec![driver],
            moduli: CoefficientModuli::lipschitz(1.0, 2.0),
            lipschitz: 1.0,
            horizon: 1.0,
        }
    }

    pub fn with_moduli(mut self, moduli: CoefficientModuli) -> Self {
        self.moduli = moduli;
        self
    }

    pub fn with_lipschitz(mut self, c: f64) -> Self {
        self.lipschitz = c;
        self
    }

    pub fn with_horizon(mut self, t: f64) -> Self {
        self.horizon = t;
        self
    }

    pub fn with_mark_weights(mut self, w: Vec<MarkWeight>) -> Self {
        self.mark_weights = w;
        self
    }

    /// Checks that every block agrees with `dims`.
    pub fn check_dims(&self) -> Result<()> {
        let d = self.dims;
        let mut problems = Vec::new();
        if d.state == 0 || d.brownian == 0 || d.equations == 0 || d.marks == 0 {
            problems.push("all dimensions must be positive".to_string());
        }
        let per_eq = [
            ("mark weights", self.mark_weights.len()),
            ("terminals", self.terminals.len()),
            ("drivers", self.drivers.len()),
        ];
        for (name, n) in per_eq {
            if n != d.equations {
                problems.push(format!("{name}: {n} entries for {} equations", d.equations));
            }
        }
        if matches!(self.jump, JumpCoefficient::Linear { .. } | JumpCoefficient::StateScaled { .. })
            && d.marks != d.state
        {
            problems.push(format!(
                "jump coefficient `{}` needs mark dimension {} to equal state dimension {}",
                self.jump.to_spec().name,
                d.marks,
                d.state
            ));
        }
        for (i, h) in self.drivers.iter().enumerate() {
            if let Driver::Linear { coupling, .. } = h {
                if coupling.len() != d.equations {
                    problems.push(format!("driver {i}: coupling has {} entries", coupling.len()));
                }
            }
        }
        if !(self.horizon > 0.0) {
            problems.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn b(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.drift.eval(t, x, out);
    }

    /// `σ(t, x)` as a row-major `state × brownian` matrix.
    pub fn sigma(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.diffusion.eval(t, x, self.dims.brownian, out);
    }

    pub fn beta(&self, t: f64, x: &[f64], e: &[f64], out: &mut [f64]) {
        self.jump.eval(t, x, e, out);
    }

    pub fn gamma(&self, i: usize, t: f64, x: &[f64], e: &[f64]) -> f64 {
        self.mark_weights[i].eval(t, x, e)
    }

    pub fn g(&self, i: usize, x: &[f64]) -> f64 {
        self.terminals[i].eval(x)
    }

    pub fn h(&self, i: usize, t: f64, x: &[f64], y: &[f64], z: &[f64], q: f64) -> f64 {
        self.drivers[i].eval(i, t, x, y, z, q)
    }

    /// Whether any equation's driver reads its nonlocal argument.
    pub fn needs_nonlocal(&self) -> bool {
        self.drivers.iter().zip(&self.mark_weights).any(|(h, g)| h.depends_on_q() && !g.is_zero())
    }

    /// `h^(i)(t, x, y, z, ∫ γ^i(t,x,e) ζ(e) λ_k(de))`, the integral by
    /// adaptive quadrature.
    #[allow(clippy::too_many_arguments)]
    pub fn effective_driver<Z>(
        &self,
        measure: &LevyMeasure,
        i: usize,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zeta: Z,
        k: TruncationIndex,
    ) -> Result<f64>
    where
        Z: Fn(&[f64]) -> f64,
    {
        let q = if self.drivers[i].depends_on_q() && !self.mark_weights[i].is_zero() {
            measure.quad_integrate(k, 1, |e, out| out[0] = self.gamma(i, t, x, e) * zeta(e))?[0]
        } else {
            0.0
        };
        self.checked_h(i, t, x, y, z, q)
    }

    /// As [`effective_driver`](Self::effective_driver) with a fixed rule for `λ_k`.
    #[allow(clippy::too_many_arguments)]
    pub fn effective_driver_with_rule<Z>(
        &self,
        rule: &QuadratureRule,
        i: usize,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        mut zeta: Z,
    ) -> Result<f64>
    where
        Z: FnMut(&[f64]) -> f64,
    {
        let q = if self.drivers[i].depends_on_q() && !self.mark_weights[i].is_zero() {
            rule.integrate(|e| self.gamma(i, t, x, e) * zeta(e))
        } else {
            0.0
        };
        self.checked_h(i, t, x, y, z, q)
    }

    pub(crate) fn checked_h(&self, i: usize, t: f64, x: &[f64], y: &[f64], z: &[f64], q: f64) -> Result<f64> {
        let v = self.h(i, t, x, y, z, q);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::model(
                format!("driver {i} at t={t}, x={x:?}, y={y:?}, z={z:?}, q={q}"),
                "non-finite value",
            ))
        }
    }
}
