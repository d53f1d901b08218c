//! Named built-in coefficient functions.
//!
//! Scenario files refer to coefficients by registry name plus a list of
//! numeric parameters; nothing is loaded at runtime. Each family below
//! converts to and from that `(name, params)` form.

use serde::{Deserialize, Serialize};

use crate::levy::norm;
use crate::{Error, Result};

/// `(name, params)` reference into the registry, as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<f64>,
}

impl FnSpec {
    pub fn new(name: &str, params: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            params: params.to_vec(),
        }
    }
}

fn want(spec: &FnSpec, family: &str, allowed: &[usize]) -> Result<()> {
    if allowed.contains(&spec.params.len()) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{family} `{}` takes {allowed:?} parameters, got {}",
            spec.name,
            spec.params.len()
        )))
    }
}

fn unknown(family: &str, name: &str, known: &[&str]) -> Error {
    Error::config(format!("unknown {family} `{name}` (known: {})", known.join(", ")))
}

fn param_or(spec: &FnSpec, i: usize, default: f64) -> f64 {
    spec.params.get(i).copied().unwrap_or(default)
}

/// Drift `b(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    Zero,
    /// Same constant in every coordinate.
    Constant(f64),
    /// `a x_j + c` coordinatewise.
    Affine { slope: f64, offset: f64 },
    /// `θ (μ - x_j)`
    MeanReverting { rate: f64, mean: f64 },
    /// `a sin(x_j)`
    Sine { amplitude: f64 },
}

impl Drift {
    pub const NAMES: &'static [&'static str] = &["zero", "constant", "affine", "mean-reverting", "sine"];

    pub fn from_spec(spec: &FnSpec) -> Result<Self> {
        Ok(match spec.name.as_str() {
            "zero" => {
                want(spec, "drift", &[0])?;
                Drift::Zero
            }
            "constant" => {
                want(spec, "drift", &[1])?;
                Drift::Constant(spec.params[0])
            }
            "affine" => {
                want(spec, "drift", &[2])?;
                Drift::Affine {
                    slope: spec.params[0],
                    offset: spec.params[1],
                }
            }
            "mean-reverting" => {
                want(spec, "drift", &[1, 2])?;
                Drift::MeanReverting {
                    rate: spec.params[0],
                    mean: param_or(spec, 1, 0.0),
                }
            }
            "sine" => {
                want(spec, "drift", &[1])?;
                Drift::Sine {
                    amplitude: spec.params[0],
                }
            }
            other => return Err(unknown("drift", other, Self::NAMES)),
        })
    }

    pub fn to_spec(&self) -> FnSpec {
        match *self {
            Drift::Zero => FnSpec::new("zero", &[]),
            Drift::Constant(c) => FnSpec::new("constant", &[c]),
            Drift::Affine { slope, offset } => FnSpec::new("affine", &[slope, offset]),
            Drift::MeanReverting { rate, mean } => FnSpec::new("mean-reverting", &[rate, mean]),
            Drift::Sine { amplitude } => FnSpec::new("sine", &[amplitude]),
        }
    }

    pub fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = match *self {
                Drift::Zero => 0.0,
                Drift::Constant(c) => c,
                Drift::Affine { slope, offset } => slope * xi + offset,
                Drift::MeanReverting { rate, mean } => rate * (mean - xi),
                Drift::Sine { amplitude } => amplitude * xi.sin(),
            };
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Drift::Zero)
    }
}

/// Diffusion `σ(t, x)`, a `state × brownian` matrix stored row-major. All
/// families are diagonal: entry `(j, j)` for `j < min(state, brownian)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Diffusion {
    Zero,
    Constant(f64),
    /// `s0 + s1 x_j`
    Affine { base: f64, slope: f64 },
    /// `s0 + s1 sin(x_j)`
    Sine { base: f64, amplitude: f64 },
}

impl Diffusion {
    pub const NAMES: &'static [&'static str] = &["zero", "constant", "affine", "sine"];

    pub fn from_spec(spec: &FnSpec) -> Result<Self> {
        Ok(match spec.name.as_str() {
            "zero" => {
                want(spec, "diffusion", &[0])?;
                Diffusion::Zero
            }
            "constant" => {
                want(spec, "diffusion", &[1])?;
                Diffusion::Constant(spec.params[0])
            }
            "affine" => {
                want(spec, "diffusion", &[2])?;
                Diffusion::Affine {
                    base: spec.params[0],
                    slope: spec.params[1],
                }
            }
            "sine" => {
                want(spec, "diffusion", &[2])?;
                Diffusion::Sine {
                    base: spec.params[0],
                    amplitude: spec.params[1],
                }
            }
            other => return Err(unknown("diffusion", other, Self::NAMES)),
        })
    }

    pub fn to_spec(&self) -> FnSpec {
        match *self {
            Diffusion::Zero => FnSpec::new("zero", &[]),
            Diffusion::Constant(c) => FnSpec::new("constant", &[c]),
            Diffusion::Affine { base, slope } => FnSpec::new("affine", &[base, slope]),
            Diffusion::Sine { base, amplitude } => FnSpec::new("sine", &[base, amplitude]),
        }
    }

    pub fn eval(&self, _t: f64, x: &[f64], brownian: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..x.len().min(brownian) {
            out[j * brownian + j] = match *self {
                Diffusion::Zero => 0.0,
                Diffusion::Constant(c) => c,
                Diffusion::Affine { base, slope } => base + slope * x[j],
                Diffusion::Sine { base, amplitude } => base + amplitude * x[j].sin(),
            };
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Diffusion::Zero)
    }
}

/// Jump coefficient `β(t, x, e)`.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpCoefficient {
    Zero,
    /// `c e`; needs mark dimension equal to state dimension.
    Linear { scale: f64 },
    /// `c |e|` in every coordinate.
    Norm { scale: f64 },
    /// `c (1 + a sin(x_j)) e_j`
    StateScaled { scale: f64, amplitude: f64 },
}

impl JumpCoefficient {
    pub const NAMES: &'static [&'static str] = &["zero", "linear", "norm", "state-scaled"];

    pub fn from_spec(spec: &FnSpec) -> Result<Self> {
        Ok(match spec.name.as_str() {
            "zero" => {
                want(spec, "jump coefficient", &[0])?;
                JumpCoefficient::Zero
            }
            "linear" => {
                want(spec, "jump coefficient", &[0, 1])?;
                JumpCoefficient::Linear {
                    scale: param_or(spec, 0, 1.0),
                }
            }
            "norm" => {
                want(spec, "jump coefficient", &[0, 1])?;
                JumpCoefficient::Norm {
                    scale: param_or(spec, 0, 1.0),
                }
            }
            "state-scaled" => {
                want(spec, "jump coefficient", &[2])?;
                JumpCoefficient::StateScaled {
                    scale: spec.params[0],
                    amplitude: spec.params[1],
                }
            }
            other => return Err(unknown("jump coefficient", other, Self::NAMES)),
        })
    }

    pub fn to_spec(&self) -> FnSpec {
        match *self {
            JumpCoefficient::Zero => FnSpec::new("zero", &[]),
            JumpCoefficient::Linear { scale } => FnSpec::new("linear", &[scale]),
            JumpCoefficient::Norm { scale } => FnSpec::new("norm", &[scale]),
            JumpCoefficient::StateScaled { scale, amplitude } => FnSpec::new("state-scaled", &[scale, amplitude]),
        }
    }

    pub fn eval(&self, _t: f64, x: &[f64], e: &[f64], out: &mut [f64]) {
        match *self {
            JumpCoefficient::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            JumpCoefficient::Linear { scale } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = scale * e.get(j).copied().unwrap_or(0.0);
                }
            }
            JumpCoefficient::Norm { scale } => {
                let r = norm(e);
                out.iter_mut().for_each(|o| *o = scale * r);
            }
            JumpCoefficient::StateScaled { scale, amplitude } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = scale * (1.0 + amplitude * x[j].sin()) * e.get(j).copied().unwrap_or(0.0);
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, JumpCoefficient::Zero)
    }

    /// True when `β` depends on neither `t` nor `x`.
    pub fn is_state_independent(&self) -> bool {
        !matches!(self, JumpCoefficient::StateScaled { .. })
    }
}

/// Scalar jump weight `γ^i(t, x, e)` entering the nonlocal driver argument.
#[derive(Debug, Clone, PartialEq)]
pub enum MarkWeight {
    Zero,
    /// `γ ≡ c`
    Constant(f64),
    /// `c |e|`
    Norm { scale: f64 },
    /// `c |e|²`
    Square { scale: f64 },
    /// `c e_1`
    Linear { scale: f64 },
    /// `c (1 + a sin(x_1)) (1 ∧ |e|)`
    StateScaled { scale: f64, amplitude: f64 },
}

impl MarkWeight {
    pub const NAMES: &'static [&'static str] = &["zero", "constant", "norm", "square", "linear", "state-scaled"];

    pub fn from_spec(spec: &FnSpec) -> Result<Self> {
        Ok(match spec.name.as_str() {
            "zero" => {
                want(spec, "mark weight", &[0])?;
                MarkWeight::Zero
            }
            "constant" | "one" => {
                want(spec, "mark weight", &[0, 1])?;
                MarkWeight::Constant(param_or(spec, 0, 1.0))
            }
            "norm" => {
                want(spec, "mark weight", &[0, 1])?;
                MarkWeight::Norm {
                    scale: param_or(spec, 0, 1.0),
                }
            }
            "square" => {
                want(spec, "mark weight", &[0, 1])?;
                MarkWeight::Square {
                    scale: param_or(spec, 0, 1.0),
                }
            }
            "linear" => {
                want(spec, "mark weight", &[0, 1])?;
                MarkWeight::Linear {
                    scale: param_or(spec, 0, 1.0),
                }
            }
            "state-scaled" => {
                want(spec, "mark weight", &[2])?;
                MarkWeight::StateScaled {
                    scale: spec.params[0],
                    amplitude: spec.params[1],
                }
            }
            other => return Err(unknown("mark weight", other, Self::NAMES)),
        })
    }

    pub fn to_spec(&self) -> FnSpec {
        match *self {
            MarkWeight::Zero => FnSpec::new("zero", &[]),
            MarkWeight::Constant(c) => FnSpec::new("constant", &[c]),
            MarkWeight::Norm { scale } => FnSpec::new("norm", &[scale]),
            MarkWeight::Square { scale } => FnSpec::new("square", &[scale]),
            MarkWeight::Linear { scale } => FnSpec::new("linear", &[scale]),
            MarkWeight::StateScaled { scale, amplitude } => FnSpec::new("state-scaled", &[scale, amplitude]),
        }
    }

    pub fn eval(&self, _t: f64, x: &[f64], e: &[f64]) -> f64 {
        match *self {
            MarkWeight::Zero => 0.0,
            MarkWeight::Constant(c) => c,
            MarkWeight::Norm { scale } => scale * norm(e),
            MarkWeight::Square { scale } => scale * e.iter().map(|v| v * v).sum::<f64>(),
            MarkWeight::Linear { scale } => scale * e[0],
            MarkWeight::StateScaled { scale, amplitude } => {
                scale * (1.0 + amplitude * x[0].sin()) * norm(e).min(1.0)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MarkWeight::Zero)
    }

    /// True when `γ` depends on neither `t` nor `x`.
    pub fn is_state_independent(&self) -> bool {
        !matches!(self, MarkWeight::StateScaled { .. })
    }
}

/// Terminal condition `g^i(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Terminal {
    Constant(f64),
    /// `a Σ x_j + c`
    Linear { slope: f64, offset: f64 },
    /// `a |x|² + c`
    Quadratic { scale: f64, offset: f64 },
    /// `a |x|`
    Abs { scale: f64 },
    /// `sqrt(|x|)`
    SqrtAbs,
    /// `a Σ sin(ω x_j)`
    Sine { amplitude: f64, frequency: f64 },
}

impl Terminal {
    pub const NAMES: &'static [&'static str] = &["constant", "linear", "quadratic", "abs", "sqrt-abs", "sine"];

    pub fn from_spec(spec: &FnSpec) -> Result<Self> {
        Ok(match spec.name.as_str() {
            "constant" => {
                want(spec, "terminal function", &[1])?;
                Terminal::Constant(spec.params[0])
            }
            "linear" => {
                want(spec, "terminal function", &[0, 1, 2])?;
                Terminal::Linear {
                    slope: param_or(spec, 0, 1.0),
                    offset: param_or(spec, 1, 0.0),
                }
            }
            "quadratic" => {
                want(spec, "terminal function", &[0, 1, 2])?;
                Terminal::Quadratic {
                    scale: param_or(spec, 0, 1.0),
                    offset: param_or(spec, 1, 0.0),
                }
            }
            "abs" => {
                want(spec, "terminal function", &[0, 1])?;
                Terminal::Abs {
                    scale: param_or(spec, 0, 1.0),
                }
            }
            "sqrt-abs" => {
                want(spec, "terminal function", &[0])?;
                Terminal::SqrtAbs
            }
            "sine" => {
                want(spec, "terminal function", &[1, 2])?;
                Terminal::Sine {
                    amplitude: spec.params[0],
                    frequency: param_or(spec, 1, 1.0),
                }
            }
            other => return Err(unknown("terminal function", other, Self::NAMES)),
        })
    }

    pub fn to_spec(&self) -> FnSpec {
        match *self {
            Terminal::Constant(c) => FnSpec::new("constant", &[c]),
            Terminal::Linear { slope, offset } => FnSpec::new("linear", &[slope, offset]),
            Terminal::Quadratic { scale, offset } => FnSpec::new("quadratic", &[scale, offset]),
            Terminal::Abs { scale } => FnSpec::new("abs", &[scale]),
            Terminal::SqrtAbs => FnSpec::new("sqrt-abs", &[]),
            Terminal::Sine { amplitude, frequency } => FnSpec::new("sine", &[amplitude, frequency]),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Terminal::Constant(c) => c,
            Terminal::Linear { slope, offset } => slope * x.iter().sum::<f64>() + offset,
            Terminal::Quadratic { scale, offset } => scale * x.iter().map(|v| v * v).sum::<f64>() + offset,
            Terminal::Abs { scale } => scale * norm(x),
            Terminal::SqrtAbs => norm(x).sqrt(),
            Terminal::Sine { amplitude, frequency } => {
                amplitude * x.iter().map(|v| (frequency * v).sin()).sum::<f64>()
            }
        }
    }
}

/// Driver `h^(i)(t, x, y, z, q)` with `y ∈ R^m`, `z ∈ R^d`, `q ∈ R`.
#[derive(Debug, Clone, PartialEq)]
pub enum Driver {
    Zero,
    /// `Σ_j a_j y_j + c_z Σ z + c_q q + c_0`; `coupling[j]` is `a_j`.
    Linear {
        coupling: Vec<f64>,
        z: f64,
        q: f64,
        constant: f64,
    },
    /// `c_y y_i + c_q q` acting on the equation's own component.
    Own { y: f64, q: f64 },
    /// `c q²`; not Lipschitz in `q`.
    QuadraticQ { scale: f64 },
    /// `a sin(y_i) + c_q q`
    SineY { amplitude: f64, q: f64 },
    /// `a sin(x_1) + c y_i`
    Bump { amplitude: f64, y: f64 },
}

impl Driver {
    pub const NAMES: &'static [&'static str] = &["zero", "linear", "own", "quadratic-q", "sine-y", "bump"];

    /// `equations` is the system size `m`, needed to split `linear` params.
    pub fn from_spec(spec: &FnSpec, equations: usize) -> Result<Self> {
        Ok(match spec.name.as_str() {
            "zero" => {
                want(spec, "driver", &[0])?;
                Driver::Zero
            }
            "linear" => {
                want(spec, "driver", &[equations + 3])?;
                Driver::Linear {
                    coupling: spec.params[..equations].to_vec(),
                    z: spec.params[equations],
                    q: spec.params[equations + 1],
                    constant: spec.params[equations + 2],
                }
            }
            "own" => {
                want(spec, "driver", &[1, 2])?;
                Driver::Own {
                    y: spec.params[0],
                    q: param_or(spec, 1, 0.0),
                }
            }
            "quadratic-q" => {
                want(spec, "driver", &[0, 1])?;
                Driver::QuadraticQ {
                    scale: param_or(spec, 0, 1.0),
                }
            }
            "sine-y" => {
                want(spec, "driver", &[1, 2])?;
                Driver::SineY {
                    amplitude: spec.params[0],
                    q: param_or(spec, 1, 0.0),
                }
            }
            "bump" => {
                want(spec, "driver", &[2])?;
                Driver::Bump {
                    amplitude: spec.params[0],
                    y: spec.params[1],
                }
            }
            other => return Err(unknown("driver", other, Self::NAMES)),
        })
    }

    pub fn to_spec(&self) -> FnSpec {
        match self {
            Driver::Zero => FnSpec::new("zero", &[]),
            Driver::Linear {
                coupling,
                z,
                q,
                constant,
            } => {
                let mut p = coupling.clone();
                p.extend([*z, *q, *constant]);
                FnSpec::new("linear", &p)
            }
            Driver::Own { y, q } => FnSpec::new("own", &[*y, *q]),
            Driver::QuadraticQ { scale } => FnSpec::new("quadratic-q", &[*scale]),
            Driver::SineY { amplitude, q } => FnSpec::new("sine-y", &[*amplitude, *q]),
            Driver::Bump { amplitude, y } => FnSpec::new("bump", &[*amplitude, *y]),
        }
    }

    /// Evaluates the driver of equation `i`.
    pub fn eval(&self, i: usize, _t: f64, x: &[f64], y: &[f64], z: &[f64], q: f64) -> f64 {
        match self {
            Driver::Zero => 0.0,
            Driver::Linear {
                coupling,
                z: cz,
                q: cq,
                constant,
            } => {
                coupling.iter().zip(y).map(|(a, v)| a * v).sum::<f64>()
                    + cz * z.iter().sum::<f64>()
                    + cq * q
                    + constant
            }
            Driver::Own { y: cy, q: cq } => cy * y[i] + cq * q,
            Driver::QuadraticQ { scale } => scale * q * q,
            Driver::SineY { amplitude, q: cq } => amplitude * y[i].sin() + cq * q,
            Driver::Bump { amplitude, y: cy } => amplitude * x[0].sin() + cy * y[i],
        }
    }

    pub fn depends_on_q(&self) -> bool {
        match self {
            Driver::Linear { q, .. } | Driver::Own { q, .. } | Driver::SineY { q, .. } => *q != 0.0,
            Driver::QuadraticQ { scale } => *scale != 0.0,
            Driver::Zero | Driver::Bump { .. } => false,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Driver::Zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_round_trip() {
        let drivers = [
            Driver::Zero,
            Driver::Own { y: 0.5, q: 1.0 },
            Driver::Linear {
                coupling: vec![0.1, 0.2],
                z: 0.0,
                q: 1.0,
                constant: 0.3,
            },
        ];
        for d in drivers {
            assert_eq!(Driver::from_spec(&d.to_spec(), 2).unwrap(), d);
        }
        let t = Terminal::Sine {
            amplitude: 1.0,
            frequency: 2.0,
        };
        assert_eq!(Terminal::from_spec(&t.to_spec()).unwrap(), t);
    }

    #[test]
    fn unknown_name_lists_known() {
        let err = Drift::from_spec(&FnSpec::new("warp", &[])).unwrap_err();
        assert!(err.to_string().contains("mean-reverting"));
    }

    #[test]
    fn wrong_arity_rejected() {
        assert!(Terminal::from_spec(&FnSpec::new("constant", &[])).is_err());
        assert!(Driver::from_spec(&FnSpec::new("linear", &[1.0]), 2).is_err());
    }

    #[test]
    fn driver_values() {
        let d = Driver::Own { y: 0.5, q: 1.0 };
        assert_eq!(d.eval(1, 0.0, &[0.0], &[9.0, 2.0], &[0.0], 3.0), 4.0);
        assert!(d.depends_on_q());
        assert!(!Driver::Own { y: 0.5, q: 0.0 }.depends_on_q());
    }
}
