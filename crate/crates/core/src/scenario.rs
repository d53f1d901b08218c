//! Scenario files: one TOML document describing a model, its numerics and
//! where reports go.
//!
//! ```toml
//! name = "linear"
//!
//! [measure]
//! kind = "power-law"
//! alpha = 0.5
//!
//! [coefficients]
//! b = { name = "constant", params = [0.1] }
//! sigma = { name = "constant", params = [0.2] }
//! beta = { name = "linear" }
//! gamma = [{ name = "norm" }]
//! g = [{ name = "linear" }]
//! h = [{ name = "zero" }]
//!
//! [start]
//! x0 = [2.0]
//! ```
//!
//! Everything else has defaults. Loading reports every problem found, each
//! with the dotted path of the field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsde::{BasisSpec, Interpolation, SolverOptions, ZMethod};
use crate::coefficients::{
    CoefficientModuli, ConcaveModulus, Diffusion, Dims, Drift, Driver, FnSpec, JumpCoefficient, MarkWeight,
    ModelCoefficients, SamplePlan, Terminal,
};
use crate::levy::{LevyMeasure, QuadSettings, TruncationIndex};
use crate::sde::{InitialState, TimeGrid};
use crate::{Error, Result, ValidationIssue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureConfig {
    /// `scale · |e|^{-ℓ-α}` on `0 < |e| <= radius`.
    PowerLaw {
        alpha: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default = "some_one", skip_serializing_if = "Option::is_none")]
        radius: Option<f64>,
    },
    /// Radial density sampled at increasing radii.
    Table { radii: Vec<f64>, density: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

fn some_one() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsConfig {
    pub state: usize,
    pub brownian: usize,
    pub equations: usize,
    pub marks: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        Self {
            state: 1,
            brownian: 1,
            equations: 1,
            marks: 1,
        }
    }
}

/// A declared modulus: `linear`, `log-linear` or `power` with its
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulusConfig {
    pub kind: String,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
}

impl ModulusConfig {
    fn build(&self) -> std::result::Result<ConcaveModulus, String> {
        match self.kind.as_str() {
            "linear" => Ok(ConcaveModulus::linear(self.scale)),
            "log-linear" => Ok(ConcaveModulus::log_linear(self.scale)),
            "power" => match self.exponent {
                Some(e) if e > 0.0 && e <= 1.0 => Ok(ConcaveModulus::power(self.scale, e)),
                Some(e) => Err(format!("power exponent must lie in (0, 1], got {e}")),
                None => Err("power modulus needs an exponent".into()),
            },
            other => Err(format!("unknown modulus `{other}` (known: linear, log-linear, power)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuliConfig {
    #[serde(default = "two")]
    pub order: f64,
    pub drift: ModulusConfig,
    pub diffusion: ModulusConfig,
    pub jump: ModulusConfig,
    pub mark_weight: ModulusConfig,
    pub terminal: ModulusConfig,
    pub driver: ModulusConfig,
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    pub b: FnSpec,
    pub sigma: FnSpec,
    pub beta: FnSpec,
    /// One per equation.
    pub gamma: Vec<FnSpec>,
    pub g: Vec<FnSpec>,
    pub h: Vec<FnSpec>,
    /// Constant of the jump and driver Lipschitz bounds.
    #[serde(default = "one")]
    pub lipschitz: f64,
    /// Declared Mao moduli; Lipschitz with constant `lipschitz` at order 2
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moduli: Option<ModuliConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t0: f64,
    /// Horizon `T`.
    pub t_end: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t0: 0.0, t_end: 1.0 }
    }
}

/// Either a point `x0` or a box `[lo, hi]` of starting states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct StartConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Pass threshold for the out-of-sample BSDE residual RMS.
    pub residual_rms: f64,
    /// Pass threshold for `|u(T, x) - g(x)|`.
    pub terminal_fit: f64,
    /// Pass threshold for interior viscosity residuals.
    pub viscosity: f64,
    pub quad_rel: f64,
    pub quad_abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual_rms: 0.05,
            terminal_fit: 1e-6,
            viscosity: 5e-2,
            quad_rel: 1e-8,
            quad_abs: 1e-13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub basis: BasisSpec,
    pub k: u32,
    /// Truncation ladder for `ladder` runs.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ladder: Vec<u32>,
    pub seed: u64,
    pub control_variates: bool,
    pub z_method: ZMethod,
    pub interpolation: Interpolation,
    /// Coupled replicates per ladder run.
    pub replicates: usize,
    pub tolerances: Tolerances,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            n_paths: 10_000,
            basis: BasisSpec::default(),
            k: 8,
            ladder: Vec::new(),
            seed: 0,
            control_variates: false,
            z_method: ZMethod::Regression,
            interpolation: Interpolation::Nearest,
            replicates: 8,
            tolerances: Tolerances::default(),
        }
    }
}

/// Sampling plan of the assumption validators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub pairs: usize,
    pub lo: f64,
    pub hi: f64,
    pub measure_cap: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        let p = SamplePlan::default();
        Self {
            pairs: p.pairs,
            lo: p.lo,
            hi: p.hi,
            measure_cap: p.measure_cap,
        }
    }
}

/// Probe points for viscosity and continuity checks; derived from the
/// start when empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: String,
    /// Any of `csv`, `json`.
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec!["csv".into(), "json".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub measure: MeasureConfig,
    #[serde(default)]
    pub dims: DimsConfig,
    pub coefficients: CoefficientConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub start: StartConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(vec![ValidationIssue::new(path.display().to_string(), e.to_string())]))?;
    parse_scenario(&text)
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| Error::Validation(vec![ValidationIssue::new("<file>", e.to_string())]))?;
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(issues))
    }
}

impl ScenarioConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Every problem with the configuration.
    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        let mut issue = |path: &str, msg: String| out.push(ValidationIssue::new(path, msg));
        let d = self.dims;
        for (name, v) in [
            ("state", d.state),
            ("brownian", d.brownian),
            ("equations", d.equations),
            ("marks", d.marks),
        ] {
            if v == 0 {
                issue(&format!("dims.{name}"), "must be at least 1".into());
            }
        }
        if let Err(e) = self.measure() {
            issue("measure", e.to_string());
        }

        let c = &self.coefficients;
        if let Err(e) = Drift::from_spec(&c.b) {
            issue("coefficients.b", e.to_string());
        }
        if let Err(e) = Diffusion::from_spec(&c.sigma) {
            issue("coefficients.sigma", e.to_string());
        }
        match JumpCoefficient::from_spec(&c.beta) {
            Err(e) => issue("coefficients.beta", e.to_string()),
            Ok(j) => {
                if matches!(j, JumpCoefficient::Linear { .. } | JumpCoefficient::StateScaled { .. })
                    && d.marks != d.state
                {
                    issue(
                        "coefficients.beta",
                        format!("dimension mismatch: `{}` needs dims.marks = dims.state", c.beta.name),
                    );
                }
            }
        }
        let per_eq: [(&str, &Vec<FnSpec>); 3] = [("gamma", &c.gamma), ("g", &c.g), ("h", &c.h)];
        for (block, specs) in per_eq {
            let path = format!("coefficients.{block}");
            if specs.len() != d.equations {
                issue(
                    &path,
                    format!(
                        "dimension mismatch: block `{block}` has {} entries, dims.equations = {}",
                        specs.len(),
                        d.equations
                    ),
                );
            }
            for (i, s) in specs.iter().enumerate() {
                let res = match block {
                    "gamma" => MarkWeight::from_spec(s).map(|_| ()),
                    "g" => Terminal::from_spec(s).map(|_| ()),
                    _ => Driver::from_spec(s, d.equations).map(|_| ()),
                };
                if let Err(e) = res {
                    issue(&format!("{path}[{i}]"), e.to_string());
                }
            }
        }
        if !(c.lipschitz >= 0.0 && c.lipschitz.is_finite()) {
            issue("coefficients.lipschitz", format!("must be finite and non-negative, got {}", c.lipschitz));
        }
        if let Some(m) = &c.moduli {
            if !(m.order >= 2.0) {
                issue("coefficients.moduli.order", format!("must be at least 2, got {}", m.order));
            }
            for (name, spec) in [
                ("drift", &m.drift),
                ("diffusion", &m.diffusion),
                ("jump", &m.jump),
                ("mark_weight", &m.mark_weight),
                ("terminal", &m.terminal),
                ("driver", &m.driver),
            ] {
                if let Err(e) = spec.build() {
                    issue(&format!("coefficients.moduli.{name}"), e);
                }
            }
        }

        let t = self.time;
        if !(t.t_end > t.t0) {
            issue("time.t_end", format!("T = {} must exceed t0 = {}", t.t_end, t.t0));
        }
        let s = &self.start;
        match (&s.x0, &s.lo, &s.hi) {
            (Some(x), None, None) => {
                if x.len() != d.state {
                    issue("start.x0", format!("dimension mismatch: {} entries, dims.state = {}", x.len(), d.state));
                }
            }
            (None, Some(lo), Some(hi)) => {
                if lo.len() != d.state || hi.len() != d.state {
                    issue("start", format!("dimension mismatch: lo/hi need {} entries", d.state));
                } else if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    issue("start", "need lo < hi in every coordinate".into());
                }
            }
            _ => issue("start", "give either x0 or both lo and hi".into()),
        }

        let n = &self.numerics;
        if n.n_steps == 0 {
            issue("numerics.n_steps", "must be at least 1".into());
        }
        if n.n_paths == 0 {
            issue("numerics.n_paths", "must be at least 1".into());
        }
        if n.k == 0 {
            issue("numerics.k", "must be at least 1".into());
        }
        if n.ladder.contains(&0) {
            issue("numerics.ladder", "levels must be at least 1".into());
        }
        if n.ladder.windows(2).any(|w| w[0] >= w[1]) {
            issue("numerics.ladder", "ladder not strictly increasing".into());
        }
        match n.basis {
            BasisSpec::PiecewiseLinear { cells: 0 } => issue("numerics.basis.cells", "must be at least 1".into()),
            BasisSpec::Polynomial { degree } if degree > 8 => {
                issue("numerics.basis.degree", format!("at most 8 supported, got {degree}"))
            }
            _ => {}
        }
        if let ZMethod::FiniteDifference { step } = n.z_method {
            if !(step > 0.0) {
                issue("numerics.z_method.step", format!("must be positive, got {step}"));
            }
        }
        let tol = n.tolerances;
        for (name, v) in [
            ("residual_rms", tol.residual_rms),
            ("terminal_fit", tol.terminal_fit),
            ("viscosity", tol.viscosity),
            ("quad_rel", tol.quad_rel),
            ("quad_abs", tol.quad_abs),
        ] {
            if !(v > 0.0) {
                issue(&format!("numerics.tolerances.{name}"), format!("must be positive, got {v}"));
            }
        }

        let v = self.validation;
        if v.pairs == 0 {
            issue("validation.pairs", "must be at least 1".into());
        }
        if !(v.lo < v.hi) {
            issue("validation", "need lo < hi".into());
        }
        for (i, p) in self.probes.points.iter().enumerate() {
            if p.len() != d.state {
                issue(&format!("probes.points[{i}]"), format!("dimension mismatch: {} entries", p.len()));
            }
        }
        for (i, &pt) in self.probes.times.iter().enumerate() {
            if !(pt >= t.t0 && pt <= t.t_end) {
                issue(&format!("probes.times[{i}]"), format!("{pt} outside [t0, T]"));
            }
        }
        for (i, f) in self.output.formats.iter().enumerate() {
            if f != "csv" && f != "json" {
                issue(&format!("output.formats[{i}]"), format!("unknown format `{f}` (known: csv, json)"));
            }
        }
        out
    }

    pub fn measure(&self) -> Result<LevyMeasure> {
        let m = match &self.measure {
            MeasureConfig::PowerLaw { alpha, scale, radius } => {
                LevyMeasure::power_law(*alpha, *scale, *radius, self.dims.marks)?
            }
            MeasureConfig::Table { radii, density } => {
                LevyMeasure::table(radii.clone(), density.clone(), self.dims.marks)?
            }
        };
        let base = QuadSettings::default();
        Ok(m.with_quad_settings(QuadSettings {
            rel_tol: self.numerics.tolerances.quad_rel,
            abs_tol: self.numerics.tolerances.quad_abs,
            ..base
        }))
    }

    pub fn model(&self) -> Result<ModelCoefficients> {
        let c = &self.coefficients;
        let d = self.dims;
        let moduli = match &c.moduli {
            None => CoefficientModuli::lipschitz(c.lipschitz, 2.0),
            Some(m) => {
                let b = |s: &ModulusConfig| s.build().map_err(Error::config);
                CoefficientModuli {
                    order: m.order,
                    drift: b(&m.drift)?,
                    diffusion: b(&m.diffusion)?,
                    jump: b(&m.jump)?,
                    mark_weight: b(&m.mark_weight)?,
                    terminal: b(&m.terminal)?,
                    driver: b(&m.driver)?,
                }
            }
        };
        let model = ModelCoefficients {
            dims: Dims {
                state: d.state,
                brownian: d.brownian,
                equations: d.equations,
                marks: d.marks,
            },
            drift: Drift::from_spec(&c.b)?,
            diffusion: Diffusion::from_spec(&c.sigma)?,
            jump: JumpCoefficient::from_spec(&c.beta)?,
            mark_weights: c.gamma.iter().map(MarkWeight::from_spec).collect::<Result<_>>()?,
            terminals: c.g.iter().map(Terminal::from_spec).collect::<Result<_>>()?,
            drivers: c.h.iter().map(|s| Driver::from_spec(s, d.equations)).collect::<Result<_>>()?,
            moduli,
            lipschitz: c.lipschitz,
            horizon: self.time.t_end - self.time.t0,
        };
        model.check_dims()?;
        Ok(model)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.t0, self.time.t_end, self.numerics.n_steps)
    }

    pub fn initial_state(&self) -> Result<InitialState> {
        match (&self.start.x0, &self.start.lo, &self.start.hi) {
            (Some(x), _, _) => Ok(InitialState::Point(x.clone())),
            (None, Some(lo), Some(hi)) => Ok(InitialState::Dispersed {
                lo: lo.clone(),
                hi: hi.clone(),
            }),
            _ => Err(Error::config("start needs x0 or lo and hi")),
        }
    }

    pub fn truncation(&self) -> Result<TruncationIndex> {
        TruncationIndex::new(self.numerics.k)
    }

    pub fn ladder(&self) -> Result<Vec<TruncationIndex>> {
        self.numerics.ladder.iter().map(|&k| TruncationIndex::new(k)).collect()
    }

    pub fn solver_options(&self) -> SolverOptions {
        let n = &self.numerics;
        SolverOptions {
            basis: n.basis,
            control_variates: n.control_variates,
            z_method: n.z_method,
            interpolation: n.interpolation,
            ..SolverOptions::default()
        }
    }

    pub fn sample_plan(&self) -> SamplePlan {
        let v = self.validation;
        SamplePlan {
            pairs: v.pairs,
            lo: v.lo,
            hi: v.hi,
            seed: self.numerics.seed,
            measure_cap: v.measure_cap,
        }
    }

    /// Box covered by the start: the point itself or `[lo, hi]`.
    pub fn start_box(&self) -> (Vec<f64>, Vec<f64>) {
        match (&self.start.x0, &self.start.lo, &self.start.hi) {
            (Some(x), _, _) => (x.clone(), x.clone()),
            (None, Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
            _ => (vec![0.0; self.dims.state], vec![0.0; self.dims.state]),
        }
    }

    /// Probe points, or nine points across the middle of the start box
    /// (a unit box around a point start) along the diagonal.
    pub fn probe_points(&self) -> Vec<Vec<f64>> {
        if !self.probes.points.is_empty() {
            return self.probes.points.clone();
        }
        let (lo, hi) = self.start_box();
        let (lo, hi): (Vec<f64>, Vec<f64>) = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| {
                if a == b {
                    (a - 0.5, b + 0.5)
                } else {
                    let w = b - a;
                    (a + 0.25 * w, b - 0.25 * w)
                }
            })
            .unzip();
        (0..9)
            .map(|s| {
                let f = s as f64 / 8.0;
                lo.iter().zip(&hi).map(|(a, b)| a + f * (b - a)).collect()
            })
            .collect()
    }

    /// Probe times, or five interior grid nodes.
    pub fn probe_times(&self) -> Vec<f64> {
        if !self.probes.times.is_empty() {
            return self.probes.times.clone();
        }
        let (t0, t1) = (self.time.t0, self.time.t_end);
        [0.2, 0.35, 0.5, 0.65, 0.8].iter().map(|f| t0 + f * (t1 - t0)).collect()
    }
}
