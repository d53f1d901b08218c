use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quadrature did not converge for measure `{measure}` at k={k}: {detail}")]
    Quadrature {
        measure: String,
        k: u32,
        detail: String,
    },

    #[error("non-finite integrand value at node {node:?}")]
    NonFiniteIntegrand { node: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model error at {location}: {detail}")]
    Model { location: String, detail: String },

    #[error("simulation produced a non-finite state on path {path}, step {step}")]
    Simulation { path: usize, step: usize },

    #[error("regression design ill-conditioned at step {step}, equation {equation} (condition number {condition:.3e})")]
    IllConditioned {
        step: usize,
        equation: usize,
        condition: f64,
    },

    #[error("non-finite regression target at step {step}, equation {equation}")]
    NonFiniteTarget { step: usize, equation: usize },

    #[error("comparison envelope: {0}")]
    Envelope(String),

    #[error("scenario validation failed:\n{}", format_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

/// One problem found while validating a scenario file, with the dotted path
/// of the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub path: String,
    pub message: String,
}

impl ValidationIssue {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn model(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Model {
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by inputs rather than by numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::Io(_) | Error::Serde(_)
        )
    }
}
