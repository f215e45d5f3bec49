use std::fmt;

use serde::Serialize;
use serde_json::json;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Config or input failed validation; exit code 2.
    Validation(Vec<FieldError>),
    /// A run blew past the divergence guard; exit code 3.
    Diverged { seed: u64, message: String },
    /// Summary medians disagree with the raw metrics; exit code 4.
    Inconsistent(Vec<String>),
    Other(anyhow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Validation(vec![FieldError::new(field, message)])
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Inconsistent(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    /// Single-line JSON record written to stderr on failure.
    pub fn record(&self) -> serde_json::Value {
        match self {
            CliError::Validation(fields) => json!({ "error": "validation", "fields": fields }),
            CliError::Diverged { seed, message } => json!({ "error": "diverged", "seed": seed, "message": message }),
            CliError::Inconsistent(problems) => json!({ "error": "inconsistent", "problems": problems }),
            CliError::Other(e) => json!({ "error": "runtime", "message": format!("{e:#}") }),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.record())
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.into())
    }
}

/// Maps core errors raised while running a seed. Divergence keeps its own
/// exit code, argument errors become field errors under `scope`.
pub fn from_core(e: acdc_core::Error, scope: &str, seed: u64) -> CliError {
    use acdc_core::Error as E;
    match e {
        E::Diverged { .. } => CliError::Diverged {
            seed,
            message: e.to_string(),
        },
        E::InvalidArgument { name, reason } => CliError::field(format!("{scope}.{name}"), reason),
        E::InfeasibleSchedule(msg) => CliError::field("schedule", msg),
        other => CliError::Other(anyhow::Error::new(other).context(format!("seed {seed}"))),
    }
}
