use std::path::PathBuf;

use serde::Serialize;

/// Failures of a command-line run.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] eqspike_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: ErrorBody<'a>,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                eqspike_core::Error::Dimension { .. } => "dimension",
                eqspike_core::Error::NonFinite(_) => "non_finite",
                eqspike_core::Error::Contract(_) => "contract",
                eqspike_core::Error::Input(_) => "input",
                eqspike_core::Error::Config(_) => "config",
                eqspike_core::Error::NonConvergence { .. } => "non_convergence",
                eqspike_core::Error::Training { .. } => "training",
                eqspike_core::Error::UndefinedEfficiency => "undefined_efficiency",
            },
            CliError::Io { .. } => "io",
            CliError::Format { .. } => "format",
            CliError::Config(_) => "config",
            CliError::Check(_) => "check",
        }
    }

    /// Process exit status: 2 for bad invocations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" | "input" | "format" | "io" => 2,
            _ => 1,
        }
    }

    /// One-line machine-readable form for standard error.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorJson {
            error: ErrorBody {
                kind: self.kind(),
                message: self.to_string(),
            },
        })
        .expect("error body serializes")
    }
}
