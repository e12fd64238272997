use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("missing {what}: {}", .path.display())]
    MissingFile { what: String, path: PathBuf },

    #[error("scenario {scenario}: {source}")]
    Run {
        scenario: String,
        #[source]
        source: exlab_core::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 2 for anything the user can fix in the invocation, 3 for numeric blow-ups.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Config { .. } | HarnessError::MissingFile { .. } => 2,
            HarnessError::Run { source, .. } if source.is_numeric() => 3,
            _ => 1,
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl ToString) -> Self {
        HarnessError::Config { path: path.into(), msg: msg.to_string() }
    }
}

/// Attaches a scenario name to core errors.
pub(crate) trait Context<T> {
    fn ctx(self, scenario: &str) -> Result<T>;
}

impl<T> Context<T> for exlab_core::Result<T> {
    fn ctx(self, scenario: &str) -> Result<T> {
        self.map_err(|source| HarnessError::Run { scenario: scenario.to_string(), source })
    }
}
