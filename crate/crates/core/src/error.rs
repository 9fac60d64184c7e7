use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user input failed. `field` names the offending parameter.
    #[error("{module}: invalid {field}: {reason}")]
    Invalid {
        module: &'static str,
        field: String,
        reason: String,
    },

    #[error("{module}: non-finite state at step {step} ({detail})")]
    NonFinite {
        module: &'static str,
        step: usize,
        detail: String,
    },

    #[error("quadrature did not converge on [{lo}, {hi}] (error estimate {err:.3e})")]
    Quadrature { lo: f64, hi: f64, err: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(module: &'static str, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            module,
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Quadrature { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
