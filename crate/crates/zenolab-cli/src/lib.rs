//! Batch experiment runner for the zenolab library: configuration,
//! deterministic seeding, orchestration, and CSV/JSON emission.

// validation guards are written `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod runner;
pub mod tolerances;

use thiserror::Error;

/// Failure surface of the runner, with process exit codes:
/// configuration errors exit 2, numerical failures 3, verification failures 1
/// and I/O problems 4.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("config field {field}: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0} verification check(s) failed")]
    VerifyFailed(usize),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::VerifyFailed(_) => 1,
            RunError::Config { .. } => 2,
            RunError::Numerical(_) => 3,
            RunError::Io(_) => 4,
        }
    }

    /// Machine-readable error record for standard error.
    pub fn to_error_json(&self) -> String {
        let mut obj = serde_json::Map::new();
        let mut inner = serde_json::Map::new();
        inner.insert("code".into(), serde_json::json!(self.exit_code()));
        if let RunError::Config { field, .. } = self {
            inner.insert("field".into(), serde_json::json!(field));
        }
        inner.insert("message".into(), serde_json::json!(self.to_string()));
        obj.insert("error".into(), serde_json::Value::Object(inner));
        serde_json::Value::Object(obj).to_string()
    }
}

macro_rules! numerical_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for RunError {
            fn from(e: $ty) -> Self {
                RunError::Numerical(e.to_string())
            }
        })*
    };
}

numerical_from!(
    zenolab::zenoflow::FlowError,
    zenolab::increments::LawError,
    zenolab::schur::SchurError,
    zenolab::kinetics::KineticsError,
    zenolab::robustness::RobustnessError,
    zenolab::quadform::QuadFormError
);
