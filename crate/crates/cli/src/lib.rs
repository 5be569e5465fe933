//! Experiment orchestration for the aerial-to-ground synthesis pipeline:
//! dataset generation, staged training, sampling, evaluation and the
//! ablation grid. The binary in `main.rs` is a thin argument layer over
//! these functions.

pub mod ablate;
pub mod stages;

use thiserror::Error;

/// Harness-level failures, classified by exit code: validation problems
/// exit 2, missing prerequisites exit 3, everything else exits 1.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("missing prerequisite: {0}")]
    Dependency(String),
    #[error("{0}")]
    Internal(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Dependency(_) => 3,
            HarnessError::Internal(_) => 1,
        }
    }
}

impl From<crossview_core::config::ConfigError> for HarnessError {
    fn from(e: crossview_core::config::ConfigError) -> Self {
        HarnessError::Validation(e.to_string())
    }
}

macro_rules! internal_from {
    ($($ty:ty),+) => {$(
        impl From<$ty> for HarnessError {
            fn from(e: $ty) -> Self {
                HarnessError::Internal(e.to_string())
            }
        }
    )+};
}

internal_from!(
    crossview_core::scene::SceneError,
    crossview_core::codec::CodecError,
    crossview_core::semantic::SemanticError,
    crossview_core::diffusion::DiffusionError,
    crossview_core::metrics::MetricError,
    crossview_core::nn::IoError,
    std::io::Error,
    serde_json::Error
);
