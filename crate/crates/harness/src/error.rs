use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error("invalid stage {0}, expected 1, 2 or 3")]
    InvalidStage(u8),

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("gradient check failed: max relative error {error:e} > {tolerance:e}")]
    GradientCheckFailed { error: f64, tolerance: f64 },

    #[error(transparent)]
    Core(#[from] dmmimo_core::Error),

    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Stable identifier used in the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::InvalidStage(_) => "invalid_stage",
            HarnessError::MissingCheckpoint(_) => "missing_checkpoint",
            HarnessError::GradientCheckFailed { .. } => "gradient_check_failed",
            HarnessError::Core(dmmimo_core::Error::Diverged { .. }) => "diverged",
            HarnessError::Core(_) => "simulation",
            HarnessError::Io { .. } => "io",
        }
    }

    /// `{"error":{"kind":...,"message":...}}` on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
