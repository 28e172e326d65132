//! Pipeline driver: config parsing, stage orchestration with a resumable
//! manifest, CSV reports, and map rendering.

pub mod config;
pub mod manifest;
pub mod render;
pub mod report;
pub mod stages;

/// Errors that carry a contract exit code: 2 config, 3 missing prerequisite,
/// 4 numeric failure. Everything else exits 1.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs `{needed}` to have run first")]
    Prerequisite { stage: String, needed: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Prerequisite { .. } => 3,
            PipelineError::Numeric(_) => 4,
        }
    }
}

/// Maps an error chain to the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(pe) = cause.downcast_ref::<PipelineError>() {
            return pe.exit_code();
        }
        if cause.downcast_ref::<cfbase_core::error::Error>().is_some() {
            return 4;
        }
    }
    1
}
