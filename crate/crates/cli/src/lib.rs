//! Command implementations behind the `fusebox` binary: pseudo-box generation,
//! self-evolution with a replayed detector, AP evaluation and synthetic scenes.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod synth;

use fusebox_core::io::IoError;

pub use config::PipelineConfig;
pub use eval::{evaluate_ap, EvalParams, EvalReport, IouMode};
pub use pipeline::{cmd_evolve, cmd_generate, Manifest};
pub use synth::{cmd_synth, SceneSpec};

/// Command failure. Input problems exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("frame {frame}: {source}")]
    Frame { frame: String, source: IoError },
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Frame { .. } | CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}
