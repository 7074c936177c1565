use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("seed {seed}, stage {stage}: {source}")]
    Stage {
        seed: u64,
        stage: &'static str,
        #[source]
        source: partial_gdro::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {path}: {message}", path = path.display())]
    Schema { path: PathBuf, message: String },

    #[error("{0}")]
    Core(#[from] partial_gdro::Error),

    #[error("{0} check(s) failed")]
    Violations(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Violations(_) => 4,
            _ => 3,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, seed: u64, stage: &'static str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for partial_gdro::Result<T> {
    fn stage(self, seed: u64, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { seed, stage, source })
    }
}
