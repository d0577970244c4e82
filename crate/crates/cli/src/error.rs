use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] sar_core::Error),
}

impl CliError {
    /// 3 for numeric failures during training, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(sar_core::Error::Numeric(_)) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}
