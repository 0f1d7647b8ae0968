use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] regcache_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration problems, 3 for bad input data, 4 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        use regcache_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.root() {
                E::Config(_) => 2,
                E::Format(_) | E::Load(_) | E::Input(_) | E::Dimension(_) | E::Io { .. } => 3,
                E::Index(_) | E::Contract(_) | E::Search(_) | E::Context { .. } => 4,
            },
        }
    }
}
