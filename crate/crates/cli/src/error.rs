use scene_novelty::explain::ExplainError;
use scene_novelty::harness::HarnessError;
use scene_novelty::novelty::NoveltyError;
use scene_novelty::pool_io::PoolIoError;
use scene_novelty::prompt::TemplateError;
use scene_novelty::providers::ProviderError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<PoolIoError> for CliError {
    fn from(e: PoolIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NoveltyError> for CliError {
    fn from(e: NoveltyError) -> Self {
        match e {
            NoveltyError::InvalidTau(_) | NoveltyError::InvalidMinClusterSize => CliError::Config(e.to_string()),
            NoveltyError::Inconsistent(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::EmptyGrid | HarnessError::InvalidGrid | HarnessError::InvalidSpec(_) => CliError::Config(e.to_string()),
            HarnessError::Novelty(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        if e.is_transport() {
            CliError::Transport(e.to_string())
        } else if matches!(e, ProviderError::Config(_)) {
            CliError::Config(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        let msg = format!("[{}] {e}", e.stage());
        match &e {
            ExplainError::Template { .. } | ExplainError::InvalidConsensusK => CliError::Config(msg),
            ExplainError::ThreadPool(_) => CliError::Internal(msg),
            _ => match e.provider_error() {
                Some(p) if p.is_transport() => CliError::Transport(msg),
                Some(ProviderError::Config(_)) => CliError::Config(msg),
                _ => CliError::Data(msg),
            },
        }
    }
}
