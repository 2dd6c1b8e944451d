use thiserror::Error;

pub type Result<T, E = ColonyError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ColonyError {
    /// Shapes, widths or layer wiring that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data violates a precondition.
    #[error("input error: {0}")]
    Input(String),

    /// An operation was invoked in the wrong state (e.g. optimizer step before gradients).
    #[error("state error: {0}")]
    State(String),

    #[error("address error: {0}")]
    Address(String),

    #[error("marriage error: {0}")]
    Marriage(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("lookup error: unknown agent {0}")]
    Lookup(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Malformed IDX payload; `offset` is the byte position where parsing stopped.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Corrupt or incompatible persisted registry.
    #[error("load error at {position}: {message}")]
    Load { position: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ColonyError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ColonyError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            ColonyError::Config(_) => "config",
            ColonyError::Input(_) => "input",
            ColonyError::State(_) => "state",
            ColonyError::Address(_) => "address",
            ColonyError::Marriage(_) => "marriage",
            ColonyError::Registry(_) => "registry",
            ColonyError::Lookup(_) => "lookup",
            ColonyError::Evaluation(_) => "evaluation",
            ColonyError::Parse { .. } => "parse",
            ColonyError::Load { .. } => "load",
            ColonyError::Numeric(_) => "numeric",
            ColonyError::Io { .. } => "io",
        }
    }
}
