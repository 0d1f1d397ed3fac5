use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("ingestion error in {field}: {message}")]
    Ingest { field: &'static str, message: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("aggregation error from client {client}: {message}")]
    Aggregation { client: usize, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("attack configuration error: {0}")]
    AttackConfig(String),

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_client(self, client: usize) -> Self {
        Error::Client {
            client,
            source: Box::new(self),
        }
    }

    pub fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping client/round context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Client { source, .. } | Error::Round { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::Divergence(_))
    }
}
