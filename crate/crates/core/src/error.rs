use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A non-finite value appeared; `site` names the primitive or step.
    #[error("numeric error in {site}: {detail}")]
    Numeric { site: String, detail: String },
    /// Not enough data yet (replay buffer warm-up). Retry later.
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("config error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(site: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            site: site.into(),
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            msg: msg.into(),
        }
    }
}
