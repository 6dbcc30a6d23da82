use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("no traffic: no vehicle entered the network")]
    NoTraffic,
    #[error("episode log: {0}")]
    Log(String),
    #[error("io: {0}")]
    Io(String),
}
