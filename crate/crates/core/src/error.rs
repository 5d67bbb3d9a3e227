use thiserror::Error;

use crate::kernel::EntityId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("duplicate entity name `{0}`")]
    DuplicateName(String),
    #[error("invalid delay {0}: delays must be finite and non-negative")]
    InvalidDelay(f64),
    #[error("entity `{name}` exceeded its step budget of {budget} resumptions")]
    RunawayEntity { name: String, budget: u64 },
    #[error("invalid transfer rate {0}: baud rate must be positive")]
    InvalidRate(f64),
    #[error("invalid resource: {0}")]
    InvalidResource(String),
    #[error("no gridlets in execution")]
    NoWork,
    #[error("no free processing element")]
    NoFreePe,
    #[error("protocol error at {entity:?}: {message}")]
    Protocol { entity: Option<EntityId>, message: String },
    #[error("factor out of range: {0}")]
    InvalidFactor(String),
    #[error("invalid MIPS rating {0}")]
    InvalidRating(f64),
    #[error("no resources available")]
    NoResources,
    #[error("jobs cannot be placed within deadline {0}")]
    InfeasibleDeadline(f64),
    #[error("accumulator is empty")]
    EmptyAccumulator,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn protocol(entity: EntityId, message: impl Into<String>) -> Self {
        Error::Protocol {
            entity: Some(entity),
            message: message.into(),
        }
    }
}
