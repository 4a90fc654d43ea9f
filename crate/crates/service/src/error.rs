use groupchat_core::model::Violation;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown session token")]
    UnknownSession,
    #[error("session expired: the run is {0}")]
    Expired(&'static str),
    #[error("invalid story: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidStory(Vec<Violation>),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("rejected: {0}")]
    Validation(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status_code(&self) -> u16 {
        match self {
            ServiceError::UnknownRun(_) | ServiceError::UnknownSession => 404,
            ServiceError::Expired(_) => 410,
            ServiceError::InvalidStory(_) | ServiceError::Validation(_) => 422,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Conflict(_) => 409,
            ServiceError::Io(_) | ServiceError::Internal(_) => 500,
        }
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ServiceError::InvalidStory(v) => v,
            _ => &[],
        }
    }
}
