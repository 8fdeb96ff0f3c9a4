use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use causalmix::Error as CoreError;
use serde::Serialize;
use thiserror::Error;

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    /// Request body or session log is malformed.
    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) | ServiceError::Core(CoreError::Phase(_)) => StatusCode::CONFLICT,
            ServiceError::Invalid(_)
            | ServiceError::Json(_)
            | ServiceError::Core(
                CoreError::Config { .. } | CoreError::InvalidResponse(_) | CoreError::Contract(_) | CoreError::Json(_),
            ) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let field = match &self {
            ServiceError::Core(CoreError::Config { field, .. }) => Some(field.clone()),
            _ => None,
        };
        let body = ErrorBody {
            error: self.to_string(),
            field,
        };
        (self.status(), Json(body)).into_response()
    }
}
