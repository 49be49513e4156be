use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use obsimpact_core::Error as CoreError;
use serde::{Deserialize, Serialize};

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn no_dataset() -> Self {
        Self::new(StatusCode::CONFLICT, "no_dataset", "no dataset is loaded")
    }

    pub fn no_model() -> Self {
        Self::new(StatusCode::CONFLICT, "no_model", "no model is loaded; train or load one first")
    }

    pub fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "busy", "a training job is already running")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        let (status, code) = match e {
            CoreError::UnknownNode(_) => (StatusCode::NOT_FOUND, "unknown_node"),
            CoreError::NotGridTarget(_) => (StatusCode::BAD_REQUEST, "not_grid_target"),
            CoreError::OccludeTarget(_) => (StatusCode::BAD_REQUEST, "occlude_target"),
            CoreError::UnknownGroupKey(_) => (StatusCode::BAD_REQUEST, "bad_group_key"),
            CoreError::InvalidConfig(_) | CoreError::UnknownSource(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
            CoreError::Empty(_) => (StatusCode::UNPROCESSABLE_ENTITY, "empty"),
            CoreError::UndefinedAcc => (StatusCode::UNPROCESSABLE_ENTITY, "undefined_acc"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
