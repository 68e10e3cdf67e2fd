use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dosegp_core::cohort::CohortError;
use dosegp_core::decision::DecisionError;
use dosegp_core::Error;
use serde::{Deserialize, Serialize};

/// JSON error payload: `{"error": {"module": .., "message": ..}}`, with the
/// offending row and column for cohort parse failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub module: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub row: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub column: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, module: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                module: module.into(),
                message: message.into(),
                row: None,
                column: None,
            },
        }
    }

    /// Request-level problems detected by the service itself.
    pub fn request(status: StatusCode, message: impl Into<String>) -> Self {
        Self::new(status, "service-api", message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::request(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    /// Cohort upload failures are client errors.
    pub fn cohort(e: CohortError) -> Self {
        let mut err = Self::new(StatusCode::BAD_REQUEST, "cohort-data", e.to_string());
        if let CohortError::Parse { row, column, .. } = &e {
            err.body.row = Some(*row);
            if !column.is_empty() {
                err.body.column = Some(column.clone());
            }
        }
        err
    }

    /// Wrap a failure from a training job, which is always a server error.
    pub fn training(e: &Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.module(), e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Decision(DecisionError::DoseOutOfBounds { .. })
            | Error::Decision(DecisionError::Grid(_))
            | Error::Decision(DecisionError::UnknownVariable(_))
            | Error::Decision(DecisionError::Invalid(_))
            | Error::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Decision(DecisionError::InsufficientCases { .. }) => StatusCode::CONFLICT,
            Error::Cohort(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.module(), e.to_string())
    }
}

impl From<DecisionError> for ApiError {
    fn from(e: DecisionError) -> Self {
        Error::from(e).into()
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    error: &'a ErrorBody,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.body.module, self.body.message);
        }
        (self.status, Json(Envelope { error: &self.body })).into_response()
    }
}
