use axum::http::StatusCode;
use gatekeeper_core::PrivacyBudget;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every failure the service reports, one HTTP status and code each.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("{0}")]
    AccessDenied(String),
    #[error("a query from user `{0}` is already in progress")]
    QueryInProgress(String),
    #[error("{0}")]
    ValidationFailed(String),
    #[error("dataset `{0}` is not registered")]
    UnknownDataset(String),
    #[error("insufficient budget; remaining {remaining}")]
    InsufficientBudget { remaining: PrivacyBudget },
    #[error("dataset unavailable: {0}")]
    DatasetUnavailable(String),
    #[error("internal error: {0}")]
    InternalError(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::AccessDenied(_) => "AccessDenied",
            ServiceError::QueryInProgress(_) => "QueryInProgress",
            ServiceError::ValidationFailed(_) => "ValidationFailed",
            ServiceError::UnknownDataset(_) => "UnknownDataset",
            ServiceError::InsufficientBudget { .. } => "InsufficientBudget",
            ServiceError::DatasetUnavailable(_) => "DatasetUnavailable",
            ServiceError::InternalError(_) => "InternalError",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::AccessDenied(_) => StatusCode::FORBIDDEN,
            ServiceError::QueryInProgress(_) => StatusCode::CONFLICT,
            ServiceError::ValidationFailed(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownDataset(_) => StatusCode::NOT_FOUND,
            ServiceError::InsufficientBudget { .. } => StatusCode::PAYMENT_REQUIRED,
            ServiceError::DatasetUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::InternalError(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_owned(),
            message: self.to_string(),
            remaining: match self {
                ServiceError::InsufficientBudget { remaining } => Some(*remaining),
                _ => None,
            },
        }
    }
}

/// Wire form of an error: `{"code": ..., "message": ..., "remaining": {...}?}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remaining: Option<PrivacyBudget>,
}
