// SPDX-License-Identifier: MIT OR Apache-2.0

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use cloom_core::CloomError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("{what} `{id}` not found")]
    NotFound { what: &'static str, id: String },

    #[error("validation failed: {message}")]
    Validation { field: Option<String>, message: String },

    #[error("session {session} was built on graph hash {expected}, graph now hashes to {found}")]
    Stale {
        session: String,
        expected: String,
        found: String,
    },

    #[error("revision conflict: expected {expected}, session is at {current}")]
    Conflict { expected: u64, current: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CloomError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl ServeError {
    pub fn not_found(what: &'static str, id: impl Into<String>) -> Self {
        Self::NotFound { what, id: id.into() }
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::NotFound { .. } => "not_found",
            Self::Validation { .. } => "validation",
            Self::Stale { .. } => "stale",
            Self::Conflict { .. } => "conflict",
            Self::Config(_) => "config",
            Self::Core(CloomError::NotFound(_)) => "not_found",
            Self::Core(
                CloomError::InvalidArgument(_)
                | CloomError::Schema { .. }
                | CloomError::Reference(_)
                | CloomError::Json(_)
                | CloomError::TokenOutOfRange { .. }
                | CloomError::Shape { .. },
            ) => "validation",
            Self::Core(_) | Self::Io(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.kind() {
            "not_found" => StatusCode::NOT_FOUND,
            "validation" => StatusCode::UNPROCESSABLE_ENTITY,
            "stale" | "conflict" => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every non-2xx JSON response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let field = match &self {
            Self::Validation { field, .. } => field.clone(),
            Self::Core(CloomError::Schema { path, .. }) => Some(path.clone()),
            _ => None,
        };
        let body = ErrorBody {
            kind: self.kind().into(),
            message: self.to_string(),
            field,
        };
        (self.status(), Json(serde_json::json!({ "error": body }))).into_response()
    }
}
