use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use minipacs_core::archive::ArchiveError;
use minipacs_core::auth::{AuditError, AuthError};
use minipacs_core::dicom::DicomError;
use minipacs_core::dimse::DimseError;
use minipacs_core::extension::ExtensionError;
use minipacs_core::federation::FederationError;
use minipacs_core::workflow::WorkflowError;
use serde::Serialize;
use thiserror::Error;

/// Failures while opening or administering a node.
#[derive(Debug, Error)]
pub enum NodeError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data directory {0} is in use by a running node")]
    Locked(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Extension(#[from] ExtensionError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Dimse(#[from] DimseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The body of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, code: code.to_string(), message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(400, "BadRequest", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(404, "NotFound", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(500, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(code = %self.code, message = %self.message, "request failed");
        }
        (status, Json(ErrorBody { error_code: self.code, message: self.message })).into_response()
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        use AuthError::*;
        let (status, code) = match &e {
            InvalidCredentials => (401, "InvalidCredentials"),
            AccountDisabled => (403, "AccountDisabled"),
            InvalidToken => (401, "InvalidToken"),
            AuthExpired => (401, "AuthExpired"),
            PermissionDenied => (403, "PermissionDenied"),
            DuplicateUser(_) => (409, "DuplicateUser"),
            UnknownUser(_) => (404, "UnknownUser"),
            InvalidUsername(_) => (400, "InvalidUsername"),
            InvalidRole(_) => (400, "InvalidRole"),
            Hashing(_) => (500, "Hashing"),
            Audit(_) => (500, "Audit"),
            Io(_) => (500, "Io"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        ApiError::new(500, "Audit", e.to_string())
    }
}

fn dicom_code(e: &DicomError) -> &'static str {
    match e {
        DicomError::NotDicom => "NotDicom",
        DicomError::Truncated { .. } => "Truncated",
        DicomError::UnsupportedTransferSyntax(_) => "UnsupportedTransferSyntax",
        DicomError::DepthExceeded => "DepthExceeded",
        DicomError::NoPixelData => "NoPixelData",
        DicomError::UnsupportedPhotometric(_) | DicomError::UnsupportedBitsAllocated(_) => "UnsupportedImage",
        _ => "MalformedDicom",
    }
}

impl From<ArchiveError> for ApiError {
    fn from(e: ArchiveError) -> Self {
        use ArchiveError::*;
        let (status, code) = match &e {
            UidConflict(_) => (409, "UidConflict"),
            MissingRequiredUid(_) => (422, "MissingRequiredUid"),
            StorageFull => (507, "StorageFull"),
            UnknownAttribute(_) => (400, "UnknownAttribute"),
            InvalidQuery(_) => (400, "InvalidQuery"),
            InvalidTagName(_) => (400, "InvalidTagName"),
            UnknownSeries(_) => (404, "UnknownSeries"),
            UnknownInstance(_) => (404, "UnknownInstance"),
            NotFound => (404, "NotFound"),
            InvalidKey(_) => (400, "InvalidKey"),
            InvalidName(_) => (400, "InvalidName"),
            DuplicateName(_) => (409, "DuplicateName"),
            UnknownCohort(_) => (404, "UnknownCohort"),
            Corrupt(_) => (500, "Corrupt"),
            Dicom(d) => (422, dicom_code(d)),
            Io(_) => (500, "Io"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<DicomError> for ApiError {
    fn from(e: DicomError) -> Self {
        ApiError::new(422, dicom_code(&e), e.to_string())
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        use WorkflowError::*;
        let (status, code) = match e {
            Archive(a) => return a.into(),
            Dicom(d) => return d.into(),
            CycleError(_) => (400, "CycleError"),
            UnknownOperator(_) => (400, "UnknownOperator"),
            DanglingInput { .. } => (400, "DanglingInput"),
            DuplicateNodeId(_) => (400, "DuplicateNodeId"),
            InvalidNodeId(_) => (400, "InvalidNodeId"),
            SlotMismatch { .. } => (400, "SlotMismatch"),
            InvalidDefinition(_) => (400, "InvalidDefinition"),
            InvalidOperator { .. } => (400, "InvalidOperator"),
            InvalidData(_) => (422, "InvalidData"),
            InvalidTransition(_) => (409, "InvalidTransition"),
            DimensionMismatch(_) => (400, "DimensionMismatch"),
            ShapeMismatch(_) => (400, "ShapeMismatch"),
            EmptyCohortData => (422, "EmptyCohortData"),
            UnknownWorkflow(_) => (404, "UnknownWorkflow"),
            UnknownRun(_) => (404, "UnknownRun"),
            DuplicateWorkflow(_) => (409, "DuplicateWorkflow"),
            MissingCohort => (400, "MissingCohort"),
            Io(_) => (500, "Io"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ExtensionError> for ApiError {
    fn from(e: ExtensionError) -> Self {
        use ExtensionError::*;
        let status = match &e {
            SchemaError(_) | BadSemver(_) | PathEscape(_) => 400,
            DigestMismatch(_) | SanityCheckFailed { .. } => 422,
            UnsatisfiableConstraint { .. } | DependencyCycle(_) | AlreadyInstalled { .. } | Conflict(_) => 409,
            RequiredBy { .. } | InUse { .. } => 409,
            NotInRegistry(_) | NotInstalled(_) => 404,
            NoRegistry => 503,
            Registry(_) => 502,
            Io(_) => 500,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<FederationError> for ApiError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::Archive(a) => a.into(),
            FederationError::Workflow(w) => w.into(),
            FederationError::Remote { status, code, message } => {
                ApiError::new(502, "RemoteError", format!("peer answered {status} {code}: {message}"))
            }
            e => ApiError::new(e.http_status(), e.code(), e.to_string()),
        }
    }
}
