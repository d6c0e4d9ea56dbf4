//! Cross-instance federation: authenticated links, the sovereignty guard
//! and sample-weighted federated averaging.

mod aggregate;
mod cluster;
mod envelope;
mod job;
mod message;
mod node;
mod transport;

pub use aggregate::{aggregate_round, RoundResult};
pub use cluster::{ClusterMember, LocalCluster};
pub use envelope::{
    canonical_string, sign_envelope, sign_envelope_at, verify_envelope, ReplayCache, SharedSecret, SignedEnvelope,
    MAX_CLOCK_SKEW_SECS, REPLAY_WINDOW_SECS, SIGNATURE_HEADER,
};
pub use job::{
    EngineTrainer, FederatedJob, JobSpec, JobState, LocalTrainer, RoundRecord, TrainOutcome, LOCAL_PARTICIPANT,
};
pub use message::{
    guard_message, FedMessage, GuardVerdict, SovereigntyPolicy, DEFAULT_MAX_BODY, DICOM_MARKER, MAX_CONTROL_VALUE_LEN,
    PIXEL_DATA_PATTERN,
};
pub use node::{
    FederationConfig, FederationNode, InstanceLink, Invite, LinkView, DEFAULT_ROUND_TIMEOUT, HANDSHAKE_PATH,
    INVITE_LIFETIME_MINUTES,
};
pub use transport::{FedRequest, FedResponse, InProcessTransport, Transport, INSTANCE_HEADER, INVITE_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invite expired")]
    InviteExpired,
    #[error("invite already used")]
    InviteAlreadyUsed,
    #[error("unknown invite")]
    UnknownInvite,
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("unknown link {0:?}")]
    UnknownLink(String),
    #[error("bad signature")]
    BadSignature,
    #[error("timestamp outside the allowed clock skew")]
    ClockSkew,
    #[error("nonce already seen")]
    ReplayDetected,
    #[error("round has no results")]
    EmptyRound,
    #[error("results carry zero samples in total")]
    ZeroTotalSamples,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("round {round}: {respondents} respondents, quorum {quorum}")]
    QuorumNotMet { round: u32, respondents: usize, quorum: usize },
    #[error("participant {participant} rejected the round: {reason}")]
    ParticipantRejected { participant: String, reason: String },
    #[error("sovereignty guard: {0}")]
    GuardViolation(String),
    #[error("capability missing: {0}")]
    CapabilityMissing(String),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("unknown job")]
    UnknownJob,
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("no federation route {0}")]
    NotFound(String),
    #[error("remote error {status} {code}: {message}")]
    Remote { status: u16, code: String, message: String },
    #[error(transparent)]
    Archive(#[from] crate::archive::ArchiveError),
    #[error(transparent)]
    Workflow(#[from] crate::workflow::WorkflowError),
    #[error(transparent)]
    Audit(#[from] crate::auth::AuditError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FederationError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        use FederationError::*;
        match self {
            InviteExpired => "InviteExpired",
            InviteAlreadyUsed => "InviteAlreadyUsed",
            UnknownInvite => "UnknownInvite",
            EndpointUnreachable(_) => "EndpointUnreachable",
            UnknownLink(_) => "UnknownLink",
            BadSignature => "BadSignature",
            ClockSkew => "ClockSkew",
            ReplayDetected => "ReplayDetected",
            EmptyRound => "EmptyRound",
            ZeroTotalSamples => "ZeroTotalSamples",
            DimensionMismatch(_) => "DimensionMismatch",
            QuorumNotMet { .. } => "QuorumNotMet",
            ParticipantRejected { .. } => "ParticipantRejected",
            GuardViolation(_) => "GuardViolation",
            CapabilityMissing(_) => "CapabilityMissing",
            InvalidJob(_) => "InvalidJob",
            UnknownJob => "UnknownJob",
            InvalidMessage(_) => "InvalidMessage",
            NotFound(_) => "NotFound",
            Remote { .. } => "Remote",
            Archive(_) => "Archive",
            Workflow(_) => "Workflow",
            Audit(_) => "Audit",
            Io(_) => "Io",
        }
    }

    pub fn http_status(&self) -> u16 {
        use FederationError::*;
        match self {
            BadSignature | ClockSkew | UnknownLink(_) | UnknownInvite => 401,
            CapabilityMissing(_) | ParticipantRejected { .. } => 403,
            UnknownJob | NotFound(_) => 404,
            ReplayDetected | InviteAlreadyUsed => 409,
            InviteExpired => 410,
            GuardViolation(_) => 422,
            InvalidMessage(_) | InvalidJob(_) | DimensionMismatch(_) | EmptyRound | ZeroTotalSamples => 400,
            QuorumNotMet { .. } => 503,
            EndpointUnreachable(_) => 502,
            Remote { status, .. } => *status,
            Archive(_) | Workflow(_) | Audit(_) | Io(_) => 500,
        }
    }

    /// Rebuilds the variants a peer reports that callers act on.
    pub fn from_remote(status: u16, code: &str, message: &str) -> Self {
        match code {
            "InviteExpired" => FederationError::InviteExpired,
            "InviteAlreadyUsed" => FederationError::InviteAlreadyUsed,
            "UnknownInvite" => FederationError::UnknownInvite,
            _ => FederationError::Remote { status, code: code.to_string(), message: message.to_string() },
        }
    }
}
