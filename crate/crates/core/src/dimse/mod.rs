//! DICOM upper-layer networking: PDU codec, association negotiation, and the
//! C-ECHO / C-STORE service class user and provider.

use std::io;

use thiserror::Error;

use crate::dicom::DicomError;

mod assoc;
mod command;
mod pdu;
mod scp;
mod scu;
mod stream;

pub use assoc::{
    accept_association, AssociationConfig, AssociationDecision, DEFAULT_AE_TITLE,
    DEFAULT_PDU_LENGTH, DEFAULT_PORT, IMPLEMENTATION_VERSION_NAME, MIN_PDU_LENGTH,
    STORAGE_SOP_CLASSES,
};
pub use command::{
    CommandField, DimseMessage, STATUS_OUT_OF_RESOURCES, STATUS_SUCCESS, VERIFICATION_SOP_CLASS,
};
pub use pdu::{
    ae_bytes, decode_pdu, encode_pdu, read_pdu, write_pdu, Abort, AssociateAc, AssociateRj,
    AssociateRq, ContextResult, PDataTf, Pdu, Pdv, PresentationContextAc, PresentationContextRq,
    UserInformation, APPLICATION_CONTEXT, PDV_OVERHEAD, PROTOCOL_VERSION,
};
pub use scp::{scp_serve, AssociationSummary, DimseServer, InstanceSink};
pub use scu::{scu_echo, scu_send, ScuAssociation, StoreOutcome};
pub use stream::{fragment, MessageAssembler, ReceivedMessage};

#[derive(Debug, Error)]
pub enum DimseError {
    #[error("payload exceeds the 32-bit PDU length field")]
    OversizePayload,
    #[error("invalid AE title {0:?}")]
    InvalidAeTitle(String),
    #[error("PDU declares {declared} payload bytes but {available} are present")]
    LengthMismatch { declared: usize, available: usize },
    #[error("unknown PDU type 0x{0:02X}")]
    UnknownPduType(u8),
    #[error("PDU payload of {len} bytes exceeds limit {limit}")]
    PduTooLarge { len: usize, limit: usize },
    #[error("malformed PDU payload: {0}")]
    MalformedPayload(String),
    #[error("malformed command set: {0}")]
    MalformedCommand(String),
    #[error("unsupported DIMSE command 0x{0:04X}")]
    UnsupportedCommand(u16),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error("invalid association configuration: {0}")]
    Config(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("association idle for longer than the configured timeout")]
    IdleTimeout,
    #[error("connection closed by peer")]
    ConnectionClosed,
    #[error("could not connect to {addr}: {reason}")]
    ConnectFailed { addr: String, reason: String },
    #[error("association rejected: {}", .0.describe())]
    AssociationRejected(AssociateRj),
    #[error("no accepted presentation context for {0}")]
    NoAcceptedContext(String),
    #[error("peer aborted the association (source {origin}, reason {reason})")]
    PeerAborted { origin: u8, reason: u8 },
    #[error("I/O error: {0}")]
    Io(io::Error),
}
