//! Upper-layer PDU codec. Every PDU is a type byte, a reserved byte, a
//! big-endian 32-bit payload length and the payload.

use std::io::{self, Read, Write};

use super::DimseError;

pub const APPLICATION_CONTEXT: &str = "1.2.840.10008.3.1.1.1";
pub const PROTOCOL_VERSION: u16 = 0x0001;

const ITEM_APPLICATION_CONTEXT: u8 = 0x10;
const ITEM_PRESENTATION_CONTEXT_RQ: u8 = 0x20;
const ITEM_PRESENTATION_CONTEXT_AC: u8 = 0x21;
const ITEM_ABSTRACT_SYNTAX: u8 = 0x30;
const ITEM_TRANSFER_SYNTAX: u8 = 0x40;
const ITEM_USER_INFORMATION: u8 = 0x50;
const SUB_MAX_LENGTH: u8 = 0x51;
const SUB_IMPLEMENTATION_CLASS: u8 = 0x52;
const SUB_IMPLEMENTATION_VERSION: u8 = 0x55;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pdu {
    AssociateRq(AssociateRq),
    AssociateAc(AssociateAc),
    AssociateRj(AssociateRj),
    PDataTf(PDataTf),
    ReleaseRq,
    ReleaseRp,
    Abort(Abort),
}

impl Pdu {
    pub fn type_code(&self) -> u8 {
        match self {
            Pdu::AssociateRq(_) => 0x01,
            Pdu::AssociateAc(_) => 0x02,
            Pdu::AssociateRj(_) => 0x03,
            Pdu::PDataTf(_) => 0x04,
            Pdu::ReleaseRq => 0x05,
            Pdu::ReleaseRp => 0x06,
            Pdu::Abort(_) => 0x07,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pdu::AssociateRq(_) => "A-ASSOCIATE-RQ",
            Pdu::AssociateAc(_) => "A-ASSOCIATE-AC",
            Pdu::AssociateRj(_) => "A-ASSOCIATE-RJ",
            Pdu::PDataTf(_) => "P-DATA-TF",
            Pdu::ReleaseRq => "A-RELEASE-RQ",
            Pdu::ReleaseRp => "A-RELEASE-RP",
            Pdu::Abort(_) => "A-ABORT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociateRq {
    pub protocol_version: u16,
    /// AE titles are held without their trailing space padding.
    pub called_ae: String,
    pub calling_ae: String,
    pub application_context: String,
    pub presentation_contexts: Vec<PresentationContextRq>,
    pub user_info: UserInformation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociateAc {
    pub protocol_version: u16,
    pub called_ae: String,
    pub calling_ae: String,
    pub application_context: String,
    pub presentation_contexts: Vec<PresentationContextAc>,
    pub user_info: UserInformation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresentationContextRq {
    pub id: u8,
    pub abstract_syntax: String,
    pub transfer_syntaxes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextResult {
    Accepted,
    UserRejected,
    NoReason,
    AbstractSyntaxUnsupported,
    TransferSyntaxesUnsupported,
}

impl ContextResult {
    pub fn code(self) -> u8 {
        match self {
            ContextResult::Accepted => 0,
            ContextResult::UserRejected => 1,
            ContextResult::NoReason => 2,
            ContextResult::AbstractSyntaxUnsupported => 3,
            ContextResult::TransferSyntaxesUnsupported => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ContextResult::Accepted,
            1 => ContextResult::UserRejected,
            2 => ContextResult::NoReason,
            3 => ContextResult::AbstractSyntaxUnsupported,
            4 => ContextResult::TransferSyntaxesUnsupported,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresentationContextAc {
    pub id: u8,
    pub result: ContextResult,
    pub transfer_syntax: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserInformation {
    /// Maximum P-DATA-TF payload the sender will accept; 0 means unlimited.
    pub max_pdu_length: u32,
    pub implementation_class_uid: Option<String>,
    pub implementation_version_name: Option<String>,
    /// Sub-items not interpreted here, kept as (type, payload).
    pub other: Vec<(u8, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssociateRj {
    pub result: u8,
    pub source: u8,
    pub reason: u8,
}

impl AssociateRj {
    pub fn describe(&self) -> &'static str {
        match (self.source, self.reason) {
            (1, 1) => "no reason given",
            (1, 2) => "application context name not supported",
            (1, 3) => "calling AE not recognized",
            (1, 7) => "called AE not recognized",
            (2, 2) => "protocol version not supported",
            (3, 1) => "temporary congestion",
            (3, 2) => "local limit exceeded",
            _ => "rejected",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PDataTf {
    pub pdvs: Vec<Pdv>,
}

/// One presentation data value: a fragment of a command or dataset stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pdv {
    pub context_id: u8,
    pub is_command: bool,
    pub is_last: bool,
    pub data: Vec<u8>,
}

/// PDV item overhead inside a P-DATA-TF payload: 4-byte length, context id,
/// message control header.
pub const PDV_OVERHEAD: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Abort {
    pub source: u8,
    pub reason: u8,
}

pub fn encode_pdu(pdu: &Pdu) -> Result<Vec<u8>, DimseError> {
    let mut payload = Vec::new();
    match pdu {
        Pdu::AssociateRq(rq) => {
            put_associate_header(&mut payload, rq.protocol_version, &rq.called_ae, &rq.calling_ae)?;
            put_item(&mut payload, ITEM_APPLICATION_CONTEXT, rq.application_context.as_bytes())?;
            for pc in &rq.presentation_contexts {
                let mut body = vec![pc.id, 0, 0, 0];
                put_item(&mut body, ITEM_ABSTRACT_SYNTAX, pc.abstract_syntax.as_bytes())?;
                for ts in &pc.transfer_syntaxes {
                    put_item(&mut body, ITEM_TRANSFER_SYNTAX, ts.as_bytes())?;
                }
                put_item(&mut payload, ITEM_PRESENTATION_CONTEXT_RQ, &body)?;
            }
            put_user_info(&mut payload, &rq.user_info)?;
        }
        Pdu::AssociateAc(ac) => {
            put_associate_header(&mut payload, ac.protocol_version, &ac.called_ae, &ac.calling_ae)?;
            put_item(&mut payload, ITEM_APPLICATION_CONTEXT, ac.application_context.as_bytes())?;
            for pc in &ac.presentation_contexts {
                let mut body = vec![pc.id, 0, pc.result.code(), 0];
                put_item(&mut body, ITEM_TRANSFER_SYNTAX, pc.transfer_syntax.as_bytes())?;
                put_item(&mut payload, ITEM_PRESENTATION_CONTEXT_AC, &body)?;
            }
            put_user_info(&mut payload, &ac.user_info)?;
        }
        Pdu::AssociateRj(rj) => payload.extend_from_slice(&[0, rj.result, rj.source, rj.reason]),
        Pdu::PDataTf(p) => {
            for pdv in &p.pdvs {
                let len = u32::try_from(pdv.data.len() + 2).map_err(|_| DimseError::OversizePayload)?;
                payload.extend_from_slice(&len.to_be_bytes());
                payload.push(pdv.context_id);
                payload.push(u8::from(pdv.is_command) | (u8::from(pdv.is_last) << 1));
                payload.extend_from_slice(&pdv.data);
            }
        }
        Pdu::ReleaseRq | Pdu::ReleaseRp => payload.extend_from_slice(&[0; 4]),
        Pdu::Abort(a) => payload.extend_from_slice(&[0, 0, a.source, a.reason]),
    }
    let len = u32::try_from(payload.len()).map_err(|_| DimseError::OversizePayload)?;
    let mut out = Vec::with_capacity(6 + payload.len());
    out.push(pdu.type_code());
    out.push(0);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn put_associate_header(
    out: &mut Vec<u8>,
    version: u16,
    called: &str,
    calling: &str,
) -> Result<(), DimseError> {
    out.extend_from_slice(&version.to_be_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&ae_bytes(called)?);
    out.extend_from_slice(&ae_bytes(calling)?);
    out.extend_from_slice(&[0; 32]);
    Ok(())
}

/// 16-byte space-padded AE title.
pub fn ae_bytes(title: &str) -> Result<[u8; 16], DimseError> {
    let raw = title.as_bytes();
    if raw.is_empty() || raw.len() > 16 || !raw.iter().all(|b| (0x20..0x7F).contains(b) && *b != b'\\') {
        return Err(DimseError::InvalidAeTitle(title.to_string()));
    }
    let mut out = [b' '; 16];
    out[..raw.len()].copy_from_slice(raw);
    Ok(out)
}

fn put_item(out: &mut Vec<u8>, kind: u8, body: &[u8]) -> Result<(), DimseError> {
    let len = u16::try_from(body.len()).map_err(|_| DimseError::OversizePayload)?;
    out.push(kind);
    out.push(0);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(body);
    Ok(())
}

fn put_user_info(out: &mut Vec<u8>, ui: &UserInformation) -> Result<(), DimseError> {
    let mut body = Vec::new();
    put_item(&mut body, SUB_MAX_LENGTH, &ui.max_pdu_length.to_be_bytes())?;
    if let Some(uid) = &ui.implementation_class_uid {
        put_item(&mut body, SUB_IMPLEMENTATION_CLASS, uid.as_bytes())?;
    }
    if let Some(name) = &ui.implementation_version_name {
        put_item(&mut body, SUB_IMPLEMENTATION_VERSION, name.as_bytes())?;
    }
    for (kind, data) in &ui.other {
        put_item(&mut body, *kind, data)?;
    }
    put_item(out, ITEM_USER_INFORMATION, &body)
}

/// Decodes exactly one PDU occupying all of `bytes`.
pub fn decode_pdu(bytes: &[u8]) -> Result<Pdu, DimseError> {
    if bytes.len() < 6 {
        return Err(DimseError::LengthMismatch {
            declared: 0,
            available: bytes.len().saturating_sub(6),
        });
    }
    let kind = bytes[0];
    if !(0x01..=0x07).contains(&kind) {
        return Err(DimseError::UnknownPduType(kind));
    }
    let declared = u32::from_be_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]) as usize;
    let available = bytes.len() - 6;
    if declared != available {
        return Err(DimseError::LengthMismatch { declared, available });
    }
    decode_payload(kind, &bytes[6..])
}

/// Reads one PDU from a stream, refusing payloads larger than `max_payload`.
pub fn read_pdu<R: Read>(r: &mut R, max_payload: usize) -> Result<Pdu, DimseError> {
    let mut header = [0u8; 6];
    r.read_exact(&mut header)?;
    let kind = header[0];
    if !(0x01..=0x07).contains(&kind) {
        return Err(DimseError::UnknownPduType(kind));
    }
    let len = u32::from_be_bytes([header[2], header[3], header[4], header[5]]) as usize;
    if len > max_payload {
        return Err(DimseError::PduTooLarge { len, limit: max_payload });
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    decode_payload(kind, &payload)
}

pub fn write_pdu<W: Write>(w: &mut W, pdu: &Pdu) -> Result<(), DimseError> {
    let bytes = encode_pdu(pdu)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn malformed(msg: impl Into<String>) -> DimseError {
    DimseError::MalformedPayload(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DimseError> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!("need {n} bytes at offset {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DimseError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DimseError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DimseError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    /// Item header (type, reserved, 16-bit length) and body.
    fn item(&mut self) -> Result<(u8, &'a [u8]), DimseError> {
        let kind = self.u8()?;
        self.u8()?;
        let len = self.u16()? as usize;
        Ok((kind, self.take(len)?))
    }
}

fn text(bytes: &[u8]) -> Result<String, DimseError> {
    let trimmed = match bytes.iter().rposition(|&b| b != 0 && b != b' ') {
        Some(end) => &bytes[..=end],
        None => &[][..],
    };
    std::str::from_utf8(trimmed)
        .map(str::to_string)
        .map_err(|_| malformed("non-ASCII text field"))
}

fn decode_payload(kind: u8, payload: &[u8]) -> Result<Pdu, DimseError> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let pdu = match kind {
        0x01 | 0x02 => {
            let protocol_version = c.u16()?;
            c.take(2)?;
            let called_ae = text(c.take(16)?)?;
            let calling_ae = text(c.take(16)?)?;
            c.take(32)?;
            let mut application_context = None;
            let mut rq_contexts = Vec::new();
            let mut ac_contexts = Vec::new();
            let mut user_info = None;
            while !c.done() {
                let (item, body) = c.item()?;
                match item {
                    ITEM_APPLICATION_CONTEXT => application_context = Some(text(body)?),
                    ITEM_PRESENTATION_CONTEXT_RQ if kind == 0x01 => rq_contexts.push(decode_pc_rq(body)?),
                    ITEM_PRESENTATION_CONTEXT_AC if kind == 0x02 => ac_contexts.push(decode_pc_ac(body)?),
                    ITEM_USER_INFORMATION => user_info = Some(decode_user_info(body)?),
                    other => return Err(malformed(format!("unexpected item type 0x{other:02X}"))),
                }
            }
            let application_context =
                application_context.ok_or_else(|| malformed("missing application context"))?;
            let user_info = user_info.ok_or_else(|| malformed("missing user information"))?;
            if kind == 0x01 {
                Pdu::AssociateRq(AssociateRq {
                    protocol_version,
                    called_ae,
                    calling_ae,
                    application_context,
                    presentation_contexts: rq_contexts,
                    user_info,
                })
            } else {
                Pdu::AssociateAc(AssociateAc {
                    protocol_version,
                    called_ae,
                    calling_ae,
                    application_context,
                    presentation_contexts: ac_contexts,
                    user_info,
                })
            }
        }
        0x03 => {
            c.u8()?;
            Pdu::AssociateRj(AssociateRj {
                result: c.u8()?,
                source: c.u8()?,
                reason: c.u8()?,
            })
        }
        0x04 => {
            let mut pdvs = Vec::new();
            while !c.done() {
                let len = c.u32()? as usize;
                if len < 2 {
                    return Err(malformed("PDV item shorter than its header"));
                }
                let body = c.take(len)?;
                let control = body[1];
                if control & !0x03 != 0 {
                    return Err(malformed("reserved message control bits set"));
                }
                pdvs.push(Pdv {
                    context_id: body[0],
                    is_command: control & 0x01 != 0,
                    is_last: control & 0x02 != 0,
                    data: body[2..].to_vec(),
                });
            }
            Pdu::PDataTf(PDataTf { pdvs })
        }
        0x05 | 0x06 => {
            c.take(4)?;
            if kind == 0x05 {
                Pdu::ReleaseRq
            } else {
                Pdu::ReleaseRp
            }
        }
        0x07 => {
            c.take(2)?;
            Pdu::Abort(Abort {
                source: c.u8()?,
                reason: c.u8()?,
            })
        }
        other => return Err(DimseError::UnknownPduType(other)),
    };
    if !c.done() {
        return Err(malformed("trailing bytes after PDU payload"));
    }
    Ok(pdu)
}

fn decode_pc_rq(body: &[u8]) -> Result<PresentationContextRq, DimseError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let id = c.u8()?;
    c.take(3)?;
    let mut abstract_syntax = None;
    let mut transfer_syntaxes = Vec::new();
    while !c.done() {
        match c.item()? {
            (ITEM_ABSTRACT_SYNTAX, b) => abstract_syntax = Some(text(b)?),
            (ITEM_TRANSFER_SYNTAX, b) => transfer_syntaxes.push(text(b)?),
            (other, _) => return Err(malformed(format!("unexpected sub-item 0x{other:02X}"))),
        }
    }
    Ok(PresentationContextRq {
        id,
        abstract_syntax: abstract_syntax.ok_or_else(|| malformed("context without abstract syntax"))?,
        transfer_syntaxes,
    })
}

fn decode_pc_ac(body: &[u8]) -> Result<PresentationContextAc, DimseError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let id = c.u8()?;
    c.u8()?;
    let code = c.u8()?;
    c.u8()?;
    let result = ContextResult::from_code(code).ok_or_else(|| malformed(format!("context result {code}")))?;
    let mut transfer_syntax = String::new();
    while !c.done() {
        match c.item()? {
            (ITEM_TRANSFER_SYNTAX, b) => transfer_syntax = text(b)?,
            (other, _) => return Err(malformed(format!("unexpected sub-item 0x{other:02X}"))),
        }
    }
    Ok(PresentationContextAc {
        id,
        result,
        transfer_syntax,
    })
}

fn decode_user_info(body: &[u8]) -> Result<UserInformation, DimseError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let mut ui = UserInformation::default();
    let mut saw_max = false;
    while !c.done() {
        let (kind, b) = c.item()?;
        match kind {
            SUB_MAX_LENGTH => {
                if b.len() != 4 {
                    return Err(malformed("maximum length sub-item must be 4 bytes"));
                }
                ui.max_pdu_length = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
                saw_max = true;
            }
            SUB_IMPLEMENTATION_CLASS => ui.implementation_class_uid = Some(text(b)?),
            SUB_IMPLEMENTATION_VERSION => ui.implementation_version_name = Some(text(b)?),
            other => ui.other.push((other, b.to_vec())),
        }
    }
    if !saw_max {
        return Err(malformed("user information without maximum length"));
    }
    Ok(ui)
}

impl From<io::Error> for DimseError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => DimseError::Timeout,
            io::ErrorKind::UnexpectedEof => DimseError::ConnectionClosed,
            _ => DimseError::Io(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A-ASSOCIATE-RQ produced by pynetdicom 3.0.4 (STORESCU -> MINIPACS,
    /// Verification + CT Image Storage, max length 16384).
    const PYNETDICOM_ASSOCIATE_RQ: &str = "010000000122000100004d494e4950414353202020202020202053544f52455343552020202020202020000000000000000000000000000000000000000000000000000000000000000010000015312e322e3834302e31303030382e332e312e312e31200000450100000030000011312e322e3834302e31303030382e312e3140000013312e322e3834302e31303030382e312e322e3140000011312e322e3834302e31303030382e312e32200000360300000030000019312e322e3834302e31303030382e352e312e342e312e312e3240000011312e322e3834302e31303030382e312e325000003e510000040000400052000020312e322e3832362e302e312e333638303034332e392e333831312e322e302e305500000e50594e45544449434f4d5f323030";

    #[test]
    fn release_and_abort_bytes_match_reference() {
        assert_eq!(
            encode_pdu(&Pdu::ReleaseRq).unwrap(),
            hex::decode("05000000000400000000").unwrap()
        );
        assert_eq!(
            encode_pdu(&Pdu::Abort(Abort { source: 0, reason: 0 })).unwrap(),
            hex::decode("07000000000400000000").unwrap()
        );
    }

    #[test]
    fn reference_associate_rq_decodes() {
        let bytes = hex::decode(PYNETDICOM_ASSOCIATE_RQ).unwrap();
        let Pdu::AssociateRq(rq) = decode_pdu(&bytes).unwrap() else {
            panic!("not an associate request");
        };
        assert_eq!(rq.protocol_version, 1);
        assert_eq!(rq.called_ae, "MINIPACS");
        assert_eq!(rq.calling_ae, "STORESCU");
        assert_eq!(rq.application_context, APPLICATION_CONTEXT);
        assert_eq!(rq.presentation_contexts.len(), 2);
        assert_eq!(rq.presentation_contexts[0].id, 1);
        assert_eq!(rq.presentation_contexts[0].abstract_syntax, "1.2.840.10008.1.1");
        assert_eq!(
            rq.presentation_contexts[0].transfer_syntaxes,
            vec!["1.2.840.10008.1.2.1", "1.2.840.10008.1.2"]
        );
        assert_eq!(rq.presentation_contexts[1].id, 3);
        assert_eq!(rq.presentation_contexts[1].abstract_syntax, "1.2.840.10008.5.1.4.1.1.2");
        assert_eq!(rq.user_info.max_pdu_length, 16384);
        assert_eq!(
            rq.user_info.implementation_class_uid.as_deref(),
            Some("1.2.826.0.1.3680043.9.3811.2.0.0")
        );
        assert_eq!(rq.user_info.implementation_version_name.as_deref(), Some("PYNETDICOM_200"));
        // Our encoder reproduces the reference bytes exactly.
        assert_eq!(encode_pdu(&Pdu::AssociateRq(rq)).unwrap(), bytes);
    }

    #[test]
    fn unknown_type_and_length_mismatch() {
        assert!(matches!(
            decode_pdu(&[0x09, 0, 0, 0, 0, 0]),
            Err(DimseError::UnknownPduType(0x09))
        ));
        assert!(matches!(
            decode_pdu(&[0x05, 0, 0, 0, 0, 10, 0, 0, 0, 0]),
            Err(DimseError::LengthMismatch { declared: 10, available: 4 })
        ));
    }

    #[test]
    fn malformed_payloads() {
        assert!(matches!(
            decode_pdu(&[0x05, 0, 0, 0, 0, 2, 0, 0]),
            Err(DimseError::MalformedPayload(_))
        ));
        // PDV with reserved control bits set.
        assert!(matches!(
            decode_pdu(&[0x04, 0, 0, 0, 0, 7, 0, 0, 0, 3, 1, 0xF0, 0xAA]),
            Err(DimseError::MalformedPayload(_))
        ));
    }
}
