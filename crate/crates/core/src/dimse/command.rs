//! DIMSE command sets for C-ECHO and C-STORE, encoded Implicit VR Little Endian.

use crate::dicom::{self, DataElement, DicomDataset, Tag, TransferSyntax, Vr};

use super::DimseError;

pub const VERIFICATION_SOP_CLASS: &str = "1.2.840.10008.1.1";

pub const STATUS_SUCCESS: u16 = 0x0000;
pub const STATUS_OUT_OF_RESOURCES: u16 = 0xA700;

const COMMAND_GROUP_LENGTH: Tag = Tag::new(0x0000, 0x0000);
const AFFECTED_SOP_CLASS_UID: Tag = Tag::new(0x0000, 0x0002);
const COMMAND_FIELD: Tag = Tag::new(0x0000, 0x0100);
const MESSAGE_ID: Tag = Tag::new(0x0000, 0x0110);
const MESSAGE_ID_BEING_RESPONDED_TO: Tag = Tag::new(0x0000, 0x0120);
const PRIORITY: Tag = Tag::new(0x0000, 0x0700);
const COMMAND_DATA_SET_TYPE: Tag = Tag::new(0x0000, 0x0800);
const STATUS: Tag = Tag::new(0x0000, 0x0900);
const AFFECTED_SOP_INSTANCE_UID: Tag = Tag::new(0x0000, 0x1000);

const NO_DATASET: u16 = 0x0101;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandField {
    CEchoRq,
    CEchoRsp,
    CStoreRq,
    CStoreRsp,
}

impl CommandField {
    pub fn code(self) -> u16 {
        match self {
            CommandField::CEchoRq => 0x0030,
            CommandField::CEchoRsp => 0x8030,
            CommandField::CStoreRq => 0x0001,
            CommandField::CStoreRsp => 0x8001,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            0x0030 => CommandField::CEchoRq,
            0x8030 => CommandField::CEchoRsp,
            0x0001 => CommandField::CStoreRq,
            0x8001 => CommandField::CStoreRsp,
            _ => return None,
        })
    }

    pub fn is_response(self) -> bool {
        self.code() & 0x8000 != 0
    }
}

/// A command set. For responses `message_id` carries MessageIDBeingRespondedTo.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimseMessage {
    pub command_field: CommandField,
    pub message_id: u16,
    pub affected_sop_class: String,
    pub affected_sop_instance: Option<String>,
    pub status: Option<u16>,
    pub has_dataset: bool,
}

impl DimseMessage {
    pub fn echo_rq(message_id: u16) -> Self {
        DimseMessage {
            command_field: CommandField::CEchoRq,
            message_id,
            affected_sop_class: VERIFICATION_SOP_CLASS.to_string(),
            affected_sop_instance: None,
            status: None,
            has_dataset: false,
        }
    }

    pub fn store_rq(message_id: u16, sop_class: &str, sop_instance: &str) -> Self {
        DimseMessage {
            command_field: CommandField::CStoreRq,
            message_id,
            affected_sop_class: sop_class.to_string(),
            affected_sop_instance: Some(sop_instance.to_string()),
            status: None,
            has_dataset: true,
        }
    }

    /// The response to this request with the given status.
    pub fn response(&self, status: u16) -> Self {
        let command_field = match self.command_field {
            CommandField::CEchoRq | CommandField::CEchoRsp => CommandField::CEchoRsp,
            CommandField::CStoreRq | CommandField::CStoreRsp => CommandField::CStoreRsp,
        };
        DimseMessage {
            command_field,
            message_id: self.message_id,
            affected_sop_class: self.affected_sop_class.clone(),
            affected_sop_instance: self.affected_sop_instance.clone(),
            status: Some(status),
            has_dataset: false,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, DimseError> {
        let mut ds = DicomDataset::new();
        ds.insert(DataElement::text(AFFECTED_SOP_CLASS_UID, Vr::UI, &self.affected_sop_class));
        ds.put_u16(COMMAND_FIELD, self.command_field.code());
        if self.command_field.is_response() {
            ds.put_u16(MESSAGE_ID_BEING_RESPONDED_TO, self.message_id);
        } else {
            ds.put_u16(MESSAGE_ID, self.message_id);
        }
        if self.command_field == CommandField::CStoreRq {
            ds.put_u16(PRIORITY, 0);
        }
        ds.put_u16(COMMAND_DATA_SET_TYPE, if self.has_dataset { 0x0000 } else { NO_DATASET });
        if let Some(status) = self.status {
            ds.put_u16(STATUS, status);
        }
        if let Some(uid) = &self.affected_sop_instance {
            ds.insert(DataElement::text(AFFECTED_SOP_INSTANCE_UID, Vr::UI, uid));
        }
        let ts = TransferSyntax::ImplicitVrLittleEndian;
        let body = dicom::write_dataset(&ds, ts)?;
        let mut group_len = DicomDataset::new();
        group_len.insert(DataElement::bytes(
            COMMAND_GROUP_LENGTH,
            Vr::UL,
            (body.len() as u32).to_le_bytes().to_vec(),
        ));
        let mut out = dicom::write_dataset(&group_len, ts)?;
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DimseError> {
        let bad = |m: &str| DimseError::MalformedCommand(m.to_string());
        let ds = dicom::read_dataset(bytes, TransferSyntax::ImplicitVrLittleEndian)?;
        let raw = |tag: Tag| ds.get(tag).and_then(|e| e.as_bytes());
        let u16_of = |tag: Tag| raw(tag).filter(|b| b.len() == 2).map(|b| u16::from_le_bytes([b[0], b[1]]));
        let text_of = |tag: Tag| ds.get_str(tag);

        let group_len = raw(COMMAND_GROUP_LENGTH)
            .filter(|b| b.len() == 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| bad("missing CommandGroupLength"))?;
        if group_len + 12 != bytes.len() {
            return Err(bad("CommandGroupLength does not match command set size"));
        }
        if ds.iter().any(|e| e.tag.group != 0x0000) {
            return Err(bad("non-command element in command set"));
        }
        let code = u16_of(COMMAND_FIELD).ok_or_else(|| bad("missing CommandField"))?;
        let command_field =
            CommandField::from_code(code).ok_or(DimseError::UnsupportedCommand(code))?;
        let message_id = if command_field.is_response() {
            u16_of(MESSAGE_ID_BEING_RESPONDED_TO)
        } else {
            u16_of(MESSAGE_ID)
        }
        .ok_or_else(|| bad("missing message id"))?;
        let status = u16_of(STATUS);
        if command_field.is_response() && status.is_none() {
            return Err(bad("response without Status"));
        }
        let affected_sop_instance = text_of(AFFECTED_SOP_INSTANCE_UID);
        if command_field == CommandField::CStoreRq && affected_sop_instance.is_none() {
            return Err(bad("C-STORE-RQ without AffectedSOPInstanceUID"));
        }
        Ok(DimseMessage {
            command_field,
            message_id,
            affected_sop_class: text_of(AFFECTED_SOP_CLASS_UID).unwrap_or_default(),
            affected_sop_instance,
            status,
            has_dataset: u16_of(COMMAND_DATA_SET_TYPE).ok_or_else(|| bad("missing CommandDataSetType"))?
                != NO_DATASET,
        })
    }
}
