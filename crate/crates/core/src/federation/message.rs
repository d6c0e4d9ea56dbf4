//! Federation message schema and the sovereignty guard.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_BODY: usize = 16 * 1024 * 1024;
/// Control arguments are short identifiers, never payloads.
pub const MAX_CONTROL_VALUE_LEN: usize = 512;

/// The only shapes a federation body may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FedMessage {
    Control {
        action: String,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        args: BTreeMap<String, String>,
    },
    ParameterVector {
        job_id: String,
        round: u32,
        params: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        workflow: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lr: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_count: Option<u64>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        metrics: BTreeMap<String, f64>,
    },
    ScalarMetrics {
        job_id: String,
        round: u32,
        metrics: BTreeMap<String, f64>,
    },
    Count {
        job_id: String,
        round: u32,
        count: u64,
    },
}

impl FedMessage {
    pub fn control(action: &str, args: &[(&str, &str)]) -> Self {
        FedMessage::Control {
            action: action.to_string(),
            args: args.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serializes")
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FedMessage::Control { .. } => "control",
            FedMessage::ParameterVector { .. } => "parameter_vector",
            FedMessage::ScalarMetrics { .. } => "scalar_metrics",
            FedMessage::Count { .. } => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SovereigntyPolicy {
    pub max_body: usize,
}

impl Default for SovereigntyPolicy {
    fn default() -> Self {
        SovereigntyPolicy { max_body: DEFAULT_MAX_BODY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuardVerdict {
    Allow(FedMessage),
    Deny(String),
}

impl GuardVerdict {
    pub fn is_allowed(&self) -> bool {
        matches!(self, GuardVerdict::Allow(_))
    }
}

pub const DICOM_MARKER: &[u8] = b"DICM";
/// (7FE0,0010) PixelData as encoded little-endian.
pub const PIXEL_DATA_PATTERN: &[u8] = &[0xE0, 0x7F, 0x10, 0x00];

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Decides whether `body` may cross the instance boundary.
pub fn guard_message(body: &[u8], policy: &SovereigntyPolicy) -> GuardVerdict {
    if body.len() > policy.max_body {
        return GuardVerdict::Deny(format!("body of {} bytes exceeds {} byte cap", body.len(), policy.max_body));
    }
    if contains(body, DICOM_MARKER) {
        return GuardVerdict::Deny("Part-10 file marker found".into());
    }
    if contains(body, PIXEL_DATA_PATTERN) {
        return GuardVerdict::Deny("pixel data element tag found".into());
    }
    let msg: FedMessage = match serde_json::from_slice(body) {
        Ok(m) => m,
        // Decoder errors can quote unescaped body text, so they stay local.
        Err(_) => return GuardVerdict::Deny("not an allowed message shape".into()),
    };
    if let FedMessage::Control { action, args } = &msg {
        if action.len() > MAX_CONTROL_VALUE_LEN
            || args.iter().any(|(k, v)| k.len() > MAX_CONTROL_VALUE_LEN || v.len() > MAX_CONTROL_VALUE_LEN)
        {
            return GuardVerdict::Deny("control argument too long".into());
        }
    }
    GuardVerdict::Allow(msg)
}
