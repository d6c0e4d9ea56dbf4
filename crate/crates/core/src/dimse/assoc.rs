use std::collections::BTreeSet;
use std::time::Duration;

use crate::dicom::{EXPLICIT_VR_LITTLE_ENDIAN, IMPLEMENTATION_CLASS_UID, IMPLICIT_VR_LITTLE_ENDIAN};

use super::command::VERIFICATION_SOP_CLASS;
use super::pdu::{
    ae_bytes, AssociateAc, AssociateRj, AssociateRq, ContextResult, PresentationContextAc,
    UserInformation, APPLICATION_CONTEXT,
};
use super::DimseError;

pub const DEFAULT_AE_TITLE: &str = "MINIPACS";
pub const DEFAULT_PORT: u16 = 11112;
pub const MIN_PDU_LENGTH: u32 = 4096;
pub const DEFAULT_PDU_LENGTH: u32 = 16384;
pub const IMPLEMENTATION_VERSION_NAME: &str = "MINIPACS_010";

/// Storage SOP classes accepted by default.
pub const STORAGE_SOP_CLASSES: &[&str] = &[
    "1.2.840.10008.5.1.4.1.1.1",   // CR
    "1.2.840.10008.5.1.4.1.1.2",   // CT
    "1.2.840.10008.5.1.4.1.1.4",   // MR
    "1.2.840.10008.5.1.4.1.1.6.1", // US
    "1.2.840.10008.5.1.4.1.1.7",   // Secondary capture
    "1.2.840.10008.5.1.4.1.1.20",  // NM
    "1.2.840.10008.5.1.4.1.1.128", // PET
];

#[derive(Debug, Clone)]
pub struct AssociationConfig {
    /// AE title of the accepting side.
    pub called_ae: String,
    /// AE title of the requesting side.
    pub calling_ae: String,
    pub max_pdu_length: u32,
    pub supported_abstract_syntaxes: BTreeSet<String>,
    /// In order of preference when initiating.
    pub supported_transfer_syntaxes: Vec<String>,
    pub association_request_timeout: Duration,
    pub idle_timeout: Duration,
}

impl AssociationConfig {
    pub fn new(called_ae: &str, calling_ae: &str, max_pdu_length: u32) -> Result<Self, DimseError> {
        ae_bytes(called_ae)?;
        ae_bytes(calling_ae)?;
        if max_pdu_length < MIN_PDU_LENGTH {
            return Err(DimseError::Config(format!(
                "max_pdu_length {max_pdu_length} below floor {MIN_PDU_LENGTH}"
            )));
        }
        let mut abstracts: BTreeSet<String> = STORAGE_SOP_CLASSES.iter().map(|s| s.to_string()).collect();
        abstracts.insert(VERIFICATION_SOP_CLASS.to_string());
        Ok(AssociationConfig {
            called_ae: called_ae.to_string(),
            calling_ae: calling_ae.to_string(),
            max_pdu_length,
            supported_abstract_syntaxes: abstracts,
            supported_transfer_syntaxes: vec![
                EXPLICIT_VR_LITTLE_ENDIAN.to_string(),
                IMPLICIT_VR_LITTLE_ENDIAN.to_string(),
            ],
            association_request_timeout: Duration::from_secs(10),
            idle_timeout: Duration::from_secs(60),
        })
    }
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig::new(DEFAULT_AE_TITLE, "STORESCU", DEFAULT_PDU_LENGTH).expect("valid defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssociationDecision {
    Accept(AssociateAc),
    Reject(AssociateRj),
}

/// Negotiates an inbound association request against the local configuration.
pub fn accept_association(rq: &AssociateRq, cfg: &AssociationConfig) -> AssociationDecision {
    if rq.called_ae != cfg.called_ae {
        return AssociationDecision::Reject(AssociateRj {
            result: 1,
            source: 1,
            reason: 7,
        });
    }
    if rq.application_context != APPLICATION_CONTEXT {
        return AssociationDecision::Reject(AssociateRj {
            result: 1,
            source: 1,
            reason: 2,
        });
    }
    if rq.protocol_version & 0x0001 == 0 {
        return AssociationDecision::Reject(AssociateRj {
            result: 1,
            source: 2,
            reason: 2,
        });
    }
    let presentation_contexts = rq
        .presentation_contexts
        .iter()
        .map(|pc| {
            if !cfg.supported_abstract_syntaxes.contains(&pc.abstract_syntax) {
                return PresentationContextAc {
                    id: pc.id,
                    result: ContextResult::AbstractSyntaxUnsupported,
                    transfer_syntax: String::new(),
                };
            }
            match pc
                .transfer_syntaxes
                .iter()
                .find(|ts| cfg.supported_transfer_syntaxes.contains(ts))
            {
                Some(ts) => PresentationContextAc {
                    id: pc.id,
                    result: ContextResult::Accepted,
                    transfer_syntax: ts.clone(),
                },
                None => PresentationContextAc {
                    id: pc.id,
                    result: ContextResult::TransferSyntaxesUnsupported,
                    transfer_syntax: String::new(),
                },
            }
        })
        .collect();
    let proposed = rq.user_info.max_pdu_length;
    let max_pdu_length = if proposed == 0 {
        cfg.max_pdu_length
    } else {
        proposed.min(cfg.max_pdu_length)
    };
    AssociationDecision::Accept(AssociateAc {
        protocol_version: 1,
        called_ae: rq.called_ae.clone(),
        calling_ae: rq.calling_ae.clone(),
        application_context: APPLICATION_CONTEXT.to_string(),
        presentation_contexts,
        user_info: UserInformation {
            max_pdu_length,
            implementation_class_uid: Some(IMPLEMENTATION_CLASS_UID.to_string()),
            implementation_version_name: Some(IMPLEMENTATION_VERSION_NAME.to_string()),
            other: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimse::pdu::PresentationContextRq;

    fn request(contexts: Vec<PresentationContextRq>, max: u32) -> AssociateRq {
        AssociateRq {
            protocol_version: 1,
            called_ae: DEFAULT_AE_TITLE.into(),
            calling_ae: "SCU".into(),
            application_context: APPLICATION_CONTEXT.into(),
            presentation_contexts: contexts,
            user_info: UserInformation {
                max_pdu_length: max,
                ..Default::default()
            },
        }
    }

    fn ctx(id: u8, abs: &str, ts: &[&str]) -> PresentationContextRq {
        PresentationContextRq {
            id,
            abstract_syntax: abs.into(),
            transfer_syntaxes: ts.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn accepted(d: AssociationDecision) -> AssociateAc {
        match d {
            AssociationDecision::Accept(ac) => ac,
            AssociationDecision::Reject(rj) => panic!("rejected: {rj:?}"),
        }
    }

    #[test]
    fn verification_with_explicit_le() {
        let cfg = AssociationConfig::default();
        let ac = accepted(accept_association(
            &request(vec![ctx(1, VERIFICATION_SOP_CLASS, &[EXPLICIT_VR_LITTLE_ENDIAN])], 16384),
            &cfg,
        ));
        assert_eq!(ac.presentation_contexts[0].result, ContextResult::Accepted);
        assert_eq!(ac.presentation_contexts[0].transfer_syntax, EXPLICIT_VR_LITTLE_ENDIAN);
    }

    #[test]
    fn unknown_abstract_and_transfer_syntax() {
        let cfg = AssociationConfig::default();
        let ac = accepted(accept_association(
            &request(
                vec![
                    ctx(1, "1.2.3", &[EXPLICIT_VR_LITTLE_ENDIAN]),
                    ctx(3, VERIFICATION_SOP_CLASS, &["1.2.840.10008.1.2.4.50"]),
                    ctx(5, VERIFICATION_SOP_CLASS, &["1.2.840.10008.1.2.4.50", IMPLICIT_VR_LITTLE_ENDIAN]),
                ],
                0,
            ),
            &cfg,
        ));
        let results: Vec<_> = ac.presentation_contexts.iter().map(|p| p.result.code()).collect();
        assert_eq!(results, vec![3, 4, 0]);
        assert_eq!(ac.presentation_contexts[2].transfer_syntax, IMPLICIT_VR_LITTLE_ENDIAN);
        assert_eq!(ac.user_info.max_pdu_length, cfg.max_pdu_length);
    }

    #[test]
    fn negotiated_pdu_is_minimum() {
        let cfg = AssociationConfig::new(DEFAULT_AE_TITLE, "SCU", 8192).unwrap();
        let ac = accepted(accept_association(&request(vec![], 16384), &cfg));
        assert_eq!(ac.user_info.max_pdu_length, 8192);
    }

    #[test]
    fn wrong_called_ae_rejected() {
        let cfg = AssociationConfig::default();
        let mut rq = request(vec![], 16384);
        rq.called_ae = "OTHER".into();
        assert_eq!(
            accept_association(&rq, &cfg),
            AssociationDecision::Reject(AssociateRj { result: 1, source: 1, reason: 7 })
        );
    }

    #[test]
    fn pdu_floor_enforced() {
        assert!(AssociationConfig::new("A", "B", 4095).is_err());
        assert!(AssociationConfig::new("A", "B", 4096).is_ok());
        assert!(AssociationConfig::new("THIS_TITLE_IS_TOO_LONG", "B", 8192).is_err());
    }
}
