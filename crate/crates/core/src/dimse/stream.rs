//! Splitting DIMSE messages into P-DATA-TF PDUs and reassembling them.

use std::collections::BTreeMap;

use super::command::DimseMessage;
use super::pdu::{PDataTf, Pdu, Pdv, PDV_OVERHEAD};
use super::DimseError;

/// Splits one command or dataset stream into P-DATA-TF PDUs whose payload
/// never exceeds `max_pdu_length`. A limit of 0 means unlimited.
pub fn fragment(context_id: u8, is_command: bool, data: &[u8], max_pdu_length: u32) -> Vec<Pdu> {
    let chunk = if max_pdu_length == 0 {
        data.len().max(1)
    } else {
        (max_pdu_length as usize).saturating_sub(PDV_OVERHEAD).max(1)
    };
    if data.is_empty() {
        return vec![pdata(context_id, is_command, true, Vec::new())];
    }
    let count = data.len().div_ceil(chunk);
    data.chunks(chunk)
        .enumerate()
        .map(|(i, part)| pdata(context_id, is_command, i + 1 == count, part.to_vec()))
        .collect()
}

fn pdata(context_id: u8, is_command: bool, is_last: bool, data: Vec<u8>) -> Pdu {
    Pdu::PDataTf(PDataTf {
        pdvs: vec![Pdv {
            context_id,
            is_command,
            is_last,
            data,
        }],
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedMessage {
    pub context_id: u8,
    pub command: DimseMessage,
    /// Raw dataset bytes in the context's transfer syntax.
    pub dataset: Option<Vec<u8>>,
}

#[derive(Debug, Default)]
enum Phase {
    #[default]
    Command,
    Dataset(DimseMessage),
}

/// Reassembles PDV fragments into complete messages. Only one message may be
/// in flight at a time, on one presentation context.
#[derive(Debug)]
pub struct MessageAssembler {
    accepted: BTreeMap<u8, String>,
    context: Option<u8>,
    phase: Phase,
    buf: Vec<u8>,
}

impl MessageAssembler {
    /// `accepted` maps presentation context id to its transfer syntax UID.
    pub fn new(accepted: BTreeMap<u8, String>) -> Self {
        MessageAssembler {
            accepted,
            context: None,
            phase: Phase::Command,
            buf: Vec::new(),
        }
    }

    pub fn transfer_syntax(&self, context_id: u8) -> Option<&str> {
        self.accepted.get(&context_id).map(String::as_str)
    }

    pub fn is_idle(&self) -> bool {
        self.context.is_none() && matches!(self.phase, Phase::Command) && self.buf.is_empty()
    }

    pub fn push(&mut self, pdu: PDataTf) -> Result<Vec<ReceivedMessage>, DimseError> {
        let violation = |m: String| DimseError::ProtocolViolation(m);
        let mut done = Vec::new();
        for pdv in pdu.pdvs {
            if !self.accepted.contains_key(&pdv.context_id) {
                return Err(violation(format!(
                    "PDV on unaccepted presentation context {}",
                    pdv.context_id
                )));
            }
            match self.context {
                Some(ctx) if ctx != pdv.context_id => {
                    return Err(violation(format!(
                        "PDV on context {} while a message on context {ctx} is incomplete",
                        pdv.context_id
                    )));
                }
                _ => self.context = Some(pdv.context_id),
            }
            let expecting_command = matches!(self.phase, Phase::Command);
            if pdv.is_command != expecting_command {
                return Err(violation(if expecting_command {
                    "dataset fragment before command set completed".into()
                } else {
                    "command fragment while dataset expected".into()
                }));
            }
            self.buf.extend_from_slice(&pdv.data);
            if !pdv.is_last {
                continue;
            }
            let bytes = std::mem::take(&mut self.buf);
            let context_id = pdv.context_id;
            match std::mem::take(&mut self.phase) {
                Phase::Command => {
                    let command = DimseMessage::decode(&bytes)?;
                    if command.has_dataset {
                        self.phase = Phase::Dataset(command);
                    } else {
                        self.context = None;
                        done.push(ReceivedMessage {
                            context_id,
                            command,
                            dataset: None,
                        });
                    }
                }
                Phase::Dataset(command) => {
                    self.context = None;
                    done.push(ReceivedMessage {
                        context_id,
                        command,
                        dataset: Some(bytes),
                    });
                }
            }
        }
        Ok(done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimse::pdu::encode_pdu;

    fn pdvs(pdus: Vec<Pdu>) -> Vec<PDataTf> {
        pdus.into_iter()
            .map(|p| match p {
                Pdu::PDataTf(p) => p,
                other => panic!("unexpected {other:?}"),
            })
            .collect()
    }

    #[test]
    fn fragments_respect_limit() {
        let data: Vec<u8> = (0..10_000u32).map(|i| i as u8).collect();
        for max in [4096u32, 8192, 16384] {
            let pdus = fragment(1, false, &data, max);
            let mut joined = Vec::new();
            for (i, pdu) in pdus.iter().enumerate() {
                let encoded = encode_pdu(pdu).unwrap();
                assert!(encoded.len() - 6 <= max as usize);
                let Pdu::PDataTf(p) = pdu else { unreachable!() };
                assert_eq!(p.pdvs[0].is_last, i + 1 == pdus.len());
                joined.extend_from_slice(&p.pdvs[0].data);
            }
            assert_eq!(joined, data);
        }
    }

    #[test]
    fn reassembles_store_request() {
        let cmd = DimseMessage::store_rq(3, "1.2.840.10008.5.1.4.1.1.2", "1.2.3");
        let mut asm = MessageAssembler::new(BTreeMap::from([(1, "1.2.840.10008.1.2".to_string())]));
        let mut got = Vec::new();
        for p in pdvs(fragment(1, true, &cmd.encode().unwrap(), 4096)) {
            got.extend(asm.push(p).unwrap());
        }
        assert!(got.is_empty());
        for p in pdvs(fragment(1, false, &[7u8; 9000], 4096)) {
            got.extend(asm.push(p).unwrap());
        }
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].command, cmd);
        assert_eq!(got[0].dataset.as_deref(), Some(&[7u8; 9000][..]));
        assert!(asm.is_idle());
    }

    #[test]
    fn rejects_unaccepted_context_and_order() {
        let mut asm = MessageAssembler::new(BTreeMap::from([(1, "1.2.840.10008.1.2".to_string())]));
        let p = pdvs(fragment(3, true, &[0u8; 4], 4096)).remove(0);
        assert!(matches!(asm.push(p), Err(DimseError::ProtocolViolation(_))));
        let p = pdvs(fragment(1, false, &[0u8; 4], 4096)).remove(0);
        assert!(matches!(asm.push(p), Err(DimseError::ProtocolViolation(_))));
    }
}
