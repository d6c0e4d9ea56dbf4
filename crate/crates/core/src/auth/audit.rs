//! Append-only audit log with a SHA-256 hash chain, stored as JSON lines.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{self, Clock};

pub const GENESIS_PREV_HASH: [u8; 32] = [0; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Allowed,
    Denied,
    Error,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Allowed => "allowed",
            Outcome::Denied => "denied",
            Outcome::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEvent {
    pub seq: u64,
    pub time: DateTime<Utc>,
    pub principal: String,
    pub action: String,
    pub resource: String,
    pub outcome: Outcome,
    /// Hex.
    pub prev_hash: String,
    /// Hex.
    pub hash: String,
}

fn put_field(h: &mut Sha256, s: &str) {
    h.update((s.len() as u32).to_be_bytes());
    h.update(s.as_bytes());
}

/// SHA-256 over `seq (u64 BE) ‖ time ‖ principal ‖ action ‖ resource ‖
/// outcome ‖ prev_hash (32 raw bytes)`, each string prefixed by its u32 BE
/// byte length. Time is RFC 3339 UTC with microseconds.
pub fn event_hash(
    seq: u64,
    time: &DateTime<Utc>,
    principal: &str,
    action: &str,
    resource: &str,
    outcome: Outcome,
    prev_hash: &[u8; 32],
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seq.to_be_bytes());
    put_field(&mut h, &time.to_rfc3339_opts(SecondsFormat::Micros, true));
    put_field(&mut h, principal);
    put_field(&mut h, action);
    put_field(&mut h, resource);
    put_field(&mut h, outcome.as_str());
    h.update(prev_hash);
    h.finalize().into()
}

impl AuditEvent {
    /// The hash recomputed from the fields, with the stored `prev_hash`.
    pub fn recompute(&self) -> Option<[u8; 32]> {
        let prev: [u8; 32] = hex::decode(&self.prev_hash).ok()?.try_into().ok()?;
        Some(event_hash(self.seq, &self.time, &self.principal, &self.action, &self.resource, self.outcome, &prev))
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("storage full")]
    StorageFull,
    #[error("audit log line {line} unreadable: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for AuditError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            AuditError::StorageFull
        } else {
            AuditError::Io(e)
        }
    }
}

/// Per-event validity when the chain is recomputed from genesis. Once an
/// event fails, every later one fails too, since its expected predecessor
/// hash is the recomputed one.
pub fn chain_status(events: &[AuditEvent]) -> Vec<bool> {
    let mut expected_prev = GENESIS_PREV_HASH;
    events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let prev_ok = e.prev_hash == hex::encode(expected_prev);
            let recomputed =
                event_hash(e.seq, &e.time, &e.principal, &e.action, &e.resource, e.outcome, &expected_prev);
            let ok = prev_ok && e.seq == i as u64 && hex::encode(recomputed) == e.hash;
            expected_prev = recomputed;
            ok
        })
        .collect()
}

/// Index of the first event that does not verify.
pub fn verify_chain(events: &[AuditEvent]) -> Result<(), usize> {
    match chain_status(events).iter().position(|ok| !ok) {
        Some(i) => Err(i),
        None => Ok(()),
    }
}

/// Verifies a log file. A line that no longer parses, or whose bytes differ
/// from the canonical encoding of the event it parses to, counts as the
/// first broken event. An unterminated final line is an append in progress
/// and is not read.
pub fn verify_file(path: &Path) -> Result<usize, usize> {
    let text = fs::read(path).map_err(|_| 0usize)?;
    let end = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut events = Vec::new();
    for (i, line) in text[..end].split(|&b| b == b'\n').filter(|l| !l.is_empty()).enumerate() {
        match serde_json::from_slice::<AuditEvent>(line) {
            Ok(e) if serde_json::to_vec(&e).is_ok_and(|canonical| canonical == line) => events.push(e),
            _ => return Err(verify_chain(&events).err().unwrap_or(i)),
        }
    }
    verify_chain(&events).map(|_| events.len())
}

struct Tail {
    file: File,
    next_seq: u64,
    last_hash: [u8; 32],
}

pub struct AuditLog {
    path: PathBuf,
    clock: Clock,
    tail: Mutex<Tail>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog").field("path", &self.path).finish()
    }
}

impl AuditLog {
    pub fn open(path: impl AsRef<Path>) -> Result<AuditLog, AuditError> {
        AuditLog::open_with_clock(path, clock::system())
    }

    /// Opens or creates the log. A torn final line from an interrupted
    /// append is cut off.
    pub fn open_with_clock(path: impl AsRef<Path>, clock: Clock) -> Result<AuditLog, AuditError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let mut last: Option<AuditEvent> = None;
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            let mut line = Vec::new();
            let mut n = 0;
            loop {
                line.clear();
                let read = reader.read_until(b'\n', &mut line)?;
                if read == 0 {
                    break;
                }
                n += 1;
                if line.last() != Some(&b'\n') {
                    break;
                }
                let event: AuditEvent = serde_json::from_slice(&line)
                    .map_err(|e| AuditError::Corrupt { line: n, reason: e.to_string() })?;
                good_len += read as u64;
                last = Some(event);
            }
        }
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        let (next_seq, last_hash) = match last {
            Some(e) => {
                let hash: [u8; 32] = hex::decode(&e.hash)
                    .ok()
                    .and_then(|h| h.try_into().ok())
                    .ok_or_else(|| AuditError::Corrupt { line: 0, reason: "bad hash".into() })?;
                (e.seq + 1, hash)
            }
            None => (0, GENESIS_PREV_HASH),
        };
        Ok(AuditLog { path, clock, tail: Mutex::new(Tail { file, next_seq, last_hash }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one event. Appends are serialized; a failed write leaves the
    /// log as it was.
    pub fn append(&self, principal: &str, action: &str, resource: &str, outcome: Outcome) -> Result<AuditEvent, AuditError> {
        let mut tail = self.tail.lock().expect("audit lock");
        let now = (self.clock)();
        // Stored time must reproduce the hashed text exactly.
        let time = DateTime::parse_from_rfc3339(&now.to_rfc3339_opts(SecondsFormat::Micros, true))
            .expect("own rfc3339")
            .with_timezone(&Utc);
        let hash = event_hash(tail.next_seq, &time, principal, action, resource, outcome, &tail.last_hash);
        let event = AuditEvent {
            seq: tail.next_seq,
            time,
            principal: principal.to_string(),
            action: action.to_string(),
            resource: resource.to_string(),
            outcome,
            prev_hash: hex::encode(tail.last_hash),
            hash: hex::encode(hash),
        };
        let mut line = serde_json::to_vec(&event).expect("event serializes");
        line.push(b'\n');
        let before = tail.file.metadata()?.len();
        if let Err(e) = tail.file.write_all(&line).and_then(|_| tail.file.sync_data()) {
            let _ = tail.file.set_len(before);
            return Err(e.into());
        }
        tail.next_seq += 1;
        tail.last_hash = hash;
        Ok(event)
    }

    pub fn events(&self) -> Result<Vec<AuditEvent>, AuditError> {
        let _guard = self.tail.lock().expect("audit lock");
        let text = fs::read(&self.path)?;
        text.split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_slice(l).map_err(|e| AuditError::Corrupt { line: i + 1, reason: e.to_string() })
            })
            .collect()
    }

    pub fn len(&self) -> u64 {
        self.tail.lock().expect("audit lock").next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
