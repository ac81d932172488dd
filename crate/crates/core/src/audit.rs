//! Per-zone, SHA-256 hash-chained audit log.
//!
//! Each zone owns one chain, stored as canonical-JSON lines in
//! `audit.jsonl`. An event's hash covers its sequence number, timestamp,
//! zone, actor, action, payload digest and the previous event's hash, so
//! altering any record invalidates every later link.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::codec::{digest_canonical, from_canonical_json, to_canonical_json, Clock, Digest, Timestamp};
use crate::model::Zone;

/// `prev_hash` of the first event in every chain.
pub const GENESIS_HASH: Digest = Digest::ZERO;

pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    JobSubmitted,
    SubmissionRejected,
    JobTransition,
    IllegalTransition,
    VettingCaseOpened,
    InputDecision,
    OutputDecision,
    ResultsFetched,
    NonceIssued,
    NonceImported,
    SignatureAccepted,
    SignatureRejected,
    VetterRegistered,
    VetterDisabled,
    VetterEnabled,
    PrincipalRegistered,
    AuthFailed,
    OrderRejected,
    DuplicateOrder,
    MountRequested,
    MountDenied,
    CredentialIssued,
    CredentialRedeemed,
    RedemptionRejected,
    CredentialRevoked,
    DatasetLoaded,
    DatasetQuarantined,
    VaultUnlocked,
    VaultUnlockFailed,
    AirlockLaunched,
    AirlockDestroyed,
    ExecutionFinished,
    ResultsEnqueued,
    CollectionFailed,
    QueueRecovered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: Timestamp,
    pub zone: Zone,
    pub actor: String,
    pub action: AuditAction,
    pub payload_digest: Digest,
    pub prev_hash: Digest,
    pub event_hash: Digest,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    seq: u64,
    timestamp: Timestamp,
    zone: Zone,
    actor: &'a str,
    action: AuditAction,
    payload_digest: Digest,
    prev_hash: Digest,
}

impl AuditEvent {
    /// Hash over every field except `event_hash` itself.
    pub fn compute_hash(&self) -> Digest {
        digest_canonical(&HashedFields {
            seq: self.seq,
            timestamp: self.timestamp,
            zone: self.zone,
            actor: &self.actor,
            action: self.action,
            payload_digest: self.payload_digest,
            prev_hash: self.prev_hash,
        })
    }

    pub fn seal(
        seq: u64,
        timestamp: Timestamp,
        zone: Zone,
        actor: &str,
        action: AuditAction,
        payload_digest: Digest,
        prev_hash: Digest,
    ) -> AuditEvent {
        let mut event = AuditEvent {
            seq,
            timestamp,
            zone,
            actor: actor.to_owned(),
            action,
            payload_digest,
            prev_hash,
            event_hash: Digest::ZERO,
        };
        event.event_hash = event.compute_hash();
        event
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainReport {
    Ok { length: u64 },
    Broken { index: u64, reason: BreakReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakReason {
    SequenceGap,
    PrevHashMismatch,
    EventHashMismatch,
    ZoneMismatch,
    Unparseable,
}

impl ChainReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainReport::Ok { .. })
    }

    pub fn broken_at(&self) -> Option<u64> {
        match self {
            ChainReport::Broken { index, .. } => Some(*index),
            ChainReport::Ok { .. } => None,
        }
    }
}

/// Verifies an ordered chain from the genesis value. Sequence numbers start
/// at zero, so the reported index is also the offending event's `seq`.
pub fn verify_audit_chain(events: &[AuditEvent]) -> ChainReport {
    let mut prev = GENESIS_HASH;
    let zone = events.first().map(|e| e.zone);
    for (index, event) in events.iter().enumerate() {
        let index = index as u64;
        let reason = if event.seq != index {
            Some(BreakReason::SequenceGap)
        } else if Some(event.zone) != zone {
            Some(BreakReason::ZoneMismatch)
        } else if event.prev_hash != prev {
            Some(BreakReason::PrevHashMismatch)
        } else if event.compute_hash() != event.event_hash {
            Some(BreakReason::EventHashMismatch)
        } else {
            None
        };
        if let Some(reason) = reason {
            return ChainReport::Broken { index, reason };
        }
        prev = event.event_hash;
    }
    ChainReport::Ok { length: events.len() as u64 }
}

/// Verifies a serialised chain. Every line must parse and be byte-identical
/// to the canonical encoding of what it parses to.
pub fn verify_audit_bytes(bytes: &[u8]) -> ChainReport {
    let mut events = Vec::new();
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    if !body.is_empty() {
        for (index, line) in body.split(|b| *b == b'\n').enumerate() {
            match from_canonical_json::<AuditEvent>(line) {
                Ok(event) => events.push(event),
                Err(_) => {
                    // Earlier lines may already be broken; report the first failure.
                    return match verify_audit_chain(&events) {
                        ChainReport::Ok { .. } => ChainReport::Broken { index: index as u64, reason: BreakReason::Unparseable },
                        broken => broken,
                    };
                }
            }
        }
    }
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        let report = verify_audit_chain(&events);
        if !report.is_ok() {
            return report;
        }
        return ChainReport::Broken { index: events.len().saturating_sub(1) as u64, reason: BreakReason::Unparseable };
    }
    verify_audit_chain(&events)
}

pub fn verify_audit_file(path: &Path) -> std::io::Result<ChainReport> {
    Ok(verify_audit_bytes(&std::fs::read(path)?))
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("existing audit chain is broken: {0:?}")]
    Broken(ChainReport),
}

struct ChainHead {
    file: File,
    next_seq: u64,
    last_hash: Digest,
    /// File length after our last append; a different length means another
    /// process appended in between.
    known_len: u64,
}

/// Advisory exclusive lock held for one append. Unlocked on drop.
struct FileLock(std::os::fd::RawFd);

impl FileLock {
    fn exclusive(file: &File) -> std::io::Result<FileLock> {
        use std::os::fd::AsRawFd;
        let fd = file.as_raw_fd();
        if unsafe { libc::flock(fd, libc::LOCK_EX) } != 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(FileLock(fd))
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        unsafe { libc::flock(self.0, libc::LOCK_UN) };
    }
}

/// Append handle for one zone's chain. Cloning shares the same chain.
#[derive(Clone)]
pub struct AuditLog {
    zone: Zone,
    path: PathBuf,
    clock: Arc<dyn Clock>,
    head: Arc<Mutex<ChainHead>>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog").field("zone", &self.zone).field("path", &self.path).finish()
    }
}

impl AuditLog {
    /// Opens (or creates) `dir/audit.jsonl`, verifying the existing chain.
    pub fn open(dir: &Path, zone: Zone, clock: Arc<dyn Clock>) -> Result<AuditLog, AuditError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(AUDIT_FILE);
        let mut next_seq = 0;
        let mut last_hash = GENESIS_HASH;
        if path.exists() {
            let bytes = std::fs::read(&path)?;
            match verify_audit_bytes(&bytes) {
                ChainReport::Ok { length } => {
                    next_seq = length;
                    if length > 0 {
                        let last = BufReader::new(&bytes[..]).lines().last().expect("non-empty")?;
                        let event: AuditEvent = serde_json::from_str(&last).expect("verified line");
                        last_hash = event.event_hash;
                    }
                }
                broken => return Err(AuditError::Broken(broken)),
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let known_len = file.metadata()?.len();
        Ok(AuditLog { zone, path, clock, head: Arc::new(Mutex::new(ChainHead { file, next_seq, last_hash, known_len })) })
    }

    pub fn zone(&self) -> Zone {
        self.zone
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one event; the payload is reduced to its canonical digest.
    pub fn record<P: Serialize + ?Sized>(&self, actor: &str, action: AuditAction, payload: &P) -> Result<AuditEvent, AuditError> {
        let payload_digest = digest_canonical(payload);
        let mut guard = self.head.lock().unwrap();
        let head = &mut *guard;
        let _lock = FileLock::exclusive(&head.file)?;
        let len = head.file.metadata()?.len();
        if len != head.known_len {
            let bytes = std::fs::read(&self.path)?;
            let last = bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()).last();
            let event: AuditEvent = match last {
                Some(line) => serde_json::from_slice(line).map_err(std::io::Error::other)?,
                None => return Err(std::io::Error::other("audit file shrank").into()),
            };
            head.next_seq = event.seq + 1;
            head.last_hash = event.event_hash;
        }
        let event =
            AuditEvent::seal(head.next_seq, self.clock.now(), self.zone, actor, action, payload_digest, head.last_hash);
        let mut line = to_canonical_json(&event);
        line.push(b'\n');
        head.file.write_all(&line)?;
        head.file.sync_data()?;
        head.next_seq += 1;
        head.last_hash = event.event_hash;
        head.known_len = head.file.metadata()?.len();
        Ok(event)
    }

    pub fn len(&self) -> u64 {
        self.head.lock().unwrap().next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read_all(&self) -> Result<Vec<AuditEvent>, AuditError> {
        let _guard = self.head.lock().unwrap();
        let bytes = std::fs::read(&self.path)?;
        let mut out = Vec::new();
        for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            out.push(serde_json::from_slice(line).map_err(std::io::Error::other)?);
        }
        Ok(out)
    }

    pub fn verify(&self) -> Result<ChainReport, AuditError> {
        let _guard = self.head.lock().unwrap();
        Ok(verify_audit_file(&self.path)?)
    }
}
