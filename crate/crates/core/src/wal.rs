//! Crash-safe, one-way persistent queues.
//!
//! Every inter-zone hand-off goes through one of these queues. Each queue is
//! a directory of append-only segment files plus a cursor sidecar:
//!
//! ```text
//! segment  := "ALQ1" record*
//! record   := seq:u64be length:u32be crc32(payload):u32be payload
//! cursor   := canonical-json {committed_cursor, queue_name} crc32(json):u32be
//! ```
//!
//! Delivery is at-least-once: `dequeue` returns the lowest unacknowledged
//! record without removing it, and only `ack` advances the durable cursor.
//! Each queue binds exactly one producer endpoint and one consumer endpoint;
//! handles are only handed out to the bound endpoint.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{from_canonical_json, to_canonical_json};
use crate::model::Zone;

pub const SEGMENT_MAGIC: &[u8; 4] = b"ALQ1";
pub const RECORD_HEADER_LEN: usize = 16;
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;
pub const MAX_PAYLOAD_BYTES: u32 = 1 << 30;
const SEGMENT_SUFFIX: &str = ".alq";
const CURSOR_FILE: &str = "cursor";
const CURSOR_TMP_FILE: &str = "cursor.tmp";

/// A process that may hold one end of a queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Public zone: consumer-facing submission and retrieval.
    ConsumerNode,
    /// Public zone: vetting workflow.
    VettingNode,
    /// Secure zone: scheduler and airlocks.
    Executor,
    /// Restricted zone: data vault.
    DataVault,
}

impl Endpoint {
    pub fn zone(&self) -> Zone {
        match self {
            Endpoint::ConsumerNode | Endpoint::VettingNode => Zone::Public,
            Endpoint::Executor => Zone::Secure,
            Endpoint::DataVault => Zone::Restricted,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSpec {
    pub name: String,
    pub producer: Endpoint,
    pub consumer: Endpoint,
}

impl QueueSpec {
    pub fn new(name: &str, producer: Endpoint, consumer: Endpoint) -> QueueSpec {
        QueueSpec { name: name.to_owned(), producer, consumer }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("storage full")]
    StorageFull,
    #[error("payload must be non-empty")]
    EmptyPayload,
    #[error("payload of {0} bytes exceeds the record limit")]
    PayloadTooLarge(usize),
    #[error("out-of-order ack of seq {got} (deliverable: {expected:?})")]
    OutOfOrderAck { expected: Option<u64>, got: u64 },
    #[error("queue {queue:?} corrupt at {location}: {detail}")]
    CorruptInterior { queue: String, location: String, detail: String },
    #[error("queue {0:?} is frozen pending manual intervention")]
    Frozen(String),
    #[error("{endpoint} may not act as {role} of queue {queue:?}")]
    WrongRole { queue: String, endpoint: Endpoint, role: &'static str },
    #[error("queue {0:?} already has an active consumer")]
    ConsumerTaken(String),
    #[error("malformed payload on queue {queue:?}: {detail}")]
    BadPayload { queue: String, detail: String },
    #[error("injected crash")]
    Crashed,
    #[error("queue I/O: {0}")]
    Io(io::Error),
}

impl From<io::Error> for QueueError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull || e.raw_os_error() == Some(libc::ENOSPC) {
            QueueError::StorageFull
        } else {
            QueueError::Io(e)
        }
    }
}

/// Points in the write and ack paths where a crash can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    /// A new segment file exists but its magic has not been written.
    SegmentCreated,
    /// The record is about to be written; a torn write may stop part-way.
    RecordWrite,
    /// The record is written but not yet synced.
    RecordWritten,
    /// The record is synced; `enqueue` has not yet returned.
    RecordSynced,
    /// The new cursor is in the temp file, not yet renamed.
    CursorTempWritten,
    /// The cursor rename happened; `ack` has not yet returned.
    CursorRenamed,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 6] = [
        FaultPoint::SegmentCreated,
        FaultPoint::RecordWrite,
        FaultPoint::RecordWritten,
        FaultPoint::RecordSynced,
        FaultPoint::CursorTempWritten,
        FaultPoint::CursorRenamed,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Proceed,
    Crash,
    /// Only at [`FaultPoint::RecordWrite`]: persist this many bytes of the
    /// record, then crash.
    TornWrite(usize),
}

/// Test hook consulted at every [`FaultPoint`].
pub trait FaultInjector: Send + Sync {
    fn at(&self, queue: &str, point: FaultPoint) -> FaultAction;
}

#[derive(Clone)]
pub struct QueueOptions {
    pub segment_bytes: u64,
    pub fault: Option<Arc<dyn FaultInjector>>,
}

impl Default for QueueOptions {
    fn default() -> Self {
        QueueOptions { segment_bytes: DEFAULT_SEGMENT_BYTES, fault: None }
    }
}

impl fmt::Debug for QueueOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QueueOptions")
            .field("segment_bytes", &self.segment_bytes)
            .field("fault", &self.fault.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub queue_name: String,
    pub segments: usize,
    pub records_recovered: u64,
    pub truncated_records: u64,
    pub truncated_bytes: u64,
    pub committed_cursor: u64,
    pub pending: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueStatus {
    pub queue_name: String,
    pub last_seq: u64,
    pub committed_cursor: u64,
    pub pending: u64,
    pub segments: usize,
    pub frozen: Option<String>,
}

/// One record handed to the consumer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
struct Segment {
    first_seq: u64,
    path: PathBuf,
    len: u64,
}

#[derive(Debug, Clone, Copy)]
struct RecordLoc {
    segment: usize,
    payload_offset: u64,
    len: u32,
    crc: u32,
}

struct QueueState {
    segments: Vec<Segment>,
    writer: Option<File>,
    /// Location of seq `index_base + i`.
    index: Vec<RecordLoc>,
    index_base: u64,
    last_seq: u64,
    committed: u64,
    delivered: Option<u64>,
    frozen: Option<String>,
    crashed: bool,
}

/// A single queue directory. Producers and consumers normally reach it
/// through a [`QueueHub`]; tests may drive it directly.
pub struct Queue {
    name: String,
    dir: PathBuf,
    opts: QueueOptions,
    state: Mutex<QueueState>,
    consumer_claimed: AtomicBool,
}

impl fmt::Debug for Queue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Queue").field("name", &self.name).field("dir", &self.dir).finish()
    }
}

fn segment_name(first_seq: u64) -> String {
    format!("{first_seq:020}{SEGMENT_SUFFIX}")
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

fn encode_record(seq: u64, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(RECORD_HEADER_LEN + payload.len());
    buf.extend_from_slice(&seq.to_be_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    buf.extend_from_slice(payload);
    buf
}

#[derive(Serialize, Deserialize)]
struct CursorDoc {
    committed_cursor: u64,
    queue_name: String,
}

impl Queue {
    /// Opens the queue at `dir`, running recovery. Interior corruption leaves
    /// the queue frozen and is returned as [`QueueError::CorruptInterior`].
    pub fn open(dir: &Path, name: &str, opts: QueueOptions) -> Result<(Queue, RecoveryReport), QueueError> {
        fs::create_dir_all(dir)?;
        let queue = Queue {
            name: name.to_owned(),
            dir: dir.to_owned(),
            opts,
            state: Mutex::new(QueueState {
                segments: Vec::new(),
                writer: None,
                index: Vec::new(),
                index_base: 1,
                last_seq: 0,
                committed: 0,
                delivered: None,
                frozen: None,
                crashed: false,
            }),
            consumer_claimed: AtomicBool::new(false),
        };
        let report = queue.recover()?;
        Ok((queue, report))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn corrupt(&self, location: impl Into<String>, detail: impl Into<String>) -> QueueError {
        QueueError::CorruptInterior { queue: self.name.clone(), location: location.into(), detail: detail.into() }
    }

    /// Rescans the log from disk: truncates a torn tail, reloads the cursor,
    /// and rebuilds the in-memory index.
    pub fn recover(&self) -> Result<RecoveryReport, QueueError> {
        let mut state = self.state.lock().unwrap();
        match self.recover_locked(&mut state) {
            Ok(report) => {
                state.frozen = None;
                state.crashed = false;
                Ok(report)
            }
            Err(e) => {
                if let QueueError::CorruptInterior { .. } = &e {
                    state.frozen = Some(e.to_string());
                }
                Err(e)
            }
        }
    }

    fn recover_locked(&self, state: &mut QueueState) -> Result<RecoveryReport, QueueError> {
        let _ = fs::remove_file(self.dir.join(CURSOR_TMP_FILE));
        let mut names: Vec<(u64, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let file_name = entry.file_name();
            let Some(stem) = file_name.to_str().and_then(|n| n.strip_suffix(SEGMENT_SUFFIX)) else { continue };
            let first_seq: u64 = stem.parse().map_err(|_| self.corrupt(stem, "unparseable segment name"))?;
            names.push((first_seq, entry.path()));
        }
        names.sort();

        let mut segments = Vec::new();
        let mut index = Vec::new();
        let mut truncated_records = 0;
        let mut truncated_bytes = 0;
        let index_base = names.first().map_or(1, |(first, _)| *first);
        let mut expected = index_base;
        let last_segment = names.len().saturating_sub(1);

        for (segment_idx, (first_seq, path)) in names.iter().enumerate() {
            let location = |offset: usize| format!("{}@{offset}", path.file_name().unwrap().to_string_lossy());
            if *first_seq != expected {
                return Err(self.corrupt(location(0), format!("segment starts at {first_seq}, expected {expected}")));
            }
            let bytes = fs::read(path)?;
            let is_last = segment_idx == last_segment;
            if bytes.len() < SEGMENT_MAGIC.len() {
                if !is_last || !SEGMENT_MAGIC.starts_with(&bytes) {
                    return Err(self.corrupt(location(0), "truncated segment header"));
                }
                // Crash during segment creation: restore the header.
                let mut f = OpenOptions::new().write(true).open(path)?;
                f.set_len(0)?;
                f.write_all(SEGMENT_MAGIC)?;
                f.sync_all()?;
                segments.push(Segment { first_seq: *first_seq, path: path.clone(), len: SEGMENT_MAGIC.len() as u64 });
                continue;
            }
            if &bytes[..4] != SEGMENT_MAGIC {
                return Err(self.corrupt(location(0), "bad segment magic"));
            }
            let mut pos = SEGMENT_MAGIC.len();
            while pos < bytes.len() {
                match parse_record(&bytes, pos) {
                    ParsedRecord::Complete { seq, len, crc, crc_ok } => {
                        if !crc_ok {
                            return Err(self.corrupt(location(pos), format!("checksum mismatch in record {seq}")));
                        }
                        if seq != expected {
                            return Err(self.corrupt(location(pos), format!("sequence {seq}, expected {expected}")));
                        }
                        index.push(RecordLoc {
                            segment: segment_idx,
                            payload_offset: (pos + RECORD_HEADER_LEN) as u64,
                            len,
                            crc,
                        });
                        expected += 1;
                        pos += RECORD_HEADER_LEN + len as usize;
                    }
                    ParsedRecord::Incomplete => {
                        if !is_last {
                            return Err(self.corrupt(location(pos), "incomplete record before the final segment"));
                        }
                        if let Some(found) = find_later_record(&bytes, pos, expected + 1) {
                            return Err(self.corrupt(
                                location(pos),
                                format!("record {expected} is damaged but record {} follows at offset {found}", expected + 1),
                            ));
                        }
                        // Torn write: drop the partial tail.
                        truncated_records += 1;
                        truncated_bytes += (bytes.len() - pos) as u64;
                        let f = OpenOptions::new().write(true).open(path)?;
                        f.set_len(pos as u64)?;
                        f.sync_all()?;
                        break;
                    }
                }
            }
            let len = fs::metadata(path)?.len();
            segments.push(Segment { first_seq: *first_seq, path: path.clone(), len });
        }
        let last_seq = expected - 1;

        let committed = self.read_cursor()?.unwrap_or(0);
        if committed > last_seq {
            return Err(self.corrupt(CURSOR_FILE, format!("cursor {committed} beyond last record {last_seq}")));
        }
        if committed + 1 < index_base && last_seq >= index_base {
            return Err(self.corrupt(CURSOR_FILE, format!("cursor {committed} precedes retained records")));
        }

        let writer = match segments.last() {
            Some(s) => Some(OpenOptions::new().append(true).open(&s.path)?),
            None => None,
        };
        let report = RecoveryReport {
            queue_name: self.name.clone(),
            segments: segments.len(),
            records_recovered: index.len() as u64,
            truncated_records,
            truncated_bytes,
            committed_cursor: committed,
            pending: last_seq - committed,
        };
        *state = QueueState {
            segments,
            writer,
            index,
            index_base,
            last_seq,
            committed,
            delivered: None,
            frozen: None,
            crashed: false,
        };
        Ok(report)
    }

    fn read_cursor(&self) -> Result<Option<u64>, QueueError> {
        let path = self.dir.join(CURSOR_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if bytes.len() < 4 {
            return Err(self.corrupt(CURSOR_FILE, "truncated cursor"));
        }
        let (json, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(json).to_be_bytes() != crc {
            return Err(self.corrupt(CURSOR_FILE, "cursor checksum mismatch"));
        }
        let doc: CursorDoc = from_canonical_json(json).map_err(|e| self.corrupt(CURSOR_FILE, e.to_string()))?;
        if doc.queue_name != self.name {
            return Err(self.corrupt(CURSOR_FILE, format!("cursor belongs to {:?}", doc.queue_name)));
        }
        Ok(Some(doc.committed_cursor))
    }

    fn fault(&self, point: FaultPoint) -> FaultAction {
        self.opts.fault.as_ref().map_or(FaultAction::Proceed, |f| f.at(&self.name, point))
    }

    fn crash(&self, state: &mut QueueState) -> QueueError {
        state.crashed = true;
        state.writer = None;
        QueueError::Crashed
    }

    fn usable(&self) -> Result<MutexGuard<'_, QueueState>, QueueError> {
        let state = self.state.lock().unwrap();
        if state.crashed {
            return Err(QueueError::Crashed);
        }
        if state.frozen.is_some() {
            return Err(QueueError::Frozen(self.name.clone()));
        }
        Ok(state)
    }

    /// Appends `payload` and syncs it to stable storage before returning its seq.
    pub fn enqueue(&self, payload: &[u8]) -> Result<u64, QueueError> {
        if payload.is_empty() {
            return Err(QueueError::EmptyPayload);
        }
        if payload.len() > MAX_PAYLOAD_BYTES as usize {
            return Err(QueueError::PayloadTooLarge(payload.len()));
        }
        let mut state = self.usable()?;
        let seq = state.last_seq + 1;
        let record = encode_record(seq, payload);

        let needs_segment = match state.segments.last() {
            None => true,
            Some(s) => s.len > SEGMENT_MAGIC.len() as u64 && s.len + record.len() as u64 > self.opts.segment_bytes,
        };
        if needs_segment {
            self.start_segment(&mut state, seq)?;
        }

        let seg_idx = state.segments.len() - 1;
        let start = state.segments[seg_idx].len;
        let write_result = match self.fault(FaultPoint::RecordWrite) {
            FaultAction::TornWrite(n) => {
                let n = n.min(record.len());
                let writer = state.writer.as_mut().expect("open segment");
                writer.write_all(&record[..n])?;
                writer.sync_data()?;
                return Err(self.crash(&mut state));
            }
            FaultAction::Crash => return Err(self.crash(&mut state)),
            FaultAction::Proceed => state.writer.as_mut().expect("open segment").write_all(&record),
        };
        if let Err(e) = write_result {
            // Leave no partial record behind for the next append.
            if let Some(w) = state.writer.as_mut() {
                let _ = w.set_len(start);
            }
            return Err(e.into());
        }
        if self.fault(FaultPoint::RecordWritten) == FaultAction::Crash {
            return Err(self.crash(&mut state));
        }
        state.writer.as_mut().expect("open segment").sync_data()?;
        if self.fault(FaultPoint::RecordSynced) == FaultAction::Crash {
            return Err(self.crash(&mut state));
        }
        state.segments[seg_idx].len += record.len() as u64;
        state.index.push(RecordLoc {
            segment: seg_idx,
            payload_offset: start + RECORD_HEADER_LEN as u64,
            len: payload.len() as u32,
            crc: crc32fast::hash(payload),
        });
        state.last_seq = seq;
        Ok(seq)
    }

    fn start_segment(&self, state: &mut QueueState, first_seq: u64) -> Result<(), QueueError> {
        let path = self.dir.join(segment_name(first_seq));
        let mut file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        if self.fault(FaultPoint::SegmentCreated) == FaultAction::Crash {
            return Err(self.crash(state));
        }
        file.write_all(SEGMENT_MAGIC)?;
        file.sync_all()?;
        sync_dir(&self.dir)?;
        state.segments.push(Segment { first_seq, path, len: SEGMENT_MAGIC.len() as u64 });
        state.writer = Some(file);
        Ok(())
    }

    /// Returns the lowest unacknowledged record without consuming it.
    pub fn dequeue(&self) -> Result<Option<Delivery>, QueueError> {
        let mut state = self.usable()?;
        let seq = state.committed + 1;
        if seq > state.last_seq {
            return Ok(None);
        }
        let loc = state.index[(seq - state.index_base) as usize];
        let path = state.segments[loc.segment].path.clone();
        let mut file = File::open(&path)?;
        file.seek(SeekFrom::Start(loc.payload_offset))?;
        let mut payload = vec![0u8; loc.len as usize];
        file.read_exact(&mut payload)?;
        if crc32fast::hash(&payload) != loc.crc {
            let err = self.corrupt(format!("seq {seq}"), "checksum mismatch on read");
            state.frozen = Some(err.to_string());
            return Err(err);
        }
        state.delivered = Some(seq);
        Ok(Some(Delivery { seq, payload }))
    }

    /// Acknowledges the currently delivered record, durably advancing the cursor.
    pub fn ack(&self, seq: u64) -> Result<(), QueueError> {
        let mut state = self.usable()?;
        if state.delivered != Some(seq) || seq != state.committed + 1 {
            return Err(QueueError::OutOfOrderAck { expected: state.delivered, got: seq });
        }
        let doc = CursorDoc { committed_cursor: seq, queue_name: self.name.clone() };
        let mut bytes = to_canonical_json(&doc);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_be_bytes());
        let tmp = self.dir.join(CURSOR_TMP_FILE);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        if self.fault(FaultPoint::CursorTempWritten) == FaultAction::Crash {
            return Err(self.crash(&mut state));
        }
        fs::rename(&tmp, self.dir.join(CURSOR_FILE))?;
        sync_dir(&self.dir)?;
        if self.fault(FaultPoint::CursorRenamed) == FaultAction::Crash {
            return Err(self.crash(&mut state));
        }
        state.committed = seq;
        state.delivered = None;
        Ok(())
    }

    pub fn status(&self) -> QueueStatus {
        let state = self.state.lock().unwrap();
        QueueStatus {
            queue_name: self.name.clone(),
            last_seq: state.last_seq,
            committed_cursor: state.committed,
            pending: state.last_seq - state.committed,
            segments: state.segments.len(),
            frozen: state.frozen.clone(),
        }
    }

    /// Reads every retained record in order (admin inspection).
    pub fn scan(&self) -> Result<Vec<Delivery>, QueueError> {
        let state = self.state.lock().unwrap();
        let mut out = Vec::with_capacity(state.index.len());
        for (i, loc) in state.index.iter().enumerate() {
            let mut file = File::open(&state.segments[loc.segment].path)?;
            file.seek(SeekFrom::Start(loc.payload_offset))?;
            let mut payload = vec![0u8; loc.len as usize];
            file.read_exact(&mut payload)?;
            if crc32fast::hash(&payload) != loc.crc {
                return Err(self.corrupt(format!("seq {}", state.index_base + i as u64), "checksum mismatch on scan"));
            }
            out.push(Delivery { seq: state.index_base + i as u64, payload });
        }
        Ok(out)
    }

    /// Deletes whole segments whose records are all acknowledged, keeping
    /// the active segment. Returns the number of segments removed.
    pub fn compact(&self) -> Result<usize, QueueError> {
        let mut state = self.usable()?;
        let mut removable = 0;
        while removable + 1 < state.segments.len() {
            let next_first = state.segments[removable + 1].first_seq;
            if next_first - 1 > state.committed {
                break;
            }
            removable += 1;
        }
        if removable == 0 {
            return Ok(0);
        }
        for seg in &state.segments[..removable] {
            fs::remove_file(&seg.path)?;
        }
        sync_dir(&self.dir)?;
        let new_base = state.segments[removable].first_seq;
        let drop_records = (new_base - state.index_base) as usize;
        state.segments.drain(..removable);
        state.index.drain(..drop_records);
        for loc in &mut state.index {
            loc.segment -= removable;
        }
        state.index_base = new_base;
        Ok(removable)
    }

    fn claim_consumer(&self) -> bool {
        !self.consumer_claimed.swap(true, Ordering::SeqCst)
    }

    fn release_consumer(&self) {
        self.consumer_claimed.store(false, Ordering::SeqCst);
    }
}

enum ParsedRecord {
    Complete { seq: u64, len: u32, crc: u32, crc_ok: bool },
    Incomplete,
}

fn parse_record(bytes: &[u8], pos: usize) -> ParsedRecord {
    if bytes.len() - pos < RECORD_HEADER_LEN {
        return ParsedRecord::Incomplete;
    }
    let seq = u64::from_be_bytes(bytes[pos..pos + 8].try_into().unwrap());
    let len = u32::from_be_bytes(bytes[pos + 8..pos + 12].try_into().unwrap());
    let crc = u32::from_be_bytes(bytes[pos + 12..pos + 16].try_into().unwrap());
    let start = pos + RECORD_HEADER_LEN;
    if len > MAX_PAYLOAD_BYTES || start + len as usize > bytes.len() {
        return ParsedRecord::Incomplete;
    }
    let crc_ok = crc32fast::hash(&bytes[start..start + len as usize]) == crc;
    ParsedRecord::Complete { seq, len, crc, crc_ok }
}

/// Looks past a damaged record for a checksum-valid record carrying
/// `next_seq`. Finding one means the damage is not a torn tail.
fn find_later_record(bytes: &[u8], from: usize, next_seq: u64) -> Option<usize> {
    let needle = next_seq.to_be_bytes();
    let mut pos = from + 1;
    while pos + RECORD_HEADER_LEN <= bytes.len() {
        if bytes[pos..pos + 8] == needle {
            if let ParsedRecord::Complete { crc_ok: true, .. } = parse_record(bytes, pos) {
                return Some(pos);
            }
        }
        pos += 1;
    }
    None
}

/// The set of queues a deployment declares, with their endpoint bindings.
pub struct QueueHub {
    root: PathBuf,
    specs: BTreeMap<String, QueueSpec>,
    queues: BTreeMap<String, Arc<Queue>>,
    reports: Vec<RecoveryReport>,
    frozen: BTreeMap<String, String>,
}

impl fmt::Debug for QueueHub {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QueueHub").field("root", &self.root).field("queues", &self.specs.keys()).finish()
    }
}

impl QueueHub {
    /// Opens every declared queue under `root/<name>/`. A queue whose
    /// recovery finds interior corruption is kept frozen; the others work.
    pub fn open(root: &Path, specs: &[QueueSpec], opts: QueueOptions) -> Result<QueueHub, QueueError> {
        let mut hub = QueueHub {
            root: root.to_owned(),
            specs: BTreeMap::new(),
            queues: BTreeMap::new(),
            reports: Vec::new(),
            frozen: BTreeMap::new(),
        };
        for spec in specs {
            let (queue, report) = match Queue::open(&root.join(&spec.name), &spec.name, opts.clone()) {
                Ok(pair) => pair,
                Err(QueueError::CorruptInterior { queue, location, detail }) => {
                    tracing::error!(%queue, %location, %detail, "queue frozen after recovery");
                    hub.frozen.insert(spec.name.clone(), format!("{location}: {detail}"));
                    hub.specs.insert(spec.name.clone(), spec.clone());
                    continue;
                }
                Err(e) => return Err(e),
            };
            hub.reports.push(report);
            hub.specs.insert(spec.name.clone(), spec.clone());
            hub.queues.insert(spec.name.clone(), Arc::new(queue));
        }
        Ok(hub)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn specs(&self) -> impl Iterator<Item = &QueueSpec> {
        self.specs.values()
    }

    pub fn recovery_reports(&self) -> &[RecoveryReport] {
        &self.reports
    }

    pub fn frozen(&self) -> &BTreeMap<String, String> {
        &self.frozen
    }

    fn queue(&self, name: &str) -> Result<&Arc<Queue>, QueueError> {
        if self.frozen.contains_key(name) {
            return Err(QueueError::Frozen(name.to_owned()));
        }
        self.queues.get(name).ok_or_else(|| QueueError::UnknownQueue(name.to_owned()))
    }

    fn spec(&self, name: &str) -> Result<&QueueSpec, QueueError> {
        self.specs.get(name).ok_or_else(|| QueueError::UnknownQueue(name.to_owned()))
    }

    pub fn producer(&self, name: &str, endpoint: Endpoint) -> Result<Producer, QueueError> {
        let spec = self.spec(name)?;
        if spec.producer != endpoint {
            return Err(QueueError::WrongRole { queue: name.to_owned(), endpoint, role: "producer" });
        }
        Ok(Producer { queue: self.queue(name)?.clone() })
    }

    /// Claims the single consumer handle. The claim is released on drop.
    pub fn consumer(&self, name: &str, endpoint: Endpoint) -> Result<Consumer, QueueError> {
        let spec = self.spec(name)?;
        if spec.consumer != endpoint {
            return Err(QueueError::WrongRole { queue: name.to_owned(), endpoint, role: "consumer" });
        }
        let queue = self.queue(name)?.clone();
        if !queue.claim_consumer() {
            return Err(QueueError::ConsumerTaken(name.to_owned()));
        }
        Ok(Consumer { queue })
    }

    pub fn status(&self, name: &str) -> Result<QueueStatus, QueueError> {
        if let Some(reason) = self.frozen.get(name) {
            return Ok(QueueStatus {
                queue_name: name.to_owned(),
                last_seq: 0,
                committed_cursor: 0,
                pending: 0,
                segments: 0,
                frozen: Some(reason.clone()),
            });
        }
        Ok(self.queue(name)?.status())
    }
}

/// Write-only end of a queue.
#[derive(Debug, Clone)]
pub struct Producer {
    queue: Arc<Queue>,
}

impl Producer {
    pub fn queue_name(&self) -> &str {
        self.queue.name()
    }

    pub fn enqueue(&self, payload: &[u8]) -> Result<u64, QueueError> {
        self.queue.enqueue(payload)
    }

    /// Enqueues the canonical JSON encoding of `message`.
    pub fn send<T: Serialize>(&self, message: &T) -> Result<u64, QueueError> {
        self.queue.enqueue(&to_canonical_json(message))
    }
}

/// Read-and-acknowledge end of a queue.
#[derive(Debug)]
pub struct Consumer {
    queue: Arc<Queue>,
}

impl Consumer {
    pub fn queue_name(&self) -> &str {
        self.queue.name()
    }

    pub fn dequeue(&self) -> Result<Option<Delivery>, QueueError> {
        self.queue.dequeue()
    }

    pub fn ack(&self, seq: u64) -> Result<(), QueueError> {
        self.queue.ack(seq)
    }

    /// Dequeues and decodes the next canonical-JSON message.
    pub fn receive<T: Serialize + DeserializeOwned>(&self) -> Result<Option<(u64, T)>, QueueError> {
        let Some(delivery) = self.queue.dequeue()? else { return Ok(None) };
        let message = from_canonical_json(&delivery.payload)
            .map_err(|e| QueueError::BadPayload { queue: self.queue.name().to_owned(), detail: e.to_string() })?;
        Ok(Some((delivery.seq, message)))
    }

    pub fn status(&self) -> QueueStatus {
        self.queue.status()
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        self.queue.release_consumer();
    }
}
