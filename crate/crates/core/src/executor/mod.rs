//! Secure zone: dequeues approved jobs, re-verifies the vetting chain,
//! obtains a one-time credential from the vault and runs the job in a
//! transient airlock.
//!
//! An order is journaled under `inflight/` before it is acknowledged on the
//! execution queue, and the journal entry is removed only after the job's
//! output package is durably enqueued. A crash therefore re-runs the job
//! from the journal; the public zone deduplicates results on job id.

pub mod airlock;
pub mod runner;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attestation::{verify_approvals, AttestationError, KeyStore, NonceRegistry, SignatureRejection, DEFAULT_NONCE_TTL_SECS};
use crate::audit::{AuditAction, AuditError, AuditLog};
use crate::codec::{from_canonical_json, Clock, Digest};
use crate::fsutil;
use crate::messages::{
    next_message, CredentialOutcome, CredentialResponse, ExecutionOrder, NonceIssued, OutputPackage, StatusUpdate,
    CREDENTIALS, EXECUTION, EXECUTION_STATUS, MOUNT_REQUESTS, NONCE_ISSUANCE, OUTPUT_VETTING,
};
use crate::model::{BundleError, JobResultSet, LifecycleEvent, RuntimeCatalogue, Zone};
use crate::vault::{DataChannel, MountRequest, OneTimeCredential};
use crate::wal::{Consumer, Endpoint, Producer, QueueError, QueueHub};

use airlock::{combine_logs, sweep_stale, AirlockInstance, AirlockStatus};
use runner::{is_root, reap_uid, LaunchSpec, RunnerError, SandboxRunner, SlotIdentity};

pub const DEFAULT_CREDENTIAL_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_UID_BASE: u32 = 61000;
pub const DEFAULT_MAX_OUTPUT_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    /// Maximum concurrent airlocks.
    pub parallelism: usize,
    /// Distinct vetter signatures required per job.
    pub approval_threshold: usize,
    pub credential_timeout: Duration,
    pub max_attempts: u32,
    pub catalogue: RuntimeCatalogue,
    /// Airlock slot `i` runs as uid/gid `uid_base + i`. `None` runs jobs as
    /// the executor's own identity.
    pub uid_base: Option<u32>,
    pub nonce_ttl_secs: i64,
    pub max_output_bytes: u64,
    pub poll_interval: Duration,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            parallelism: 1,
            approval_threshold: 1,
            credential_timeout: DEFAULT_CREDENTIAL_TIMEOUT,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            catalogue: RuntimeCatalogue::default(),
            uid_base: is_root().then_some(DEFAULT_UID_BASE),
            nonce_ttl_secs: DEFAULT_NONCE_TTL_SECS,
            max_output_bytes: DEFAULT_MAX_OUTPUT_BYTES,
            poll_interval: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Why a job ended in `ExecutionFailed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionFailure {
    #[error("SignatureRejected({0:?})")]
    SignatureRejected(SignatureRejection),
    #[error("MalformedBundle({0})")]
    MalformedBundle(String),
    #[error("CredentialDenied({0})")]
    CredentialDenied(String),
    #[error("RunnerFailure({0})")]
    RunnerFailure(String),
    #[error("Timeout({0}s)")]
    Timeout(u64),
    #[error("NonZeroExit({0})")]
    NonZeroExit(i32),
    #[error("CollectionFailure({0})")]
    CollectionFailure(String),
    #[error("RedeliveryLimit({0})")]
    RedeliveryLimit(u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InflightEntry {
    pub order: ExecutionOrder,
    pub attempts: u32,
    pub verified: bool,
}

struct JobSets {
    inflight: BTreeSet<String>,
    completed: BTreeSet<String>,
}

/// Observed airlock lifetime, for scheduling checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AirlockSpan {
    pub job_id: String,
    pub slot: usize,
    pub created_ms: i64,
    pub destroyed_ms: i64,
}

pub struct SecureZone {
    dir: PathBuf,
    clock: Arc<dyn Clock>,
    audit: AuditLog,
    keys: KeyStore,
    nonces: NonceRegistry,
    config: ExecutorConfig,
    runner: Arc<dyn SandboxRunner>,
    data: Arc<dyn DataChannel>,
    status_tx: Producer,
    mount_tx: Producer,
    output_tx: Producer,
    exec_rx: Mutex<Consumer>,
    nonce_rx: Mutex<Consumer>,
    cred_rx: Mutex<Consumer>,
    waiters: Mutex<HashMap<String, mpsc::Sender<CredentialOutcome>>>,
    jobs: Mutex<JobSets>,
    slots: Mutex<Vec<bool>>,
    slot_freed: Condvar,
    launches: AtomicU64,
    spans: Mutex<Vec<AirlockSpan>>,
}

impl std::fmt::Debug for SecureZone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureZone").field("dir", &self.dir).field("parallelism", &self.config.parallelism).finish()
    }
}

fn is_uuid(s: &str) -> bool {
    uuid::Uuid::parse_str(s).is_ok()
}

impl SecureZone {
    pub fn open(
        dir: &Path,
        hub: &QueueHub,
        clock: Arc<dyn Clock>,
        config: ExecutorConfig,
        runner: Arc<dyn SandboxRunner>,
        data: Arc<dyn DataChannel>,
    ) -> Result<Arc<SecureZone>, ExecutorError> {
        if config.parallelism == 0 {
            return Err(ExecutorError::Config("parallelism must be at least 1".into()));
        }
        fs::create_dir_all(dir.join("inflight"))?;
        let audit = AuditLog::open(&dir.join("audit"), Zone::Secure, clock.clone())?;
        let nonces = NonceRegistry::open(&dir.join("nonces.jsonl"), config.nonce_ttl_secs)?;
        let mut completed = BTreeSet::new();
        if let Ok(text) = fs::read_to_string(dir.join("completed.jsonl")) {
            for line in text.lines().filter(|l| !l.is_empty()) {
                if let Ok(id) = serde_json::from_str::<String>(line) {
                    completed.insert(id);
                }
            }
        }
        let zone = SecureZone {
            dir: dir.to_owned(),
            keys: KeyStore::new(dir.join("vetters.json"), audit.clone()),
            nonces,
            status_tx: hub.producer(EXECUTION_STATUS, Endpoint::Executor)?,
            mount_tx: hub.producer(MOUNT_REQUESTS, Endpoint::Executor)?,
            output_tx: hub.producer(OUTPUT_VETTING, Endpoint::Executor)?,
            exec_rx: Mutex::new(hub.consumer(EXECUTION, Endpoint::Executor)?),
            nonce_rx: Mutex::new(hub.consumer(NONCE_ISSUANCE, Endpoint::Executor)?),
            cred_rx: Mutex::new(hub.consumer(CREDENTIALS, Endpoint::Executor)?),
            waiters: Mutex::new(HashMap::new()),
            jobs: Mutex::new(JobSets { inflight: BTreeSet::new(), completed }),
            slots: Mutex::new(vec![false; config.parallelism]),
            slot_freed: Condvar::new(),
            launches: AtomicU64::new(0),
            spans: Mutex::new(Vec::new()),
            clock,
            audit,
            config,
            runner,
            data,
        };
        Ok(Arc::new(zone))
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    pub fn nonces(&self) -> &NonceRegistry {
        &self.nonces
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    pub fn airlock_root(&self) -> PathBuf {
        self.dir.join("airlocks")
    }

    /// Number of sandbox launches since this process started.
    pub fn launches(&self) -> u64 {
        self.launches.load(Ordering::SeqCst)
    }

    pub fn airlock_spans(&self) -> Vec<AirlockSpan> {
        self.spans.lock().unwrap().clone()
    }

    pub fn completed_jobs(&self) -> BTreeSet<String> {
        self.jobs.lock().unwrap().completed.clone()
    }

    pub fn inflight_jobs(&self) -> BTreeSet<String> {
        self.jobs.lock().unwrap().inflight.clone()
    }

    fn record(&self, action: AuditAction, payload: serde_json::Value) {
        if let Err(e) = self.audit.record("system", action, &payload) {
            tracing::error!(error = %e, ?action, "secure audit write failed");
        }
    }

    /// Copies nonces issued in the public zone into the local registry.
    pub fn import_nonces(&self) -> Result<usize, QueueError> {
        let rx = self.nonce_rx.lock().unwrap();
        let mut n = 0;
        while let Some((seq, msg)) = next_message::<NonceIssued>(&rx)? {
            match msg {
                Ok(nonce) => match self.nonces.import(&nonce) {
                    Ok(fresh) => {
                        if fresh {
                            self.record(
                                AuditAction::NonceImported,
                                json!({ "nonce": nonce.value, "issued_to": nonce.issued_to }),
                            );
                        }
                    }
                    Err(e) => {
                        // Not acknowledged: retried on the next drain.
                        tracing::error!(error = %e, "nonce import failed");
                        return Ok(n);
                    }
                },
                Err(detail) => self.record(AuditAction::OrderRejected, json!({ "queue": NONCE_ISSUANCE, "malformed": detail })),
            }
            rx.ack(seq)?;
            n += 1;
        }
        Ok(n)
    }

    /// Hands credential responses to waiting workers. A response nobody is
    /// waiting for is revoked at once.
    pub fn route_credentials(&self) -> Result<usize, QueueError> {
        let rx = self.cred_rx.lock().unwrap();
        let mut n = 0;
        while let Some((seq, msg)) = next_message::<CredentialResponse>(&rx)? {
            match msg {
                Ok(resp) => {
                    let waiter = self.waiters.lock().unwrap().remove(&resp.request_id);
                    let delivered = waiter.is_some_and(|tx| tx.send(resp.outcome.clone()).is_ok());
                    if !delivered {
                        if let CredentialOutcome::Granted(c) = &resp.outcome {
                            let _ = self.data.revoke(&c.credential_id);
                        }
                    }
                }
                Err(detail) => self.record(AuditAction::OrderRejected, json!({ "queue": CREDENTIALS, "malformed": detail })),
            }
            rx.ack(seq)?;
            n += 1;
        }
        Ok(n)
    }

    fn inflight_path(&self, job_id: &str) -> PathBuf {
        self.dir.join("inflight").join(format!("{job_id}.json"))
    }

    fn persist_inflight(&self, entry: &InflightEntry) -> std::io::Result<()> {
        fsutil::write_json_atomic(&self.inflight_path(&entry.order.bundle.job_id), entry)
    }

    /// Journaled orders left by a previous process, oldest first.
    fn recover_inflight(&self) -> Vec<InflightEntry> {
        let mut found = Vec::new();
        let Ok(rd) = fs::read_dir(self.dir.join("inflight")) else { return Vec::new() };
        for e in rd.flatten() {
            let path = e.path();
            if path.extension().and_then(|x| x.to_str()) != Some("json") {
                let _ = fs::remove_file(&path);
                continue;
            }
            let modified = e.metadata().and_then(|m| m.modified()).ok();
            match fs::read(&path).map(|b| from_canonical_json::<InflightEntry>(&b)) {
                Ok(Ok(entry)) => found.push((modified, entry)),
                _ => {
                    tracing::error!(path = %path.display(), "unreadable inflight entry");
                }
            }
        }
        found.sort_by_key(|(m, _)| *m);
        let mut jobs = self.jobs.lock().unwrap();
        found
            .into_iter()
            .map(|(_, entry)| {
                jobs.inflight.insert(entry.order.bundle.job_id.clone());
                entry
            })
            .collect()
    }

    /// Dequeues the next order, journals it and acknowledges it. Orders that
    /// cannot be journaled or were already seen are audited and dropped.
    fn take_order(&self) -> Result<Option<InflightEntry>, QueueError> {
        let rx = self.exec_rx.lock().unwrap();
        while let Some((seq, msg)) = next_message::<ExecutionOrder>(&rx)? {
            let order = match msg {
                Ok(o) if is_uuid(&o.bundle.job_id) => o,
                Ok(o) => {
                    self.record(AuditAction::OrderRejected, json!({ "job_id": o.bundle.job_id, "reason": "BadJobId" }));
                    rx.ack(seq)?;
                    continue;
                }
                Err(detail) => {
                    self.record(AuditAction::OrderRejected, json!({ "queue": EXECUTION, "malformed": detail }));
                    rx.ack(seq)?;
                    continue;
                }
            };
            let job_id = order.bundle.job_id.clone();
            {
                let mut jobs = self.jobs.lock().unwrap();
                if jobs.completed.contains(&job_id) || jobs.inflight.contains(&job_id) {
                    drop(jobs);
                    self.record(AuditAction::DuplicateOrder, json!({ "job_id": job_id, "seq": seq }));
                    rx.ack(seq)?;
                    continue;
                }
                jobs.inflight.insert(job_id.clone());
            }
            let entry = InflightEntry { order, attempts: 0, verified: false };
            if let Err(e) = self.persist_inflight(&entry) {
                // Leave the order on the queue; it is redelivered later.
                self.jobs.lock().unwrap().inflight.remove(&job_id);
                tracing::error!(error = %e, "inflight journal write failed");
                return Ok(None);
            }
            rx.ack(seq)?;
            return Ok(Some(entry));
        }
        Ok(None)
    }

    fn acquire_slot(&self, stop: &AtomicBool) -> Option<usize> {
        let mut slots = self.slots.lock().unwrap();
        loop {
            if stop.load(Ordering::SeqCst) {
                return None;
            }
            if let Some(i) = slots.iter().position(|busy| !busy) {
                slots[i] = true;
                return Some(i);
            }
            slots = self.slot_freed.wait_timeout(slots, self.config.poll_interval).unwrap().0;
        }
    }

    fn release_slot(&self, slot: usize) {
        self.slots.lock().unwrap()[slot] = false;
        self.slot_freed.notify_all();
    }

    fn identity(&self, slot: usize) -> Option<SlotIdentity> {
        self.config.uid_base.map(|base| SlotIdentity { uid: base + slot as u32, gid: base + slot as u32 })
    }

    /// Starts the credential router and the scheduler. Both stop when `stop`
    /// is set; the scheduler waits for running airlocks before returning.
    pub fn spawn(self: &Arc<Self>, stop: Arc<AtomicBool>) -> Vec<JoinHandle<()>> {
        let router = {
            let zone = self.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name("secure-router".into())
                .spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match zone.route_credentials() {
                            Ok(0) => thread::sleep(zone.config.poll_interval),
                            Ok(_) => {}
                            Err(e) => {
                                tracing::error!(error = %e, "credential routing failed");
                                thread::sleep(zone.config.poll_interval * 10);
                            }
                        }
                    }
                })
                .expect("spawn router")
        };
        let scheduler = {
            let zone = self.clone();
            thread::Builder::new().name("secure-scheduler".into()).spawn(move || zone.schedule_loop(&stop)).expect("spawn scheduler")
        };
        vec![router, scheduler]
    }

    fn schedule_loop(self: &Arc<Self>, stop: &AtomicBool) {
        if let Err(e) = sweep_stale(&self.airlock_root()) {
            tracing::error!(error = %e, "stale airlock sweep failed");
        }
        for slot in 0..self.config.parallelism {
            if let Some(id) = self.identity(slot) {
                reap_uid(id.uid);
            }
        }
        let mut pending: VecDeque<InflightEntry> = self.recover_inflight().into();
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while let Some(slot) = self.acquire_slot(stop) {
            if let Err(e) = self.import_nonces() {
                tracing::error!(error = %e, "nonce import failed");
            }
            let next = match pending.pop_front() {
                Some(e) => Some(e),
                None => self.take_order().unwrap_or_else(|e| {
                    tracing::error!(error = %e, "execution queue read failed");
                    None
                }),
            };
            let Some(entry) = next else {
                self.release_slot(slot);
                thread::sleep(self.config.poll_interval);
                continue;
            };
            workers.retain(|h| !h.is_finished());
            let zone = self.clone();
            workers.push(
                thread::Builder::new()
                    .name(format!("airlock-{slot}"))
                    .spawn(move || {
                        zone.run_job(entry, slot);
                        zone.release_slot(slot);
                    })
                    .expect("spawn worker"),
            );
        }
        for w in workers {
            let _ = w.join();
        }
    }

    fn run_job(&self, mut entry: InflightEntry, slot: usize) {
        let job_id = entry.order.bundle.job_id.clone();
        if entry.attempts >= self.config.max_attempts {
            let failure = ExecutionFailure::RedeliveryLimit(entry.attempts);
            self.record(AuditAction::OrderRejected, json!({ "job_id": job_id, "reason": failure.to_string() }));
            self.finish(&job_id, self.failure_package(&job_id, &failure, None));
            return;
        }
        entry.attempts += 1;
        if let Err(e) = self.persist_inflight(&entry) {
            tracing::error!(error = %e, "inflight journal write failed");
        }
        let started = StatusUpdate {
            job_id: job_id.clone(),
            event: LifecycleEvent::ExecutionStarted,
            at: self.clock.now(),
            detail: Some(format!("attempt {}", entry.attempts)),
        };
        if let Err(e) = self.status_tx.send(&started) {
            tracing::error!(error = %e, "status enqueue failed");
        }
        match self.execute(&mut entry, slot) {
            Ok(package) => self.finish(&job_id, package),
            Err(RunnerError::Interrupted) => {
                tracing::warn!(job_id, "job interrupted; left in the inflight journal");
            }
            Err(e) => {
                let failure = ExecutionFailure::RunnerFailure(e.to_string());
                self.finish(&job_id, self.failure_package(&job_id, &failure, None));
            }
        }
    }

    fn finish(&self, job_id: &str, package: OutputPackage) {
        if let Err(e) = self.output_tx.send(&package) {
            // The journal entry stays, so a restart retries the job.
            tracing::error!(error = %e, job_id, "output enqueue failed");
            return;
        }
        self.record(
            AuditAction::ResultsEnqueued,
            json!({ "job_id": job_id, "artifacts": package.result_set.artifacts.len(), "log_digest": package.result_set.log_digest }),
        );
        let _ = fs::remove_file(self.inflight_path(job_id));
        if let Err(e) = fsutil::append_line(&self.dir.join("completed.jsonl"), &serde_json::to_vec(job_id).expect("string")) {
            tracing::error!(error = %e, "completed journal write failed");
        }
        let mut jobs = self.jobs.lock().unwrap();
        jobs.inflight.remove(job_id);
        jobs.completed.insert(job_id.to_owned());
    }

    fn failure_package(&self, job_id: &str, failure: &ExecutionFailure, log: Option<Vec<u8>>) -> OutputPackage {
        let log = log.unwrap_or_else(|| combine_logs(b"", b"", Some(&failure.to_string())));
        OutputPackage {
            result_set: JobResultSet {
                job_id: job_id.to_owned(),
                artifacts: Vec::new(),
                log_digest: Digest::of(&log),
                exit_status: -1,
                produced_at: self.clock.now(),
            },
            artifacts: Vec::new(),
            log,
            succeeded: false,
            detail: Some(failure.to_string()),
        }
    }

    fn reject(&self, job_id: &str, failure: ExecutionFailure) -> Result<OutputPackage, RunnerError> {
        self.record(AuditAction::OrderRejected, json!({ "job_id": job_id, "reason": failure.to_string() }));
        Ok(self.failure_package(job_id, &failure, None))
    }

    fn request_credential(&self, order: &ExecutionOrder, code_hash: Digest) -> Result<OneTimeCredential, String> {
        let bundle = &order.bundle;
        let request_id = uuid::Uuid::new_v4().to_string();
        let (tx, rx) = mpsc::channel();
        self.waiters.lock().unwrap().insert(request_id.clone(), tx);
        let req = MountRequest {
            request_id: request_id.clone(),
            job_id: bundle.job_id.clone(),
            dataset_id: bundle.dataset_id.clone(),
            code_hash,
            vetting_signature: order.signatures[0].clone(),
            max_runtime_s: bundle.resource_request.max_runtime_s,
            requested_at: self.clock.now(),
        };
        if let Err(e) = self.mount_tx.send(&req) {
            self.waiters.lock().unwrap().remove(&request_id);
            return Err(format!("mount request enqueue failed: {e}"));
        }
        self.record(
            AuditAction::MountRequested,
            json!({ "job_id": bundle.job_id, "dataset_id": bundle.dataset_id, "request_id": request_id }),
        );
        let outcome = rx.recv_timeout(self.config.credential_timeout);
        self.waiters.lock().unwrap().remove(&request_id);
        match outcome {
            Ok(CredentialOutcome::Granted(c)) => Ok(c),
            Ok(CredentialOutcome::Denied(d)) => Err(format!("{d:?}")),
            Err(_) => Err("Timeout".into()),
        }
    }

    fn execute(&self, entry: &mut InflightEntry, slot: usize) -> Result<OutputPackage, RunnerError> {
        let order = entry.order.clone();
        let bundle = &order.bundle;
        let job_id = bundle.job_id.as_str();

        let archive = match bundle.validate(&self.config.catalogue) {
            Ok(a) => a,
            Err(BundleError::HashMismatch { .. }) => {
                return self.reject(job_id, ExecutionFailure::SignatureRejected(SignatureRejection::HashMismatch));
            }
            Err(e) => return self.reject(job_id, ExecutionFailure::MalformedBundle(e.to_string())),
        };
        let code_hash = archive.canonical_hash();
        if order.signatures.is_empty() {
            return self.reject(job_id, ExecutionFailure::SignatureRejected(SignatureRejection::InsufficientApprovals));
        }
        if !entry.verified {
            let _ = self.import_nonces();
            let keys = match self.keys.load() {
                Ok(k) => k,
                Err(e) => return Err(RunnerError::Fault(e.to_string())),
            };
            let verdict = verify_approvals(
                &order.signatures,
                job_id,
                code_hash,
                self.config.approval_threshold,
                &keys,
                &self.nonces,
                self.clock.now(),
            );
            if let Err(reason) = verdict {
                self.record(
                    AuditAction::SignatureRejected,
                    json!({ "job_id": job_id, "reason": reason, "vetters": order.signatures.iter().map(|s| &s.vetter_id).collect::<Vec<_>>() }),
                );
                return self.reject(job_id, ExecutionFailure::SignatureRejected(reason));
            }
            entry.verified = true;
            if let Err(e) = self.persist_inflight(entry) {
                tracing::error!(error = %e, "inflight journal write failed");
            }
            self.record(
                AuditAction::SignatureAccepted,
                json!({ "job_id": job_id, "code_hash": code_hash, "nonces": order.signatures.iter().map(|s| s.nonce_value).collect::<Vec<_>>() }),
            );
        }

        let credential = match self.request_credential(&order, code_hash) {
            Ok(c) => c,
            Err(reason) => return self.reject(job_id, ExecutionFailure::CredentialDenied(reason)),
        };
        let identity = self.identity(slot);
        let created_ms = self.clock.now().as_millis();
        let mut airlock = match AirlockInstance::prepare(
            &self.airlock_root(),
            job_id,
            &bundle.runtime_ref,
            bundle.resource_request,
            identity,
            self.clock.now(),
        ) {
            Ok(a) => a,
            Err(e) => {
                let _ = self.data.revoke(&credential.credential_id);
                return self.reject(job_id, ExecutionFailure::RunnerFailure(format!("airlock: {e}")));
            }
        };
        let result = self.run_in_airlock(&mut airlock, &order, &archive, &credential);
        let _ = self.data.revoke(&credential.credential_id);
        if matches!(result, Err(RunnerError::Interrupted)) {
            return Err(RunnerError::Interrupted);
        }
        let destroyed = airlock.destroy();
        self.record(
            AuditAction::AirlockDestroyed,
            json!({ "job_id": job_id, "slot": slot, "ok": destroyed.is_ok() }),
        );
        self.spans.lock().unwrap().push(AirlockSpan {
            job_id: job_id.to_owned(),
            slot,
            created_ms,
            destroyed_ms: self.clock.now().as_millis(),
        });
        let mut package = result?;
        if let Err(e) = destroyed {
            self.record(AuditAction::CollectionFailed, json!({ "job_id": job_id, "destroy_error": e.to_string() }));
            package.succeeded = false;
            package.detail = Some(ExecutionFailure::CollectionFailure(format!("airlock removal: {e}")).to_string());
        }
        Ok(package)
    }

    fn run_in_airlock(
        &self,
        airlock: &mut AirlockInstance,
        order: &ExecutionOrder,
        archive: &crate::archive::BundleArchive,
        credential: &OneTimeCredential,
    ) -> Result<OutputPackage, RunnerError> {
        let bundle = &order.bundle;
        let job_id = bundle.job_id.as_str();
        let mut stream = match self.data.redeem(&credential.token) {
            Ok(s) => s,
            Err(e) => return self.reject(job_id, ExecutionFailure::CredentialDenied(format!("{e:?}"))),
        };
        match airlock.materialise(&bundle.dataset_id, &mut stream) {
            Ok((digest, _)) if digest == stream.plaintext_digest => {}
            Ok(_) => return self.reject(job_id, ExecutionFailure::RunnerFailure("dataset digest mismatch".into())),
            Err(e) => return self.reject(job_id, ExecutionFailure::RunnerFailure(format!("materialise: {e}"))),
        }
        drop(stream);
        if let Err(e) = airlock.extract(archive) {
            return self.reject(job_id, ExecutionFailure::RunnerFailure(format!("extract: {e}")));
        }
        let Some(runtime) = self.config.catalogue.get(&bundle.runtime_ref).cloned() else {
            return self.reject(job_id, ExecutionFailure::MalformedBundle("unknown runtime".into()));
        };
        let spec = LaunchSpec {
            job_id: job_id.to_owned(),
            runtime,
            entrypoint: bundle.entrypoint.clone(),
            paths: airlock.paths.clone(),
            limits: bundle.resource_request,
            identity: airlock.identity,
        };
        airlock.status = AirlockStatus::Running;
        self.launches.fetch_add(1, Ordering::SeqCst);
        self.record(
            AuditAction::AirlockLaunched,
            json!({ "job_id": job_id, "runner": self.runner.name(), "uid": airlock.identity.map(|i| i.uid) }),
        );
        let outcome = self.runner.run(&spec)?;

        airlock.status = AirlockStatus::Collecting;
        let mut failure = if outcome.timed_out {
            Some(ExecutionFailure::Timeout(bundle.resource_request.max_runtime_s))
        } else if outcome.exit_status != 0 {
            Some(ExecutionFailure::NonZeroExit(outcome.exit_status))
        } else {
            None
        };
        let mut notes = Vec::new();
        let collected = match airlock.collect(self.config.max_output_bytes) {
            Ok(c) => {
                if !c.skipped.is_empty() {
                    notes.push(format!("skipped non-regular or unsafe output entries: {}", c.skipped.join(", ")));
                }
                c
            }
            Err(e) => {
                self.record(AuditAction::CollectionFailed, json!({ "job_id": job_id, "error": e.to_string() }));
                let f = ExecutionFailure::CollectionFailure(e.to_string());
                notes.push(f.to_string());
                failure.get_or_insert(f);
                Default::default()
            }
        };
        if let Some(f) = &failure {
            notes.insert(0, f.to_string());
        }
        let note = (!notes.is_empty()).then(|| notes.join("\n"));
        let log = combine_logs(&outcome.stdout, &outcome.stderr, note.as_deref());
        let result_set = JobResultSet {
            job_id: job_id.to_owned(),
            artifacts: collected.entries(),
            log_digest: Digest::of(&log),
            exit_status: outcome.exit_status,
            produced_at: self.clock.now(),
        };
        self.record(
            AuditAction::ExecutionFinished,
            json!({ "job_id": job_id, "exit_status": outcome.exit_status, "timed_out": outcome.timed_out, "wall_ms": outcome.wall_ms }),
        );
        Ok(OutputPackage {
            result_set,
            artifacts: collected.artifacts,
            log,
            succeeded: failure.is_none(),
            detail: failure.map(|f| f.to_string()),
        })
    }
}
