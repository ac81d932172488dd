//! Public zone: consumer submission and retrieval, and the vetting
//! workflow. Its only links to the other zones are its queue endpoints.

pub mod auth;
pub mod http;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::BundleArchive;
use crate::attestation::{check_signature, AttestationError, KeyStore, NonceRegistry, SignatureRejection, VettingSignature, DEFAULT_NONCE_TTL_SECS};
use crate::attestation::Nonce;
use crate::audit::{AuditAction, AuditError, AuditLog};
use crate::codec::{hex_bytes, Clock, Digest, Timestamp};
use crate::fsutil;
use crate::messages::{
    next_message, ExecutionOrder, InputCaseNotice, OutputPackage, ReleaseKind, ReleaseNotice, StatusUpdate, EXECUTION,
    EXECUTION_STATUS, INPUT_VETTING, NONCE_ISSUANCE, OUTPUT_VETTING, RELEASE,
};
use crate::model::{transition, BundleError, JobBundle, JobRecord, JobResultSet, JobState, LifecycleEvent, ResourceRequest, RuntimeCatalogue, Zone};
use crate::wal::{Consumer, Endpoint, Producer, QueueError, QueueHub};

use auth::{Principal, Role, TokenAuthenticator};

pub const DEFAULT_MAX_BUNDLE_BYTES: usize = 256 * 1024 * 1024;
pub const DEFAULT_PREVIEW_BYTES: usize = 1024 * 1024;
pub const PRINCIPALS_FILE: &str = "principals.json";

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub max_bundle_bytes: usize,
    pub approval_threshold: usize,
    /// Per-artifact preview cap for output cases.
    pub preview_bytes: usize,
    pub nonce_ttl_secs: i64,
    pub catalogue: RuntimeCatalogue,
    pub pump_interval: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_bundle_bytes: DEFAULT_MAX_BUNDLE_BYTES,
            approval_threshold: 1,
            preview_bytes: DEFAULT_PREVIEW_BYTES,
            nonce_ttl_secs: DEFAULT_NONCE_TTL_SECS,
            catalogue: RuntimeCatalogue::default(),
            pump_interval: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("missing or invalid bearer token")]
    Unauthenticated,
    #[error("role not permitted for this operation")]
    Forbidden,
    #[error("not found")]
    NotFound,
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error("code hash mismatch: claimed {claimed}, computed {computed}")]
    HashMismatch { claimed: Digest, computed: Digest },
    #[error("bundle exceeds {limit} bytes")]
    TooLarge { limit: usize },
    #[error("case already decided")]
    CaseClosed,
    #[error("results not released (job is {0})")]
    NotReleased(JobState),
    #[error("job is {0}")]
    InvalidState(JobState),
    #[error("signature invalid: {0}")]
    SignatureInvalid(SignatureRejection),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl GatewayError {
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::Unauthenticated => 401,
            GatewayError::Forbidden => 403,
            GatewayError::NotFound => 404,
            GatewayError::MalformedBundle(_) | GatewayError::BadRequest(_) => 400,
            GatewayError::TooLarge { .. } => 413,
            GatewayError::CaseClosed | GatewayError::NotReleased(_) | GatewayError::InvalidState(_) => 409,
            GatewayError::HashMismatch { .. } | GatewayError::SignatureInvalid(_) => 422,
            GatewayError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Unauthenticated => "unauthenticated",
            GatewayError::Forbidden => "forbidden",
            GatewayError::NotFound => "not_found",
            GatewayError::MalformedBundle(_) => "malformed_bundle",
            GatewayError::HashMismatch { .. } => "hash_mismatch",
            GatewayError::TooLarge { .. } => "too_large",
            GatewayError::CaseClosed => "case_closed",
            GatewayError::NotReleased(_) => "not_released",
            GatewayError::InvalidState(_) => "invalid_state",
            GatewayError::SignatureInvalid(_) => "signature_invalid",
            GatewayError::BadRequest(_) => "bad_request",
            GatewayError::Internal(_) => "internal",
        }
    }
}

macro_rules! internal_from {
    ($($t:ty),*) => {$(
        impl From<$t> for GatewayError {
            fn from(e: $t) -> Self {
                GatewayError::Internal(e.to_string())
            }
        }
    )*};
}
internal_from!(std::io::Error, QueueError, AuditError, AttestationError);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    #[serde(with = "hex_bytes")]
    pub archive: Vec<u8>,
    /// Client-computed canonical hash, checked against the server's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_hash: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub job_id: String,
    pub code_hash: Digest,
    pub state: JobState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Input,
    Output,
}

impl CaseKind {
    fn dir_name(self) -> &'static str {
        match self {
            CaseKind::Input => "input",
            CaseKind::Output => "output",
        }
    }
}

impl std::str::FromStr for CaseKind {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<CaseKind, GatewayError> {
        match s {
            "input" => Ok(CaseKind::Input),
            "output" => Ok(CaseKind::Output),
            _ => Err(GatewayError::NotFound),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFilter {
    #[default]
    Open,
    Decided,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub approved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub decided_by: String,
    pub decided_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct InputCase {
    job_id: String,
    opened_at: Timestamp,
    code_hash: Digest,
    signatures: Vec<VettingSignature>,
    decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct OutputCase {
    job_id: String,
    opened_at: Timestamp,
    result_set: JobResultSet,
    succeeded: bool,
    detail: Option<String>,
    decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub approve: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Detached signature file; required to approve an input case.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<VettingSignature>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionReceipt {
    pub job_id: String,
    pub state: JobState,
    pub approvals: Vec<String>,
    pub required_approvals: usize,
}

/// File contents rendered for a vetter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileView {
    pub path: String,
    pub byte_size: u64,
    pub digest: Digest,
    /// `utf8` or `hex`.
    pub encoding: String,
    pub content: String,
    pub truncated: bool,
}

impl FileView {
    fn render(path: &str, bytes: &[u8], cap: Option<usize>) -> FileView {
        let shown = match cap {
            Some(c) if bytes.len() > c => &bytes[..c],
            _ => bytes,
        };
        let (encoding, content) = match std::str::from_utf8(shown) {
            Ok(text) => ("utf8", text.to_owned()),
            // A cut may split a UTF-8 sequence; fall back only if the file
            // is not text.
            Err(e) if shown.len() < bytes.len() && e.error_len().is_none() => {
                ("utf8", String::from_utf8_lossy(&shown[..e.valid_up_to()]).into_owned())
            }
            Err(_) => ("hex", hex::encode(shown)),
        };
        FileView {
            path: path.to_owned(),
            byte_size: bytes.len() as u64,
            digest: Digest::of(bytes),
            encoding: encoding.into(),
            content,
            truncated: shown.len() < bytes.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaseView {
    Input {
        job_id: String,
        submitter_id: String,
        opened_at: Timestamp,
        code_hash: Digest,
        dataset_id: String,
        runtime_ref: String,
        entrypoint: String,
        resource_request: ResourceRequest,
        files: Vec<FileView>,
        approvals: Vec<String>,
        required_approvals: usize,
        decision: Option<Decision>,
    },
    Output {
        job_id: String,
        opened_at: Timestamp,
        succeeded: bool,
        detail: Option<String>,
        result_set: JobResultSet,
        artifacts: Vec<FileView>,
        log: FileView,
        decision: Option<Decision>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultsDownload {
    pub job_id: String,
    pub state: JobState,
    pub result_set: JobResultSet,
    /// Canonical ZIP of the released artifacts.
    #[serde(with = "hex_bytes")]
    pub archive: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub log: Vec<u8>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PumpStats {
    pub input: usize,
    pub status: usize,
    pub output: usize,
    pub release: usize,
}

impl PumpStats {
    pub fn total(&self) -> usize {
        self.input + self.status + self.output + self.release
    }
}

struct Inbox {
    input_rx: Consumer,
    status_rx: Consumer,
    output_rx: Consumer,
    release_rx: Consumer,
}

pub struct PublicZone {
    dir: PathBuf,
    clock: Arc<dyn Clock>,
    audit: AuditLog,
    keys: KeyStore,
    nonces: NonceRegistry,
    auth: Arc<dyn TokenAuthenticator>,
    config: GatewayConfig,
    input_tx: Producer,
    exec_tx: Producer,
    nonce_tx: Producer,
    release_tx: Producer,
    /// Serialises every state mutation in the zone.
    inbox: Mutex<Inbox>,
}

impl std::fmt::Debug for PublicZone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PublicZone").field("dir", &self.dir).finish()
    }
}

fn is_uuid(s: &str) -> bool {
    uuid::Uuid::parse_str(s).is_ok()
}

fn require(p: &Principal, roles: &[Role]) -> Result<(), GatewayError> {
    if roles.contains(&p.role) {
        Ok(())
    } else {
        Err(GatewayError::Forbidden)
    }
}

impl PublicZone {
    pub fn open(
        dir: &Path,
        hub: &QueueHub,
        clock: Arc<dyn Clock>,
        config: GatewayConfig,
        auth: Arc<dyn TokenAuthenticator>,
    ) -> Result<Arc<PublicZone>, GatewayError> {
        if config.approval_threshold == 0 {
            return Err(GatewayError::BadRequest("approval threshold must be at least 1".into()));
        }
        for sub in ["jobs", "bundles", "cases/input", "cases/output", "results/quarantine", "results/released"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let audit = AuditLog::open(&dir.join("audit"), Zone::Public, clock.clone())?;
        let zone = PublicZone {
            dir: dir.to_owned(),
            keys: KeyStore::new(dir.join("vetters.json"), audit.clone()),
            nonces: NonceRegistry::open(&dir.join("nonces.jsonl"), config.nonce_ttl_secs)?,
            input_tx: hub.producer(INPUT_VETTING, Endpoint::ConsumerNode)?,
            exec_tx: hub.producer(EXECUTION, Endpoint::VettingNode)?,
            nonce_tx: hub.producer(NONCE_ISSUANCE, Endpoint::VettingNode)?,
            release_tx: hub.producer(RELEASE, Endpoint::VettingNode)?,
            inbox: Mutex::new(Inbox {
                input_rx: hub.consumer(INPUT_VETTING, Endpoint::VettingNode)?,
                status_rx: hub.consumer(EXECUTION_STATUS, Endpoint::ConsumerNode)?,
                output_rx: hub.consumer(OUTPUT_VETTING, Endpoint::VettingNode)?,
                release_rx: hub.consumer(RELEASE, Endpoint::ConsumerNode)?,
            }),
            clock,
            audit,
            auth,
            config,
        };
        zone.resume_handoffs()?;
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

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&self, actor: &str, action: AuditAction, payload: serde_json::Value) -> Result<(), GatewayError> {
        self.audit.record(actor, action, &payload)?;
        Ok(())
    }

    /// Resolves an `Authorization` header value. Failures are audited.
    pub fn authenticate(&self, header: Option<&str>) -> Result<Principal, GatewayError> {
        let token = header.and_then(|h| h.strip_prefix("Bearer ")).map(str::trim).filter(|t| !t.is_empty());
        let principal = token.and_then(|t| self.auth.authenticate(t));
        match principal {
            Some(p) => Ok(p),
            None => {
                let reason = if token.is_none() { "missing" } else { "unknown_token" };
                self.record("anonymous", AuditAction::AuthFailed, json!({ "reason": reason }))?;
                Err(GatewayError::Unauthenticated)
            }
        }
    }

    fn job_path(&self, job_id: &str) -> PathBuf {
        self.dir.join("jobs").join(format!("{job_id}.json"))
    }

    fn bundle_path(&self, job_id: &str) -> PathBuf {
        self.dir.join("bundles").join(format!("{job_id}.json"))
    }

    fn case_path(&self, kind: CaseKind, job_id: &str) -> PathBuf {
        self.dir.join("cases").join(kind.dir_name()).join(format!("{job_id}.json"))
    }

    fn result_path(&self, released: bool, job_id: &str) -> PathBuf {
        let sub = if released { "released" } else { "quarantine" };
        self.dir.join("results").join(sub).join(format!("{job_id}.json"))
    }

    fn load_job(&self, job_id: &str) -> Result<Option<JobRecord>, GatewayError> {
        if !is_uuid(job_id) {
            return Ok(None);
        }
        Ok(fsutil::read_json(&self.job_path(job_id))?)
    }

    fn load_bundle(&self, job_id: &str) -> Result<JobBundle, GatewayError> {
        fsutil::read_json(&self.bundle_path(job_id))?.ok_or_else(|| GatewayError::Internal(format!("bundle for {job_id} missing")))
    }

    fn load_input_case(&self, job_id: &str) -> Result<Option<InputCase>, GatewayError> {
        if !is_uuid(job_id) {
            return Ok(None);
        }
        Ok(fsutil::read_json(&self.case_path(CaseKind::Input, job_id))?)
    }

    fn load_output_case(&self, job_id: &str) -> Result<Option<OutputCase>, GatewayError> {
        if !is_uuid(job_id) {
            return Ok(None);
        }
        Ok(fsutil::read_json(&self.case_path(CaseKind::Output, job_id))?)
    }

    /// Applies one lifecycle event, persisting and auditing the result.
    fn apply(&self, job: &JobRecord, event: LifecycleEvent, detail: Option<String>) -> Result<JobRecord, GatewayError> {
        match transition(job, event, self.clock.now(), detail.clone()) {
            Ok(next) => {
                fsutil::write_json_atomic(&self.job_path(&job.job_id), &next)?;
                self.record(
                    "system",
                    AuditAction::JobTransition,
                    json!({ "job_id": job.job_id, "from": job.state, "to": next.state, "event": event, "detail": detail }),
                )?;
                Ok(next)
            }
            Err(e) => {
                self.record(
                    "system",
                    AuditAction::IllegalTransition,
                    json!({ "job_id": job.job_id, "from": e.from, "event": e.event }),
                )?;
                Err(GatewayError::InvalidState(job.state))
            }
        }
    }

    /// Re-sends hand-offs interrupted by a crash between a state write and
    /// the matching enqueue. Downstream consumers are idempotent on job id.
    fn resume_handoffs(&self) -> Result<(), GatewayError> {
        let _guard = self.inbox.lock().unwrap();
        for entry in fs::read_dir(self.dir.join("jobs"))? {
            let path = entry?.path();
            let Some(job) = fsutil::read_json::<JobRecord>(&path)? else { continue };
            match job.state {
                JobState::Submitted if self.load_input_case(&job.job_id)?.is_none() => {
                    self.input_tx.send(&InputCaseNotice {
                        job_id: job.job_id.clone(),
                        code_hash: job.code_hash,
                        submitted_at: job.history[0].at,
                    })?;
                }
                JobState::ApprovedSigned => {
                    let case = self.load_input_case(&job.job_id)?.ok_or(GatewayError::Internal("approved job without case".into()))?;
                    self.send_order(&job, &case)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn send_order(&self, job: &JobRecord, case: &InputCase) -> Result<JobRecord, GatewayError> {
        let order = ExecutionOrder {
            bundle: self.load_bundle(&job.job_id)?,
            signatures: case.signatures.clone(),
            approved_at: self.clock.now(),
        };
        self.exec_tx.send(&order)?;
        self.apply(job, LifecycleEvent::Enqueued, None)
    }

    // ----- consumer operations -------------------------------------------

    pub fn submit(&self, principal: &Principal, req: SubmitRequest) -> Result<SubmitReceipt, GatewayError> {
        require(principal, &[Role::Consumer])?;
        let actor = principal.principal_id.as_str();
        let reject = |err: GatewayError| -> Result<SubmitReceipt, GatewayError> {
            self.record(actor, AuditAction::SubmissionRejected, json!({ "reason": err.to_string() }))?;
            Err(err)
        };
        if req.archive.len() > self.config.max_bundle_bytes {
            return reject(GatewayError::TooLarge { limit: self.config.max_bundle_bytes });
        }
        let archive = match BundleArchive::parse(&req.archive) {
            Ok(a) => a,
            Err(e) => return reject(GatewayError::MalformedBundle(e.to_string())),
        };
        let computed = archive.canonical_hash();
        if let Some(claimed) = req.code_hash {
            if claimed != computed {
                return reject(GatewayError::HashMismatch { claimed, computed });
            }
        }
        let manifest = match archive.manifest() {
            Ok(m) => m,
            Err(e) => return reject(GatewayError::MalformedBundle(e.to_string())),
        };
        let bundle = JobBundle {
            job_id: uuid::Uuid::new_v4().to_string(),
            submitter_id: actor.to_owned(),
            code_archive: req.archive,
            entrypoint: manifest.entrypoint,
            runtime_ref: manifest.runtime_ref,
            dataset_id: manifest.dataset_id,
            resource_request: manifest.resource_request,
            code_hash: computed,
        };
        if let Err(e) = bundle.validate(&self.config.catalogue) {
            let err = match e {
                BundleError::HashMismatch { claimed, computed } => GatewayError::HashMismatch { claimed, computed },
                other => GatewayError::MalformedBundle(other.to_string()),
            };
            return reject(err);
        }
        let inbox = self.inbox.lock().unwrap();
        let job = JobRecord::submitted(&bundle, self.clock.now());
        fsutil::write_json_atomic(&self.bundle_path(&job.job_id), &bundle)?;
        fsutil::write_json_atomic(&self.job_path(&job.job_id), &job)?;
        self.record(
            actor,
            AuditAction::JobSubmitted,
            json!({ "job_id": job.job_id, "code_hash": computed, "dataset_id": bundle.dataset_id, "runtime_ref": bundle.runtime_ref }),
        )?;
        self.input_tx.send(&InputCaseNotice { job_id: job.job_id.clone(), code_hash: computed, submitted_at: job.state_entered_at })?;
        self.pump_locked(&inbox)?;
        let state = self.load_job(&job.job_id)?.map_or(job.state, |j| j.state);
        Ok(SubmitReceipt { job_id: job.job_id, code_hash: computed, state })
    }

    /// Current state and history. Other principals' jobs are reported as
    /// absent.
    pub fn status(&self, principal: &Principal, job_id: &str) -> Result<JobRecord, GatewayError> {
        self.pump()?;
        let job = self.load_job(job_id)?.ok_or(GatewayError::NotFound)?;
        if job.submitter_id != principal.principal_id && principal.role != Role::Admin {
            return Err(GatewayError::NotFound);
        }
        Ok(job)
    }

    pub fn fetch_results(&self, principal: &Principal, job_id: &str) -> Result<ResultsDownload, GatewayError> {
        require(principal, &[Role::Consumer])?;
        let inbox = self.inbox.lock().unwrap();
        self.pump_locked(&inbox)?;
        let job = self.load_job(job_id)?.ok_or(GatewayError::NotFound)?;
        if job.submitter_id != principal.principal_id {
            return Err(GatewayError::NotFound);
        }
        if !matches!(job.state, JobState::Released | JobState::Retrieved) {
            return Err(GatewayError::NotReleased(job.state));
        }
        let package: OutputPackage = fsutil::read_json(&self.result_path(true, job_id))?
            .ok_or_else(|| GatewayError::Internal("released results missing".into()))?;
        let archive = BundleArchive::from_entries(package.artifacts.iter().map(|a| (a.relative_path.clone(), a.bytes.clone())))
            .map_err(|e| GatewayError::Internal(e.to_string()))?;
        let job = if job.state == JobState::Released { self.apply(&job, LifecycleEvent::Retrieved, None)? } else { job };
        self.record(
            &principal.principal_id,
            AuditAction::ResultsFetched,
            json!({ "job_id": job_id, "artifacts": package.result_set.artifacts.len() }),
        )?;
        Ok(ResultsDownload {
            job_id: job_id.to_owned(),
            state: job.state,
            result_set: package.result_set,
            archive: archive.to_canonical_bytes(),
            log: package.log,
        })
    }

    // ----- vetter operations ---------------------------------------------

    pub fn request_nonce(&self, principal: &Principal) -> Result<Nonce, GatewayError> {
        require(principal, &[Role::Vetter])?;
        let keys = self.keys.load()?;
        let nonce = match self.nonces.issue(&principal.principal_id, &keys, self.clock.now()) {
            Ok(n) => n,
            Err(AttestationError::UnknownVetter(_)) => {
                return Err(GatewayError::BadRequest("no enabled signing key is registered for this vetter".into()))
            }
            Err(e) => return Err(e.into()),
        };
        self.nonce_tx.send(&nonce)?;
        self.record(
            &principal.principal_id,
            AuditAction::NonceIssued,
            json!({ "nonce": nonce.value, "expires_at": nonce.expires_at }),
        )?;
        Ok(nonce)
    }

    pub fn list_cases(&self, principal: &Principal, kind: CaseKind, filter: CaseFilter) -> Result<Vec<CaseView>, GatewayError> {
        require(principal, &[Role::Vetter])?;
        self.pump()?;
        let mut ids = BTreeSet::new();
        for entry in fs::read_dir(self.dir.join("cases").join(kind.dir_name()))? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")) {
                ids.insert(id.to_owned());
            }
        }
        let mut out = Vec::new();
        for id in ids {
            let view = self.case_view(kind, &id, false)?;
            let decided = match &view {
                CaseView::Input { decision, .. } | CaseView::Output { decision, .. } => decision.is_some(),
            };
            let keep = match filter {
                CaseFilter::Open => !decided,
                CaseFilter::Decided => decided,
                CaseFilter::All => true,
            };
            if keep {
                out.push(view);
            }
        }
        Ok(out)
    }

    /// One case with its materials. `full` lifts the output preview cap.
    pub fn get_case(&self, principal: &Principal, kind: CaseKind, job_id: &str, full: bool) -> Result<CaseView, GatewayError> {
        require(principal, &[Role::Vetter])?;
        self.pump()?;
        self.case_view(kind, job_id, full)
    }

    fn case_view(&self, kind: CaseKind, job_id: &str, full: bool) -> Result<CaseView, GatewayError> {
        match kind {
            CaseKind::Input => {
                let case = self.load_input_case(job_id)?.ok_or(GatewayError::NotFound)?;
                let bundle = self.load_bundle(job_id)?;
                let archive = BundleArchive::parse(&bundle.code_archive).map_err(|e| GatewayError::Internal(e.to_string()))?;
                Ok(CaseView::Input {
                    job_id: case.job_id,
                    submitter_id: bundle.submitter_id,
                    opened_at: case.opened_at,
                    code_hash: case.code_hash,
                    dataset_id: bundle.dataset_id,
                    runtime_ref: bundle.runtime_ref,
                    entrypoint: bundle.entrypoint,
                    resource_request: bundle.resource_request,
                    files: archive.iter().map(|(p, b)| FileView::render(p, b, None)).collect(),
                    approvals: case.signatures.iter().map(|s| s.vetter_id.clone()).collect(),
                    required_approvals: self.config.approval_threshold,
                    decision: case.decision,
                })
            }
            CaseKind::Output => {
                let case = self.load_output_case(job_id)?.ok_or(GatewayError::NotFound)?;
                let released = case.decision.as_ref().is_some_and(|d| d.approved);
                let package: OutputPackage = fsutil::read_json(&self.result_path(released, job_id))?
                    .or(fsutil::read_json(&self.result_path(!released, job_id))?)
                    .ok_or_else(|| GatewayError::Internal("output package missing".into()))?;
                let cap = (!full).then_some(self.config.preview_bytes);
                Ok(CaseView::Output {
                    job_id: case.job_id,
                    opened_at: case.opened_at,
                    succeeded: case.succeeded,
                    detail: case.detail,
                    result_set: case.result_set,
                    artifacts: package.artifacts.iter().map(|a| FileView::render(&a.relative_path, &a.bytes, cap)).collect(),
                    log: FileView::render("log", &package.log, cap),
                    decision: case.decision,
                })
            }
        }
    }

    pub fn decide_input(&self, principal: &Principal, job_id: &str, req: DecisionRequest) -> Result<DecisionReceipt, GatewayError> {
        require(principal, &[Role::Vetter])?;
        let actor = principal.principal_id.as_str();
        let inbox = self.inbox.lock().unwrap();
        self.pump_locked(&inbox)?;
        let mut case = self.load_input_case(job_id)?.ok_or(GatewayError::NotFound)?;
        if case.decision.is_some() {
            return Err(GatewayError::CaseClosed);
        }
        let job = self.load_job(job_id)?.ok_or(GatewayError::NotFound)?;
        if job.state != JobState::PendingInputVetting {
            return Err(GatewayError::InvalidState(job.state));
        }
        let now = self.clock.now();
        if !req.approve {
            case.decision = Some(Decision { approved: false, reason: req.reason.clone(), decided_by: actor.to_owned(), decided_at: now });
            fsutil::write_json_atomic(&self.case_path(CaseKind::Input, job_id), &case)?;
            self.record(actor, AuditAction::InputDecision, json!({ "job_id": job_id, "approved": false, "reason": req.reason }))?;
            self.release_tx.send(&ReleaseNotice {
                job_id: job_id.to_owned(),
                kind: ReleaseKind::InputRejected,
                decided_by: actor.to_owned(),
                decided_at: now,
                reason: req.reason,
            })?;
            self.pump_locked(&inbox)?;
            return self.receipt(job_id, &case);
        }

        let sig = req.signature.ok_or_else(|| GatewayError::BadRequest("approval requires a signature file".into()))?;
        if sig.vetter_id != actor {
            return Err(GatewayError::BadRequest("signature was made under a different vetter id".into()));
        }
        let verdict = if sig.job_id != job_id {
            Err(SignatureRejection::JobMismatch)
        } else {
            let keys = self.keys.load()?;
            check_signature(&sig, case.code_hash, &keys).and_then(|()| self.nonces.check_usable(&sig.nonce_value, actor, now))
        };
        if let Err(reason) = verdict {
            self.record(actor, AuditAction::SignatureRejected, json!({ "job_id": job_id, "reason": reason, "stage": "input_vetting" }))?;
            return Err(GatewayError::SignatureInvalid(reason));
        }
        self.record(
            actor,
            AuditAction::SignatureAccepted,
            json!({ "job_id": job_id, "nonce": sig.nonce_value, "stage": "input_vetting" }),
        )?;
        case.signatures.retain(|s| s.vetter_id != sig.vetter_id);
        case.signatures.push(sig);
        let approvals = case.signatures.len();
        let complete = approvals >= self.config.approval_threshold;
        if complete {
            case.decision = Some(Decision { approved: true, reason: req.reason, decided_by: actor.to_owned(), decided_at: now });
        }
        fsutil::write_json_atomic(&self.case_path(CaseKind::Input, job_id), &case)?;
        self.record(
            actor,
            AuditAction::InputDecision,
            json!({ "job_id": job_id, "approved": true, "approvals": approvals, "complete": complete }),
        )?;
        if complete {
            let job = self.apply(&job, LifecycleEvent::InputApproved, None)?;
            self.send_order(&job, &case)?;
        }
        self.receipt(job_id, &case)
    }

    pub fn decide_output(&self, principal: &Principal, job_id: &str, req: DecisionRequest) -> Result<DecisionReceipt, GatewayError> {
        require(principal, &[Role::Vetter])?;
        let actor = principal.principal_id.as_str();
        let inbox = self.inbox.lock().unwrap();
        self.pump_locked(&inbox)?;
        let mut case = self.load_output_case(job_id)?.ok_or(GatewayError::NotFound)?;
        if case.decision.is_some() {
            return Err(GatewayError::CaseClosed);
        }
        let now = self.clock.now();
        case.decision = Some(Decision { approved: req.approve, reason: req.reason.clone(), decided_by: actor.to_owned(), decided_at: now });
        fsutil::write_json_atomic(&self.case_path(CaseKind::Output, job_id), &case)?;
        self.record(actor, AuditAction::OutputDecision, json!({ "job_id": job_id, "approved": req.approve, "reason": req.reason }))?;
        self.release_tx.send(&ReleaseNotice {
            job_id: job_id.to_owned(),
            kind: if req.approve { ReleaseKind::OutputReleased } else { ReleaseKind::OutputRejected },
            decided_by: actor.to_owned(),
            decided_at: now,
            reason: req.reason,
        })?;
        self.pump_locked(&inbox)?;
        let job = self.load_job(job_id)?.ok_or(GatewayError::NotFound)?;
        Ok(DecisionReceipt { job_id: job_id.to_owned(), state: job.state, approvals: Vec::new(), required_approvals: 1 })
    }

    fn receipt(&self, job_id: &str, case: &InputCase) -> Result<DecisionReceipt, GatewayError> {
        let job = self.load_job(job_id)?.ok_or(GatewayError::NotFound)?;
        Ok(DecisionReceipt {
            job_id: job_id.to_owned(),
            state: job.state,
            approvals: case.signatures.iter().map(|s| s.vetter_id.clone()).collect(),
            required_approvals: self.config.approval_threshold,
        })
    }

    // ----- queue pumps ---------------------------------------------------

    /// Drains every inbound queue of the zone.
    pub fn pump(&self) -> Result<PumpStats, GatewayError> {
        let inbox = self.inbox.lock().unwrap();
        self.pump_locked(&inbox)
    }

    fn pump_locked(&self, inbox: &Inbox) -> Result<PumpStats, GatewayError> {
        let mut stats = PumpStats::default();
        while let Some((seq, msg)) = next_message::<InputCaseNotice>(&inbox.input_rx)? {
            match msg {
                Ok(notice) => self.open_input_case(&notice)?,
                Err(detail) => self.malformed(INPUT_VETTING, &detail)?,
            }
            inbox.input_rx.ack(seq)?;
            stats.input += 1;
        }
        while let Some((seq, msg)) = next_message::<StatusUpdate>(&inbox.status_rx)? {
            match msg {
                Ok(update) => self.apply_status(&update)?,
                Err(detail) => self.malformed(EXECUTION_STATUS, &detail)?,
            }
            inbox.status_rx.ack(seq)?;
            stats.status += 1;
        }
        while let Some((seq, msg)) = next_message::<OutputPackage>(&inbox.output_rx)? {
            match msg {
                Ok(package) => self.open_output_case(package)?,
                Err(detail) => self.malformed(OUTPUT_VETTING, &detail)?,
            }
            inbox.output_rx.ack(seq)?;
            stats.output += 1;
        }
        while let Some((seq, msg)) = next_message::<ReleaseNotice>(&inbox.release_rx)? {
            match msg {
                Ok(notice) => self.apply_release(&notice)?,
                Err(detail) => self.malformed(RELEASE, &detail)?,
            }
            inbox.release_rx.ack(seq)?;
            stats.release += 1;
        }
        Ok(stats)
    }

    fn malformed(&self, queue: &str, detail: &str) -> Result<(), GatewayError> {
        self.record("system", AuditAction::OrderRejected, json!({ "queue": queue, "malformed": detail }))
    }

    fn open_input_case(&self, notice: &InputCaseNotice) -> Result<(), GatewayError> {
        let Some(job) = self.load_job(&notice.job_id)? else {
            return self.malformed(INPUT_VETTING, &format!("unknown job {}", notice.job_id));
        };
        if self.load_input_case(&job.job_id)?.is_none() {
            let case = InputCase {
                job_id: job.job_id.clone(),
                opened_at: self.clock.now(),
                code_hash: job.code_hash,
                signatures: Vec::new(),
                decision: None,
            };
            fsutil::write_json_atomic(&self.case_path(CaseKind::Input, &job.job_id), &case)?;
            self.record("system", AuditAction::VettingCaseOpened, json!({ "job_id": job.job_id, "kind": CaseKind::Input }))?;
        }
        if job.state == JobState::Submitted {
            self.apply(&job, LifecycleEvent::InputVettingOpened, None)?;
        }
        Ok(())
    }

    fn apply_status(&self, update: &StatusUpdate) -> Result<(), GatewayError> {
        let Some(job) = self.load_job(&update.job_id)? else { return Ok(()) };
        if update.event == LifecycleEvent::ExecutionStarted && job.state == JobState::QueuedForExecution {
            self.apply(&job, LifecycleEvent::ExecutionStarted, update.detail.clone())?;
        }
        Ok(())
    }

    fn open_output_case(&self, package: OutputPackage) -> Result<(), GatewayError> {
        let job_id = package.result_set.job_id.clone();
        if !package.is_consistent() {
            return self.malformed(OUTPUT_VETTING, &format!("inconsistent package for {job_id}"));
        }
        let Some(mut job) = self.load_job(&job_id)? else {
            return self.malformed(OUTPUT_VETTING, &format!("unknown job {job_id}"));
        };
        if self.load_output_case(&job_id)?.is_some() {
            self.record("system", AuditAction::DuplicateOrder, json!({ "job_id": job_id, "queue": OUTPUT_VETTING }))?;
        } else {
            fsutil::write_json_atomic(&self.result_path(false, &job_id), &package)?;
            let case = OutputCase {
                job_id: job_id.clone(),
                opened_at: self.clock.now(),
                result_set: package.result_set.clone(),
                succeeded: package.succeeded,
                detail: package.detail.clone(),
                decision: None,
            };
            fsutil::write_json_atomic(&self.case_path(CaseKind::Output, &job_id), &case)?;
            self.record("system", AuditAction::VettingCaseOpened, json!({ "job_id": job_id, "kind": CaseKind::Output }))?;
        }
        let case = self.load_output_case(&job_id)?.expect("written above");
        if job.state == JobState::QueuedForExecution {
            job = self.apply(&job, LifecycleEvent::ExecutionStarted, None)?;
        }
        if job.state == JobState::Executing {
            job = if case.succeeded {
                self.apply(&job, LifecycleEvent::ExecutionCompleted, None)?
            } else {
                self.apply(&job, LifecycleEvent::ExecutionFailed, case.detail.clone())?
            };
        }
        if matches!(job.state, JobState::Completed | JobState::ExecutionFailed) {
            self.apply(&job, LifecycleEvent::OutputVettingOpened, None)?;
        }
        Ok(())
    }

    fn apply_release(&self, notice: &ReleaseNotice) -> Result<(), GatewayError> {
        let Some(job) = self.load_job(&notice.job_id)? else { return Ok(()) };
        let (expected, event) = match notice.kind {
            ReleaseKind::InputRejected => (JobState::PendingInputVetting, LifecycleEvent::InputRejected),
            ReleaseKind::OutputRejected => (JobState::PendingOutputVetting, LifecycleEvent::OutputRejected),
            ReleaseKind::OutputReleased => {
                let from = self.result_path(false, &notice.job_id);
                if from.exists() {
                    fs::rename(&from, self.result_path(true, &notice.job_id))?;
                }
                (JobState::PendingOutputVetting, LifecycleEvent::Released)
            }
        };
        if job.state == expected {
            self.apply(&job, event, notice.reason.clone())?;
        }
        Ok(())
    }

    /// Runs [`PublicZone::pump`] until `stop` is set.
    pub fn spawn_pump(self: &Arc<Self>, stop: Arc<AtomicBool>) -> JoinHandle<()> {
        let zone = self.clone();
        thread::Builder::new()
            .name("public-pump".into())
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match zone.pump() {
                        Ok(s) if s.total() > 0 => {}
                        Ok(_) => thread::sleep(zone.config.pump_interval),
                        Err(e) => {
                            tracing::error!(error = %e, "public pump failed");
                            thread::sleep(zone.config.pump_interval * 10);
                        }
                    }
                }
            })
            .expect("spawn pump")
    }
}
