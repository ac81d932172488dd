//! Messages carried by the inter-zone queues, and the fixed queue wiring.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attestation::{Nonce, VettingSignature};
use crate::codec::{from_canonical_json, hex_bytes, Digest, Timestamp};
use crate::model::{JobBundle, JobResultSet, LifecycleEvent};
use crate::vault::{MountDenial, OneTimeCredential};
use crate::wal::{Consumer, Endpoint, QueueError, QueueSpec};

pub const INPUT_VETTING: &str = "input-vetting";
pub const NONCE_ISSUANCE: &str = "nonce-issuance";
pub const EXECUTION: &str = "execution";
pub const EXECUTION_STATUS: &str = "execution-status";
pub const MOUNT_REQUESTS: &str = "mount-requests";
pub const CREDENTIALS: &str = "credentials";
pub const OUTPUT_VETTING: &str = "output-vetting";
pub const RELEASE: &str = "release";

/// Every queue in a deployment, with its single producer and consumer.
pub fn wiring() -> Vec<QueueSpec> {
    use Endpoint::*;
    vec![
        QueueSpec::new(INPUT_VETTING, ConsumerNode, VettingNode),
        QueueSpec::new(NONCE_ISSUANCE, VettingNode, Executor),
        QueueSpec::new(EXECUTION, VettingNode, Executor),
        QueueSpec::new(EXECUTION_STATUS, Executor, ConsumerNode),
        QueueSpec::new(MOUNT_REQUESTS, Executor, DataVault),
        QueueSpec::new(CREDENTIALS, DataVault, Executor),
        QueueSpec::new(OUTPUT_VETTING, Executor, VettingNode),
        QueueSpec::new(RELEASE, VettingNode, ConsumerNode),
    ]
}

/// Interfaces other than queues that cross a process boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SideChannel {
    /// HTTP API served by the public zone.
    PublicHttp,
    /// Credential-scoped dataset streams from the vault to the executor.
    CredentialStream,
    /// Local administrator console on a zone host.
    LocalConsole,
}

/// Which endpoint serves and which may call each side channel.
pub fn side_channels() -> Vec<(SideChannel, Endpoint, Option<Endpoint>)> {
    vec![
        (SideChannel::PublicHttp, Endpoint::ConsumerNode, None),
        (SideChannel::PublicHttp, Endpoint::VettingNode, None),
        (SideChannel::CredentialStream, Endpoint::DataVault, Some(Endpoint::Executor)),
        (SideChannel::LocalConsole, Endpoint::DataVault, None),
    ]
}

/// Public zone internal hand-off: a stored bundle awaiting a vetter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputCaseNotice {
    pub job_id: String,
    pub code_hash: Digest,
    pub submitted_at: Timestamp,
}

/// An approved job on its way to the secure zone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionOrder {
    pub bundle: JobBundle,
    pub signatures: Vec<VettingSignature>,
    pub approved_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusUpdate {
    pub job_id: String,
    pub event: LifecycleEvent,
    pub at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CredentialOutcome {
    Granted(OneTimeCredential),
    Denied(MountDenial),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialResponse {
    pub request_id: String,
    pub job_id: String,
    pub outcome: CredentialOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactBytes {
    pub relative_path: String,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

/// Everything a job produced, bound for output vetting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPackage {
    pub result_set: JobResultSet,
    pub artifacts: Vec<ArtifactBytes>,
    #[serde(with = "hex_bytes")]
    pub log: Vec<u8>,
    /// True when the job ran and exited 0.
    pub succeeded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl OutputPackage {
    /// Checks that every artifact matches its result-set entry.
    pub fn is_consistent(&self) -> bool {
        self.artifacts.len() == self.result_set.artifacts.len()
            && self.artifacts.iter().zip(&self.result_set.artifacts).all(|(a, e)| {
                a.relative_path == e.relative_path && a.bytes.len() as u64 == e.byte_size && Digest::of(&a.bytes) == e.digest
            })
            && Digest::of(&self.log) == self.result_set.log_digest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseKind {
    InputRejected,
    OutputReleased,
    OutputRejected,
}

/// A vetting outcome for the consumer node to apply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseNotice {
    pub job_id: String,
    pub kind: ReleaseKind,
    pub decided_by: String,
    pub decided_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// The next record on `consumer`, decoded. A payload that does not decode
/// is returned as `Err(detail)` so the caller can audit and skip it.
pub fn next_message<T: Serialize + DeserializeOwned>(consumer: &Consumer) -> Result<Option<(u64, Result<T, String>)>, QueueError> {
    let Some(delivery) = consumer.dequeue()? else { return Ok(None) };
    Ok(Some((delivery.seq, from_canonical_json(&delivery.payload).map_err(|e| e.to_string()))))
}

/// Imported for the nonce-issuance queue.
pub type NonceIssued = Nonce;
