//! Job domain types and the lifecycle state machine shared by all zones.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveError, BundleArchive};
use crate::codec::{hex_bytes, Digest, Timestamp};

/// The three trust zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Public,
    Secure,
    Restricted,
}

impl Zone {
    pub const ALL: [Zone; 3] = [Zone::Public, Zone::Secure, Zone::Restricted];

    pub fn as_str(&self) -> &'static str {
        match self {
            Zone::Public => "public",
            Zone::Secure => "secure",
            Zone::Restricted => "restricted",
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceRequest {
    pub cpu_cores: u32,
    pub memory_mb: u64,
    pub max_runtime_s: u64,
}

impl ResourceRequest {
    pub fn is_positive(&self) -> bool {
        self.cpu_cores > 0 && self.memory_mb > 0 && self.max_runtime_s > 0
    }
}

/// One pre-approved runtime environment. Jobs name a runtime; they never
/// supply their own image or interpreter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeSpec {
    /// Interpreter argv prefix for the process runner; the entrypoint path is appended.
    pub command: Vec<String>,
    /// Container image used by the container runner.
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeCatalogue {
    pub runtimes: BTreeMap<String, RuntimeSpec>,
}

impl RuntimeCatalogue {
    pub fn get(&self, runtime_ref: &str) -> Option<&RuntimeSpec> {
        self.runtimes.get(runtime_ref)
    }

    pub fn contains(&self, runtime_ref: &str) -> bool {
        self.runtimes.contains_key(runtime_ref)
    }
}

impl Default for RuntimeCatalogue {
    fn default() -> Self {
        let mut runtimes = BTreeMap::new();
        runtimes.insert(
            "python3-datasci".to_owned(),
            RuntimeSpec {
                command: vec!["/usr/bin/python3".into(), "-I".into(), "-B".into()],
                image: "docker.io/library/python:3.10-slim".into(),
            },
        );
        runtimes.insert(
            "posix-sh".to_owned(),
            RuntimeSpec { command: vec!["/bin/sh".into()], image: "docker.io/library/busybox:1.36".into() },
        );
        RuntimeCatalogue { runtimes }
    }
}

/// A submitted workload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobBundle {
    pub job_id: String,
    pub submitter_id: String,
    #[serde(with = "hex_bytes")]
    pub code_archive: Vec<u8>,
    pub entrypoint: String,
    pub runtime_ref: String,
    pub dataset_id: String,
    pub resource_request: ResourceRequest,
    pub code_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BundleError {
    #[error("job_id {0:?} is not a UUID")]
    BadJobId(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("entrypoint {0:?} is not in the archive")]
    MissingEntrypoint(String),
    #[error("runtime {0:?} is not in the runtime catalogue")]
    UnknownRuntime(String),
    #[error("resource request must be positive")]
    BadResources,
    #[error("code hash mismatch: claimed {claimed}, computed {computed}")]
    HashMismatch { claimed: Digest, computed: Digest },
}

impl JobBundle {
    /// Checks every bundle invariant, recomputing the canonical code hash.
    /// Returns the parsed archive for callers that need the files.
    pub fn validate(&self, catalogue: &RuntimeCatalogue) -> Result<BundleArchive, BundleError> {
        if uuid::Uuid::parse_str(&self.job_id).is_err() {
            return Err(BundleError::BadJobId(self.job_id.clone()));
        }
        let archive = BundleArchive::parse(&self.code_archive)?;
        let computed = archive.canonical_hash();
        if computed != self.code_hash {
            return Err(BundleError::HashMismatch { claimed: self.code_hash, computed });
        }
        if crate::archive::validate_entry_path(&self.entrypoint).is_err() || !archive.contains(&self.entrypoint) {
            return Err(BundleError::MissingEntrypoint(self.entrypoint.clone()));
        }
        if !catalogue.contains(&self.runtime_ref) {
            return Err(BundleError::UnknownRuntime(self.runtime_ref.clone()));
        }
        if !self.resource_request.is_positive() {
            return Err(BundleError::BadResources);
        }
        Ok(archive)
    }
}

/// Lifecycle states of a job across all three zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobState {
    Submitted,
    PendingInputVetting,
    RejectedInput,
    ApprovedSigned,
    QueuedForExecution,
    Executing,
    ExecutionFailed,
    Completed,
    PendingOutputVetting,
    RejectedOutput,
    Released,
    Retrieved,
}

/// Events that drive [`JobState`] transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    InputVettingOpened,
    InputRejected,
    InputApproved,
    Enqueued,
    ExecutionStarted,
    ExecutionFailed,
    ExecutionCompleted,
    OutputVettingOpened,
    OutputRejected,
    Released,
    Retrieved,
}

impl JobState {
    pub const ALL: [JobState; 12] = [
        JobState::Submitted,
        JobState::PendingInputVetting,
        JobState::RejectedInput,
        JobState::ApprovedSigned,
        JobState::QueuedForExecution,
        JobState::Executing,
        JobState::ExecutionFailed,
        JobState::Completed,
        JobState::PendingOutputVetting,
        JobState::RejectedOutput,
        JobState::Released,
        JobState::Retrieved,
    ];

    /// The transition table. `None` means the pair is illegal.
    pub fn next(self, event: LifecycleEvent) -> Option<JobState> {
        use JobState as S;
        use LifecycleEvent as E;
        match (self, event) {
            (S::Submitted, E::InputVettingOpened) => Some(S::PendingInputVetting),
            (S::PendingInputVetting, E::InputRejected) => Some(S::RejectedInput),
            (S::PendingInputVetting, E::InputApproved) => Some(S::ApprovedSigned),
            (S::ApprovedSigned, E::Enqueued) => Some(S::QueuedForExecution),
            (S::QueuedForExecution, E::ExecutionStarted) => Some(S::Executing),
            (S::Executing, E::ExecutionFailed) => Some(S::ExecutionFailed),
            (S::Executing, E::ExecutionCompleted) => Some(S::Completed),
            (S::ExecutionFailed | S::Completed, E::OutputVettingOpened) => Some(S::PendingOutputVetting),
            (S::PendingOutputVetting, E::OutputRejected) => Some(S::RejectedOutput),
            (S::PendingOutputVetting, E::Released) => Some(S::Released),
            (S::Released, E::Retrieved) => Some(S::Retrieved),
            _ => None,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::RejectedInput | JobState::RejectedOutput | JobState::Retrieved)
    }
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 11] = [
        LifecycleEvent::InputVettingOpened,
        LifecycleEvent::InputRejected,
        LifecycleEvent::InputApproved,
        LifecycleEvent::Enqueued,
        LifecycleEvent::ExecutionStarted,
        LifecycleEvent::ExecutionFailed,
        LifecycleEvent::ExecutionCompleted,
        LifecycleEvent::OutputVettingOpened,
        LifecycleEvent::OutputRejected,
        LifecycleEvent::Released,
        LifecycleEvent::Retrieved,
    ];
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for LifecycleEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = serde_json::to_value(self).expect("unit variant");
        f.write_str(text.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub state: JobState,
    pub at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// The authoritative lifecycle record for one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub submitter_id: String,
    pub dataset_id: String,
    pub runtime_ref: String,
    pub code_hash: Digest,
    pub state: JobState,
    pub state_entered_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub history: Vec<StateChange>,
}

impl JobRecord {
    pub fn submitted(bundle: &JobBundle, at: Timestamp) -> JobRecord {
        JobRecord {
            job_id: bundle.job_id.clone(),
            submitter_id: bundle.submitter_id.clone(),
            dataset_id: bundle.dataset_id.clone(),
            runtime_ref: bundle.runtime_ref.clone(),
            code_hash: bundle.code_hash,
            state: JobState::Submitted,
            state_entered_at: at,
            detail: None,
            history: vec![StateChange { state: JobState::Submitted, at, detail: None }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event} from {from}")]
pub struct IllegalTransition {
    pub from: JobState,
    pub event: LifecycleEvent,
}

/// Applies `event` to `job`, returning the successor record. The input is
/// left untouched; persisting and auditing the result is the caller's job.
pub fn transition(
    job: &JobRecord,
    event: LifecycleEvent,
    at: Timestamp,
    detail: Option<String>,
) -> Result<JobRecord, IllegalTransition> {
    let next = job.state.next(event).ok_or(IllegalTransition { from: job.state, event })?;
    let mut out = job.clone();
    out.state = next;
    out.state_entered_at = at;
    out.detail = detail.clone();
    out.history.push(StateChange { state: next, at, detail });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub relative_path: String,
    pub byte_size: u64,
    pub digest: Digest,
}

/// What a job produced: artifacts from its output area plus its log digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobResultSet {
    pub job_id: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub log_digest: Digest,
    pub exit_status: i32,
    pub produced_at: Timestamp,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, VecDeque};

    fn record() -> JobRecord {
        let bundle = JobBundle {
            job_id: "00000000-0000-4000-8000-000000000001".into(),
            submitter_id: "alice".into(),
            code_archive: vec![],
            entrypoint: "main.py".into(),
            runtime_ref: "python3-datasci".into(),
            dataset_id: "d".into(),
            resource_request: ResourceRequest { cpu_cores: 1, memory_mb: 1, max_runtime_s: 1 },
            code_hash: Digest::ZERO,
        };
        JobRecord::submitted(&bundle, Timestamp::from_millis(0))
    }

    fn drive(events: &[LifecycleEvent]) -> Result<JobRecord, IllegalTransition> {
        let mut job = record();
        for (i, e) in events.iter().enumerate() {
            job = transition(&job, *e, Timestamp::from_millis(i as i64 + 1), None)?;
        }
        Ok(job)
    }

    #[test]
    fn opening_input_vetting_moves_to_pending() {
        let job = drive(&[LifecycleEvent::InputVettingOpened]).unwrap();
        assert_eq!(job.state, JobState::PendingInputVetting);
        assert_eq!(job.state_entered_at, Timestamp::from_millis(1));
        assert_eq!(job.history.len(), 2);
    }

    #[test]
    fn rejection_carries_reason() {
        let job = drive(&[LifecycleEvent::InputVettingOpened]).unwrap();
        let rejected = transition(&job, LifecycleEvent::InputRejected, Timestamp::from_millis(9), Some("uses sockets".into())).unwrap();
        assert_eq!(rejected.state, JobState::RejectedInput);
        assert_eq!(rejected.detail.as_deref(), Some("uses sockets"));
        // The input value is untouched.
        assert_eq!(job.state, JobState::PendingInputVetting);
    }

    #[test]
    fn full_happy_path_and_terminal_retrieved() {
        use LifecycleEvent::*;
        let job = drive(&[
            InputVettingOpened,
            InputApproved,
            Enqueued,
            ExecutionStarted,
            ExecutionCompleted,
            OutputVettingOpened,
            Released,
            Retrieved,
        ])
        .unwrap();
        assert_eq!(job.state, JobState::Retrieved);
        for event in LifecycleEvent::ALL {
            assert_eq!(
                transition(&job, event, Timestamp::from_millis(99), None),
                Err(IllegalTransition { from: JobState::Retrieved, event })
            );
        }
    }

    #[test]
    fn failed_execution_still_reaches_output_vetting() {
        use LifecycleEvent::*;
        let job = drive(&[InputVettingOpened, InputApproved, Enqueued, ExecutionStarted, ExecutionFailed, OutputVettingOpened])
            .unwrap();
        assert_eq!(job.state, JobState::PendingOutputVetting);
    }

    #[test]
    fn every_pair_is_an_edge_or_illegal() {
        let edges: BTreeSet<(JobState, LifecycleEvent, JobState)> = [
            (JobState::Submitted, LifecycleEvent::InputVettingOpened, JobState::PendingInputVetting),
            (JobState::PendingInputVetting, LifecycleEvent::InputRejected, JobState::RejectedInput),
            (JobState::PendingInputVetting, LifecycleEvent::InputApproved, JobState::ApprovedSigned),
            (JobState::ApprovedSigned, LifecycleEvent::Enqueued, JobState::QueuedForExecution),
            (JobState::QueuedForExecution, LifecycleEvent::ExecutionStarted, JobState::Executing),
            (JobState::Executing, LifecycleEvent::ExecutionFailed, JobState::ExecutionFailed),
            (JobState::Executing, LifecycleEvent::ExecutionCompleted, JobState::Completed),
            (JobState::ExecutionFailed, LifecycleEvent::OutputVettingOpened, JobState::PendingOutputVetting),
            (JobState::Completed, LifecycleEvent::OutputVettingOpened, JobState::PendingOutputVetting),
            (JobState::PendingOutputVetting, LifecycleEvent::OutputRejected, JobState::RejectedOutput),
            (JobState::PendingOutputVetting, LifecycleEvent::Released, JobState::Released),
            (JobState::Released, LifecycleEvent::Retrieved, JobState::Retrieved),
        ]
        .into_iter()
        .collect();
        let mut found = 0;
        for state in JobState::ALL {
            for event in LifecycleEvent::ALL {
                match state.next(event) {
                    Some(to) => {
                        assert!(edges.contains(&(state, event, to)), "{state} --{event}--> {to}");
                        found += 1;
                    }
                    None => assert!(!edges.iter().any(|(s, e, _)| *s == state && *e == event)),
                }
            }
        }
        assert_eq!(found, edges.len());
    }

    /// States reachable from `start` without passing through `avoid`.
    fn reachable_avoiding(start: JobState, avoid: JobState) -> BTreeSet<JobState> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for e in LifecycleEvent::ALL {
                if let Some(n) = s.next(e) {
                    if n != avoid && seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        seen
    }

    #[test]
    fn executing_requires_approved_signed() {
        assert!(!reachable_avoiding(JobState::Submitted, JobState::ApprovedSigned).contains(&JobState::Executing));
    }

    #[test]
    fn retrieved_requires_released() {
        for start in JobState::ALL {
            if start == JobState::Released || start == JobState::Retrieved {
                continue;
            }
            assert!(!reachable_avoiding(start, JobState::Released).contains(&JobState::Retrieved), "{start}");
        }
    }

    #[test]
    fn terminal_states_have_no_successors() {
        for state in JobState::ALL {
            let has_successor = LifecycleEvent::ALL.iter().any(|e| state.next(*e).is_some());
            assert_eq!(state.is_terminal(), !has_successor, "{state}");
        }
    }

    #[test]
    fn event_names_are_snake_case() {
        assert_eq!(LifecycleEvent::InputVettingOpened.to_string(), "input_vetting_opened");
        assert_eq!(serde_json::to_string(&JobState::PendingInputVetting).unwrap(), "\"PendingInputVetting\"");
    }
}
