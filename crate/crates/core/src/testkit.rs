//! Fixtures for driving a full deployment from tests, benches and the
//! acceptance suite.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::archive::{BundleArchive, BundleManifest, MANIFEST_PATH};
use crate::attestation::{sign_offline, SecretSeed, VettingSignature};
use crate::codec::{to_canonical_json, Clock, Digest};
use crate::deploy::{DeployError, Deployment, DeploymentConfig};
use crate::executor::runner::SandboxRunner;
use crate::gateway::auth::{Principal, Role, TokenAuthenticator};
use crate::gateway::{DecisionReceipt, DecisionRequest, GatewayError, ResultsDownload, SubmitReceipt, SubmitRequest};
use crate::model::{JobRecord, JobState, ResourceRequest};
use crate::vault::{DatasetManifest, KdfParams};

pub const PASSPHRASE: &[u8] = b"desk-scale test passphrase";

/// Canonical ZIP of `files` plus a `manifest.json` built from the rest.
pub fn bundle_zip(files: &[(&str, &[u8])], entrypoint: &str, runtime_ref: &str, dataset_id: &str, resources: ResourceRequest) -> Vec<u8> {
    let manifest = BundleManifest {
        entrypoint: entrypoint.into(),
        runtime_ref: runtime_ref.into(),
        dataset_id: dataset_id.into(),
        resource_request: resources,
    };
    let mut archive = BundleArchive::new();
    archive.insert(MANIFEST_PATH, to_canonical_json(&manifest)).expect("manifest path");
    for (path, bytes) in files {
        archive.insert(*path, bytes.to_vec()).expect("valid test path");
    }
    archive.to_canonical_bytes()
}

pub fn small_resources(max_runtime_s: u64) -> ResourceRequest {
    ResourceRequest { cpu_cores: 1, memory_mb: 256, max_runtime_s }
}

/// A `posix-sh` job running `script` as `job.sh`.
pub fn sh_job(script: &str, dataset_id: &str, max_runtime_s: u64) -> Vec<u8> {
    bundle_zip(&[("job.sh", script.as_bytes())], "job.sh", "posix-sh", dataset_id, small_resources(max_runtime_s))
}

pub struct Vetter {
    pub id: String,
    pub seed: SecretSeed,
    pub token: String,
    pub principal: Principal,
}

impl Vetter {
    pub fn sign(&self, h: &Harness, job_id: &str, code_hash: Digest) -> Result<VettingSignature, GatewayError> {
        let nonce = h.deployment.public.request_nonce(&self.principal)?;
        Ok(sign_offline(job_id, &self.id, code_hash, nonce.value, &self.seed, h.clock.now()))
    }
}

pub struct Harness {
    pub deployment: Deployment,
    pub clock: Arc<dyn Clock>,
    pub consumer: Principal,
    pub consumer_token: String,
    pub vetters: Vec<Vetter>,
}

impl Harness {
    /// Initialises a deployment at `root` with one consumer (`carol`) and
    /// `vetters` registered vetters (`vetter-0`, ...), unlocks the vault and
    /// leaves the zones stopped.
    pub fn new(
        root: &Path,
        clock: Arc<dyn Clock>,
        config: DeploymentConfig,
        runner: Arc<dyn SandboxRunner>,
        vetters: usize,
    ) -> Result<Harness, DeployError> {
        Deployment::init(root, PASSPHRASE, KdfParams::insecure_fast())?;
        let deployment = Deployment::open(root, clock.clone(), config, runner)?;
        deployment.unlock(PASSPHRASE)?;
        let consumer_token = deployment.add_principal("carol", Role::Consumer)?;
        let consumer = deployment.tokens.authenticate(&consumer_token).expect("just added");
        let mut vs = Vec::new();
        for i in 0..vetters {
            let id = format!("vetter-{i}");
            let seed = SecretSeed::generate();
            deployment.register_vetter(&id, seed.public_key())?;
            let token = deployment.add_principal(&id, Role::Vetter)?;
            let principal = deployment.tokens.authenticate(&token).expect("just added");
            vs.push(Vetter { id, seed, token, principal });
        }
        Ok(Harness { deployment, clock, consumer, consumer_token, vetters: vs })
    }

    pub fn start(&mut self) {
        self.deployment.start();
    }

    pub fn load_dataset(&self, dataset_id: &str, bytes: &[u8]) -> DatasetManifest {
        self.deployment.vault().load_dataset("custodian", &mut &bytes[..], dataset_id, 1).expect("dataset loads")
    }

    pub fn submit(&self, archive: Vec<u8>) -> Result<SubmitReceipt, GatewayError> {
        self.deployment.public.submit(&self.consumer, SubmitRequest { archive, code_hash: None })
    }

    /// Approves with the first `n` vetters, each using a fresh nonce.
    pub fn approve_input(&self, receipt: &SubmitReceipt, n: usize) -> Result<DecisionReceipt, GatewayError> {
        let mut last = None;
        for v in self.vetters.iter().take(n) {
            let sig = v.sign(self, &receipt.job_id, receipt.code_hash)?;
            let req = DecisionRequest { approve: true, reason: None, signature: Some(sig) };
            last = Some(self.deployment.public.decide_input(&v.principal, &receipt.job_id, req)?);
        }
        last.ok_or(GatewayError::BadRequest("no vetters".into()))
    }

    pub fn decide_output(&self, job_id: &str, approve: bool) -> Result<DecisionReceipt, GatewayError> {
        let req = DecisionRequest { approve, reason: Some(if approve { "clean" } else { "disclosure risk" }.into()), signature: None };
        self.deployment.public.decide_output(&self.vetters[0].principal, job_id, req)
    }

    pub fn status(&self, job_id: &str) -> JobRecord {
        self.deployment.public.status(&self.consumer, job_id).expect("own job")
    }

    /// Polls until the job reaches a state in `states`.
    pub fn wait_for(&self, job_id: &str, states: &[JobState], timeout: Duration) -> Result<JobRecord, JobRecord> {
        let deadline = Instant::now() + timeout;
        loop {
            let job = self.status(job_id);
            if states.contains(&job.state) {
                return Ok(job);
            }
            if Instant::now() >= deadline {
                return Err(job);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn fetch(&self, job_id: &str) -> Result<ResultsDownload, GatewayError> {
        self.deployment.public.fetch_results(&self.consumer, job_id)
    }
}
