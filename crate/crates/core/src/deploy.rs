//! A complete desk-scale deployment: the three zones sharing one queue
//! root, each with its own state directory.
//!
//! ```text
//! <root>/public      gateway state, public audit chain
//! <root>/secure      executor state, airlocks, secure audit chain
//! <root>/restricted  vault config, sealed datasets, restricted audit chain
//! <root>/queues      one directory per one-way queue
//! ```

use std::fs;
use std::os::fd::AsRawFd;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::json;

use crate::attestation::{KeyStore, PublicKey};
use crate::audit::{AuditAction, AuditError, AuditLog};
use crate::codec::Clock;
use crate::executor::runner::SandboxRunner;
use crate::executor::{ExecutorConfig, ExecutorError, SecureZone};
use crate::gateway::auth::{Role, StaticTokens};
use crate::gateway::{GatewayConfig, GatewayError, PublicZone, PRINCIPALS_FILE};
use crate::messages::{next_message, wiring, CredentialOutcome, CredentialResponse, CREDENTIALS, MOUNT_REQUESTS};
use crate::model::Zone;
use crate::vault::{KdfParams, KEYS_FILE, MountRequest, Vault, VaultConfig, VaultError, VaultOptions, DEFAULT_CHUNK_SIZE};
use crate::wal::{Consumer, Endpoint, Producer, QueueError, QueueHub, QueueOptions};

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub public: PathBuf,
    pub secure: PathBuf,
    pub restricted: PathBuf,
    pub queues: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Layout {
        Layout {
            root: root.to_owned(),
            public: root.join("public"),
            secure: root.join("secure"),
            restricted: root.join("restricted"),
            queues: root.join("queues"),
        }
    }

    pub fn principals(&self) -> PathBuf {
        self.public.join(PRINCIPALS_FILE)
    }

    pub fn zone_dir(&self, zone: Zone) -> &Path {
        match zone {
            Zone::Public => &self.public,
            Zone::Secure => &self.secure,
            Zone::Restricted => &self.restricted,
        }
    }

    pub fn audit_dir(&self, zone: Zone) -> PathBuf {
        self.zone_dir(zone).join("audit")
    }

    /// The vetter key registry a zone's console manages.
    pub fn key_store(&self, zone: Zone, clock: Arc<dyn Clock>) -> Result<KeyStore, AuditError> {
        let audit = AuditLog::open(&self.audit_dir(zone), zone, clock)?;
        Ok(KeyStore::new(self.zone_dir(zone).join(KEYS_FILE), audit))
    }

    pub fn daemon_lock(&self) -> PathBuf {
        self.root.join("airlockd.lock")
    }

    /// Creates the directories. Airlock slot identities need to traverse
    /// the root and the secure tree, so those are 0711; the rest are 0700.
    pub fn create(&self) -> std::io::Result<()> {
        for (dir, mode) in [
            (&self.root, 0o711),
            (&self.secure, 0o711),
            (&self.secure.join("airlocks"), 0o711),
            (&self.public, 0o700),
            (&self.restricted, 0o700),
            (&self.queues, 0o700),
        ] {
            fs::create_dir_all(dir)?;
            fs::set_permissions(dir, fs::Permissions::from_mode(mode))?;
        }
        Ok(())
    }
}

/// Advisory lock held by the running daemon for its whole lifetime.
#[derive(Debug)]
pub struct DaemonLock {
    _file: fs::File,
}

impl DaemonLock {
    /// Takes the lock, or returns `None` when another process holds it.
    pub fn try_acquire(layout: &Layout) -> std::io::Result<Option<DaemonLock>> {
        let file = fs::OpenOptions::new().create(true).append(true).open(layout.daemon_lock())?;
        // SAFETY: flock on a descriptor owned by `file`.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc == 0 {
            return Ok(Some(DaemonLock { _file: file }));
        }
        let err = std::io::Error::last_os_error();
        if err.raw_os_error() == Some(libc::EWOULDBLOCK) {
            Ok(None)
        } else {
            Err(err)
        }
    }

    /// Whether a daemon currently holds the lock for `layout`.
    pub fn is_held(layout: &Layout) -> std::io::Result<bool> {
        if !layout.daemon_lock().exists() {
            return Ok(false);
        }
        Ok(DaemonLock::try_acquire(layout)?.is_none())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Default)]
pub struct DeploymentConfig {
    pub gateway: GatewayConfig,
    pub executor: ExecutorConfig,
    pub vault: VaultOptions,
    pub queues: QueueOptions,
}

/// The vault's queue-facing side: mount requests in, credentials out.
pub struct RestrictedZone {
    vault: Arc<Vault>,
    requests: Mutex<Consumer>,
    responses: Producer,
}

impl RestrictedZone {
    pub fn new(vault: Arc<Vault>, hub: &QueueHub) -> Result<RestrictedZone, QueueError> {
        Ok(RestrictedZone {
            vault,
            requests: Mutex::new(hub.consumer(MOUNT_REQUESTS, Endpoint::DataVault)?),
            responses: hub.producer(CREDENTIALS, Endpoint::DataVault)?,
        })
    }

    pub fn vault(&self) -> &Arc<Vault> {
        &self.vault
    }

    /// Answers every pending mount request.
    pub fn pump(&self) -> Result<usize, QueueError> {
        let rx = self.requests.lock().unwrap();
        let mut n = 0;
        while let Some((seq, msg)) = next_message::<MountRequest>(&rx)? {
            match msg {
                Ok(req) => {
                    let outcome = match self.vault.handle_mount_request(&req) {
                        Ok(c) => CredentialOutcome::Granted(c),
                        Err(d) => CredentialOutcome::Denied(d),
                    };
                    self.responses.send(&CredentialResponse { request_id: req.request_id, job_id: req.job_id, outcome })?;
                }
                Err(detail) => {
                    let _ = self.vault.audit().record(
                        "system",
                        AuditAction::MountDenied,
                        &json!({ "reason": "malformed", "detail": detail }),
                    );
                }
            }
            rx.ack(seq)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn spawn(self: &Arc<Self>, stop: Arc<AtomicBool>, interval: Duration) -> JoinHandle<()> {
        let zone = self.clone();
        thread::Builder::new()
            .name("restricted-pump".into())
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match zone.pump() {
                        Ok(0) => thread::sleep(interval),
                        Ok(_) => {}
                        Err(e) => {
                            tracing::error!(error = %e, "mount request pump failed");
                            thread::sleep(interval * 10);
                        }
                    }
                }
            })
            .expect("spawn restricted pump")
    }
}

pub struct Deployment {
    pub layout: Layout,
    pub hub: QueueHub,
    pub public: Arc<PublicZone>,
    pub secure: Arc<SecureZone>,
    pub restricted: Arc<RestrictedZone>,
    pub tokens: Arc<StaticTokens>,
    clock: Arc<dyn Clock>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Deployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Deployment").field("root", &self.layout.root).field("running", &!self.threads.is_empty()).finish()
    }
}

impl Deployment {
    /// Creates the directory layout and a new vault.
    pub fn init(root: &Path, passphrase: &[u8], kdf: KdfParams) -> Result<VaultConfig, DeployError> {
        let layout = Layout::new(root);
        layout.create()?;
        Ok(Vault::init(&layout.restricted, passphrase, kdf, DEFAULT_CHUNK_SIZE as u32)?)
    }

    /// Opens every zone without starting any background work. The vault
    /// stays locked until [`Deployment::unlock`].
    pub fn open(
        root: &Path,
        clock: Arc<dyn Clock>,
        config: DeploymentConfig,
        runner: Arc<dyn SandboxRunner>,
    ) -> Result<Deployment, DeployError> {
        let layout = Layout::new(root);
        layout.create()?;
        let hub = QueueHub::open(&layout.queues, &wiring(), config.queues.clone())?;
        for report in hub.recovery_reports() {
            tracing::info!(?report, "queue recovered");
        }
        let vault = Arc::new(Vault::open(&layout.restricted, clock.clone(), config.vault.clone())?);
        let restricted = Arc::new(RestrictedZone::new(vault.clone(), &hub)?);
        let secure = SecureZone::open(&layout.secure, &hub, clock.clone(), config.executor.clone(), runner, vault)?;
        let tokens = Arc::new(StaticTokens::open(&layout.principals()));
        let public = PublicZone::open(&layout.public, &hub, clock.clone(), config.gateway.clone(), tokens.clone())?;
        Ok(Deployment { layout, hub, public, secure, restricted, tokens, clock, stop: Arc::new(AtomicBool::new(false)), threads: Vec::new() })
    }

    pub fn vault(&self) -> &Arc<Vault> {
        self.restricted.vault()
    }

    pub fn unlock(&self, passphrase: &[u8]) -> Result<crate::vault::UnlockReport, DeployError> {
        Ok(self.vault().unlock(passphrase)?)
    }

    /// Registers a vetter key with every zone's registry, as the three
    /// local consoles would.
    pub fn register_vetter(&self, vetter_id: &str, key: PublicKey) -> Result<(), DeployError> {
        let at = self.clock.now();
        self.public.keys().register("console", vetter_id, key, at).map_err(|e| DeployError::Other(e.to_string()))?;
        self.secure.keys().register("console", vetter_id, key, at).map_err(|e| DeployError::Other(e.to_string()))?;
        self.vault().keys().register("console", vetter_id, key, at).map_err(|e| DeployError::Other(e.to_string()))?;
        Ok(())
    }

    /// Adds a principal and returns its bearer token.
    pub fn add_principal(&self, principal_id: &str, role: Role) -> Result<String, DeployError> {
        let token = self.tokens.add(principal_id, role).map_err(|e| DeployError::Other(e.to_string()))?;
        self.public
            .audit()
            .record("console", AuditAction::PrincipalRegistered, &json!({ "principal_id": principal_id, "role": role }))
            .map_err(|e| DeployError::Other(e.to_string()))?;
        Ok(token)
    }

    /// Starts every zone's background threads.
    pub fn start(&mut self) {
        if !self.threads.is_empty() {
            return;
        }
        self.stop.store(false, Ordering::SeqCst);
        let interval = self.public.config().pump_interval;
        self.threads.push(self.public.spawn_pump(self.stop.clone()));
        self.threads.push(self.restricted.spawn(self.stop.clone(), interval));
        self.threads.extend(self.secure.spawn(self.stop.clone()));
    }

    pub fn is_running(&self) -> bool {
        !self.threads.is_empty()
    }

    /// Stops background threads, waiting for running airlocks to finish.
    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        self.stop();
    }
}
