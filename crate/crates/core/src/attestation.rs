//! Vetting attestation: vetter key registry, nonce lifecycle, and detached
//! Ed25519 signatures over a job's canonical code hash.
//!
//! Signing happens only in the offline signer tool. Zone services hold
//! public keys and the nonce registry; they never see a private key.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::audit::{AuditAction, AuditLog};
use crate::codec::{fixed_hex, from_canonical_json, to_canonical_json, Digest, Random256, Timestamp};
use crate::fsutil;

pub const SCHEME_ED25519: &str = "ed25519";
pub const DEFAULT_NONCE_TTL_SECS: i64 = 24 * 60 * 60;

fixed_hex!(
    /// Ed25519 public key.
    PublicKey,
    32
);

fixed_hex!(
    /// Ed25519 signature.
    SignatureBytes,
    64
);

pub type NonceValue = Random256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttestationError {
    #[error("vetter {0:?} is unknown or disabled")]
    UnknownVetter(String),
    #[error("bad key material: {0}")]
    BadKey(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("attestation storage: {0}")]
    Storage(String),
}

impl From<std::io::Error> for AttestationError {
    fn from(e: std::io::Error) -> Self {
        AttestationError::Storage(e.to_string())
    }
}

/// Why a vetting signature was not accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum SignatureRejection {
    #[error("signature does not verify under a registered vetter key")]
    BadSignature,
    #[error("signed code hash does not match the bundle")]
    HashMismatch,
    #[error("signature names a different job")]
    JobMismatch,
    #[error("nonce was never issued")]
    NonceUnknown,
    #[error("nonce was issued to a different vetter")]
    NonceVetterMismatch,
    #[error("nonce already consumed")]
    NonceConsumed,
    #[error("nonce expired")]
    NonceExpired,
    #[error("vetter key is disabled")]
    VetterDisabled,
    #[error("not enough distinct vetter approvals")]
    InsufficientApprovals,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyEntry {
    pub public_key: PublicKey,
    pub enabled: bool,
    pub registered_at: Timestamp,
}

/// Vetter id to public key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRegistry {
    pub entries: BTreeMap<String, KeyEntry>,
}

impl KeyRegistry {
    pub fn load(path: &Path) -> Result<KeyRegistry, AttestationError> {
        Ok(fsutil::read_json(path)?.unwrap_or_default())
    }

    pub fn save(&self, path: &Path) -> Result<(), AttestationError> {
        Ok(fsutil::write_json_atomic(path, self)?)
    }

    /// Registers (or re-keys) a vetter; the entry starts enabled.
    pub fn register(&mut self, vetter_id: &str, public_key: PublicKey, at: Timestamp) -> Result<(), AttestationError> {
        VerifyingKey::from_bytes(&public_key.0).map_err(|e| AttestationError::BadKey(e.to_string()))?;
        if vetter_id.is_empty() {
            return Err(AttestationError::Malformed("empty vetter id".into()));
        }
        self.entries.insert(vetter_id.to_owned(), KeyEntry { public_key, enabled: true, registered_at: at });
        Ok(())
    }

    pub fn set_enabled(&mut self, vetter_id: &str, enabled: bool) -> Result<(), AttestationError> {
        let entry = self.entries.get_mut(vetter_id).ok_or_else(|| AttestationError::UnknownVetter(vetter_id.to_owned()))?;
        entry.enabled = enabled;
        Ok(())
    }

    pub fn is_enabled(&self, vetter_id: &str) -> bool {
        self.entries.get(vetter_id).is_some_and(|e| e.enabled)
    }

    /// The verifying key for an enabled vetter.
    pub fn enabled_key(&self, vetter_id: &str) -> Result<VerifyingKey, SignatureRejection> {
        let entry = self.entries.get(vetter_id).ok_or(SignatureRejection::BadSignature)?;
        if !entry.enabled {
            return Err(SignatureRejection::VetterDisabled);
        }
        VerifyingKey::from_bytes(&entry.public_key.0).map_err(|_| SignatureRejection::BadSignature)
    }
}

/// A zone's on-disk key registry whose mutations are audit-chained.
///
/// The file is re-read on every lookup so an administrator's change takes
/// effect on the next verification.
#[derive(Debug)]
pub struct KeyStore {
    path: PathBuf,
    audit: AuditLog,
    lock: Mutex<()>,
}

impl KeyStore {
    pub fn new(path: PathBuf, audit: AuditLog) -> KeyStore {
        KeyStore { path, audit, lock: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<KeyRegistry, AttestationError> {
        let _guard = self.lock.lock().unwrap();
        KeyRegistry::load(&self.path)
    }

    pub fn register(&self, actor: &str, vetter_id: &str, public_key: PublicKey, at: Timestamp) -> Result<(), AttestationError> {
        let _guard = self.lock.lock().unwrap();
        let mut reg = KeyRegistry::load(&self.path)?;
        reg.register(vetter_id, public_key, at)?;
        reg.save(&self.path)?;
        self.audit_change(actor, AuditAction::VetterRegistered, vetter_id, Some(public_key))
    }

    pub fn set_enabled(&self, actor: &str, vetter_id: &str, enabled: bool) -> Result<(), AttestationError> {
        let _guard = self.lock.lock().unwrap();
        let mut reg = KeyRegistry::load(&self.path)?;
        reg.set_enabled(vetter_id, enabled)?;
        reg.save(&self.path)?;
        let action = if enabled { AuditAction::VetterEnabled } else { AuditAction::VetterDisabled };
        self.audit_change(actor, action, vetter_id, None)
    }

    fn audit_change(&self, actor: &str, action: AuditAction, vetter_id: &str, key: Option<PublicKey>) -> Result<(), AttestationError> {
        self.audit
            .record(actor, action, &serde_json::json!({ "vetter_id": vetter_id, "public_key": key }))
            .map_err(|e| AttestationError::Storage(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonceState {
    Issued,
    Consumed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonce {
    pub value: NonceValue,
    pub issued_to: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub state: NonceState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NonceJournal {
    Issued(Nonce),
    Consumed { value: NonceValue, at: Timestamp },
}

/// Linearisable nonce registry, optionally journaled to disk.
///
/// The public zone issues nonces; the secure zone imports the issuance
/// records from its queue and is the only place nonces are consumed.
#[derive(Debug)]
pub struct NonceRegistry {
    ttl_secs: i64,
    journal: Option<PathBuf>,
    inner: Mutex<NonceTable>,
}

#[derive(Debug, Default)]
struct NonceTable {
    nonces: HashMap<NonceValue, Nonce>,
    file: Option<File>,
}

impl NonceRegistry {
    pub fn in_memory(ttl_secs: i64) -> NonceRegistry {
        NonceRegistry { ttl_secs, journal: None, inner: Mutex::new(NonceTable::default()) }
    }

    /// Opens a journaled registry, replaying `path` if it exists.
    pub fn open(path: &Path, ttl_secs: i64) -> Result<NonceRegistry, AttestationError> {
        let mut nonces = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let entry: NonceJournal = serde_json::from_str(&line).map_err(|e| {
                    AttestationError::Storage(format!("nonce journal line {}: {e}", lineno + 1))
                })?;
                match entry {
                    NonceJournal::Issued(n) => {
                        nonces.entry(n.value).or_insert(n);
                    }
                    NonceJournal::Consumed { value, .. } => {
                        if let Some(n) = nonces.get_mut(&value) {
                            n.state = NonceState::Consumed;
                        }
                    }
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(NonceRegistry {
            ttl_secs,
            journal: Some(path.to_owned()),
            inner: Mutex::new(NonceTable { nonces, file: Some(file) }),
        })
    }

    pub fn ttl_secs(&self) -> i64 {
        self.ttl_secs
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal.as_deref()
    }

    fn journal(table: &mut NonceTable, entry: &NonceJournal) -> Result<(), AttestationError> {
        if let Some(file) = table.file.as_mut() {
            let mut line = to_canonical_json(entry);
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
        }
        Ok(())
    }

    /// Issues a fresh nonce to an enabled vetter.
    pub fn issue(&self, vetter_id: &str, keys: &KeyRegistry, now: Timestamp) -> Result<Nonce, AttestationError> {
        if !keys.is_enabled(vetter_id) {
            return Err(AttestationError::UnknownVetter(vetter_id.to_owned()));
        }
        let mut table = self.inner.lock().unwrap();
        let value = loop {
            let candidate = Random256::generate();
            if !table.nonces.contains_key(&candidate) {
                break candidate;
            }
        };
        let nonce = Nonce {
            value,
            issued_to: vetter_id.to_owned(),
            issued_at: now,
            expires_at: now.plus_secs(self.ttl_secs),
            state: NonceState::Issued,
        };
        Self::journal(&mut table, &NonceJournal::Issued(nonce.clone()))?;
        table.nonces.insert(value, nonce.clone());
        Ok(nonce)
    }

    /// Records a nonce issued elsewhere. Re-imports are ignored so a
    /// consumed nonce cannot be revived.
    pub fn import(&self, nonce: &Nonce) -> Result<bool, AttestationError> {
        let mut table = self.inner.lock().unwrap();
        if table.nonces.contains_key(&nonce.value) {
            return Ok(false);
        }
        let mut fresh = nonce.clone();
        fresh.state = NonceState::Issued;
        Self::journal(&mut table, &NonceJournal::Issued(fresh.clone()))?;
        table.nonces.insert(fresh.value, fresh);
        Ok(true)
    }

    /// Current view of a nonce, with expiry applied.
    pub fn get(&self, value: &NonceValue, now: Timestamp) -> Option<Nonce> {
        let table = self.inner.lock().unwrap();
        table.nonces.get(value).map(|n| {
            let mut n = n.clone();
            if n.state == NonceState::Issued && now > n.expires_at {
                n.state = NonceState::Expired;
            }
            n
        })
    }

    /// Checks that the nonce may be used by `vetter_id` without consuming it.
    pub fn check_usable(&self, value: &NonceValue, vetter_id: &str, now: Timestamp) -> Result<(), SignatureRejection> {
        let nonce = self.get(value, now).ok_or(SignatureRejection::NonceUnknown)?;
        Self::usable(&nonce, vetter_id)
    }

    fn usable(nonce: &Nonce, vetter_id: &str) -> Result<(), SignatureRejection> {
        if nonce.issued_to != vetter_id {
            return Err(SignatureRejection::NonceVetterMismatch);
        }
        match nonce.state {
            NonceState::Issued => Ok(()),
            NonceState::Consumed => Err(SignatureRejection::NonceConsumed),
            NonceState::Expired => Err(SignatureRejection::NonceExpired),
        }
    }

    /// Atomic check-and-consume. At most one call per nonce ever succeeds.
    pub fn consume(&self, value: &NonceValue, vetter_id: &str, now: Timestamp) -> Result<(), SignatureRejection> {
        let mut table = self.inner.lock().unwrap();
        let nonce = table.nonces.get(value).ok_or(SignatureRejection::NonceUnknown)?;
        let mut view = nonce.clone();
        if view.state == NonceState::Issued && now > view.expires_at {
            view.state = NonceState::Expired;
        }
        Self::usable(&view, vetter_id)?;
        // Journal first: a consumption that is not durable must not be granted.
        Self::journal(&mut table, &NonceJournal::Consumed { value: *value, at: now }).map_err(|e| {
            tracing::error!(error = %e, "nonce journal write failed");
            SignatureRejection::NonceConsumed
        })?;
        table.nonces.get_mut(value).expect("present").state = NonceState::Consumed;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nonces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The fields covered by a vetting signature, in canonical-JSON form.
#[derive(Debug, Serialize)]
struct SignedFields<'a> {
    job_id: &'a str,
    vetter_id: &'a str,
    code_hash: Digest,
    nonce_value: NonceValue,
    signed_at: Timestamp,
}

/// A detached vetter signature. Its canonical JSON is the signature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VettingSignature {
    pub job_id: String,
    pub vetter_id: String,
    pub code_hash: Digest,
    pub nonce_value: NonceValue,
    pub signed_at: Timestamp,
    pub scheme: String,
    pub signature: SignatureBytes,
}

impl VettingSignature {
    /// The exact bytes the signature covers.
    pub fn signed_message(&self) -> Vec<u8> {
        signed_message(&self.job_id, &self.vetter_id, self.code_hash, self.nonce_value, self.signed_at)
    }

    /// Pure signature check against one public key.
    pub fn verify_with(&self, key: &VerifyingKey) -> bool {
        if self.scheme != SCHEME_ED25519 {
            return false;
        }
        let sig = ed25519_dalek::Signature::from_bytes(&self.signature.0);
        key.verify_strict(&self.signed_message(), &sig).is_ok()
    }

    /// [`Self::verify_with`] for a raw registry key. Keys that are not valid
    /// curve points never verify.
    pub fn verify_with_public(&self, key: &PublicKey) -> bool {
        VerifyingKey::from_bytes(&key.0).is_ok_and(|k| self.verify_with(&k))
    }

    pub fn to_file_bytes(&self) -> Vec<u8> {
        to_canonical_json(self)
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<VettingSignature, AttestationError> {
        let trimmed = bytes.strip_suffix(b"\n").unwrap_or(bytes);
        from_canonical_json(trimmed).map_err(|e| AttestationError::Malformed(e.to_string()))
    }
}

pub fn signed_message(job_id: &str, vetter_id: &str, code_hash: Digest, nonce_value: NonceValue, signed_at: Timestamp) -> Vec<u8> {
    to_canonical_json(&SignedFields { job_id, vetter_id, code_hash, nonce_value, signed_at })
}

/// A 32-byte Ed25519 seed, wiped on drop.
pub struct SecretSeed(Zeroizing<[u8; 32]>);

impl SecretSeed {
    pub fn from_bytes(bytes: &[u8]) -> Result<SecretSeed, AttestationError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| AttestationError::BadKey(format!("seed must be 32 bytes, got {}", bytes.len())))?;
        Ok(SecretSeed(Zeroizing::new(arr)))
    }

    pub fn generate() -> SecretSeed {
        use rand::RngCore;
        let mut seed = Zeroizing::new([0u8; 32]);
        rand::rngs::OsRng.fill_bytes(seed.as_mut());
        SecretSeed(seed)
    }

    /// Parses the key-file format: 64 lowercase hex characters on one line.
    pub fn from_key_file(text: &str) -> Result<SecretSeed, AttestationError> {
        let line = Zeroizing::new(text.trim_end_matches(['\n', '\r']).to_owned());
        let raw = Zeroizing::new(
            crate::codec::decode_lower_hex(&line).map_err(|e| AttestationError::BadKey(e.to_string()))?,
        );
        SecretSeed::from_bytes(&raw)
    }

    pub fn to_key_file(&self) -> Zeroizing<String> {
        Zeroizing::new(format!("{}\n", hex::encode(self.0.as_ref())))
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(SigningKey::from_bytes(&self.0).verifying_key().to_bytes())
    }
}

impl std::fmt::Debug for SecretSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretSeed(..)")
    }
}

/// Produces a detached signature. Only the offline signer calls this.
pub fn sign_offline(
    job_id: &str,
    vetter_id: &str,
    code_hash: Digest,
    nonce_value: NonceValue,
    seed: &SecretSeed,
    signed_at: Timestamp,
) -> VettingSignature {
    let key = SigningKey::from_bytes(&seed.0);
    let message = signed_message(job_id, vetter_id, code_hash, nonce_value, signed_at);
    VettingSignature {
        job_id: job_id.to_owned(),
        vetter_id: vetter_id.to_owned(),
        code_hash,
        nonce_value,
        signed_at,
        scheme: SCHEME_ED25519.to_owned(),
        signature: SignatureBytes(key.sign(&message).to_bytes()),
    }
}

/// Everything except the nonce: key enabled, signature valid, hash bound.
pub fn check_signature(sig: &VettingSignature, bundle_hash: Digest, keys: &KeyRegistry) -> Result<(), SignatureRejection> {
    let key = keys.enabled_key(&sig.vetter_id)?;
    if !sig.verify_with(&key) {
        return Err(SignatureRejection::BadSignature);
    }
    if sig.code_hash != bundle_hash {
        return Err(SignatureRejection::HashMismatch);
    }
    Ok(())
}

/// Full verification with atomic nonce consumption on success.
pub fn verify_signature(
    sig: &VettingSignature,
    bundle_hash: Digest,
    keys: &KeyRegistry,
    nonces: &NonceRegistry,
    now: Timestamp,
) -> Result<(), SignatureRejection> {
    check_signature(sig, bundle_hash, keys)?;
    nonces.consume(&sig.nonce_value, &sig.vetter_id, now)
}

/// Verifies a job's approvals: every signature must name `job_id` and pass
/// [`verify_signature`], and at least `threshold` distinct vetters must
/// have signed. All pure checks run before any nonce is consumed.
pub fn verify_approvals(
    sigs: &[VettingSignature],
    job_id: &str,
    bundle_hash: Digest,
    threshold: usize,
    keys: &KeyRegistry,
    nonces: &NonceRegistry,
    now: Timestamp,
) -> Result<(), SignatureRejection> {
    let mut vetters = std::collections::BTreeSet::new();
    for sig in sigs {
        if sig.job_id != job_id {
            return Err(SignatureRejection::JobMismatch);
        }
        check_signature(sig, bundle_hash, keys)?;
        vetters.insert(sig.vetter_id.as_str());
    }
    if vetters.len() < threshold.max(1) || vetters.len() != sigs.len() {
        return Err(SignatureRejection::InsufficientApprovals);
    }
    for sig in sigs {
        nonces.consume(&sig.nonce_value, &sig.vetter_id, now)?;
    }
    Ok(())
}
