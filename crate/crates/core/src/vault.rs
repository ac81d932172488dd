//! Restricted-zone data vault.
//!
//! Datasets are stored as AES-256-GCM sealed blobs under a volume key
//! derived with Argon2id from a passphrase supplied at process start. The
//! only plaintext egress is [`DataChannel::redeem`], which hands a
//! credential-scoped stream to the secure zone.
//!
//! Blob layout: `"ALV1"`, a 4-byte big-endian header length, the canonical
//! JSON [`BlobHeader`], then `chunk_count` sealed chunks. Each chunk is a
//! 12-byte nonce (8-byte random prefix, 4-byte big-endian counter), the
//! ciphertext and a 16-byte tag.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce as GcmNonce};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest as _, Sha256};
use zeroize::Zeroizing;

use crate::attestation::{check_signature, KeyStore, SignatureRejection, VettingSignature};
use crate::audit::{AuditAction, AuditLog};
use crate::codec::{from_canonical_json, hex_bytes, to_canonical_json, Clock, Digest, Random256, Timestamp};
use crate::fsutil;
use crate::model::Zone;

pub const BLOB_MAGIC: &[u8; 4] = b"ALV1";
pub const DEFAULT_CHUNK_SIZE: u32 = 1024 * 1024;
pub const DEFAULT_GRACE_SECS: i64 = 300;
/// Lifetime cap on credentials per (job, dataset); matches the executor's
/// redelivery cap.
pub const DEFAULT_MAX_CREDENTIALS_PER_PAIR: usize = 3;
pub const CONFIG_FILE: &str = "vault.json";
pub const MANIFEST_FILE: &str = "datasets.json";
pub const CREDENTIAL_FILE: &str = "credentials.json";
pub const KEYS_FILE: &str = "vetters.json";

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const KEY_CHECK_AAD: &[u8] = b"airlock-vault-key-check";

#[derive(Debug, thiserror::Error)]
pub enum VaultError {
    #[error("vault is not initialised")]
    NotInitialised,
    #[error("vault is already initialised")]
    AlreadyInitialised,
    #[error("vault is locked")]
    Locked,
    #[error("vault is already unlocked")]
    AlreadyUnlocked,
    #[error("bad passphrase")]
    BadPassphrase,
    #[error("dataset {0} version {1} already loaded")]
    DuplicateVersion(String, u64),
    #[error("invalid dataset id {0:?}")]
    BadDatasetId(String),
    #[error("storage full")]
    StorageFull,
    #[error("unknown credential {0}")]
    UnknownCredential(String),
    #[error("corrupt vault storage: {0}")]
    Corrupt(String),
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("io: {0}")]
    Io(io::Error),
    #[error("audit: {0}")]
    Audit(#[from] crate::audit::AuditError),
}

impl From<io::Error> for VaultError {
    fn from(e: io::Error) -> Self {
        if e.raw_os_error() == Some(libc::ENOSPC) {
            VaultError::StorageFull
        } else {
            VaultError::Io(e)
        }
    }
}

/// Argon2id parameters, stored beside the vault and in every blob header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdfParams {
    pub algorithm: KdfAlgorithm,
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdfAlgorithm {
    Argon2id,
}

impl Default for KdfParams {
    fn default() -> Self {
        KdfParams { algorithm: KdfAlgorithm::Argon2id, memory_kib: 19 * 1024, iterations: 2, parallelism: 1 }
    }
}

impl KdfParams {
    /// Small parameters for tests and benchmarks.
    pub fn insecure_fast() -> KdfParams {
        KdfParams { algorithm: KdfAlgorithm::Argon2id, memory_kib: 64, iterations: 1, parallelism: 1 }
    }

    pub fn derive(&self, passphrase: &[u8], salt: &[u8]) -> Result<Zeroizing<[u8; 32]>, VaultError> {
        let params = argon2::Params::new(self.memory_kib, self.iterations, self.parallelism, Some(32))
            .map_err(|e| VaultError::BadParams(e.to_string()))?;
        let kdf = argon2::Argon2::new(argon2::Algorithm::Argon2id, argon2::Version::V0x13, params);
        let mut key = Zeroizing::new([0u8; 32]);
        kdf.hash_password_into(passphrase, salt, key.as_mut()).map_err(|e| VaultError::BadParams(e.to_string()))?;
        Ok(key)
    }
}

/// Versioned crypto configuration stored as `vault.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaultConfig {
    pub format_version: u32,
    pub kdf: KdfParams,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
    pub aead: String,
    pub chunk_size: u32,
    /// AES-256-GCM seal of 32 zero bytes under the volume key.
    #[serde(with = "hex_bytes")]
    pub key_check: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobHeader {
    pub dataset_id: String,
    pub version: u64,
    pub kdf: KdfParams,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub key_check: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub nonce_prefix: Vec<u8>,
    pub chunk_size: u32,
    pub chunk_count: u32,
    pub plaintext_len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub version: u64,
    pub blob_path: String,
    pub plaintext_digest: Digest,
    pub byte_size: u64,
    pub loaded_at: Timestamp,
    pub loaded_by: String,
}

fn seal_key_check(key: &[u8; 32]) -> Vec<u8> {
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    let nonce: [u8; NONCE_LEN] = rand::random();
    let mut out = nonce.to_vec();
    out.extend(cipher.encrypt(GcmNonce::from_slice(&nonce), Payload { msg: &[0u8; 32], aad: KEY_CHECK_AAD }).expect("seal"));
    out
}

fn key_check_ok(key: &[u8; 32], block: &[u8]) -> bool {
    if block.len() != NONCE_LEN + 32 + TAG_LEN {
        return false;
    }
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    let (nonce, ct) = block.split_at(NONCE_LEN);
    matches!(cipher.decrypt(GcmNonce::from_slice(nonce), Payload { msg: ct, aad: KEY_CHECK_AAD }), Ok(p) if p == [0u8; 32])
}

/// Digest of the header fields fixed before the first chunk is sealed.
/// The chunk count and length are covered by the final-chunk flag and the
/// manifest instead.
fn header_context(kdf: &KdfParams, salt: &[u8], key_check: &[u8], nonce_prefix: &[u8], chunk_size: u32) -> Digest {
    crate::codec::digest_canonical(&json!({
        "chunk_size": chunk_size,
        "kdf": kdf,
        "key_check": hex::encode(key_check),
        "nonce_prefix": hex::encode(nonce_prefix),
        "salt": hex::encode(salt),
    }))
}

fn chunk_aad(dataset_id: &str, version: u64, context: &Digest, index: u32, last: bool) -> Vec<u8> {
    let mut aad = Vec::with_capacity(dataset_id.len() + 53);
    aad.extend_from_slice(BLOB_MAGIC);
    aad.extend_from_slice(&(dataset_id.len() as u32).to_be_bytes());
    aad.extend_from_slice(dataset_id.as_bytes());
    aad.extend_from_slice(&version.to_be_bytes());
    aad.extend_from_slice(&context.0);
    aad.extend_from_slice(&index.to_be_bytes());
    aad.push(last as u8);
    aad
}

fn chunk_nonce(prefix: &[u8], index: u32) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[..8].copy_from_slice(prefix);
    n[8..].copy_from_slice(&index.to_be_bytes());
    n
}

/// Fills `buf` from `r`, returning fewer bytes only at end of input.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Encrypts `source` into `out` as an ALV1 blob. Returns the plaintext
/// digest and length.
pub fn seal_blob(
    key: &[u8; 32],
    config: &VaultConfig,
    dataset_id: &str,
    version: u64,
    source: &mut impl Read,
    out: &mut impl Write,
) -> io::Result<(Digest, u64)> {
    let chunk_size = config.chunk_size as usize;
    // The header carries the chunk count, so sealed chunks are held in
    // memory until the source is exhausted.
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    let prefix: [u8; 8] = rand::random();
    let context = header_context(&config.kdf, &config.salt, &config.key_check, &prefix, config.chunk_size);
    let mut hasher = Sha256::new();
    let mut chunks: Vec<Vec<u8>> = Vec::new();
    let mut total = 0u64;
    let mut current = vec![0u8; chunk_size];
    let mut n = read_full(source, &mut current)?;
    loop {
        let mut next = vec![0u8; chunk_size];
        let next_n = if n == chunk_size { read_full(source, &mut next)? } else { 0 };
        let last = next_n == 0;
        let index = u32::try_from(chunks.len()).map_err(|_| io::Error::other("dataset too large"))?;
        let plain = &current[..n];
        hasher.update(plain);
        total += n as u64;
        let nonce = chunk_nonce(&prefix, index);
        let mut sealed = nonce.to_vec();
        sealed.extend(
            cipher
                .encrypt(GcmNonce::from_slice(&nonce), Payload { msg: plain, aad: &chunk_aad(dataset_id, version, &context, index, last) })
                .map_err(|_| io::Error::other("seal failed"))?,
        );
        chunks.push(sealed);
        if last {
            break;
        }
        current.iter_mut().for_each(|b| *b = 0);
        current = next;
        n = next_n;
    }
    let header = BlobHeader {
        dataset_id: dataset_id.to_owned(),
        version,
        kdf: config.kdf,
        salt: config.salt.clone(),
        key_check: config.key_check.clone(),
        nonce_prefix: prefix.to_vec(),
        chunk_size: config.chunk_size,
        chunk_count: chunks.len() as u32,
        plaintext_len: total,
    };
    let header_bytes = to_canonical_json(&header);
    out.write_all(BLOB_MAGIC)?;
    out.write_all(&(header_bytes.len() as u32).to_be_bytes())?;
    out.write_all(&header_bytes)?;
    for c in &chunks {
        out.write_all(c)?;
    }
    Ok((Digest(hasher.finalize().into()), total))
}

/// Streaming decryptor over one blob. Optionally bound to a revocation flag
/// that is checked before every read.
pub struct BlobReader {
    file: BufReader<File>,
    cipher: Aes256Gcm,
    header: BlobHeader,
    index: u32,
    buffer: Zeroizing<Vec<u8>>,
    pos: usize,
    revoked: Option<Arc<AtomicBool>>,
    hasher: Sha256,
    produced: u64,
}

impl std::fmt::Debug for BlobReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlobReader").field("dataset_id", &self.header.dataset_id).field("index", &self.index).finish()
    }
}

pub fn read_blob_header(file: &mut impl Read) -> io::Result<BlobHeader> {
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad blob magic"));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "blob header too large"));
    }
    let mut bytes = vec![0u8; len];
    file.read_exact(&mut bytes)?;
    from_canonical_json(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

impl BlobReader {
    pub fn open(path: &Path, key: &[u8; 32], dataset_id: &str, version: u64) -> io::Result<BlobReader> {
        let mut file = BufReader::new(File::open(path)?);
        let header = read_blob_header(&mut file)?;
        if header.dataset_id != dataset_id || header.version != version || header.nonce_prefix.len() != 8 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "blob header does not match manifest"));
        }
        if header.chunk_count == 0 || header.chunk_size == 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "blob has no chunks"));
        }
        Ok(BlobReader {
            file,
            cipher: Aes256Gcm::new_from_slice(key).expect("32-byte key"),
            header,
            index: 0,
            buffer: Zeroizing::new(Vec::new()),
            pos: 0,
            revoked: None,
            hasher: Sha256::new(),
            produced: 0,
        })
    }

    pub fn header(&self) -> &BlobHeader {
        &self.header
    }

    fn with_revocation(mut self, flag: Arc<AtomicBool>) -> BlobReader {
        self.revoked = Some(flag);
        self
    }

    fn next_chunk(&mut self) -> io::Result<bool> {
        if self.index >= self.header.chunk_count {
            return Ok(false);
        }
        let last = self.index + 1 == self.header.chunk_count;
        let expected_plain = if last {
            let full = (self.header.chunk_count as u64 - 1) * self.header.chunk_size as u64;
            self.header
                .plaintext_len
                .checked_sub(full)
                .filter(|n| *n <= self.header.chunk_size as u64)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "inconsistent blob length"))? as usize
        } else {
            self.header.chunk_size as usize
        };
        let mut sealed = vec![0u8; NONCE_LEN + expected_plain + TAG_LEN];
        self.file.read_exact(&mut sealed)?;
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        if nonce != chunk_nonce(&self.header.nonce_prefix, self.index) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "chunk nonce out of sequence"));
        }
        let h = &self.header;
        let context = header_context(&h.kdf, &h.salt, &h.key_check, &h.nonce_prefix, h.chunk_size);
        let aad = chunk_aad(&h.dataset_id, h.version, &context, self.index, last);
        let plain = self
            .cipher
            .decrypt(GcmNonce::from_slice(nonce), Payload { msg: ct, aad: &aad })
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "chunk authentication failed"))?;
        if last {
            let mut probe = [0u8; 1];
            if self.file.read(&mut probe)? != 0 {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "trailing bytes after final chunk"));
            }
        }
        self.hasher.update(&plain);
        self.produced += plain.len() as u64;
        self.buffer = Zeroizing::new(plain);
        self.pos = 0;
        self.index += 1;
        Ok(true)
    }

    /// Digest of everything read so far.
    pub fn digest_so_far(&self) -> Digest {
        Digest(self.hasher.clone().finalize().into())
    }
}

impl Read for BlobReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if let Some(flag) = &self.revoked {
            if flag.load(Ordering::SeqCst) {
                self.buffer = Zeroizing::new(Vec::new());
                return Err(io::Error::new(io::ErrorKind::PermissionDenied, "credential revoked"));
            }
        }
        while self.pos == self.buffer.len() {
            if !self.next_chunk()? {
                return Ok(0);
            }
        }
        let n = out.len().min(self.buffer.len() - self.pos);
        out[..n].copy_from_slice(&self.buffer[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

/// Full decrypt-and-digest of one blob, used at unlock.
fn verify_blob(path: &Path, key: &[u8; 32], manifest: &DatasetManifest) -> Result<(), String> {
    let mut reader = BlobReader::open(path, key, &manifest.dataset_id, manifest.version).map_err(|e| e.to_string())?;
    if reader.header.plaintext_len != manifest.byte_size {
        return Err("length differs from manifest".into());
    }
    io::copy(&mut reader, &mut io::sink()).map_err(|e| e.to_string())?;
    if reader.digest_so_far() != manifest.plaintext_digest {
        return Err("plaintext digest mismatch".into());
    }
    Ok(())
}

fn valid_dataset_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
        && !id.starts_with('.')
}

/// A request from the secure zone for read access to one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountRequest {
    pub request_id: String,
    pub job_id: String,
    pub dataset_id: String,
    pub code_hash: Digest,
    pub vetting_signature: VettingSignature,
    pub max_runtime_s: u64,
    pub requested_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum MountDenial {
    #[error("vault is locked")]
    VaultLocked,
    #[error("unknown dataset")]
    UnknownDataset,
    #[error("dataset is quarantined")]
    DatasetQuarantined,
    #[error("bad signature")]
    BadSignature,
    #[error("vetter disabled")]
    VetterDisabled,
    #[error("request code hash does not match its signature")]
    HashMismatch,
    #[error("signature names a different job")]
    JobMismatch,
    #[error("credential limit reached for this job and dataset")]
    ReplayLimit,
    #[error("malformed request")]
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CredentialState {
    Unused,
    Consumed,
    Revoked,
    Expired,
}

/// A single-use token. Only its digest is ever written to vault storage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneTimeCredential {
    pub credential_id: String,
    pub token: Random256,
    pub job_id: String,
    pub dataset_id: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub state: CredentialState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CredentialRecord {
    credential_id: String,
    token_digest: Digest,
    request_id: String,
    job_id: String,
    dataset_id: String,
    version: u64,
    issued_at: Timestamp,
    expires_at: Timestamp,
    state: CredentialState,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CredentialTable {
    records: BTreeMap<String, CredentialRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RedeemError {
    #[error("unknown token")]
    UnknownToken,
    #[error("credential already consumed")]
    AlreadyConsumed,
    #[error("credential expired")]
    Expired,
    #[error("credential revoked")]
    Revoked,
    #[error("vault is locked")]
    VaultLocked,
    #[error("dataset unavailable")]
    DatasetUnavailable,
}

/// Read-only plaintext stream scoped to one credential.
#[derive(Debug)]
pub struct DatasetStream {
    pub credential_id: String,
    pub dataset_id: String,
    pub version: u64,
    pub byte_size: u64,
    pub plaintext_digest: Digest,
    reader: BlobReader,
}

impl Read for DatasetStream {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        self.reader.read(out)
    }
}

/// The credential channel from the secure zone into the vault. This is the
/// only interface through which dataset plaintext leaves the vault.
pub trait DataChannel: Send + Sync {
    fn redeem(&self, token: &Random256) -> Result<DatasetStream, RedeemError>;
    fn revoke(&self, credential_id: &str) -> Result<(), VaultError>;
}

#[derive(Debug, Clone)]
pub struct VaultOptions {
    pub grace_secs: i64,
    pub max_credentials_per_pair: usize,
}

impl Default for VaultOptions {
    fn default() -> Self {
        VaultOptions { grace_secs: DEFAULT_GRACE_SECS, max_credentials_per_pair: DEFAULT_MAX_CREDENTIALS_PER_PAIR }
    }
}

struct Session {
    key: Zeroizing<[u8; 32]>,
    serviceable: BTreeMap<(String, u64), DatasetManifest>,
    quarantined: BTreeMap<(String, u64), String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnlockReport {
    pub serviceable: Vec<String>,
    pub quarantined: Vec<(String, String)>,
}

/// The restricted-zone vault service.
pub struct Vault {
    dir: PathBuf,
    clock: Arc<dyn Clock>,
    audit: AuditLog,
    keys: KeyStore,
    options: VaultOptions,
    session: RwLock<Option<Session>>,
    credentials: Mutex<CredentialTable>,
    live_streams: Mutex<HashMap<String, Arc<AtomicBool>>>,
    load_lock: Mutex<()>,
}

impl std::fmt::Debug for Vault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vault").field("dir", &self.dir).field("unlocked", &self.is_unlocked()).finish()
    }
}

fn manifest_key(m: &DatasetManifest) -> String {
    format!("{}@{}", m.dataset_id, m.version)
}

impl Vault {
    /// Creates `vault.json` for a new vault protected by `passphrase`.
    pub fn init(dir: &Path, passphrase: &[u8], kdf: KdfParams, chunk_size: u32) -> Result<VaultConfig, VaultError> {
        let path = dir.join(CONFIG_FILE);
        if path.exists() {
            return Err(VaultError::AlreadyInitialised);
        }
        if chunk_size == 0 {
            return Err(VaultError::BadParams("chunk size must be positive".into()));
        }
        let salt: [u8; 16] = rand::random();
        let key = kdf.derive(passphrase, &salt)?;
        let config = VaultConfig {
            format_version: 1,
            kdf,
            salt: salt.to_vec(),
            aead: "aes-256-gcm".into(),
            chunk_size,
            key_check: seal_key_check(&key),
        };
        fs::create_dir_all(dir)?;
        fsutil::write_json_atomic(&path, &config)?;
        Ok(config)
    }

    /// Opens a vault in the locked state.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, options: VaultOptions) -> Result<Vault, VaultError> {
        fs::create_dir_all(dir)?;
        let audit = AuditLog::open(&dir.join("audit"), Zone::Restricted, clock.clone())?;
        let credentials = CredentialTable {
            records: fsutil::read_json(&dir.join(CREDENTIAL_FILE))?.unwrap_or_default(),
        };
        Ok(Vault {
            dir: dir.to_owned(),
            keys: KeyStore::new(dir.join(KEYS_FILE), audit.clone()),
            clock,
            audit,
            options,
            session: RwLock::new(None),
            credentials: Mutex::new(credentials),
            live_streams: Mutex::new(HashMap::new()),
            load_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    pub fn config(&self) -> Result<VaultConfig, VaultError> {
        fsutil::read_json(&self.dir.join(CONFIG_FILE))?.ok_or(VaultError::NotInitialised)
    }

    pub fn manifests(&self) -> Result<Vec<DatasetManifest>, VaultError> {
        let map: BTreeMap<String, DatasetManifest> = fsutil::read_json(&self.dir.join(MANIFEST_FILE))?.unwrap_or_default();
        Ok(map.into_values().collect())
    }

    pub fn is_unlocked(&self) -> bool {
        self.session.read().unwrap().is_some()
    }

    /// Derives the volume key and verifies every dataset. Datasets that fail
    /// verification are quarantined; the rest become serviceable.
    pub fn unlock(&self, passphrase: &[u8]) -> Result<UnlockReport, VaultError> {
        let mut session = self.session.write().unwrap();
        if session.is_some() {
            return Err(VaultError::AlreadyUnlocked);
        }
        let config = self.config()?;
        let key = config.kdf.derive(passphrase, &config.salt)?;
        if !key_check_ok(&key, &config.key_check) {
            self.audit.record("console", AuditAction::VaultUnlockFailed, &json!({ "reason": "bad_passphrase" }))?;
            return Err(VaultError::BadPassphrase);
        }
        let mut serviceable = BTreeMap::new();
        let mut quarantined = BTreeMap::new();
        for m in self.manifests()? {
            match verify_blob(&self.dir.join(&m.blob_path), &key, &m) {
                Ok(()) => {
                    serviceable.insert((m.dataset_id.clone(), m.version), m);
                }
                Err(reason) => {
                    self.audit.record(
                        "system",
                        AuditAction::DatasetQuarantined,
                        &json!({ "dataset_id": m.dataset_id, "version": m.version, "reason": reason }),
                    )?;
                    quarantined.insert((m.dataset_id.clone(), m.version), reason);
                }
            }
        }
        let report = UnlockReport {
            serviceable: serviceable.values().map(manifest_key).collect(),
            quarantined: quarantined.iter().map(|((id, v), r)| (format!("{id}@{v}"), r.clone())).collect(),
        };
        self.audit.record("console", AuditAction::VaultUnlocked, &report)?;
        *session = Some(Session { key, serviceable, quarantined });
        Ok(report)
    }

    /// Drops the volume key and terminates every open stream.
    pub fn lock(&self) {
        *self.session.write().unwrap() = None;
        for flag in self.live_streams.lock().unwrap().values() {
            flag.store(true, Ordering::SeqCst);
        }
    }

    /// Encrypts and records a new dataset version. Local console only.
    pub fn load_dataset(&self, admin: &str, source: &mut impl Read, dataset_id: &str, version: u64) -> Result<DatasetManifest, VaultError> {
        if !valid_dataset_id(dataset_id) {
            return Err(VaultError::BadDatasetId(dataset_id.to_owned()));
        }
        let _guard = self.load_lock.lock().unwrap();
        let key = {
            let session = self.session.read().unwrap();
            Zeroizing::new(*session.as_ref().ok_or(VaultError::Locked)?.key)
        };
        let config = self.config()?;
        let manifest_path = self.dir.join(MANIFEST_FILE);
        let mut index: BTreeMap<String, DatasetManifest> = fsutil::read_json(&manifest_path)?.unwrap_or_default();
        let slot = format!("{dataset_id}@{version}");
        if index.contains_key(&slot) {
            return Err(VaultError::DuplicateVersion(dataset_id.to_owned(), version));
        }
        let rel = format!("datasets/{dataset_id}/v{version}.alv");
        let blob_path = self.dir.join(&rel);
        fs::create_dir_all(blob_path.parent().expect("has parent"))?;
        let tmp = blob_path.with_extension("alv.tmp");
        let result = (|| -> Result<(Digest, u64), VaultError> {
            let file = File::create(&tmp)?;
            let mut out = BufWriter::new(file);
            let (digest, len) = seal_blob(&key, &config, dataset_id, version, source, &mut out)?;
            out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            fs::rename(&tmp, &blob_path)?;
            Ok((digest, len))
        })();
        let (digest, byte_size) = match result {
            Ok(v) => v,
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(e);
            }
        };
        let manifest = DatasetManifest {
            dataset_id: dataset_id.to_owned(),
            version,
            blob_path: rel,
            plaintext_digest: digest,
            byte_size,
            loaded_at: self.clock.now(),
            loaded_by: admin.to_owned(),
        };
        index.insert(slot, manifest.clone());
        fsutil::write_json_atomic(&manifest_path, &index)?;
        if let Some(session) = self.session.write().unwrap().as_mut() {
            session.serviceable.insert((dataset_id.to_owned(), version), manifest.clone());
        }
        self.audit.record(admin, AuditAction::DatasetLoaded, &manifest)?;
        Ok(manifest)
    }

    /// Verifies manifest entries written since unlock, for example by an
    /// administrator console running in another process.
    pub fn refresh(&self) -> Result<usize, VaultError> {
        let mut guard = self.session.write().unwrap();
        let session = guard.as_mut().ok_or(VaultError::Locked)?;
        let mut added = 0;
        for m in self.manifests()? {
            let slot = (m.dataset_id.clone(), m.version);
            if session.serviceable.contains_key(&slot) || session.quarantined.contains_key(&slot) {
                continue;
            }
            match verify_blob(&self.dir.join(&m.blob_path), &session.key, &m) {
                Ok(()) => {
                    session.serviceable.insert(slot, m);
                    added += 1;
                }
                Err(reason) => {
                    self.audit.record(
                        "system",
                        AuditAction::DatasetQuarantined,
                        &json!({ "dataset_id": m.dataset_id, "version": m.version, "reason": reason }),
                    )?;
                    session.quarantined.insert(slot, reason);
                }
            }
        }
        Ok(added)
    }

    /// Latest serviceable version of a dataset, picking up datasets loaded
    /// elsewhere when the name is not yet known.
    fn resolve(&self, dataset_id: &str) -> Result<DatasetManifest, MountDenial> {
        match self.resolve_known(dataset_id) {
            Err(MountDenial::UnknownDataset) if valid_dataset_id(dataset_id) => {
                if let Err(e) = self.refresh() {
                    tracing::warn!(error = %e, "dataset refresh failed");
                }
                self.resolve_known(dataset_id)
            }
            other => other,
        }
    }

    fn resolve_known(&self, dataset_id: &str) -> Result<DatasetManifest, MountDenial> {
        let session = self.session.read().unwrap();
        let session = session.as_ref().ok_or(MountDenial::VaultLocked)?;
        let serviceable = session.serviceable.range((dataset_id.to_owned(), 0)..=(dataset_id.to_owned(), u64::MAX)).next_back();
        let quarantined = session.quarantined.range((dataset_id.to_owned(), 0)..=(dataset_id.to_owned(), u64::MAX)).next_back();
        match (serviceable, quarantined) {
            (Some((_, m)), q) if q.is_none_or(|((_, qv), _)| *qv < m.version) => Ok(m.clone()),
            (_, Some(_)) => Err(MountDenial::DatasetQuarantined),
            _ => Err(MountDenial::UnknownDataset),
        }
    }

    fn persist_credentials(&self, table: &CredentialTable) -> Result<(), VaultError> {
        Ok(fsutil::write_json_atomic(&self.dir.join(CREDENTIAL_FILE), &table.records)?)
    }

    /// Re-verifies a mount request and issues a one-time credential.
    ///
    /// Nonce freshness is not rechecked here; the nonce registry lives in
    /// the secure zone. Instead each (job, dataset) pair holds at most one
    /// live credential and a bounded number over its lifetime.
    pub fn handle_mount_request(&self, req: &MountRequest) -> Result<OneTimeCredential, MountDenial> {
        let outcome = self.try_issue(req);
        let audit = match &outcome {
            Ok(c) => self.audit.record(
                "system",
                AuditAction::CredentialIssued,
                &json!({ "credential_id": c.credential_id, "job_id": c.job_id, "dataset_id": c.dataset_id,
                         "request_id": req.request_id, "expires_at": c.expires_at }),
            ),
            Err(reason) => self.audit.record(
                "system",
                AuditAction::MountDenied,
                &json!({ "request_id": req.request_id, "job_id": req.job_id, "dataset_id": req.dataset_id,
                         "vetter_id": req.vetting_signature.vetter_id, "reason": reason }),
            ),
        };
        if let Err(e) = audit {
            tracing::error!(error = %e, "restricted audit write failed");
            return Err(MountDenial::VaultLocked);
        }
        outcome
    }

    fn try_issue(&self, req: &MountRequest) -> Result<OneTimeCredential, MountDenial> {
        if !self.is_unlocked() {
            return Err(MountDenial::VaultLocked);
        }
        if req.max_runtime_s == 0 || req.request_id.is_empty() {
            return Err(MountDenial::Malformed);
        }
        let registry = self.keys.load().map_err(|_| MountDenial::BadSignature)?;
        let sig = &req.vetting_signature;
        check_signature(sig, req.code_hash, &registry).map_err(|r| match r {
            SignatureRejection::VetterDisabled => MountDenial::VetterDisabled,
            SignatureRejection::HashMismatch => MountDenial::HashMismatch,
            _ => MountDenial::BadSignature,
        })?;
        if sig.job_id != req.job_id {
            return Err(MountDenial::JobMismatch);
        }
        let manifest = self.resolve(&req.dataset_id)?;

        let now = self.clock.now();
        let mut table = self.credentials.lock().unwrap();
        let pair: Vec<&CredentialRecord> =
            table.records.values().filter(|r| r.job_id == req.job_id && r.dataset_id == req.dataset_id).collect();
        if let Some(prev) = pair.iter().find(|r| r.request_id == req.request_id) {
            // Redelivered request: replace the earlier answer only if it was
            // never redeemed.
            if prev.state != CredentialState::Unused {
                return Err(MountDenial::ReplayLimit);
            }
        }
        if pair.len() >= self.options.max_credentials_per_pair {
            return Err(MountDenial::ReplayLimit);
        }
        let superseded: Vec<String> = pair
            .iter()
            .filter(|r| matches!(r.state, CredentialState::Unused | CredentialState::Consumed))
            .map(|r| r.credential_id.clone())
            .collect();
        let token = Random256::generate();
        let credential = OneTimeCredential {
            credential_id: uuid::Uuid::new_v4().to_string(),
            token,
            job_id: req.job_id.clone(),
            dataset_id: req.dataset_id.clone(),
            issued_at: now,
            expires_at: now.plus_secs(req.max_runtime_s as i64 + self.options.grace_secs),
            state: CredentialState::Unused,
        };
        for id in &superseded {
            table.records.get_mut(id).expect("present").state = CredentialState::Revoked;
            if let Some(flag) = self.live_streams.lock().unwrap().remove(id) {
                flag.store(true, Ordering::SeqCst);
            }
        }
        table.records.insert(
            credential.credential_id.clone(),
            CredentialRecord {
                credential_id: credential.credential_id.clone(),
                token_digest: Digest::of(token.as_bytes()),
                request_id: req.request_id.clone(),
                job_id: credential.job_id.clone(),
                dataset_id: credential.dataset_id.clone(),
                version: manifest.version,
                issued_at: now,
                expires_at: credential.expires_at,
                state: CredentialState::Unused,
            },
        );
        if let Err(e) = self.persist_credentials(&table) {
            tracing::error!(error = %e, "credential table write failed");
            table.records.remove(&credential.credential_id);
            return Err(MountDenial::VaultLocked);
        }
        Ok(credential)
    }

    /// Current state of a credential, with expiry applied.
    pub fn credential_state(&self, credential_id: &str) -> Option<CredentialState> {
        let table = self.credentials.lock().unwrap();
        let now = self.clock.now();
        table.records.get(credential_id).map(|r| {
            if r.state == CredentialState::Unused && now > r.expires_at {
                CredentialState::Expired
            } else {
                r.state
            }
        })
    }

    fn redeem_inner(&self, token: &Random256) -> Result<DatasetStream, RedeemError> {
        let session = self.session.read().unwrap();
        let session = session.as_ref().ok_or(RedeemError::VaultLocked)?;
        let digest = Digest::of(token.as_bytes());
        let now = self.clock.now();
        let mut table = self.credentials.lock().unwrap();
        let record =
            table.records.values_mut().find(|r| r.token_digest == digest).ok_or(RedeemError::UnknownToken)?;
        match record.state {
            CredentialState::Unused if now > record.expires_at => {
                record.state = CredentialState::Expired;
                let snapshot = CredentialTable { records: table.records.clone() };
                let _ = self.persist_credentials(&snapshot);
                return Err(RedeemError::Expired);
            }
            CredentialState::Unused => {}
            CredentialState::Consumed => return Err(RedeemError::AlreadyConsumed),
            CredentialState::Revoked => return Err(RedeemError::Revoked),
            CredentialState::Expired => return Err(RedeemError::Expired),
        }
        let manifest = session
            .serviceable
            .get(&(record.dataset_id.clone(), record.version))
            .cloned()
            .ok_or(RedeemError::DatasetUnavailable)?;
        record.state = CredentialState::Consumed;
        let credential_id = record.credential_id.clone();
        if let Err(e) = self.persist_credentials(&table) {
            tracing::error!(error = %e, "credential table write failed");
            table.records.get_mut(&credential_id).expect("present").state = CredentialState::Unused;
            return Err(RedeemError::DatasetUnavailable);
        }
        drop(table);
        let flag = Arc::new(AtomicBool::new(false));
        let reader = BlobReader::open(&self.dir.join(&manifest.blob_path), &session.key, &manifest.dataset_id, manifest.version)
            .map_err(|_| RedeemError::DatasetUnavailable)?
            .with_revocation(flag.clone());
        self.live_streams.lock().unwrap().insert(credential_id.clone(), flag);
        Ok(DatasetStream {
            credential_id,
            dataset_id: manifest.dataset_id,
            version: manifest.version,
            byte_size: manifest.byte_size,
            plaintext_digest: manifest.plaintext_digest,
            reader,
        })
    }
}

impl DataChannel for Vault {
    /// Atomic check-and-consume: at most one redemption per token succeeds.
    fn redeem(&self, token: &Random256) -> Result<DatasetStream, RedeemError> {
        let outcome = self.redeem_inner(token);
        let _ = match &outcome {
            Ok(s) => self.audit.record(
                "system",
                AuditAction::CredentialRedeemed,
                &json!({ "credential_id": s.credential_id, "dataset_id": s.dataset_id }),
            ),
            Err(e) => self.audit.record(
                "system",
                AuditAction::RedemptionRejected,
                &json!({ "token_digest": Digest::of(token.as_bytes()), "reason": e.to_string() }),
            ),
        };
        outcome
    }

    /// Idempotent. Unused credentials become revoked; an open stream for a
    /// consumed credential fails from its next read.
    fn revoke(&self, credential_id: &str) -> Result<(), VaultError> {
        let mut table = self.credentials.lock().unwrap();
        let record = table.records.get_mut(credential_id).ok_or_else(|| VaultError::UnknownCredential(credential_id.to_owned()))?;
        let before = record.state;
        if record.state != CredentialState::Expired {
            record.state = CredentialState::Revoked;
        }
        if before != record.state {
            self.persist_credentials(&table)?;
        }
        drop(table);
        if let Some(flag) = self.live_streams.lock().unwrap().remove(credential_id) {
            flag.store(true, Ordering::SeqCst);
        }
        if before != CredentialState::Revoked {
            self.audit.record("system", AuditAction::CredentialRevoked, &json!({ "credential_id": credential_id }))?;
        }
        Ok(())
    }
}
