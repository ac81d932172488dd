//! Shared plumbing for the airlock command-line tools.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use airlock_core::archive::{BundleArchive, BundleManifest, MANIFEST_PATH};
use airlock_core::codec::to_canonical_json;
use airlock_core::gateway::{ResultsDownload, SubmitReceipt, SubmitRequest};
use airlock_core::model::JobRecord;
use airlock_core::Digest;
use serde::de::DeserializeOwned;
use zeroize::Zeroizing;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_AUTH: u8 = 3;
pub const EXIT_REJECTED: u8 = 4;
pub const EXIT_TRANSPORT: u8 = 5;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> CliError {
        CliError { code: EXIT_VALIDATION, message: message.into() }
    }

    pub fn rejected(message: impl Into<String>) -> CliError {
        CliError { code: EXIT_REJECTED, message: message.into() }
    }

    pub fn transport(message: impl Into<String>) -> CliError {
        CliError { code: EXIT_TRANSPORT, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> CliError {
        CliError::validation(e.to_string())
    }
}

/// Prints the error to stderr and converts to an exit code.
pub fn finish(result: Result<(), CliError>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

/// Reads a secret from a file, dropping one trailing newline.
pub fn read_secret_file(path: &Path) -> Result<Zeroizing<Vec<u8>>, CliError> {
    let mut raw = Zeroizing::new(fs::read(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?);
    if raw.last() == Some(&b'\n') {
        raw.pop();
        if raw.last() == Some(&b'\r') {
            raw.pop();
        }
    }
    if raw.is_empty() {
        return Err(CliError::validation(format!("{} is empty", path.display())));
    }
    Ok(raw)
}

/// Overrides applied on top of a bundle directory's `manifest.json`.
#[derive(Debug, Default, Clone)]
pub struct ManifestOverrides {
    pub entrypoint: Option<String>,
    pub runtime_ref: Option<String>,
    pub dataset_id: Option<String>,
    pub max_runtime_s: Option<u64>,
}

/// Packs a bundle directory into a canonical archive. Fails before any
/// network traffic when the manifest or entrypoint is missing.
pub fn pack_bundle_dir(dir: &Path, overrides: &ManifestOverrides) -> Result<BundleArchive, CliError> {
    let manifest_path = dir.join(MANIFEST_PATH);
    let text = fs::read(&manifest_path).map_err(|_| CliError::validation(format!("{} not found", manifest_path.display())))?;
    let mut manifest: BundleManifest =
        serde_json::from_slice(&text).map_err(|e| CliError::validation(format!("{}: {e}", manifest_path.display())))?;
    if let Some(v) = &overrides.entrypoint {
        manifest.entrypoint = v.clone();
    }
    if let Some(v) = &overrides.runtime_ref {
        manifest.runtime_ref = v.clone();
    }
    if let Some(v) = &overrides.dataset_id {
        manifest.dataset_id = v.clone();
    }
    if let Some(v) = overrides.max_runtime_s {
        manifest.resource_request.max_runtime_s = v;
    }
    let mut archive = BundleArchive::new();
    archive.insert(MANIFEST_PATH, to_canonical_json(&manifest)).map_err(|e| CliError::validation(e.to_string()))?;
    for file in walk_files(dir)? {
        let rel = file.strip_prefix(dir).expect("walked under dir");
        let rel = rel.to_str().ok_or_else(|| CliError::validation(format!("non-UTF-8 path {}", rel.display())))?;
        if rel == MANIFEST_PATH {
            continue;
        }
        archive.insert(rel, fs::read(&file)?).map_err(|e| CliError::validation(format!("{rel}: {e}")))?;
    }
    if !archive.contains(&manifest.entrypoint) {
        return Err(CliError::validation(format!("entrypoint {} is not in {}", manifest.entrypoint, dir.display())));
    }
    Ok(archive)
}

fn walk_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let kind = entry.file_type()?;
            if kind.is_dir() {
                stack.push(entry.path());
            } else if kind.is_file() {
                out.push(entry.path());
            } else {
                return Err(CliError::validation(format!("{} is not a regular file", entry.path().display())));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Blocking client for the gateway API.
pub struct ApiClient {
    base: String,
    token: Zeroizing<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for ApiClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApiClient").field("base", &self.base).finish_non_exhaustive()
    }
}

impl ApiClient {
    pub fn new(gateway_url: &str, token: &str) -> ApiClient {
        ApiClient {
            base: gateway_url.trim_end_matches('/').to_owned(),
            token: Zeroizing::new(token.to_owned()),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        }
    }

    fn call<T: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&[u8]>) -> Result<T, CliError> {
        let req = self
            .agent
            .request(method, &format!("{}{path}", self.base))
            .set("Authorization", &format!("Bearer {}", self.token.as_str()))
            .set("Content-Type", "application/json");
        let result = match body {
            Some(b) => req.send_bytes(b),
            None => req.call(),
        };
        match result {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| CliError::transport(e.to_string()))?;
                serde_json::from_str(&text).map_err(|e| CliError::transport(format!("unexpected response: {e}")))
            }
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let detail = serde_json::from_str::<serde_json::Value>(&text)
                    .ok()
                    .and_then(|v| v.get("message").and_then(|m| m.as_str()).map(str::to_owned))
                    .unwrap_or(text);
                let code = match status {
                    401 | 403 => EXIT_AUTH,
                    400..=499 => EXIT_REJECTED,
                    _ => EXIT_TRANSPORT,
                };
                Err(CliError { code, message: format!("gateway returned {status}: {detail}") })
            }
            Err(e) => Err(CliError::transport(e.to_string())),
        }
    }

    pub fn submit(&self, archive: &BundleArchive) -> Result<SubmitReceipt, CliError> {
        let req = SubmitRequest { archive: archive.to_canonical_bytes(), code_hash: Some(archive.canonical_hash()) };
        self.call("POST", "/v1/jobs", Some(&serde_json::to_vec(&req).expect("serialisable")))
    }

    pub fn status(&self, job_id: &str) -> Result<JobRecord, CliError> {
        self.call("GET", &format!("/v1/jobs/{job_id}"), None)
    }

    pub fn results(&self, job_id: &str) -> Result<ResultsDownload, CliError> {
        self.call("GET", &format!("/v1/jobs/{job_id}/results"), None)
    }

    /// Any other endpoint, returning raw JSON.
    pub fn json(&self, method: &str, path: &str, body: Option<&serde_json::Value>) -> Result<serde_json::Value, CliError> {
        let bytes = body.map(|b| serde_json::to_vec(b).expect("serialisable"));
        self.call(method, path, bytes.as_deref())
    }
}

/// Writes a released download to `out`: the archive as `results.zip`, each
/// artifact under `artifacts/`, and the execution log. Every artifact is
/// checked against the result set before anything is written.
pub fn write_download(download: &ResultsDownload, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let archive = BundleArchive::parse(&download.archive).map_err(|e| CliError::rejected(format!("results archive: {e}")))?;
    if archive.len() != download.result_set.artifacts.len() {
        return Err(CliError::rejected("results archive does not match the result set"));
    }
    for a in &download.result_set.artifacts {
        let bytes = archive
            .get(&a.relative_path)
            .ok_or_else(|| CliError::rejected(format!("{} missing from results archive", a.relative_path)))?;
        if Digest::of(bytes) != a.digest || bytes.len() as u64 != a.byte_size {
            return Err(CliError::rejected(format!("{} does not match its recorded digest", a.relative_path)));
        }
    }
    if Digest::of(&download.log) != download.result_set.log_digest {
        return Err(CliError::rejected("execution log does not match its recorded digest"));
    }
    let mut written = Vec::new();
    fs::create_dir_all(out.join("artifacts"))?;
    for (path, bytes) in archive.iter() {
        let target = out.join("artifacts").join(path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&target, bytes)?;
        written.push(target);
    }
    fs::write(out.join("results.zip"), &download.archive)?;
    fs::write(out.join("execution.log"), &download.log)?;
    Ok(written)
}

pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("AIRLOCK_LOG").unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(io::stderr).try_init();
}
