//! Bearer-token principals.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::codec::{Digest, Random256};
use crate::fsutil;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Consumer,
    Vetter,
    Admin,
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Role, String> {
        match s {
            "consumer" => Ok(Role::Consumer),
            "vetter" => Ok(Role::Vetter),
            "admin" => Ok(Role::Admin),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Principal {
    pub principal_id: String,
    pub role: Role,
    pub token_digest: Digest,
}

/// Resolves a presented bearer token to a principal. An external identity
/// provider can stand in for [`StaticTokens`] behind this trait.
pub trait TokenAuthenticator: Send + Sync {
    fn authenticate(&self, token: &str) -> Option<Principal>;
}

pub fn token_digest(token: &str) -> Digest {
    Digest::of(token.as_bytes())
}

#[derive(Debug, thiserror::Error)]
pub enum PrincipalError {
    #[error("principal {0:?} already exists")]
    Exists(String),
    #[error("principal id must be non-empty ASCII without whitespace")]
    BadId,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-principal static tokens, stored as digests in a JSON file. The file
/// is re-read when it changes on disk, so a console can add principals
/// while the gateway runs.
#[derive(Debug)]
pub struct StaticTokens {
    path: PathBuf,
    cache: Mutex<(Option<std::time::SystemTime>, BTreeMap<String, Principal>)>,
}

impl StaticTokens {
    pub fn open(path: &Path) -> StaticTokens {
        StaticTokens { path: path.to_owned(), cache: Mutex::new((None, BTreeMap::new())) }
    }

    fn current(&self) -> std::io::Result<BTreeMap<String, Principal>> {
        let mtime = std::fs::metadata(&self.path).and_then(|m| m.modified()).ok();
        let mut cache = self.cache.lock().unwrap();
        if mtime.is_none() || cache.0 != mtime {
            cache.1 = fsutil::read_json(&self.path)?.unwrap_or_default();
            cache.0 = mtime;
        }
        Ok(cache.1.clone())
    }

    pub fn principals(&self) -> std::io::Result<Vec<Principal>> {
        Ok(self.current()?.into_values().collect())
    }

    /// Registers a principal and returns its newly generated token. The
    /// token is not stored.
    pub fn add(&self, principal_id: &str, role: Role) -> Result<String, PrincipalError> {
        let token = Random256::generate().to_string();
        self.add_with_token(principal_id, role, &token)?;
        Ok(token)
    }

    pub fn add_with_token(&self, principal_id: &str, role: Role, token: &str) -> Result<(), PrincipalError> {
        if principal_id.is_empty() || !principal_id.bytes().all(|b| b.is_ascii_graphic()) {
            return Err(PrincipalError::BadId);
        }
        let mut all = self.current()?;
        if all.contains_key(principal_id) {
            return Err(PrincipalError::Exists(principal_id.to_owned()));
        }
        all.insert(
            principal_id.to_owned(),
            Principal { principal_id: principal_id.to_owned(), role, token_digest: token_digest(token) },
        );
        fsutil::write_json_atomic(&self.path, &all)?;
        *self.cache.lock().unwrap() = (None, all);
        Ok(())
    }
}

impl TokenAuthenticator for StaticTokens {
    fn authenticate(&self, token: &str) -> Option<Principal> {
        let digest = token_digest(token);
        let all = self.current().ok()?;
        all.into_values().find(|p| p.token_digest == digest)
    }
}
