//! Transient per-job airlock directories.
//!
//! Layout under the airlock root (mode 0700, owned by the slot identity):
//! `data/` is root-owned and read-only, `workspace/` and `output/` belong to
//! the job identity. The whole tree is removed after collection.

use std::fs::{self, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::fs::{chown, OpenOptionsExt, PermissionsExt};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest as _, Sha256};

use crate::archive::{validate_entry_path, BundleArchive};
use crate::codec::{Digest, Timestamp};
use crate::messages::ArtifactBytes;
use crate::model::{ArtifactEntry, ResourceRequest};

use super::runner::{AirlockPaths, SlotIdentity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AirlockStatus {
    Preparing,
    Running,
    Collecting,
    Destroyed,
}

#[derive(Debug, Clone)]
pub struct AirlockInstance {
    pub job_id: String,
    pub paths: AirlockPaths,
    pub runtime_ref: String,
    pub resource_limits: ResourceRequest,
    pub identity: Option<SlotIdentity>,
    pub started_at: Timestamp,
    pub status: AirlockStatus,
}

fn set_mode(path: &Path, mode: u32) -> io::Result<()> {
    fs::set_permissions(path, fs::Permissions::from_mode(mode))
}

fn give(path: &Path, identity: Option<SlotIdentity>) -> io::Result<()> {
    match identity {
        Some(id) => chown(path, Some(id.uid), Some(id.gid)),
        None => Ok(()),
    }
}

impl AirlockInstance {
    /// Creates a fresh airlock under `base`. The directory name is unique
    /// per attempt so a stale tree from a crashed run never gets reused.
    pub fn prepare(
        base: &Path,
        job_id: &str,
        runtime_ref: &str,
        limits: ResourceRequest,
        identity: Option<SlotIdentity>,
        now: Timestamp,
    ) -> io::Result<AirlockInstance> {
        fs::create_dir_all(base)?;
        let root = base.join(format!("{job_id}.{}", uuid::Uuid::new_v4().simple()));
        fs::create_dir(&root)?;
        set_mode(&root, 0o700)?;
        let paths = AirlockPaths {
            data: root.join("data"),
            workspace: root.join("workspace"),
            output: root.join("output"),
            root,
        };
        for p in [&paths.data, &paths.workspace, &paths.output] {
            fs::create_dir(p)?;
        }
        set_mode(&paths.workspace, 0o700)?;
        set_mode(&paths.output, 0o700)?;
        give(&paths.workspace, identity)?;
        give(&paths.output, identity)?;
        give(&paths.root, identity)?;
        Ok(AirlockInstance {
            job_id: job_id.to_owned(),
            paths,
            runtime_ref: runtime_ref.to_owned(),
            resource_limits: limits,
            identity,
            started_at: now,
            status: AirlockStatus::Preparing,
        })
    }

    /// Writes the dataset stream to `data/<file_name>` (mode 0444) and seals
    /// the data directory read-only. Returns the digest of what was written.
    pub fn materialise(&self, file_name: &str, stream: &mut impl Read) -> io::Result<(Digest, u64)> {
        validate_entry_path(file_name).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        if file_name.contains('/') {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "dataset file name must be flat"));
        }
        let path = self.paths.data.join(file_name);
        let mut file = OpenOptions::new().write(true).create_new(true).mode(0o444).open(&path)?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 64 * 1024];
        let mut total = 0u64;
        loop {
            let n = stream.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            file.write_all(&buf[..n])?;
            total += n as u64;
        }
        file.sync_all()?;
        set_mode(&self.paths.data, 0o555)?;
        Ok((Digest(hasher.finalize().into()), total))
    }

    /// Unpacks the vetted code into the workspace.
    pub fn extract(&self, archive: &BundleArchive) -> io::Result<()> {
        for (path, bytes) in archive.iter() {
            let target = self.paths.workspace.join(path);
            let mut dir = target.parent().expect("inside workspace").to_path_buf();
            let mut created = Vec::new();
            while !dir.exists() {
                created.push(dir.clone());
                dir = dir.parent().expect("inside workspace").to_path_buf();
            }
            for d in created.iter().rev() {
                fs::create_dir(d)?;
                give(d, self.identity)?;
            }
            let mut f = OpenOptions::new().write(true).create_new(true).mode(0o644).open(&target)?;
            f.write_all(bytes)?;
            give(&target, self.identity)?;
        }
        Ok(())
    }

    /// Reads every regular file under `output/`. Symlinks, devices and
    /// names that are not safe archive paths are skipped and listed.
    pub fn collect(&self, max_total_bytes: u64) -> io::Result<Collected> {
        let mut out = Collected::default();
        let mut total = 0u64;
        walk(&self.paths.output, "", &mut |rel, path, kind| {
            if kind != EntryKind::File || validate_entry_path(rel).is_err() {
                out.skipped.push(rel.to_owned());
                return Ok(());
            }
            let mut f = OpenOptions::new().read(true).custom_flags(libc::O_NOFOLLOW).open(path)?;
            let mut bytes = Vec::new();
            f.read_to_end(&mut bytes)?;
            total += bytes.len() as u64;
            if total > max_total_bytes {
                return Err(io::Error::other(format!("outputs exceed {max_total_bytes} bytes")));
            }
            out.artifacts.push(ArtifactBytes { relative_path: rel.to_owned(), bytes });
            Ok(())
        })?;
        out.artifacts.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
        out.skipped.sort();
        Ok(out)
    }

    /// Removes the whole airlock tree.
    pub fn destroy(&mut self) -> io::Result<()> {
        if self.paths.root.exists() {
            make_writable(&self.paths.root);
            fs::remove_dir_all(&self.paths.root)?;
        }
        self.status = AirlockStatus::Destroyed;
        Ok(())
    }
}

/// Files gathered from an output area.
#[derive(Debug, Default)]
pub struct Collected {
    pub artifacts: Vec<ArtifactBytes>,
    pub skipped: Vec<String>,
}

impl Collected {
    pub fn entries(&self) -> Vec<ArtifactEntry> {
        self.artifacts
            .iter()
            .map(|a| ArtifactEntry {
                relative_path: a.relative_path.clone(),
                byte_size: a.bytes.len() as u64,
                digest: Digest::of(&a.bytes),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EntryKind {
    File,
    Other,
}

fn walk(dir: &Path, prefix: &str, visit: &mut dyn FnMut(&str, &Path, EntryKind) -> io::Result<()>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let rel = if prefix.is_empty() { name.into_owned() } else { format!("{prefix}/{name}") };
        let ft = entry.file_type()?;
        if ft.is_dir() {
            walk(&entry.path(), &rel, visit)?;
        } else if ft.is_file() {
            visit(&rel, &entry.path(), EntryKind::File)?;
        } else {
            visit(&rel, &entry.path(), EntryKind::Other)?;
        }
    }
    Ok(())
}

fn make_writable(path: &Path) {
    if let Ok(meta) = fs::symlink_metadata(path) {
        if meta.is_dir() {
            let _ = set_mode(path, 0o700);
            if let Ok(rd) = fs::read_dir(path) {
                for e in rd.flatten() {
                    make_writable(&e.path());
                }
            }
        }
    }
}

/// Removes every airlock left behind by a previous process.
pub fn sweep_stale(base: &Path) -> io::Result<usize> {
    if !base.exists() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in fs::read_dir(base)? {
        let path = entry?.path();
        make_writable(&path);
        if path.is_dir() {
            fs::remove_dir_all(&path)?;
        } else {
            fs::remove_file(&path)?;
        }
        n += 1;
    }
    Ok(n)
}

/// Appends captured streams into one vetting log.
pub fn combine_logs(stdout: &[u8], stderr: &[u8], note: Option<&str>) -> Vec<u8> {
    let mut log = stdout.to_vec();
    if !stderr.is_empty() {
        if !log.is_empty() && !log.ends_with(b"\n") {
            log.push(b'\n');
        }
        log.extend_from_slice(b"--- stderr ---\n");
        log.extend_from_slice(stderr);
    }
    if let Some(note) = note {
        if !log.is_empty() && !log.ends_with(b"\n") {
            log.push(b'\n');
        }
        log.extend_from_slice(format!("--- airlock ---\n{note}\n").as_bytes());
    }
    log
}

/// Path of the single materialised dataset file.
pub fn dataset_file(paths: &AirlockPaths, dataset_id: &str) -> PathBuf {
    paths.data.join(dataset_id)
}
