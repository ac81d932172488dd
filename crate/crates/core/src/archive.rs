//! Job bundle archives and their canonical form.
//!
//! Bundles are uploaded as ZIP archives. The code hash a vetter signs is taken
//! over a canonical re-serialisation: entries sorted by path, every entry
//! stored uncompressed, a fixed timestamp (1980-01-01 00:00, the DOS epoch)
//! and fixed `0644` regular-file permissions. Two archives holding the same
//! files therefore hash identically regardless of how they were packed.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};

use serde::{Deserialize, Serialize};

use crate::codec::Digest;
use crate::model::ResourceRequest;

pub const MANIFEST_PATH: &str = "manifest.json";

const LOCAL_HEADER_SIG: u32 = 0x0403_4b50;
const CENTRAL_HEADER_SIG: u32 = 0x0201_4b50;
const END_OF_CENTRAL_DIR_SIG: u32 = 0x0605_4b50;
const VERSION_NEEDED: u16 = 20;
const VERSION_MADE_BY_UNIX: u16 = (3 << 8) | 20;
const FLAG_UTF8_NAME: u16 = 0x0800;
const DOS_EPOCH_TIME: u16 = 0;
const DOS_EPOCH_DATE: u16 = (1 << 5) | 1;
const REGULAR_FILE_0644: u32 = 0o100_644 << 16;
const S_IFMT: u32 = 0o170_000;
const S_IFLNK: u32 = 0o120_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArchiveError {
    #[error("malformed archive: {0}")]
    Malformed(String),
    #[error("unsafe entry path {0:?}")]
    UnsafePath(String),
    #[error("duplicate entry {0:?}")]
    DuplicateEntry(String),
    #[error("archive exceeds limits: {0}")]
    TooLarge(String),
    #[error("archive has no {MANIFEST_PATH} at its root")]
    MissingManifest,
    #[error("invalid {MANIFEST_PATH}: {0}")]
    BadManifest(String),
}

#[derive(Debug, Clone, Copy)]
pub struct ArchiveLimits {
    pub max_entries: usize,
    pub max_uncompressed_bytes: u64,
}

impl Default for ArchiveLimits {
    fn default() -> Self {
        ArchiveLimits { max_entries: 10_000, max_uncompressed_bytes: 1 << 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub path: String,
    pub contents: Vec<u8>,
}

/// A validated set of files: relative, normalised, unique paths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BundleArchive {
    entries: BTreeMap<String, Vec<u8>>,
}

/// Workload description carried in `manifest.json` at the archive root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub entrypoint: String,
    pub runtime_ref: String,
    pub dataset_id: String,
    pub resource_request: ResourceRequest,
}

impl BundleArchive {
    pub fn new() -> BundleArchive {
        BundleArchive::default()
    }

    pub fn from_entries<I, P>(entries: I) -> Result<BundleArchive, ArchiveError>
    where
        I: IntoIterator<Item = (P, Vec<u8>)>,
        P: Into<String>,
    {
        let mut archive = BundleArchive::new();
        for (path, contents) in entries {
            archive.insert(path, contents)?;
        }
        Ok(archive)
    }

    pub fn insert(&mut self, path: impl Into<String>, contents: Vec<u8>) -> Result<(), ArchiveError> {
        let path = path.into();
        validate_entry_path(&path)?;
        if self.entries.contains_key(&path) {
            return Err(ArchiveError::DuplicateEntry(path));
        }
        self.entries.insert(path, contents);
        Ok(())
    }

    /// Parses an uploaded ZIP archive. Directory entries are skipped;
    /// symlinks, encrypted entries and unsafe paths are rejected.
    pub fn parse(bytes: &[u8]) -> Result<BundleArchive, ArchiveError> {
        BundleArchive::parse_with_limits(bytes, ArchiveLimits::default())
    }

    pub fn parse_with_limits(bytes: &[u8], limits: ArchiveLimits) -> Result<BundleArchive, ArchiveError> {
        let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| ArchiveError::Malformed(e.to_string()))?;
        if zip.len() > limits.max_entries {
            return Err(ArchiveError::TooLarge(format!("{} entries", zip.len())));
        }
        let mut archive = BundleArchive::new();
        let mut total: u64 = 0;
        for index in 0..zip.len() {
            let mut file = zip.by_index(index).map_err(|e| ArchiveError::Malformed(e.to_string()))?;
            if file.encrypted() {
                return Err(ArchiveError::Malformed(format!("entry {:?} is encrypted", file.name())));
            }
            if file.is_dir() {
                continue;
            }
            if file.unix_mode().is_some_and(|mode| mode & S_IFMT == S_IFLNK) {
                return Err(ArchiveError::UnsafePath(format!("{} (symlink)", file.name())));
            }
            let name = file.name().to_owned();
            let budget = limits.max_uncompressed_bytes - total;
            let mut contents = Vec::new();
            (&mut file)
                .take(budget + 1)
                .read_to_end(&mut contents)
                .map_err(|e| ArchiveError::Malformed(format!("{name}: {e}")))?;
            total += contents.len() as u64;
            if total > limits.max_uncompressed_bytes {
                return Err(ArchiveError::TooLarge(format!("more than {} bytes uncompressed", limits.max_uncompressed_bytes)));
            }
            archive.insert(name, contents)?;
        }
        Ok(archive)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.entries.get(path).map(Vec::as_slice)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    /// Entries in canonical (byte-wise path) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.entries.iter().map(|(p, c)| (p.as_str(), c.as_slice()))
    }

    pub fn into_entries(self) -> Vec<ArchiveEntry> {
        self.entries.into_iter().map(|(path, contents)| ArchiveEntry { path, contents }).collect()
    }

    pub fn manifest(&self) -> Result<BundleManifest, ArchiveError> {
        let raw = self.get(MANIFEST_PATH).ok_or(ArchiveError::MissingManifest)?;
        serde_json::from_slice(raw).map_err(|e| ArchiveError::BadManifest(e.to_string()))
    }

    /// The canonical stored-ZIP encoding of this file set.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut central = Vec::new();
        for (path, contents) in &self.entries {
            let offset = out.len() as u32;
            let crc = crc32fast::hash(contents);
            let size = u32::try_from(contents.len()).expect("entry under 4 GiB");
            let name = path.as_bytes();
            let flags = if path.is_ascii() { 0 } else { FLAG_UTF8_NAME };

            put_u32(&mut out, LOCAL_HEADER_SIG);
            put_u16(&mut out, VERSION_NEEDED);
            put_u16(&mut out, flags);
            put_u16(&mut out, 0); // stored
            put_u16(&mut out, DOS_EPOCH_TIME);
            put_u16(&mut out, DOS_EPOCH_DATE);
            put_u32(&mut out, crc);
            put_u32(&mut out, size);
            put_u32(&mut out, size);
            put_u16(&mut out, name.len() as u16);
            put_u16(&mut out, 0);
            out.extend_from_slice(name);
            out.extend_from_slice(contents);

            put_u32(&mut central, CENTRAL_HEADER_SIG);
            put_u16(&mut central, VERSION_MADE_BY_UNIX);
            put_u16(&mut central, VERSION_NEEDED);
            put_u16(&mut central, flags);
            put_u16(&mut central, 0);
            put_u16(&mut central, DOS_EPOCH_TIME);
            put_u16(&mut central, DOS_EPOCH_DATE);
            put_u32(&mut central, crc);
            put_u32(&mut central, size);
            put_u32(&mut central, size);
            put_u16(&mut central, name.len() as u16);
            put_u16(&mut central, 0); // extra
            put_u16(&mut central, 0); // comment
            put_u16(&mut central, 0); // disk
            put_u16(&mut central, 0); // internal attributes
            put_u32(&mut central, REGULAR_FILE_0644);
            put_u32(&mut central, offset);
            central.extend_from_slice(name);
        }
        let central_offset = out.len() as u32;
        let count = u16::try_from(self.entries.len()).expect("fewer than 65536 entries");
        out.extend_from_slice(&central);
        put_u32(&mut out, END_OF_CENTRAL_DIR_SIG);
        put_u16(&mut out, 0);
        put_u16(&mut out, 0);
        put_u16(&mut out, count);
        put_u16(&mut out, count);
        put_u32(&mut out, central.len() as u32);
        put_u32(&mut out, central_offset);
        put_u16(&mut out, 0);
        out
    }

    pub fn canonical_hash(&self) -> Digest {
        Digest::of(&self.to_canonical_bytes())
    }
}

/// Digest of the canonical re-serialisation of an uploaded archive.
pub fn canonical_hash(archive: &[u8]) -> Result<Digest, ArchiveError> {
    Ok(BundleArchive::parse(archive)?.canonical_hash())
}

/// Accepts only normalised relative paths: no leading `/`, no `.`/`..` or
/// empty components, no backslashes or NULs.
pub fn validate_entry_path(path: &str) -> Result<(), ArchiveError> {
    let unsafe_path = || ArchiveError::UnsafePath(path.to_owned());
    if path.is_empty() || path.starts_with('/') || path.contains('\\') || path.contains('\0') {
        return Err(unsafe_path());
    }
    if path.split('/').any(|c| c.is_empty() || c == "." || c == "..") {
        return Err(unsafe_path());
    }
    Ok(())
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    // Golden digests were produced with CPython's `zipfile` module writing
    // ZIP_STORED entries with date_time=(1980,1,1,0,0,0), create_system=3 and
    // external_attr=0o100644<<16, entries in sorted order.
    const EMPTY_ARCHIVE_SHA256: &str = "8739c76e681f900923b900c9df0ef75cf421d39cabb54650c4b9ad19b6a76d85";
    const TWO_FILE_ARCHIVE_SHA256: &str = "40f25e9829e4446ce45c932b24b6d50719e91f70d62d252f420c8f90dc4f67d0";

    fn deflated_zip(files: &[(&str, &[u8])]) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = zip::ZipWriter::new(&mut buf);
            for (name, data) in files {
                let opts = zip::write::SimpleFileOptions::default()
                    .compression_method(zip::CompressionMethod::Deflated)
                    .unix_permissions(0o755);
                w.start_file(*name, opts).unwrap();
                w.write_all(data).unwrap();
            }
            w.finish().unwrap();
        }
        buf.into_inner()
    }

    #[test]
    fn empty_archive_matches_reference_digest() {
        let bytes = BundleArchive::new().to_canonical_bytes();
        let mut expected = vec![0x50, 0x4b, 0x05, 0x06];
        expected.extend_from_slice(&[0u8; 18]);
        assert_eq!(bytes, expected);
        assert_eq!(BundleArchive::new().canonical_hash().to_hex(), EMPTY_ARCHIVE_SHA256);
    }

    #[test]
    fn two_file_archive_matches_reference_digest() {
        let archive = BundleArchive::from_entries([
            ("main.py", b"print('hi')\n".to_vec()),
            ("lib/util.py", b"X = 1\n".to_vec()),
        ])
        .unwrap();
        assert_eq!(archive.canonical_hash().to_hex(), TWO_FILE_ARCHIVE_SHA256);
    }

    #[test]
    fn insertion_order_and_packing_do_not_change_the_hash() {
        let a = deflated_zip(&[("b.txt", b"bee"), ("a.txt", b"ay"), ("dir/c.txt", b"sea")]);
        let b = deflated_zip(&[("dir/c.txt", b"sea"), ("a.txt", b"ay"), ("b.txt", b"bee")]);
        assert_ne!(a, b);
        assert_eq!(canonical_hash(&a).unwrap(), canonical_hash(&b).unwrap());
    }

    #[test]
    fn flipping_a_payload_byte_changes_the_hash() {
        let a = BundleArchive::from_entries([("x", b"hello".to_vec())]).unwrap();
        let b = BundleArchive::from_entries([("x", b"hellp".to_vec())]).unwrap();
        assert_ne!(a.canonical_hash(), b.canonical_hash());
    }

    #[test]
    fn canonical_bytes_reparse_to_same_entries() {
        let archive = BundleArchive::from_entries([
            ("manifest.json", b"{}".to_vec()),
            ("src/\u{e9}t\u{e9}.py", vec![0, 1, 2, 255]),
        ])
        .unwrap();
        let reparsed = BundleArchive::parse(&archive.to_canonical_bytes()).unwrap();
        assert_eq!(reparsed, archive);
        // Canonicalisation is a fixed point.
        assert_eq!(reparsed.to_canonical_bytes(), archive.to_canonical_bytes());
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(canonical_hash(b"not a zip"), Err(ArchiveError::Malformed(_))));
    }

    #[test]
    fn unsafe_paths_are_rejected() {
        for bad in ["/etc/passwd", "../x", "a/../../x", "a//b", "./a", "a\\b", ""] {
            assert!(validate_entry_path(bad).is_err(), "{bad:?}");
        }
        validate_entry_path("a/b/c.py").unwrap();
        let zipped = deflated_zip(&[("../escape.py", b"x")]);
        assert!(matches!(BundleArchive::parse(&zipped), Err(ArchiveError::UnsafePath(_))));
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        let mut a = BundleArchive::new();
        a.insert("x", vec![]).unwrap();
        assert_eq!(a.insert("x", vec![1]), Err(ArchiveError::DuplicateEntry("x".into())));
    }

    #[test]
    fn uncompressed_size_limit_is_enforced() {
        let zipped = deflated_zip(&[("big", &vec![0u8; 10_000])]);
        let limits = ArchiveLimits { max_entries: 10, max_uncompressed_bytes: 1_000 };
        assert!(matches!(BundleArchive::parse_with_limits(&zipped, limits), Err(ArchiveError::TooLarge(_))));
    }

    #[test]
    fn manifest_is_read_from_root() {
        let manifest = br#"{"entrypoint":"main.py","runtime_ref":"python3","dataset_id":"d1","resource_request":{"cpu_cores":1,"memory_mb":256,"max_runtime_s":10}}"#;
        let a = BundleArchive::from_entries([("manifest.json", manifest.to_vec())]).unwrap();
        let m = a.manifest().unwrap();
        assert_eq!(m.entrypoint, "main.py");
        assert_eq!(m.resource_request.max_runtime_s, 10);
        assert_eq!(BundleArchive::new().manifest(), Err(ArchiveError::MissingManifest));
    }
}
