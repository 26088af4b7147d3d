//! Multi-zone bucket/key object storage on local directory roots.
//!
//! Layout: `<root>/<zone>/<bucket>/objects/<percent-encoded-key>`. Keys are
//! percent-encoded with the RFC 3986 unreserved set (`A-Z a-z 0-9 - . _ ~`)
//! kept literal and every other byte written as `%XX` (uppercase hex).
//! Writes go to `<root>/<zone>/.tmp/` first and are renamed into place, so a
//! concurrent reader sees either the old or the new object.
//!
//! Zone-to-zone copies are accounted in a [`TransferLedger`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;

#[derive(Debug, thiserror::Error)]
pub enum ObjectStoreError {
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("invalid bucket name {0:?}")]
    InvalidBucket(String),
    #[error("invalid zone name {0:?}")]
    InvalidZone(String),
    #[error("not found: {zone}/{bucket}/{key}")]
    NotFound { zone: String, bucket: String, key: String },
    #[error("storage failure at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = ObjectStoreError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> ObjectStoreError {
    let path = path.into();
    move |source| ObjectStoreError::Storage { path, source }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub zone: String,
    pub bucket: String,
    pub key: String,
    pub size: u64,
    pub digest: Digest,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub from_zone: String,
    pub to_zone: String,
    pub transferred: Vec<String>,
    pub skipped: Vec<String>,
    pub bytes_transferred: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCounters {
    pub bytes_transferred: u64,
    pub objects_transferred: u64,
}

/// Per (from_zone, to_zone) byte and object counters. Counters only grow.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferLedger {
    links: BTreeMap<(String, String), LinkCounters>,
}

impl TransferLedger {
    pub fn link(&self, from: &str, to: &str) -> LinkCounters {
        self.links
            .get(&(from.to_string(), to.to_string()))
            .copied()
            .unwrap_or_default()
    }

    pub fn total_bytes(&self) -> u64 {
        self.links.values().map(|c| c.bytes_transferred).sum()
    }

    fn record(&mut self, from: &str, to: &str, bytes: u64, objects: u64) {
        let c = self.links.entry((from.to_string(), to.to_string())).or_default();
        c.bytes_transferred += bytes;
        c.objects_transferred += objects;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, LinkCounters)> {
        self.links.iter().map(|((f, t), c)| (f.as_str(), t.as_str(), *c))
    }
}

pub fn encode_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for &b in key.as_bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn decode_key(encoded: &str) -> Option<String> {
    let bytes = encoded.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = encoded.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn validate_key(key: &str) -> Result<()> {
    // "." and ".." are unreserved and would encode to themselves.
    if key.is_empty() || key.contains('\0') || key == "." || key == ".." {
        return Err(ObjectStoreError::InvalidKey(key.to_string()));
    }
    Ok(())
}

fn validate_bucket(bucket: &str) -> Result<()> {
    let ok = !bucket.is_empty()
        && !bucket.starts_with('_')
        && !bucket.starts_with('.')
        && bucket
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_'));
    if ok {
        Ok(())
    } else {
        Err(ObjectStoreError::InvalidBucket(bucket.to_string()))
    }
}

pub(crate) fn validate_zone(zone: &str) -> Result<()> {
    let ok = !zone.is_empty()
        && !zone.starts_with('.')
        && !zone.starts_with('_')
        && zone
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_'));
    if ok {
        Ok(())
    } else {
        Err(ObjectStoreError::InvalidZone(zone.to_string()))
    }
}

pub struct ObjectStore {
    root: PathBuf,
    ledger: Mutex<TransferLedger>,
    tmp_counter: AtomicU64,
}

impl ObjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(ObjectStore {
            root,
            ledger: Mutex::new(TransferLedger::default()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn zone_dir(&self, zone: &str) -> Result<PathBuf> {
        validate_zone(zone)?;
        Ok(self.root.join(zone))
    }

    /// Zones that currently have a directory under the root, sorted.
    pub fn zones(&self) -> Result<Vec<String>> {
        let mut zones = Vec::new();
        let rd = match fs::read_dir(&self.root) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(zones),
            Err(e) => return Err(io_err(&self.root)(e)),
        };
        for entry in rd {
            let entry = entry.map_err(io_err(&self.root))?;
            if entry.file_type().map_err(io_err(entry.path()))?.is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    if validate_zone(name).is_ok() {
                        zones.push(name.to_string());
                    }
                }
            }
        }
        zones.sort();
        Ok(zones)
    }

    fn objects_dir(&self, zone: &str, bucket: &str) -> Result<PathBuf> {
        validate_bucket(bucket)?;
        Ok(self.zone_dir(zone)?.join(bucket).join("objects"))
    }

    pub fn object_path(&self, zone: &str, bucket: &str, key: &str) -> Result<PathBuf> {
        validate_key(key)?;
        Ok(self.objects_dir(zone, bucket)?.join(encode_key(key)))
    }

    /// Writes `bytes` at `rel` under the zone directory via temp file + rename.
    pub(crate) fn write_zone_file(&self, zone: &str, rel: &Path, bytes: &[u8]) -> Result<()> {
        let zone_dir = self.zone_dir(zone)?;
        let dest = zone_dir.join(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let tmp_dir = zone_dir.join(".tmp");
        fs::create_dir_all(&tmp_dir).map_err(io_err(&tmp_dir))?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = tmp_dir.join(format!("{}-{}-{n}", std::process::id(), nonce()));
        let write = || -> io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
            fs::rename(&tmp, &dest)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            io_err(&dest)(e)
        })
    }

    pub(crate) fn read_zone_file(&self, zone: &str, rel: &Path) -> Result<Option<Vec<u8>>> {
        let path = self.zone_dir(zone)?.join(rel);
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    pub fn put_object(&self, zone: &str, bucket: &str, key: &str, bytes: &[u8]) -> Result<ObjectRef> {
        validate_key(key)?;
        validate_bucket(bucket)?;
        let rel = Path::new(bucket).join("objects").join(encode_key(key));
        self.write_zone_file(zone, &rel, bytes)?;
        Ok(ObjectRef {
            zone: zone.to_string(),
            bucket: bucket.to_string(),
            key: key.to_string(),
            size: bytes.len() as u64,
            digest: Digest::of(bytes),
        })
    }

    pub fn get_object(&self, zone: &str, bucket: &str, key: &str) -> Result<Vec<u8>> {
        let path = self.object_path(zone, bucket, key)?;
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(ObjectStoreError::NotFound {
                zone: zone.to_string(),
                bucket: bucket.to_string(),
                key: key.to_string(),
            }),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    pub fn exists(&self, zone: &str, bucket: &str, key: &str) -> Result<bool> {
        Ok(self.object_path(zone, bucket, key)?.is_file())
    }

    /// Removes an object; returns whether it existed.
    pub fn delete_object(&self, zone: &str, bucket: &str, key: &str) -> Result<bool> {
        let path = self.object_path(zone, bucket, key)?;
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    /// All keys starting with `prefix`, sorted by key bytes. An absent bucket
    /// lists as empty.
    pub fn list_prefix(&self, zone: &str, bucket: &str, prefix: &str) -> Result<Vec<String>> {
        let dir = self.objects_dir(zone, bucket)?;
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        let mut keys = Vec::new();
        for entry in rd {
            let entry = entry.map_err(io_err(&dir))?;
            let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            if let Some(key) = decode_key(&name) {
                if key.starts_with(prefix) {
                    keys.push(key);
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    /// Copies `keys` of `bucket` from one zone to another. Keys already present
    /// at the destination with the same SHA-256 are skipped. Every source key is
    /// checked before anything is written.
    pub fn replicate(&self, from_zone: &str, to_zone: &str, bucket: &str, keys: &[String]) -> Result<TransferReport> {
        validate_bucket(bucket)?;
        let mut items = Vec::with_capacity(keys.len());
        for key in keys {
            validate_key(key)?;
            items.push((key.clone(), Path::new(bucket).join("objects").join(encode_key(key))));
        }
        self.replicate_files(from_zone, to_zone, &items, |key| ObjectStoreError::NotFound {
            zone: from_zone.to_string(),
            bucket: bucket.to_string(),
            key: key.to_string(),
        })
    }

    /// Zone-relative replication shared by buckets and the snapshot area.
    /// `items` pairs a report label with a path relative to the zone root.
    pub(crate) fn replicate_files(
        &self,
        from_zone: &str,
        to_zone: &str,
        items: &[(String, PathBuf)],
        missing: impl Fn(&str) -> ObjectStoreError,
    ) -> Result<TransferReport> {
        let from_dir = self.zone_dir(from_zone)?;
        self.zone_dir(to_zone)?;
        for (label, rel) in items {
            if !from_dir.join(rel).is_file() {
                return Err(missing(label));
            }
        }
        let mut report = TransferReport {
            from_zone: from_zone.to_string(),
            to_zone: to_zone.to_string(),
            ..Default::default()
        };
        if from_zone == to_zone {
            report.skipped = items.iter().map(|(l, _)| l.clone()).collect();
            return Ok(report);
        }
        for (label, rel) in items {
            let src = self
                .read_zone_file(from_zone, rel)?
                .ok_or_else(|| missing(label))?;
            let same = match self.read_zone_file(to_zone, rel)? {
                Some(dst) => Digest::of(&dst) == Digest::of(&src),
                None => false,
            };
            if same {
                report.skipped.push(label.clone());
                continue;
            }
            self.write_zone_file(to_zone, rel, &src)?;
            report.bytes_transferred += src.len() as u64;
            report.transferred.push(label.clone());
            // Ledger is updated per object so a mid-way failure still counts
            // the bytes that actually crossed.
            self.ledger
                .lock()
                .expect("ledger lock poisoned")
                .record(from_zone, to_zone, src.len() as u64, 1);
        }
        Ok(report)
    }

    pub fn ledger(&self) -> TransferLedger {
        self.ledger.lock().expect("ledger lock poisoned").clone()
    }
}

fn nonce() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.subsec_nanos() as u64 ^ (d.as_secs() << 20))
        .unwrap_or(0)
}
