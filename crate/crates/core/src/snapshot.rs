//! Content-addressed workspace snapshots.
//!
//! A snapshot is a manifest (sorted [`FileEntry`] list plus optional parent)
//! whose id is the SHA-256 of its canonical JSON with `created_at` left out.
//! File contents are whole-file blobs keyed by digest, so uploading a child
//! of an existing snapshot only sends blobs the zone does not already hold.
//!
//! Layout inside a zone:
//!
//! ```text
//! <root>/<zone>/_snapshots/blobs/<hex[0:2]>/<hex>
//! <root>/<zone>/_snapshots/manifests/<snapshot-id>.json
//! <root>/<zone>/_snapshots/.lock        advisory lock; GC takes it exclusively
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{self, Read};
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ignore::gitignore::{Gitignore, GitignoreBuilder};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::digest::{Digest, Hasher, SnapshotId};
use crate::model::Timestamp;
use crate::object_store::{ObjectStore, ObjectStoreError, TransferReport};

pub const IGNORE_FILE: &str = ".jtignore";
const SNAPSHOT_DIR: &str = "_snapshots";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("not a directory: {0}")]
    NotADirectory(PathBuf),
    #[error("unsupported file type: {0}")]
    UnsupportedFileType(PathBuf),
    #[error("path is not valid UTF-8: {0}")]
    NonUtf8Path(PathBuf),
    #[error("duplicate path {0:?}")]
    DuplicatePath(String),
    #[error("invalid entry path {0:?}")]
    InvalidPath(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid ignore rule {rule:?}: {reason}")]
    InvalidIgnoreRule { rule: String, reason: String },
    #[error("parent snapshot {0} not found")]
    ParentNotFound(SnapshotId),
    #[error("snapshot {0} not found")]
    SnapshotNotFound(SnapshotId),
    #[error("blob {0} missing")]
    MissingBlob(Digest),
    #[error("blob {0} is corrupt")]
    CorruptBlob(Digest),
    #[error("destination {0} is not empty")]
    DestinationNotEmpty(PathBuf),
    #[error("{0} changed while the snapshot was being taken")]
    WorkspaceChanged(PathBuf),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Store(#[from] ObjectStoreError),
}

pub type Result<T, E = SnapshotError> = std::result::Result<T, E>;

fn ioe(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> SnapshotError {
    let path = path.into();
    move |source| SnapshotError::Io { path, source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntryKind {
    File,
    Symlink,
}

/// One file or symlink of a workspace. Fields that do not apply to the kind
/// are `null` in JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub kind: EntryKind,
    pub digest: Option<Digest>,
    pub size: Option<u64>,
    pub executable: Option<bool>,
    pub link_target: Option<String>,
}

impl FileEntry {
    pub fn file(path: impl Into<String>, digest: Digest, size: u64, executable: bool) -> Self {
        FileEntry {
            path: path.into(),
            kind: EntryKind::File,
            digest: Some(digest),
            size: Some(size),
            executable: Some(executable),
            link_target: None,
        }
    }

    pub fn symlink(path: impl Into<String>, target: impl Into<String>) -> Self {
        FileEntry {
            path: path.into(),
            kind: EntryKind::Symlink,
            digest: None,
            size: None,
            executable: None,
            link_target: Some(target.into()),
        }
    }

    fn validate(&self) -> Result<()> {
        validate_entry_path(&self.path)?;
        let shape_ok = match self.kind {
            EntryKind::File => {
                self.digest.is_some()
                    && self.size.is_some()
                    && self.executable.is_some()
                    && self.link_target.is_none()
            }
            EntryKind::Symlink => {
                self.digest.is_none()
                    && self.size.is_none()
                    && self.executable.is_none()
                    && self.link_target.as_deref().is_some_and(|t| !t.is_empty() && !t.contains('\0'))
            }
        };
        if shape_ok {
            Ok(())
        } else {
            Err(SnapshotError::InvalidManifest(format!("malformed entry {:?}", self.path)))
        }
    }

    /// The attributes that make two entries at the same path differ.
    fn content_key(&self) -> (EntryKind, Option<Digest>, Option<bool>, Option<&str>) {
        (self.kind, self.digest, self.executable, self.link_target.as_deref())
    }
}

pub fn validate_entry_path(path: &str) -> Result<()> {
    let ok = !path.is_empty()
        && !path.contains('\0')
        && path.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..");
    if ok {
        Ok(())
    } else {
        Err(SnapshotError::InvalidPath(path.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub entries: Vec<FileEntry>,
    pub parent: Option<SnapshotId>,
    pub created_at: Timestamp,
}

#[derive(Serialize)]
struct IdView<'a> {
    entries: &'a [FileEntry],
    parent: &'a Option<SnapshotId>,
}

impl SnapshotManifest {
    pub fn id(&self) -> SnapshotId {
        let bytes = canonical::to_vec(&IdView {
            entries: &self.entries,
            parent: &self.parent,
        })
        .expect("manifest serialization cannot fail");
        SnapshotId(Digest::of(&bytes))
    }

    pub fn to_canonical_json(&self) -> Vec<u8> {
        canonical::to_vec(self).expect("manifest serialization cannot fail")
    }

    /// Parses and validates a stored manifest.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: SnapshotManifest =
            canonical::from_slice(bytes).map_err(|e| SnapshotError::InvalidManifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Entries sorted and unique, and no entry nested under another entry
    /// (which would make materialization write through a symlink).
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.validate()?;
        }
        for pair in self.entries.windows(2) {
            let (a, b) = (&pair[0].path, &pair[1].path);
            match a.as_bytes().cmp(b.as_bytes()) {
                std::cmp::Ordering::Less => {}
                std::cmp::Ordering::Equal => return Err(SnapshotError::DuplicatePath(a.clone())),
                std::cmp::Ordering::Greater => {
                    return Err(SnapshotError::InvalidManifest(format!("entries not sorted at {b:?}")))
                }
            }
        }
        let paths: HashSet<&str> = self.entries.iter().map(|e| e.path.as_str()).collect();
        for e in &self.entries {
            let mut cut = e.path.as_str();
            while let Some(idx) = cut.rfind('/') {
                cut = &cut[..idx];
                if paths.contains(cut) {
                    return Err(SnapshotError::InvalidManifest(format!(
                        "{:?} is nested under entry {cut:?}",
                        e.path
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct blob digests referenced by file entries.
    pub fn blob_digests(&self) -> BTreeSet<Digest> {
        self.entries.iter().filter_map(|e| e.digest).collect()
    }

    pub fn total_file_bytes(&self) -> u64 {
        self.entries.iter().filter_map(|e| e.size).sum()
    }
}

/// Paths added, modified and removed between two manifests.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaSet {
    pub added: Vec<String>,
    pub modified: Vec<String>,
    pub removed: Vec<String>,
}

impl DeltaSet {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.modified.is_empty() && self.removed.is_empty()
    }
}

pub fn hash_blob(bytes: &[u8]) -> Digest {
    Digest::of(bytes)
}

/// Sorts `listing` and attaches `parent`. Fails on duplicate paths.
pub fn build_manifest(
    mut listing: Vec<FileEntry>,
    parent: Option<SnapshotId>,
    created_at: Timestamp,
) -> Result<SnapshotManifest> {
    listing.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
    let m = SnapshotManifest {
        entries: listing,
        parent,
        created_at,
    };
    m.validate()?;
    Ok(m)
}

pub fn diff_manifests(parent: &SnapshotManifest, child: &SnapshotManifest) -> DeltaSet {
    let mut delta = DeltaSet::default();
    let (mut i, mut j) = (0, 0);
    let (p, c) = (&parent.entries, &child.entries);
    while i < p.len() || j < c.len() {
        let order = match (p.get(i), c.get(j)) {
            (Some(a), Some(b)) => a.path.as_bytes().cmp(b.path.as_bytes()),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, _) => std::cmp::Ordering::Greater,
        };
        match order {
            std::cmp::Ordering::Less => {
                delta.removed.push(p[i].path.clone());
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                delta.added.push(c[j].path.clone());
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                if p[i].content_key() != c[j].content_key() {
                    delta.modified.push(c[j].path.clone());
                }
                i += 1;
                j += 1;
            }
        }
    }
    delta
}

/// Reads `.jtignore` at the workspace root; blank lines and `#` comments are
/// dropped. A missing file yields no rules.
pub fn load_ignore_rules(workspace: &Path) -> Result<Vec<String>> {
    let path = workspace.join(IGNORE_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => Ok(text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(ioe(path)(e)),
    }
}

fn build_matcher(root: &Path, rules: &[String]) -> Result<Gitignore> {
    let mut b = GitignoreBuilder::new(root);
    for rule in std::iter::once(".jt/").chain(rules.iter().map(String::as_str)) {
        b.add_line(None, rule).map_err(|e| SnapshotError::InvalidIgnoreRule {
            rule: rule.to_string(),
            reason: e.to_string(),
        })?;
    }
    b.build().map_err(|e| SnapshotError::InvalidIgnoreRule {
        rule: String::new(),
        reason: e.to_string(),
    })
}

fn hash_file(path: &Path) -> Result<(Digest, u64)> {
    let mut f = File::open(path).map_err(ioe(path))?;
    let mut h = Hasher::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(ioe(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        size += n as u64;
    }
    Ok((h.finish(), size))
}

/// Lists every regular file and symlink under `dir` that the ignore rules
/// (plus the implicit `.jt/`) do not exclude, sorted by path bytes.
/// Symlinks are recorded by target and never followed.
pub fn scan_workspace(dir: &Path, ignore_rules: &[String]) -> Result<Vec<FileEntry>> {
    let meta = fs::metadata(dir).map_err(ioe(dir))?;
    if !meta.is_dir() {
        return Err(SnapshotError::NotADirectory(dir.to_path_buf()));
    }
    let matcher = build_matcher(dir, ignore_rules)?;
    let mut entries = Vec::new();
    let mut stack: Vec<(PathBuf, String)> = vec![(dir.to_path_buf(), String::new())];
    while let Some((abs, rel)) = stack.pop() {
        let rd = fs::read_dir(&abs).map_err(ioe(&abs))?;
        for child in rd {
            let child = child.map_err(ioe(&abs))?;
            let child_abs = child.path();
            let name = child
                .file_name()
                .into_string()
                .map_err(|_| SnapshotError::NonUtf8Path(child_abs.clone()))?;
            let child_rel = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            let ft = fs::symlink_metadata(&child_abs).map_err(ioe(&child_abs))?;
            let is_dir = ft.is_dir();
            if matcher.matched(Path::new(&child_rel), is_dir).is_ignore() {
                continue;
            }
            if is_dir {
                stack.push((child_abs, child_rel));
            } else if ft.file_type().is_symlink() {
                let target = fs::read_link(&child_abs).map_err(ioe(&child_abs))?;
                let target = target
                    .into_os_string()
                    .into_string()
                    .map_err(|_| SnapshotError::NonUtf8Path(child_abs.clone()))?;
                entries.push(FileEntry::symlink(child_rel, target));
            } else if ft.is_file() {
                let (digest, size) = hash_file(&child_abs)?;
                let executable = ft.permissions().mode() & 0o111 != 0;
                entries.push(FileEntry::file(child_rel, digest, size, executable));
            } else {
                return Err(SnapshotError::UnsupportedFileType(child_abs));
            }
        }
    }
    entries.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
    Ok(entries)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReport {
    pub snapshot_id: Option<SnapshotId>,
    pub files: u64,
    pub blobs_transferred: u64,
    pub blobs_skipped: u64,
    pub blob_bytes: u64,
    pub manifest_bytes: u64,
    /// Blob bytes plus manifest bytes actually written.
    pub bytes_transferred: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcReport {
    pub manifests_deleted: u64,
    pub blobs_deleted: u64,
    pub bytes_freed: u64,
    pub missing_roots: Vec<SnapshotId>,
}

pub fn blob_rel_path(d: &Digest) -> PathBuf {
    let hex = d.to_hex();
    Path::new(SNAPSHOT_DIR).join("blobs").join(&hex[..2]).join(hex)
}

pub fn manifest_rel_path(id: &SnapshotId) -> PathBuf {
    Path::new(SNAPSHOT_DIR).join("manifests").join(format!("{id}.json"))
}

enum LockMode {
    Shared,
    Exclusive,
}

pub struct SnapshotStore {
    objects: Arc<ObjectStore>,
}

impl SnapshotStore {
    pub fn new(objects: Arc<ObjectStore>) -> Self {
        SnapshotStore { objects }
    }

    pub fn objects(&self) -> &Arc<ObjectStore> {
        &self.objects
    }

    fn zone_path(&self, zone: &str, rel: &Path) -> Result<PathBuf> {
        Ok(self.objects.zone_dir(zone)?.join(rel))
    }

    fn lock(&self, zone: &str, mode: LockMode) -> Result<File> {
        let dir = self.objects.zone_dir(zone)?.join(SNAPSHOT_DIR);
        fs::create_dir_all(&dir).map_err(ioe(&dir))?;
        let path = dir.join(".lock");
        let f = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(ioe(&path))?;
        match mode {
            LockMode::Shared => f.lock_shared(),
            LockMode::Exclusive => f.lock(),
        }
        .map_err(ioe(&path))?;
        Ok(f)
    }

    pub fn has_blob(&self, zone: &str, d: &Digest) -> Result<bool> {
        Ok(self.zone_path(zone, &blob_rel_path(d))?.is_file())
    }

    pub fn has_snapshot(&self, zone: &str, id: &SnapshotId) -> Result<bool> {
        Ok(self.zone_path(zone, &manifest_rel_path(id))?.is_file())
    }

    /// First zone (in sorted order) holding the manifest.
    pub fn find_zone(&self, id: &SnapshotId) -> Result<Option<String>> {
        for zone in self.objects.zones()? {
            if self.has_snapshot(&zone, id)? {
                return Ok(Some(zone));
            }
        }
        Ok(None)
    }

    pub fn load_manifest(&self, zone: &str, id: &SnapshotId) -> Result<SnapshotManifest> {
        let bytes = self
            .objects
            .read_zone_file(zone, &manifest_rel_path(id))?
            .ok_or(SnapshotError::SnapshotNotFound(*id))?;
        let m = SnapshotManifest::from_json(&bytes)?;
        if m.id() != *id {
            return Err(SnapshotError::InvalidManifest(format!("manifest stored as {id} hashes to {}", m.id())));
        }
        Ok(m)
    }

    pub fn list_snapshots(&self, zone: &str) -> Result<Vec<SnapshotId>> {
        let dir = self.zone_path(zone, &Path::new(SNAPSHOT_DIR).join("manifests"))?;
        let mut ids = Vec::new();
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ids),
            Err(e) => return Err(ioe(dir)(e)),
        };
        for entry in rd {
            let entry = entry.map_err(ioe(&dir))?;
            if let Some(id) = entry
                .file_name()
                .to_str()
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<SnapshotId>().ok())
            {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn read_blob(&self, zone: &str, d: &Digest) -> Result<Vec<u8>> {
        let bytes = self
            .objects
            .read_zone_file(zone, &blob_rel_path(d))?
            .ok_or(SnapshotError::MissingBlob(*d))?;
        if Digest::of(&bytes) != *d {
            return Err(SnapshotError::CorruptBlob(*d));
        }
        Ok(bytes)
    }

    /// Stores a manifest if absent; returns the bytes written (0 if it was
    /// already there).
    fn store_manifest(&self, zone: &str, manifest: &SnapshotManifest) -> Result<u64> {
        let id = manifest.id();
        if self.has_snapshot(zone, &id)? {
            return Ok(0);
        }
        let bytes = manifest.to_canonical_json();
        self.objects.write_zone_file(zone, &manifest_rel_path(&id), &bytes)?;
        Ok(bytes.len() as u64)
    }

    /// Scans `workspace`, uploads every blob the zone lacks, then the manifest.
    pub fn upload_snapshot(
        &self,
        workspace: &Path,
        parent: Option<SnapshotId>,
        zone: &str,
        now: Timestamp,
    ) -> Result<(SnapshotId, UploadReport)> {
        let rules = load_ignore_rules(workspace)?;
        let listing = scan_workspace(workspace, &rules)?;
        let manifest = build_manifest(listing, parent, now)?;
        let _guard = self.lock(zone, LockMode::Shared)?;
        if let Some(p) = &parent {
            if !self.has_snapshot(zone, p)? {
                return Err(SnapshotError::ParentNotFound(*p));
            }
        }
        let mut report = UploadReport {
            files: manifest.entries.len() as u64,
            ..Default::default()
        };
        let mut seen = HashSet::new();
        for entry in &manifest.entries {
            let Some(digest) = entry.digest else { continue };
            if !seen.insert(digest) {
                continue;
            }
            if self.has_blob(zone, &digest)? {
                report.blobs_skipped += 1;
                continue;
            }
            let src = workspace.join(&entry.path);
            let bytes = fs::read(&src).map_err(ioe(&src))?;
            if Digest::of(&bytes) != digest {
                return Err(SnapshotError::WorkspaceChanged(src));
            }
            self.objects.write_zone_file(zone, &blob_rel_path(&digest), &bytes)?;
            report.blobs_transferred += 1;
            report.blob_bytes += bytes.len() as u64;
        }
        report.manifest_bytes = self.store_manifest(zone, &manifest)?;
        report.bytes_transferred = report.blob_bytes + report.manifest_bytes;
        let id = manifest.id();
        report.snapshot_id = Some(id);
        Ok((id, report))
    }

    /// Writes the snapshot's tree into `dest`, which must be empty or absent.
    pub fn materialize(&self, id: &SnapshotId, dest: &Path, zone: &str) -> Result<()> {
        let _guard = self.lock(zone, LockMode::Shared)?;
        let manifest = self.load_manifest(zone, id)?;
        for d in manifest.blob_digests() {
            if !self.has_blob(zone, &d)? {
                return Err(SnapshotError::MissingBlob(d));
            }
        }
        match fs::read_dir(dest) {
            Ok(mut rd) => {
                if rd.next().is_some() {
                    return Err(SnapshotError::DestinationNotEmpty(dest.to_path_buf()));
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                fs::create_dir_all(dest).map_err(ioe(dest))?;
            }
            Err(e) => return Err(ioe(dest)(e)),
        }
        for entry in &manifest.entries {
            let path = dest.join(&entry.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(ioe(parent))?;
            }
            match entry.kind {
                EntryKind::File => {
                    let digest = entry.digest.expect("validated file entry");
                    let bytes = self.read_blob(zone, &digest)?;
                    fs::write(&path, &bytes).map_err(ioe(&path))?;
                    let mode = if entry.executable == Some(true) { 0o755 } else { 0o644 };
                    fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(ioe(&path))?;
                }
                EntryKind::Symlink => {
                    let target = entry.link_target.as_deref().expect("validated symlink entry");
                    symlink(target, &path).map_err(ioe(&path))?;
                }
            }
        }
        Ok(())
    }

    /// Makes the manifest and all its blobs present in `to_zone`, sending
    /// only what is missing there. The manifest goes last so that a visible
    /// manifest always has its blobs.
    pub fn replicate_snapshot(&self, id: &SnapshotId, from_zone: &str, to_zone: &str) -> Result<TransferReport> {
        let _src = self.lock(from_zone, LockMode::Shared)?;
        let _dst = if from_zone != to_zone {
            Some(self.lock(to_zone, LockMode::Shared)?)
        } else {
            None
        };
        let manifest = self.load_manifest(from_zone, id)?;
        let mut items = Vec::new();
        for d in manifest.blob_digests() {
            if !self.has_blob(from_zone, &d)? {
                return Err(SnapshotError::MissingBlob(d));
            }
            items.push((format!("blob:{d}"), blob_rel_path(&d)));
        }
        items.push((format!("manifest:{id}"), manifest_rel_path(id)));
        let report = self
            .objects
            .replicate_files(from_zone, to_zone, &items, |label| ObjectStoreError::NotFound {
                zone: from_zone.to_string(),
                bucket: SNAPSHOT_DIR.to_string(),
                key: label.to_string(),
            })?;
        Ok(report)
    }

    /// Deletes every manifest and blob in `zone` that is not reachable from
    /// `live_roots` through parent links and manifest entries.
    pub fn collect_garbage(&self, zone: &str, live_roots: &[SnapshotId]) -> Result<GcReport> {
        let _guard = self.lock(zone, LockMode::Exclusive)?;
        let mut report = GcReport::default();
        let mut live_manifests = HashSet::new();
        let mut live_blobs = HashSet::new();
        for root in live_roots {
            let mut cursor = Some(*root);
            while let Some(id) = cursor {
                if !live_manifests.insert(id) {
                    break;
                }
                match self.load_manifest(zone, &id) {
                    Ok(m) => {
                        live_blobs.extend(m.blob_digests());
                        cursor = m.parent;
                    }
                    Err(SnapshotError::SnapshotNotFound(_)) => {
                        if id == *root {
                            report.missing_roots.push(id);
                        }
                        cursor = None;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        for id in self.list_snapshots(zone)? {
            if live_manifests.contains(&id) {
                continue;
            }
            let path = self.zone_path(zone, &manifest_rel_path(&id))?;
            let len = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            fs::remove_file(&path).map_err(ioe(&path))?;
            report.manifests_deleted += 1;
            report.bytes_freed += len;
        }
        let blobs_dir = self.zone_path(zone, &Path::new(SNAPSHOT_DIR).join("blobs"))?;
        let fanouts = match fs::read_dir(&blobs_dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(report),
            Err(e) => return Err(ioe(blobs_dir)(e)),
        };
        for fanout in fanouts {
            let fanout = fanout.map_err(ioe(&blobs_dir))?.path();
            let rd = fs::read_dir(&fanout).map_err(ioe(&fanout))?;
            for blob in rd {
                let blob = blob.map_err(ioe(&fanout))?;
                let path = blob.path();
                let live = blob
                    .file_name()
                    .to_str()
                    .and_then(|n| n.parse::<Digest>().ok())
                    .is_some_and(|d| live_blobs.contains(&d));
                if live {
                    continue;
                }
                let len = blob.metadata().map(|m| m.len()).unwrap_or(0);
                fs::remove_file(&path).map_err(ioe(&path))?;
                report.blobs_deleted += 1;
                report.bytes_freed += len;
            }
            // Ignore failure: the fan-out directory is simply not empty yet.
            let _ = fs::remove_dir(&fanout);
        }
        Ok(report)
    }

    /// Number of blob files currently stored in the zone.
    pub fn blob_count(&self, zone: &str) -> Result<usize> {
        let dir = self.zone_path(zone, &Path::new(SNAPSHOT_DIR).join("blobs"))?;
        let mut n = 0;
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(ioe(dir)(e)),
        };
        for fanout in rd {
            let fanout = fanout.map_err(ioe(&dir))?.path();
            n += fs::read_dir(&fanout).map_err(ioe(&fanout))?.count();
        }
        Ok(n)
    }
}
