//! Random workspace trees and a byte-level tree reader.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::Path;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, PartialEq, Eq)]
pub enum Node {
    File { bytes: Vec<u8>, exec: bool },
    Link(String),
}

pub fn read_tree(root: &Path) -> BTreeMap<String, Node> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Node>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_str().unwrap().to_string();
            if rel == ".jt" {
                continue;
            }
            let md = fs::symlink_metadata(&p).unwrap();
            if md.file_type().is_symlink() {
                out.insert(rel, Node::Link(fs::read_link(&p).unwrap().to_str().unwrap().to_string()));
            } else if md.is_dir() {
                walk(root, &p, out);
            } else {
                let exec = md.permissions().mode() & 0o100 != 0;
                out.insert(rel, Node::File { bytes: fs::read(&p).unwrap(), exec });
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn random_tree(root: &Path, rng: &mut ChaCha8Rng, max_files: usize, max_size: usize) {
    let dirs = ["", "src", "src/model", "data", "conf/a/b", "notes"];
    let n = rng.gen_range(1..=max_files);
    for i in 0..n {
        let dir = dirs[rng.gen_range(0..dirs.len())];
        let name = format!("f{i}_{}", rng.gen_range(0..1000));
        let rel = if dir.is_empty() { name } else { format!("{dir}/{name}") };
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        if rng.gen_ratio(1, 8) {
            let target = if rng.gen_bool(0.5) { "../missing/target".to_string() } else { format!("peer_{i}") };
            symlink(target, &path).unwrap();
            continue;
        }
        let len = if rng.gen_ratio(1, 10) { 0 } else { rng.gen_range(0..=max_size) };
        let mut bytes = vec![0u8; len];
        rng.fill_bytes(&mut bytes);
        if rng.gen_ratio(1, 6) && i > 0 {
            // duplicate content exercises blob dedup
            bytes = b"shared contents\n".to_vec();
        }
        fs::write(&path, &bytes).unwrap();
        let mode = if rng.gen_bool(0.3) { 0o755 } else { 0o644 };
        fs::set_permissions(&path, fs::Permissions::from_mode(mode)).unwrap();
    }
}
