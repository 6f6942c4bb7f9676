//! Run manifest and output-directory locking.
//!
//! Every subcommand that writes into the output directory updates `run.lock`:
//! a JSON manifest with the hash of the effective config, the root seed, the
//! last command, and a sha256 per artifact. It carries no timestamps or
//! absolute paths, so two runs with the same config and seed produce
//! byte-identical manifests. The `.busy` guard file serializes writers: it is
//! created with `create_new` and removed when the command finishes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fairtune::error::{Error, Result};

pub const MANIFEST_FILE: &str = "run.lock";
const GUARD_FILE: &str = ".busy";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    /// sha256 of the effective config TOML.
    pub config_sha256: String,
    pub seed: u64,
    pub last_command: String,
    /// File name relative to the output directory -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(out_dir: &Path) -> Result<Option<Self>> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Some(m))
    }
}

/// Record `new_files` (paths inside `out_dir`) in the manifest, replacing
/// entries for files a command rewrote.
pub fn update_manifest(
    out_dir: &Path,
    config_sha256: &str,
    seed: u64,
    command: &str,
    new_files: &[PathBuf],
) -> Result<()> {
    let mut manifest = RunManifest::load(out_dir)?.unwrap_or_default();
    manifest.config_sha256 = config_sha256.to_string();
    manifest.seed = seed;
    manifest.last_command = command.to_string();
    for f in new_files {
        let name = f
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("artifact path {} has no name", f.display())))?;
        manifest
            .artifacts
            .insert(name.to_string(), sha256_file(f)?);
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

/// Exclusive writer lock on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(GUARD_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is in use (stale lock? remove {})",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_accumulates_across_commands() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        fs::write(&a, "one").unwrap();
        fs::write(&b, "two").unwrap();

        update_manifest(dir.path(), "cfg", 7, "first", &[a.clone()]).unwrap();
        update_manifest(dir.path(), "cfg", 7, "second", &[b.clone()]).unwrap();

        let m = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(m.last_command, "second");
        assert_eq!(m.artifacts.len(), 2);
        assert_eq!(m.artifacts["a.txt"], sha256_file(&a).unwrap());

        // Rewriting a file replaces its hash.
        fs::write(&a, "three").unwrap();
        update_manifest(dir.path(), "cfg", 7, "third", &[a.clone()]).unwrap();
        let m = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(m.artifacts["a.txt"], sha256_file(&a).unwrap());
    }

    #[test]
    fn manifest_is_deterministic() {
        let render = || {
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("x.bin");
            fs::write(&a, [1u8, 2, 3]).unwrap();
            update_manifest(dir.path(), "cfg-hash", 3, "score", &[a]).unwrap();
            fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn dir_lock_blocks_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        let second = DirLock::acquire(dir.path());
        assert!(second.is_err());
        drop(first);
        DirLock::acquire(dir.path()).unwrap();
    }
}
