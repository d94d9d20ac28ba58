//! Run manifests, content hashing and output-directory handling.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stg_core::numerics::{hex_digest, write_atomic};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the artifact directory.
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Config after merging the config file and flags.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub input_hash: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub outputs: Vec<OutputEntry>,
    pub version: String,
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex_digest(&h.finalize())
}

/// Git-style content hash: files hash as blobs, directories as sorted trees
/// of their entries. Run manifests are skipped so regenerated artifacts hash
/// identically.
pub fn content_hash(path: &Path) -> CliResult<String> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        return Ok(blob_hash(&bytes));
    }
    let mut h = Sha256::new();
    h.update(b"tree\0");
    for (name, p) in sorted_entries(path)? {
        if name == MANIFEST_FILE {
            continue;
        }
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update(content_hash(&p)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex_digest(&h.finalize()))
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let e = e.map_err(|e| CliError::io(dir, e))?;
        out.push((e.file_name().to_string_lossy().into_owned(), e.path()));
    }
    out.sort();
    Ok(out)
}

pub fn inputs_hash(inputs: &[PathBuf]) -> CliResult<String> {
    let mut h = Sha256::new();
    for p in inputs {
        h.update(content_hash(p)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex_digest(&h.finalize()))
}

/// Every file under `dir` except the manifest, with its content hash.
pub fn list_outputs(dir: &Path) -> CliResult<Vec<OutputEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<OutputEntry>) -> CliResult<()> {
        for (name, p) in sorted_entries(dir)? {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if !(dir == root && name == MANIFEST_FILE) {
                out.push(OutputEntry {
                    path: p.strip_prefix(root).expect("under root").to_path_buf(),
                    hash: content_hash(&p)?,
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn absolute(p: &Path) -> PathBuf {
    let abs = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|c| c.join(p)).unwrap_or_else(|_| p.to_path_buf())
    };
    // Resolve symlinks for whatever prefix exists.
    let mut existing = abs.clone();
    let mut rest = Vec::new();
    while !existing.exists() {
        match (existing.file_name().map(|s| s.to_owned()), existing.parent()) {
            (Some(name), Some(parent)) => {
                rest.push(name);
                existing = parent.to_path_buf();
            }
            _ => return abs,
        }
    }
    let mut out = existing.canonicalize().unwrap_or(existing);
    for name in rest.into_iter().rev() {
        out.push(name);
    }
    out
}

/// Make `out` an empty directory. A non-empty directory is only cleared with
/// `force`, and never when it overlaps an input.
pub fn prepare_output_dir(out: &Path, force: bool, inputs: &[PathBuf]) -> CliResult<()> {
    let out_abs = absolute(out);
    for i in inputs {
        let i_abs = absolute(i);
        if i_abs.starts_with(&out_abs) || out_abs.starts_with(&i_abs) {
            return Err(CliError::Usage(format!(
                "output directory {} overlaps input {}",
                out.display(),
                i.display()
            )));
        }
    }
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = fs::read_dir(out).map_err(|e| CliError::io(out, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::OutputNotEmpty(out.to_path_buf()));
            }
            fs::remove_dir_all(out).map_err(|e| CliError::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

/// A manifest that is written when the run starts and finalized when it ends.
pub struct ManifestWriter {
    dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestWriter {
    pub fn start(
        dir: &Path,
        subcommand: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        threads: usize,
        inputs: Vec<PathBuf>,
    ) -> CliResult<Self> {
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            config,
            seed,
            threads,
            input_hash: inputs_hash(&inputs)?,
            inputs,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let w = Self {
            dir: dir.to_path_buf(),
            manifest,
        };
        w.write()?;
        Ok(w)
    }

    fn write(&self) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self, result: &CliResult<()>) -> CliResult<RunManifest> {
        self.manifest.finished_at = Some(now());
        match result {
            Ok(()) => self.manifest.status = RunStatus::Succeeded,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(e.to_string());
            }
        }
        self.manifest.outputs = list_outputs(&self.dir)?;
        self.write()?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_construction() {
        // `git hash-object` uses SHA-1; the framing is the same.
        let mut h = Sha256::new();
        h.update(b"blob 5\0hello");
        assert_eq!(blob_hash(b"hello"), hex_digest(&h.finalize()));
    }

    #[test]
    fn tree_hash_ignores_manifest_and_tracks_content() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            fs::create_dir(d.join("sub")).unwrap();
            fs::write(d.join("sub/x.bin"), [1u8, 2, 3]).unwrap();
        }
        fs::write(a.path().join(MANIFEST_FILE), "{}").unwrap();
        assert_eq!(content_hash(a.path()).unwrap(), content_hash(b.path()).unwrap());
        fs::write(b.path().join("sub/x.bin"), [1u8, 2, 4]).unwrap();
        assert_ne!(content_hash(a.path()).unwrap(), content_hash(b.path()).unwrap());
    }

    #[test]
    fn output_dir_rules() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("out");
        prepare_output_dir(&out, false, &[]).unwrap();
        fs::write(out.join("f"), "x").unwrap();
        assert!(matches!(prepare_output_dir(&out, false, &[]), Err(CliError::OutputNotEmpty(_))));
        let input = out.join("f");
        assert!(matches!(prepare_output_dir(&out, true, &[input]), Err(CliError::Usage(_))));
        assert!(out.join("f").exists());
        prepare_output_dir(&out, true, &[]).unwrap();
        assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    }
}
