//! Output staging and the run manifest.
//!
//! Every command writes into a sibling staging directory and renames it
//! onto `--out` only after all outputs and `run.json` are complete, so a
//! failed run never leaves partial results behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "run.json";

pub struct Staging {
    out: PathBuf,
    tmp: PathBuf,
    done: bool,
}

impl Staging {
    /// Refuses to replace a non-empty directory that is not a previous run.
    pub fn new(out: &Path) -> Result<Self, CliError> {
        if out.exists() {
            if !out.is_dir() {
                return Err(CliError::Usage(format!("{} exists and is not a directory", out.display())));
            }
            let empty = fs::read_dir(out).map_err(|e| io(out, e))?.next().is_none();
            if !empty && !out.join(MANIFEST).is_file() {
                return Err(CliError::Usage(format!(
                    "{} is not empty and holds no {MANIFEST}; refusing to overwrite",
                    out.display()
                )));
            }
        }
        let name = out
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("invalid output directory {}", out.display())))?;
        let tmp = out.with_file_name(format!(".{}.partial", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            tmp,
            done: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    /// Writes the manifest and moves the staged tree onto the output path.
    pub fn commit(mut self, manifest: Manifest) -> Result<(), CliError> {
        let value = manifest.finish(&self.tmp)?;
        let text = serde_json::to_string_pretty(&value).expect("manifest serializes") + "\n";
        let path = self.tmp.join(MANIFEST);
        fs::write(&path, text).map_err(|e| io(&path, e))?;
        if self.out.exists() {
            fs::remove_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        }
        fs::rename(&self.tmp, &self.out).map_err(|e| io(&self.out, e))?;
        self.done = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(meshcorr::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Inputs and effective configuration of a run. Output paths are not
/// recorded, so identical runs into different directories produce
/// identical trees.
pub struct Manifest {
    command: &'static str,
    config: BTreeMap<String, String>,
    inputs: Vec<(String, PathBuf)>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            config: BTreeMap::new(),
            inputs: Vec::new(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    /// Records every `key = value` line of a rendered config string.
    pub fn config_text(&mut self, text: &str) -> &mut Self {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config(k.trim(), v.trim());
            }
        }
        self
    }

    pub fn input(&mut self, role: &str, path: &Path) -> &mut Self {
        self.inputs.push((role.to_string(), path.to_path_buf()));
        self
    }

    fn finish(self, out: &Path) -> Result<Value, CliError> {
        let inputs = self
            .inputs
            .iter()
            .map(|(role, path)| {
                Ok(json!({
                    "role": role,
                    "path": path.display().to_string(),
                    "sha256": hash_path(path)?,
                }))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let outputs = files_under(out)?
            .into_iter()
            .map(|rel| {
                let digest = hash_file(&out.join(&rel))?;
                Ok((rel, Value::String(digest)))
            })
            .collect::<Result<serde_json::Map<_, _>, CliError>>()?;
        Ok(json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "inputs": inputs,
            "outputs": outputs,
        }))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Files under `root` as sorted `/`-separated relative paths.
fn files_under(root: &Path) -> Result<Vec<String>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| io(&dir, e))? {
            let path = entry.map_err(|e| io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Digest of a file, or of a directory as the digest of its sorted
/// `path\0digest\n` listing. The manifest of a previous run is skipped so
/// that a directory hashes the same wherever it was produced.
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut h = Sha256::new();
    for rel in files_under(path)? {
        if rel == MANIFEST {
            continue;
        }
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(hash_file(&path.join(&rel))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex(&h.finalize()))
}
