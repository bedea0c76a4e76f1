//! Run manifests: what a command was asked to do and what it wrote.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical (key-sorted) JSON of the command's settings.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 over the input dataset files, when the command reads a store.
    pub dataset_fingerprint: Option<String>,
    pub checkpoints: Vec<String>,
    pub files: Vec<String>,
}

/// Canonical JSON: object keys sorted at every level, no whitespace.
pub fn canonical(value: &serde_json::Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled;
    // rebuild anyway so the guarantee does not hinge on a feature flag.
    fn sort(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                serde_json::Value::Object(keys.into_iter().map(|k| (k.clone(), sort(&m[k]))).collect())
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(value).to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the files in order, each prefixed by its name.
pub fn fingerprint(files: &[PathBuf]) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let bytes = std::fs::read(f)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects output paths as a command writes them.
pub struct Outputs {
    pub dir: PathBuf,
    files: Vec<String>,
    checkpoints: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `name` under the output directory and records it.
    pub fn write(&mut self, name: &str, body: impl AsRef<[u8]>) -> std::io::Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, body)?;
        self.record(name);
        Ok(p)
    }

    /// Records a file written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn record_checkpoint(&mut self, name: &str) {
        self.record(name);
        self.checkpoints.push(name.to_string());
    }

    pub fn finish(
        mut self,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        dataset_fingerprint: Option<String>,
    ) -> std::io::Result<RunManifest> {
        self.files.push(FILE.to_string());
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: sha256_hex(canonical(&config).as_bytes()),
            config,
            seed,
            dataset_fingerprint,
            checkpoints: self.checkpoints,
            files: self.files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        std::fs::write(self.dir.join(FILE), text + "\n")?;
        Ok(manifest)
    }
}
