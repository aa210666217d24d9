//! Run manifests: every command materializes its resolved configuration,
//! seed, input checksums and output checksums into `manifest.json` inside
//! its run directory, so a run can be reproduced bit-for-bit from the
//! manifest alone (no wall-clock data is recorded in any artifact).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use varlm::checkpoint::sha256_file;
use varlm::error::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// Input path -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub struct RunContext {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl RunContext {
    /// Create the run directory. When `out` is absent a fresh
    /// `runs/<command>-<unix-seconds>-s<seed>` directory is used.
    pub fn create(
        command: &str,
        out: Option<PathBuf>,
        seed: Option<u64>,
        config: serde_json::Value,
    ) -> Result<Self> {
        let dir = match out {
            Some(d) => d,
            None => {
                let secs =
                    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                PathBuf::from("runs").join(format!("{command}-{secs}-s{}", seed.unwrap_or(0)))
            }
        };
        fs::create_dir_all(&dir)?;
        Ok(RunContext {
            dir,
            manifest: RunManifest {
                command: command.to_string(),
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
        })
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Record an output file (already written) under its run-relative name.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .strip_prefix(&self.dir)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| path.display().to_string());
        self.manifest.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| varlm::Error::Format(format!("manifest serialization: {e}")))?;
        fs::write(&path, json)?;
        Ok(path)
    }
}
