//! Run manifests: every command drops a record of what it ran with — the
//! resolved configuration hash, the seeds it derived, fingerprints of each
//! input file, and the format versions of what it wrote — so a run can be
//! audited and reproduced.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use teledrive_core::{Error, Result};

pub const MANIFEST_FORMAT: &str = "TDGRUN1";
pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config_sha256: String,
    pub root_seed: u64,
    /// Per-stage seeds derived from the root.
    pub seeds: BTreeMap<String, u64>,
    /// Input path → content fingerprint.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the output directory) → format version.
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("sha256:{:x}", Sha256::digest(&bytes)))
}

pub fn sha256_text(text: &str) -> String {
    format!("sha256:{:x}", Sha256::digest(text.as_bytes()))
}

impl ManifestBuilder {
    pub fn new(command: &str, config_sha256: String, root_seed: u64) -> Self {
        Self {
            manifest: RunManifest {
                format: MANIFEST_FORMAT.to_string(),
                command: command.to_string(),
                config_sha256,
                root_seed,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                wall_clock_seconds: 0.0,
            },
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, stage: &str, value: u64) -> &mut Self {
        self.manifest.seeds.insert(stage.to_string(), value);
        self
    }

    /// Fingerprint one input file by content.
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn artifact(&mut self, rel_path: &str, format: &str) -> &mut Self {
        self.manifest
            .artifacts
            .insert(rel_path.to_string(), format.to_string());
        self
    }

    /// Stamp the elapsed wall clock and write the manifest beside the outputs.
    pub fn write(mut self, out_dir: &Path) -> Result<()> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// For commands with no output directory: print the manifest instead.
    pub fn print(mut self) -> Result<()> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string(&self.manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        println!("{text}");
        Ok(())
    }
}
