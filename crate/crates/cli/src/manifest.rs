use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gama_core::formats::{file_sha256, write_json};
use gama_core::Result;
use serde::{Deserialize, Serialize};

/// Record of one command invocation, written next to its primary output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    /// Tool version and binary artifact format versions.
    pub versions: BTreeMap<String, String>,
}

pub struct Run {
    command: &'static str,
    started: Instant,
    inputs: BTreeMap<String, String>,
}

impl Run {
    /// Checksums the inputs before anything is written.
    pub fn start(command: &'static str, inputs: &[&Path]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for p in inputs {
            map.insert(p.display().to_string(), file_sha256(p)?);
        }
        Ok(Self {
            command,
            started: Instant::now(),
            inputs: map,
        })
    }

    pub fn finish(
        self,
        config: &impl Serialize,
        seed: u64,
        outputs: &[PathBuf],
        manifest: &Path,
    ) -> Result<RunManifest> {
        let mut out = BTreeMap::new();
        for p in outputs {
            out.insert(p.display().to_string(), file_sha256(p)?);
        }
        let mut versions = BTreeMap::new();
        versions.insert("gama".to_string(), gama_core::VERSION.to_string());
        for (magic, v) in gama_core::artifact_versions() {
            versions.insert(magic.to_string(), v.to_string());
        }
        let m = RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: self.inputs,
            outputs: out,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            versions,
        };
        write_json(manifest, &m)?;
        Ok(m)
    }
}

/// `out/x.gamc` → `out/x.run.json`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    primary.with_extension("run.json")
}
