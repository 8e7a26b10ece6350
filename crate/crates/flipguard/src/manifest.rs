use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Hash of the source that produced a run.
pub const CODE_FINGERPRINT: &str = env!("FLIPGUARD_CODE_FINGERPRINT");

/// Everything needed to re-execute a run: the stage, its fully resolved
/// config, the seeds and the input artifacts. Outputs and timing are
/// recorded for bookkeeping only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// Arguments as originally invoked, program name excluded.
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Role -> file the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Role -> file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub code_fingerprint: String,
    pub duration_secs: f64,
    /// Stage summary numbers (evaluation statistics, final losses).
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        io::write_bytes(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Accepts the manifest file itself or the run directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        if !file.exists() {
            return Err(Error::MissingArtifact { path: file, what: "run manifest" });
        }
        Ok(serde_json::from_slice(&io::read_bytes(&file)?)?)
    }

    pub fn output(&self, role: &str) -> Result<&Path> {
        self.outputs
            .get(role)
            .map(Path::new)
            .ok_or_else(|| Error::MissingArtifact { path: format!("{}:{role}", self.run_id).into(), what: "manifest output" })
    }

    pub fn input(&self, role: &str) -> Option<&Path> {
        self.inputs.get(role).map(Path::new)
    }
}
