//! The run manifest: enough information to reproduce a command exactly.
//! Written as manifest.json next to the artifacts; JSON artifacts embed a
//! copy so every document records what produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::JobConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Fully resolved configuration, seed override applied.
    pub config: JobConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        config: JobConfig,
        out_dir: &Path,
    ) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed: config.seed,
            config,
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn record_input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn save(&self) -> std::io::Result<()> {
        let path = self.out_dir.join("manifest.json");
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }

    /// Summary embedded into JSON artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "command": self.command,
            "seed": self.seed,
            "version": self.version,
            "config_path": self.config_path,
        })
    }
}
