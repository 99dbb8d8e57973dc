//! Run manifests: every command that writes artifacts records what produced
//! them next to the outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<PathBuf>,
    pub code_version: String,
    /// Effective config, embedded for reproducibility.
    pub config_toml: String,
}

impl RunManifest {
    pub fn begin(command: &str, cfg: &crate::PipelineConfig, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed,
            started_unix: now(),
            finished_unix: 0,
            artifacts: Vec::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_toml: cfg.to_toml(),
        }
    }

    pub fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = now();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("manifest_{}.json", self.command.replace(' ', "_")));
        std::fs::write(&path, serde_json::to_string_pretty(&self).expect("serializes"))?;
        Ok(path)
    }
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lands_next_to_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::PipelineConfig::default();
        let mut m = RunManifest::begin("train", &cfg, 7);
        m.add_artifact(&dir.path().join("x.safetensors"));
        let path = m.finish(dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "train");
        assert_eq!(back.config_hash, cfg.hash());
        assert_eq!(back.artifacts.len(), 1);
    }
}
