//! Per-run output directory: `<root>/<timestamp>-<tag>/` holding the
//! resolved config, checkpoints, graph, posterior, result and metrics.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use coordet::em_engine::LoopRecord;
use coordet::pipeline::RunConfig;

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, tag: &str) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
        let mut path = root.join(format!("{stamp}-{tag}"));
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-{tag}-{k}"));
            k += 1;
        }
        Self::at(&path)
    }

    pub fn at(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path.join("checkpoints"))
            .with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let text = toml::to_string_pretty(cfg).context("serializing run config")?;
        std::fs::write(self.path.join("config.toml"), text)?;
        Ok(())
    }

    pub fn write_rounds(&self, rounds: &[LoopRecord]) -> Result<()> {
        let f = std::fs::File::create(self.path.join("em_rounds.json"))?;
        serde_json::to_writer_pretty(f, rounds)?;
        Ok(())
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join("checkpoints").join(name)
    }

    pub fn graph(&self) -> PathBuf {
        self.path.join("graph.csv")
    }

    pub fn q_matrix(&self) -> PathBuf {
        self.path.join("q_matrix.csv")
    }

    pub fn result(&self) -> PathBuf {
        self.path.join("result.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }
}
