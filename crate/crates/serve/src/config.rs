// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServeError;

/// Contents of `cloom-serve.toml`. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    pub model: PathBuf,
    pub bank: PathBuf,
    /// Directory of exported graph JSON files; the file stem is the graph id.
    pub graphs: PathBuf,
    #[serde(default)]
    pub store: Option<PathBuf>,
    /// JSON-lines sample files used to resolve inputs and heatmaps.
    #[serde(default)]
    pub data: Vec<PathBuf>,
    #[serde(default = "default_sessions")]
    pub sessions: PathBuf,
    /// Extra allowed CORS origins beyond `localhost` and `127.0.0.1`.
    #[serde(default)]
    pub allowed_origins: Vec<String>,
    /// Side of the square PNG returned for heatmaps.
    #[serde(default = "default_heatmap_size")]
    pub heatmap_size: usize,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    7878
}

fn default_sessions() -> PathBuf {
    PathBuf::from("sessions")
}

fn default_heatmap_size() -> usize {
    96
}

impl ServeConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ServeError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ServeError::Config(e.to_string()))?;
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServeError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model);
        fix(&mut self.bank);
        fix(&mut self.graphs);
        fix(&mut self.sessions);
        if let Some(s) = self.store.as_mut() {
            fix(s);
        }
        self.data.iter_mut().for_each(fix);
    }
}
