// SPDX-License-Identifier: MIT OR Apache-2.0

//! Workbench sessions persisted as `sessions/{id}.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cloom_core::intervention::{InterventionPlan, WatchedFeature};
use serde::{Deserialize, Serialize};

use crate::error::ServeError;
use crate::group::Supernode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub report_id: String,
    pub plan: InterventionPlan,
    /// Trace id of the intervened input.
    pub target: String,
    #[serde(default)]
    pub watch: Vec<WatchedFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub id: String,
    pub graph: String,
    pub graph_hash: String,
    pub revision: u64,
    #[serde(default)]
    pub supernodes: Vec<Supernode>,
    #[serde(default)]
    pub history: Vec<HistoryEntry>,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
}

impl Session {
    pub fn new(id: String, graph: String, graph_hash: String) -> Self {
        Self {
            id,
            graph,
            graph_hash,
            revision: 0,
            supernodes: Vec::new(),
            history: Vec::new(),
            annotations: BTreeMap::new(),
        }
    }

    /// Fails unless `expected` is absent or equal to the current revision.
    pub fn check_revision(&self, expected: Option<u64>) -> Result<(), ServeError> {
        match expected {
            Some(e) if e != self.revision => Err(ServeError::Conflict {
                expected: e,
                current: self.revision,
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl SessionStore {
    pub fn open(dir: &Path) -> Result<Self, ServeError> {
        fs::create_dir_all(dir.join("reports"))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, id: &str) -> Result<PathBuf, ServeError> {
        if !valid_id(id) {
            return Err(ServeError::not_found("session", id));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    fn report_path(&self, id: &str) -> Result<PathBuf, ServeError> {
        if !valid_id(id) {
            return Err(ServeError::not_found("report", id));
        }
        Ok(self.dir.join("reports").join(format!("{id}.json")))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.path(id).map(|p| p.exists()).unwrap_or(false)
    }

    /// Next free id of the form `s{n}`.
    pub fn next_id(&self) -> Result<String, ServeError> {
        let mut n = 1usize;
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(k) = name.strip_prefix('s').and_then(|r| r.strip_suffix(".json")).and_then(|r| r.parse::<usize>().ok()) {
                n = n.max(k + 1);
            }
        }
        Ok(format!("s{n}"))
    }

    /// Writes the session with its revision incremented.
    pub fn save(&self, session: &mut Session) -> Result<(), ServeError> {
        session.revision += 1;
        let path = self.path(&session.id)?;
        write_atomic(&path, serde_json::to_string_pretty(session).map_err(cloom_core::CloomError::from)?.as_bytes())
    }

    /// Loads a session; with `graph_hash`, fails if the session was built on
    /// a different graph.
    pub fn load(&self, id: &str, graph_hash: Option<&str>) -> Result<Session, ServeError> {
        let path = self.path(id)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ServeError::not_found("session", id)),
            Err(e) => return Err(e.into()),
        };
        let s: Session = serde_json::from_str(&text).map_err(cloom_core::CloomError::from)?;
        if let Some(h) = graph_hash {
            if h != s.graph_hash {
                return Err(ServeError::Stale {
                    session: id.into(),
                    expected: s.graph_hash,
                    found: h.into(),
                });
            }
        }
        Ok(s)
    }

    pub fn save_report(&self, id: &str, bytes: &[u8]) -> Result<(), ServeError> {
        write_atomic(&self.report_path(id)?, bytes)
    }

    pub fn load_report(&self, id: &str) -> Result<Vec<u8>, ServeError> {
        match fs::read(self.report_path(id)?) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ServeError::not_found("report", id)),
            Err(e) => Err(e.into()),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServeError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
