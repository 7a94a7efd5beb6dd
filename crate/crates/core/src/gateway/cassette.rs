//! Record/replay store for model interactions.
//!
//! A cassette is a newline-delimited JSON file, one
//! `{"digest", "role_kind", "response"}` record per line. The digest covers the
//! role, model name and the full rendered request (images by content hash), so
//! replay is exact: change one prompt byte and the lookup misses. Nothing but
//! digests and responses is written; credentials never reach the file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    ChatBackend, ChatRequest, DetectRequest, Detection, DetectorBackend, GatewayError, RoleKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub role_kind: RoleKind,
    /// A string for chat roles, a detection list for the detector.
    pub response: Value,
}

pub struct Cassette {
    path: PathBuf,
    entries: Mutex<HashMap<String, CassetteEntry>>,
    writer: Option<Mutex<File>>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::CassetteIo(format!("{}: {e}", path.display()))
}

impl Cassette {
    /// Opens a cassette for replay only.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let entries = read_entries(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            entries: Mutex::new(index(entries)),
            writer: None,
        })
    }

    /// Opens (or creates) a cassette that appends every new interaction.
    pub fn open_for_record(path: &Path) -> Result<Self, GatewayError> {
        let existing = if path.exists() {
            read_entries(path)?
        } else {
            Vec::new()
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            entries: Mutex::new(index(existing)),
            writer: Some(Mutex::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_recording(&self) -> bool {
        self.writer.is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, digest: &str) -> Option<CassetteEntry> {
        self.entries.lock().unwrap().get(digest).cloned()
    }

    /// Stores an entry, appending it to the file when recording. An entry
    /// whose digest is already present is ignored.
    pub fn record(&self, entry: CassetteEntry) -> Result<(), GatewayError> {
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(&entry.digest) {
            return Ok(());
        }
        if let Some(w) = &self.writer {
            let mut line = serde_json::to_string(&entry).map_err(|e| io_err(&self.path, e))?;
            line.push('\n');
            let mut f = w.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| io_err(&self.path, e))?;
        }
        entries.insert(entry.digest.clone(), entry);
        Ok(())
    }

    /// Entries sorted by digest.
    pub fn entries(&self) -> Vec<CassetteEntry> {
        let mut v: Vec<_> = self.entries.lock().unwrap().values().cloned().collect();
        v.sort_by(|a, b| a.digest.cmp(&b.digest));
        v
    }
}

fn index(entries: Vec<CassetteEntry>) -> HashMap<String, CassetteEntry> {
    let mut map = HashMap::with_capacity(entries.len());
    for e in entries {
        map.entry(e.digest.clone()).or_insert(e);
    }
    map
}

pub fn read_entries(path: &Path) -> Result<Vec<CassetteEntry>, GatewayError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CassetteEntry = serde_json::from_str(&line)
            .map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_entries(path: &Path, entries: &[CassetteEntry]) -> Result<(), GatewayError> {
    let mut buf = String::new();
    for e in entries {
        buf.push_str(&serde_json::to_string(e).map_err(|e| io_err(path, e))?);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Returns the names of environment variables whose current (non-empty)
/// value appears anywhere in the cassette file.
pub fn scan_for_secrets(path: &Path, env_var_names: &[String]) -> Result<Vec<String>, GatewayError> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(env_var_names
        .iter()
        .filter(|name| {
            std::env::var(name.as_str())
                .map(|v| !v.is_empty() && content.contains(&v))
                .unwrap_or(false)
        })
        .cloned()
        .collect())
}

/// Chat role served from a cassette. With an inner backend, misses are
/// forwarded and recorded; without one, replay is strict.
pub struct CassetteChat {
    model: String,
    inner: Option<Arc<dyn ChatBackend>>,
    cassette: Arc<Cassette>,
}

impl CassetteChat {
    pub fn recording(inner: Arc<dyn ChatBackend>, cassette: Arc<Cassette>) -> Self {
        Self {
            model: inner.model_name().to_string(),
            inner: Some(inner),
            cassette,
        }
    }

    pub fn replay(model: &str, cassette: Arc<Cassette>) -> Self {
        Self {
            model: model.to_string(),
            inner: None,
            cassette,
        }
    }
}

impl ChatBackend for CassetteChat {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, role: RoleKind, request: &ChatRequest) -> Result<String, GatewayError> {
        let digest = request.digest(role, &self.model);
        if let Some(hit) = self.cassette.lookup(&digest) {
            return hit.response.as_str().map(str::to_string).ok_or_else(|| {
                GatewayError::CassetteIo(format!("entry {digest} is not a chat response"))
            });
        }
        let Some(inner) = &self.inner else {
            return Err(GatewayError::CassetteMiss { role, digest });
        };
        let text = inner.complete(role, request)?;
        self.cassette.record(CassetteEntry {
            digest,
            role_kind: role,
            response: Value::String(text.clone()),
        })?;
        Ok(text)
    }
}

pub struct CassetteDetector {
    model: String,
    inner: Option<Arc<dyn DetectorBackend>>,
    cassette: Arc<Cassette>,
}

impl CassetteDetector {
    pub fn recording(inner: Arc<dyn DetectorBackend>, cassette: Arc<Cassette>) -> Self {
        Self {
            model: inner.model_name().to_string(),
            inner: Some(inner),
            cassette,
        }
    }

    pub fn replay(model: &str, cassette: Arc<Cassette>) -> Self {
        Self {
            model: model.to_string(),
            inner: None,
            cassette,
        }
    }
}

impl DetectorBackend for CassetteDetector {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, GatewayError> {
        let digest = request.digest(&self.model);
        if let Some(hit) = self.cassette.lookup(&digest) {
            return serde_json::from_value(hit.response).map_err(|e| {
                GatewayError::CassetteIo(format!("entry {digest} is not a detection list: {e}"))
            });
        }
        let Some(inner) = &self.inner else {
            return Err(GatewayError::CassetteMiss {
                role: RoleKind::Detector,
                digest,
            });
        };
        let dets = inner.detect(request)?;
        self.cassette.record(CassetteEntry {
            digest,
            role_kind: RoleKind::Detector,
            response: serde_json::to_value(&dets).expect("detections serialize"),
        })?;
        Ok(dets)
    }
}
