//! Persistent property store and device registry.
//!
//! Snapshot format, one entry per line, sorted by key:
//!
//! ```text
//! <namespace>:<name>\t<v1>\x1f<v2>...\n
//! ```
//!
//! A store opened on a path rewrites the snapshot (temp file + rename) after
//! every acknowledged mutation, so a put survives a process restart.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::DeviceName;

const FIELD_SEP: char = '\t';
const VALUE_SEP: char = '\u{1f}';

#[derive(Debug, Error)]
pub enum PropertyError {
    #[error("invalid property key {0:?}")]
    InvalidKey(String),
    #[error("invalid property value: {0}")]
    InvalidValue(String),
    #[error("invalid device name {0:?}")]
    InvalidName(String),
    #[error("snapshot line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("snapshot i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PropertyError {
    pub fn code(&self) -> &'static str {
        match self {
            PropertyError::InvalidKey(_) => "invalid-key",
            PropertyError::InvalidValue(_) => "invalid-value",
            PropertyError::InvalidName(_) => "invalid-name",
            PropertyError::Malformed { .. } => "malformed-snapshot",
            PropertyError::Io { .. } => "io-error",
        }
    }
}

impl PartialEq for PropertyError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

impl Eq for PropertyError {}

impl Clone for PropertyError {
    fn clone(&self) -> Self {
        match self {
            PropertyError::InvalidKey(s) => PropertyError::InvalidKey(s.clone()),
            PropertyError::InvalidValue(s) => PropertyError::InvalidValue(s.clone()),
            PropertyError::InvalidName(s) => PropertyError::InvalidName(s.clone()),
            PropertyError::Malformed { line, reason } => PropertyError::Malformed { line: *line, reason: reason.clone() },
            PropertyError::Io { path, source } => {
                PropertyError::Io { path: path.clone(), source: io::Error::new(source.kind(), source.to_string()) }
            }
        }
    }
}

fn is_segment(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'_' | b'-'))
}

/// `<namespace>:<name>`, where the namespace is one or more `/`-separated
/// segments and every segment and the name use `[a-z0-9_-]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PropertyKey {
    full: String,
    split: usize,
}

impl PropertyKey {
    pub fn new(namespace: &str, name: &str) -> Result<Self, PropertyError> {
        Self::parse(&format!("{namespace}:{name}"))
    }

    pub fn parse(text: &str) -> Result<Self, PropertyError> {
        let bad = || PropertyError::InvalidKey(text.to_string());
        let (ns, name) = text.split_once(':').ok_or_else(bad)?;
        if !is_segment(name) || !ns.split('/').all(is_segment) {
            return Err(bad());
        }
        Ok(PropertyKey { full: text.to_string(), split: ns.len() })
    }

    pub fn namespace(&self) -> &str {
        &self.full[..self.split]
    }

    pub fn name(&self) -> &str {
        &self.full[self.split + 1..]
    }

    pub fn as_str(&self) -> &str {
        &self.full
    }
}

impl fmt::Display for PropertyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.full)
    }
}

pub type PropertyValue = Vec<String>;

fn check_value(value: &PropertyValue) -> Result<(), PropertyError> {
    if value.is_empty() {
        return Err(PropertyError::InvalidValue("empty value list".into()));
    }
    for v in value {
        if v.contains([FIELD_SEP, VALUE_SEP, '\n', '\r']) {
            return Err(PropertyError::InvalidValue(format!("{v:?} contains a separator or newline")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub device: String,
    pub host: String,
    pub port: u16,
    pub server: String,
}

/// Shared property store. Reads are concurrent; writes are serialized.
#[derive(Debug)]
pub struct PropertyDb {
    map: RwLock<BTreeMap<PropertyKey, PropertyValue>>,
    path: Option<PathBuf>,
    write_lock: Mutex<()>,
}

impl PropertyDb {
    pub fn in_memory() -> Self {
        PropertyDb { map: RwLock::new(BTreeMap::new()), path: None, write_lock: Mutex::new(()) }
    }

    /// Opens (or creates) a store backed by the snapshot at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, PropertyError> {
        let path = path.into();
        let map = if path.exists() { read_snapshot(&path)? } else { BTreeMap::new() };
        Ok(PropertyDb { map: RwLock::new(map), path: Some(path), write_lock: Mutex::new(()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &PropertyKey) -> Option<PropertyValue> {
        self.map.read().expect("db lock").get(key).cloned()
    }

    pub fn put(&self, key: &PropertyKey, value: PropertyValue) -> Result<(), PropertyError> {
        check_value(&value)?;
        self.mutate(|m| {
            m.insert(key.clone(), value);
        })
    }

    pub fn delete(&self, key: &PropertyKey) -> Result<(), PropertyError> {
        self.mutate(|m| {
            m.remove(key);
        })
    }

    fn mutate(&self, f: impl FnOnce(&mut BTreeMap<PropertyKey, PropertyValue>)) -> Result<(), PropertyError> {
        let _serial = self.write_lock.lock().expect("db write lock");
        let mut next = self.map.read().expect("db lock").clone();
        f(&mut next);
        if let Some(path) = &self.path {
            write_snapshot(path, &next)?;
        }
        *self.map.write().expect("db lock") = next;
        Ok(())
    }

    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<PropertyKey> {
        self.map.read().expect("db lock").keys().filter(|k| k.as_str().starts_with(prefix)).cloned().collect()
    }

    pub fn snapshot(&self) -> BTreeMap<PropertyKey, PropertyValue> {
        self.map.read().expect("db lock").clone()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("db lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn export_snapshot(&self, path: &Path) -> Result<(), PropertyError> {
        write_snapshot(path, &self.map.read().expect("db lock"))
    }

    /// Replaces the content with the snapshot at `path`.
    pub fn import_snapshot(&self, path: &Path) -> Result<(), PropertyError> {
        let imported = read_snapshot(path)?;
        self.mutate(|m| *m = imported)
    }

    pub fn register_device(&self, entry: &RegistryEntry) -> Result<(), PropertyError> {
        let key = registry_key(&entry.device)?;
        if entry.host.is_empty() || entry.server.is_empty() {
            return Err(PropertyError::InvalidValue("registry host and server must be non-empty".into()));
        }
        self.put(&key, vec![entry.host.clone(), entry.port.to_string(), entry.server.clone()])
    }

    pub fn lookup_device(&self, device: &str) -> Result<Option<RegistryEntry>, PropertyError> {
        let key = registry_key(device)?;
        Ok(self.get(&key).and_then(|v| match v.as_slice() {
            [host, port, server] => Some(RegistryEntry {
                device: device.to_string(),
                host: host.clone(),
                port: port.parse().ok()?,
                server: server.clone(),
            }),
            _ => None,
        }))
    }

    /// Every registered device, sorted by name.
    pub fn registry(&self) -> Vec<RegistryEntry> {
        self.keys_with_prefix("registry/")
            .into_iter()
            .filter(|k| k.name() == "server")
            .filter_map(|k| {
                let device = k.namespace().strip_prefix("registry/")?.to_string();
                self.lookup_device(&device).ok().flatten()
            })
            .collect()
    }
}

fn registry_key(device: &str) -> Result<PropertyKey, PropertyError> {
    let name: DeviceName = device.parse().map_err(|_| PropertyError::InvalidName(device.to_string()))?;
    PropertyKey::new(&format!("registry/{name}"), "server")
}

/// Renders the snapshot text for a map.
pub fn render_snapshot<'a>(entries: impl IntoIterator<Item = (&'a PropertyKey, &'a PropertyValue)>) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k.as_str());
        out.push(FIELD_SEP);
        out.push_str(&v.join(&VALUE_SEP.to_string()));
        out.push('\n');
    }
    out
}

pub fn parse_snapshot(text: &str) -> Result<BTreeMap<PropertyKey, PropertyValue>, PropertyError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let (key, values) = line
            .split_once(FIELD_SEP)
            .ok_or_else(|| PropertyError::Malformed { line: line_no, reason: "missing tab separator".into() })?;
        let key = PropertyKey::parse(key)
            .map_err(|_| PropertyError::Malformed { line: line_no, reason: format!("invalid key {key:?}") })?;
        if values.contains(FIELD_SEP) {
            return Err(PropertyError::Malformed { line: line_no, reason: "extra tab".into() });
        }
        let value: PropertyValue = values.split(VALUE_SEP).map(str::to_string).collect();
        if map.insert(key.clone(), value).is_some() {
            return Err(PropertyError::Malformed { line: line_no, reason: format!("duplicate key {key}") });
        }
    }
    Ok(map)
}

fn read_snapshot(path: &Path) -> Result<BTreeMap<PropertyKey, PropertyValue>, PropertyError> {
    let text = fs::read_to_string(path).map_err(|source| PropertyError::Io { path: path.to_path_buf(), source })?;
    parse_snapshot(&text)
}

fn write_snapshot(path: &Path, map: &BTreeMap<PropertyKey, PropertyValue>) -> Result<(), PropertyError> {
    let io_err = |source| PropertyError::Io { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, render_snapshot(map)).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}
