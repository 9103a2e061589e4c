//! Out-of-band payload storage. Large bodies are parked in a connector and
//! only a [`DataRef`] travels inside the frame.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConnectorError {
    #[error("unknown connector `{0}`")]
    UnknownConnector(String),
    #[error("no data stored under key `{0}`")]
    MissingKey(String),
    #[error("data under key `{0}` failed its size or sha256 check")]
    ChecksumMismatch(String),
    #[error("connector i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRef {
    pub connector_id: String,
    pub key: String,
    pub size: u64,
    pub sha256: [u8; 32],
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn verify(r: &DataRef, bytes: Vec<u8>) -> Result<Vec<u8>, ConnectorError> {
    if bytes.len() as u64 != r.size || sha256(&bytes) != r.sha256 {
        return Err(ConnectorError::ChecksumMismatch(r.key.clone()));
    }
    Ok(bytes)
}

pub trait DataConnector: Send + Sync {
    fn id(&self) -> &str;
    fn put(&self, bytes: &[u8]) -> Result<DataRef, ConnectorError>;
    /// Fetches and verifies the referenced bytes.
    fn get(&self, r: &DataRef) -> Result<Vec<u8>, ConnectorError>;
    fn delete(&self, r: &DataRef) -> Result<(), ConnectorError>;
}

fn new_ref(id: &str, bytes: &[u8]) -> DataRef {
    DataRef {
        connector_id: id.to_string(),
        key: uuid::Uuid::new_v4().to_string(),
        size: bytes.len() as u64,
        sha256: sha256(bytes),
    }
}

#[derive(Default)]
pub struct MemoryConnector {
    id: String,
    store: Mutex<HashMap<String, Vec<u8>>>,
}

impl MemoryConnector {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), store: Mutex::default() }
    }

    pub fn len(&self) -> usize {
        self.store.lock().expect("connector lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Overwrites stored bytes; exists to exercise checksum failures.
    pub fn tamper(&self, key: &str, bytes: Vec<u8>) {
        self.store.lock().expect("connector lock").insert(key.to_string(), bytes);
    }
}

impl DataConnector for MemoryConnector {
    fn id(&self) -> &str {
        &self.id
    }

    fn put(&self, bytes: &[u8]) -> Result<DataRef, ConnectorError> {
        let r = new_ref(&self.id, bytes);
        self.store.lock().expect("connector lock").insert(r.key.clone(), bytes.to_vec());
        Ok(r)
    }

    fn get(&self, r: &DataRef) -> Result<Vec<u8>, ConnectorError> {
        let bytes = self
            .store
            .lock()
            .expect("connector lock")
            .get(&r.key)
            .cloned()
            .ok_or_else(|| ConnectorError::MissingKey(r.key.clone()))?;
        verify(r, bytes)
    }

    fn delete(&self, r: &DataRef) -> Result<(), ConnectorError> {
        self.store.lock().expect("connector lock").remove(&r.key);
        Ok(())
    }
}

/// One file per key under a root directory shared by both ends.
pub struct FsConnector {
    id: String,
    root: PathBuf,
}

impl FsConnector {
    pub fn new(id: impl Into<String>, root: impl Into<PathBuf>) -> Result<Self, ConnectorError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| ConnectorError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self { id: id.into(), root })
    }

    pub fn path_of(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.bin"))
    }
}

impl DataConnector for FsConnector {
    fn id(&self) -> &str {
        &self.id
    }

    fn put(&self, bytes: &[u8]) -> Result<DataRef, ConnectorError> {
        let r = new_ref(&self.id, bytes);
        let path = self.path_of(&r.key);
        let tmp = path.with_extension("part");
        fs::write(&tmp, bytes).map_err(|e| ConnectorError::Io(e.to_string()))?;
        fs::rename(&tmp, &path).map_err(|e| ConnectorError::Io(e.to_string()))?;
        Ok(r)
    }

    fn get(&self, r: &DataRef) -> Result<Vec<u8>, ConnectorError> {
        if r.key.contains(['/', '\\']) || r.key.starts_with('.') {
            return Err(ConnectorError::MissingKey(r.key.clone()));
        }
        match fs::read(self.path_of(&r.key)) {
            Ok(bytes) => verify(r, bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ConnectorError::MissingKey(r.key.clone())),
            Err(e) => Err(ConnectorError::Io(e.to_string())),
        }
    }

    fn delete(&self, r: &DataRef) -> Result<(), ConnectorError> {
        match fs::remove_file(self.path_of(&r.key)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(ConnectorError::Io(e.to_string())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Default)]
pub struct ConnectorRegistry {
    connectors: HashMap<String, Arc<dyn DataConnector>>,
}

impl ConnectorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, c: Arc<dyn DataConnector>) -> Self {
        self.register(c);
        self
    }

    pub fn register(&mut self, c: Arc<dyn DataConnector>) {
        self.connectors.insert(c.id().to_string(), c);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn DataConnector>, ConnectorError> {
        self.connectors.get(id).ok_or_else(|| ConnectorError::UnknownConnector(id.to_string()))
    }

    pub fn resolve(&self, r: &DataRef) -> Result<Vec<u8>, ConnectorError> {
        self.get(&r.connector_id)?.get(r)
    }
}
