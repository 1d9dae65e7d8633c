use std::collections::HashMap;
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::Mutex;

use super::tuple::{Layout, Records};
use crate::data::{charged_mb, DataStore};
use crate::error::{Error, Result};
use crate::pilot::BackendKind;

/// Adaptor contract between the engine and a storage tier. Names are
/// engine-chosen item names inside a Pilot-Data space.
pub trait MemoryBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Check that `bytes` more fit into the space; `AllocFailed` otherwise.
    fn alloc(&self, space_id: &str, bytes: u64) -> Result<()>;

    fn store(&self, space_id: &str, name: &str, bytes: Bytes) -> Result<()>;

    fn fetch(&self, space_id: &str, name: &str) -> Result<Bytes>;

    fn fetch_records(&self, space_id: &str, name: &str, layout: Layout) -> Result<Arc<Records>>;

    /// Remove an item. Removing an absent item or an item on a released
    /// space is not an error.
    fn dealloc(&self, space_id: &str, name: &str) -> Result<()>;
}

fn alloc_in(data: &DataStore, space_id: &str, bytes: u64) -> Result<()> {
    let free = data
        .free_mb(space_id)
        .map_err(|e| Error::AllocFailed(format!("{space_id}: {e}")))?;
    let need = charged_mb(bytes);
    if need > free {
        return Err(Error::AllocFailed(format!("{space_id}: need {need} MB, {free} MB free")));
    }
    Ok(())
}

fn remove_from(data: &DataStore, space_id: &str, name: &str) -> Result<()> {
    let Ok((handle, adaptor)) = data.live_space(space_id) else {
        return Ok(());
    };
    match adaptor.remove(&handle, name) {
        Ok(()) | Err(Error::ItemNotFound(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

/// Partitions held in `mem://` spaces. Decoded partitions are cached, so
/// iterative jobs over the same data decode it once.
pub struct InMemoryBackend {
    data: Arc<DataStore>,
    cache: Mutex<HashMap<(String, String), Arc<Records>>>,
}

impl InMemoryBackend {
    pub fn new(data: Arc<DataStore>) -> Self {
        Self {
            data,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn forget(&self, space_id: &str, name: &str) {
        self.cache.lock().remove(&(space_id.to_owned(), name.to_owned()));
    }
}

impl MemoryBackend for InMemoryBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mem
    }

    fn alloc(&self, space_id: &str, bytes: u64) -> Result<()> {
        alloc_in(&self.data, space_id, bytes)
    }

    fn store(&self, space_id: &str, name: &str, bytes: Bytes) -> Result<()> {
        self.forget(space_id, name);
        let (handle, adaptor) = self.data.live_space(space_id)?;
        adaptor.put(&handle, name, bytes).map(|_| ())
    }

    fn fetch(&self, space_id: &str, name: &str) -> Result<Bytes> {
        let (handle, adaptor) = self.data.live_space(space_id)?;
        adaptor.get(&handle, name)
    }

    fn fetch_records(&self, space_id: &str, name: &str, layout: Layout) -> Result<Arc<Records>> {
        let key = (space_id.to_owned(), name.to_owned());
        if self.data.space(space_id).is_err() {
            self.cache.lock().retain(|(s, _), _| s != space_id);
            return Err(Error::UnknownSpace(space_id.to_owned()));
        }
        if let Some(r) = self.cache.lock().get(&key) {
            return Ok(r.clone());
        }
        let records = Arc::new(Records::decode(self.fetch(space_id, name)?, layout)?);
        self.cache.lock().insert(key, records.clone());
        Ok(records)
    }

    fn dealloc(&self, space_id: &str, name: &str) -> Result<()> {
        self.forget(space_id, name);
        remove_from(&self.data, space_id, name)
    }
}

/// Partitions held in `file://` spaces, read back and decoded on every
/// access.
pub struct FileBackend {
    data: Arc<DataStore>,
}

impl FileBackend {
    pub fn new(data: Arc<DataStore>) -> Self {
        Self { data }
    }
}

impl MemoryBackend for FileBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::File
    }

    fn alloc(&self, space_id: &str, bytes: u64) -> Result<()> {
        alloc_in(&self.data, space_id, bytes)
    }

    fn store(&self, space_id: &str, name: &str, bytes: Bytes) -> Result<()> {
        let (handle, adaptor) = self.data.live_space(space_id)?;
        adaptor.put(&handle, name, bytes).map(|_| ())
    }

    fn fetch(&self, space_id: &str, name: &str) -> Result<Bytes> {
        let (handle, adaptor) = self.data.live_space(space_id)?;
        adaptor.get(&handle, name)
    }

    fn fetch_records(&self, space_id: &str, name: &str, layout: Layout) -> Result<Arc<Records>> {
        Ok(Arc::new(Records::decode(self.fetch(space_id, name)?, layout)?))
    }

    fn dealloc(&self, space_id: &str, name: &str) -> Result<()> {
        remove_from(&self.data, space_id, name)
    }
}
