use std::collections::HashMap;

use bytes::Bytes;
use parking_lot::Mutex;

use super::{ItemRef, Ledger, SpaceHandle, StorageAdaptor, StorageTier};
use crate::error::{Error, Result};
use crate::pilot::{AffinityLabels, BackendKind};

/// In-process memory tier. Items are shared `Bytes`, so `get` does not copy.
pub struct MemoryAdaptor {
    capacity_mb: u64,
    state: Mutex<State>,
}

#[derive(Default)]
struct State {
    ledger: Ledger,
    items: HashMap<String, HashMap<String, Bytes>>,
}

impl MemoryAdaptor {
    pub fn new(capacity_mb: u64) -> Self {
        Self {
            capacity_mb,
            state: Mutex::new(State::default()),
        }
    }
}

impl StorageAdaptor for MemoryAdaptor {
    fn kind(&self) -> BackendKind {
        BackendKind::Mem
    }

    fn capacity_mb(&self) -> u64 {
        self.capacity_mb
    }

    fn create_space(
        &self,
        id: &str,
        tier: StorageTier,
        labels: AffinityLabels,
        reserved_mb: u64,
    ) -> Result<SpaceHandle> {
        let mut st = self.state.lock();
        st.ledger.reserve(id, reserved_mb, self.capacity_mb)?;
        st.items.insert(id.to_owned(), HashMap::new());
        Ok(SpaceHandle {
            id: id.to_owned(),
            kind: BackendKind::Mem,
            tier,
            labels,
            reserved_mb,
        })
    }

    fn put(&self, space: &SpaceHandle, logical_name: &str, bytes: Bytes) -> Result<ItemRef> {
        let mut st = self.state.lock();
        let size = bytes.len() as u64;
        st.ledger.charge(&space.id, logical_name, size)?;
        st.items
            .get_mut(&space.id)
            .ok_or_else(|| Error::UnknownSpace(space.id.clone()))?
            .insert(logical_name.to_owned(), bytes);
        Ok(ItemRef {
            space_id: space.id.clone(),
            logical_name: logical_name.to_owned(),
            size_bytes: size,
        })
    }

    fn get(&self, space: &SpaceHandle, logical_name: &str) -> Result<Bytes> {
        let st = self.state.lock();
        st.items
            .get(&space.id)
            .ok_or_else(|| Error::UnknownSpace(space.id.clone()))?
            .get(logical_name)
            .cloned()
            .ok_or_else(|| Error::ItemNotFound(format!("{}/{logical_name}", space.id)))
    }

    fn list(&self, space: &SpaceHandle) -> Result<Vec<ItemRef>> {
        let mut st = self.state.lock();
        Ok(st
            .ledger
            .items(&space.id)?
            .into_iter()
            .map(|(logical_name, size_bytes)| ItemRef {
                space_id: space.id.clone(),
                logical_name,
                size_bytes,
            })
            .collect())
    }

    fn remove(&self, space: &SpaceHandle, logical_name: &str) -> Result<()> {
        let mut st = self.state.lock();
        st.ledger.uncharge(&space.id, logical_name)?;
        if let Some(items) = st.items.get_mut(&space.id) {
            items.remove(logical_name);
        }
        Ok(())
    }

    fn free_mb(&self, space: &SpaceHandle) -> Result<u64> {
        self.state.lock().ledger.free_mb(&space.id)
    }

    fn release_space(&self, space: &SpaceHandle) -> Result<()> {
        let mut st = self.state.lock();
        st.ledger.release(&space.id)?;
        st.items.remove(&space.id);
        Ok(())
    }
}
