//! Storage adaptors and the data-unit store.
//!
//! Every adaptor implements [`StorageAdaptor`]. Space usage is accounted at
//! 1 MB granularity: an item of `n` bytes consumes `ceil(n / 2^20)` MB of
//! the space's reservation.
//!
//! Item checksums are XXH64 with seed 0 over the raw item bytes, rendered
//! as 16 lowercase hex digits (the `xxhsum -H1` format), so exported items
//! can be checked with stock tools.

mod file;
mod memory;
mod store;

use std::collections::BTreeMap;
use std::fmt;

use bytes::Bytes;
use xxhash_rust::xxh64::xxh64;

pub use file::FileAdaptor;
pub use memory::MemoryAdaptor;
pub use store::{
    DataStore, DataUnit, DuState, ItemInfo, ItemStatus, StoreConfig, StoreStats,
};

use crate::error::{Error, Result};
use crate::pilot::{AffinityLabels, BackendKind};

pub const MB: u64 = 1 << 20;

/// Megabytes charged for an item of `size` bytes.
pub fn charged_mb(size: u64) -> u64 {
    size.div_ceil(MB)
}

pub fn checksum(bytes: &[u8]) -> u64 {
    xxh64(bytes, 0)
}

pub fn checksum_hex(sum: u64) -> String {
    format!("{sum:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StorageTier {
    Memory,
    LocalDisk,
    SharedDisk,
}

impl StorageTier {
    pub fn is_volatile(self) -> bool {
        self == StorageTier::Memory
    }
}

impl fmt::Display for StorageTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StorageTier::Memory => "MEMORY",
            StorageTier::LocalDisk => "LOCAL_DISK",
            StorageTier::SharedDisk => "SHARED_DISK",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpaceHandle {
    pub id: String,
    pub kind: BackendKind,
    pub tier: StorageTier,
    pub labels: AffinityLabels,
    pub reserved_mb: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemRef {
    pub space_id: String,
    pub logical_name: String,
    pub size_bytes: u64,
}

/// The storage adaptor contract.
pub trait StorageAdaptor: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn capacity_mb(&self) -> u64;

    /// Reserve `reserved_mb` for a new space. Fails with
    /// `InsufficientSpace` when the tier cannot hold the reservation.
    fn create_space(
        &self,
        id: &str,
        tier: StorageTier,
        labels: AffinityLabels,
        reserved_mb: u64,
    ) -> Result<SpaceHandle>;

    fn put(&self, space: &SpaceHandle, logical_name: &str, bytes: Bytes) -> Result<ItemRef>;

    fn get(&self, space: &SpaceHandle, logical_name: &str) -> Result<Bytes>;

    /// Items in the space ordered by logical name.
    fn list(&self, space: &SpaceHandle) -> Result<Vec<ItemRef>>;

    fn remove(&self, space: &SpaceHandle, logical_name: &str) -> Result<()>;

    fn free_mb(&self, space: &SpaceHandle) -> Result<u64>;

    /// Drop the space and everything in it, returning its reservation to
    /// the tier.
    fn release_space(&self, space: &SpaceHandle) -> Result<()>;
}

/// Per-adaptor accounting of reservations and item sizes.
#[derive(Debug, Default)]
pub(crate) struct Ledger {
    reserved_total: u64,
    spaces: BTreeMap<String, SpaceUsage>,
}

#[derive(Debug, Default)]
pub(crate) struct SpaceUsage {
    reserved_mb: u64,
    used_mb: u64,
    items: BTreeMap<String, u64>,
}

impl Ledger {
    pub(crate) fn reserve(&mut self, id: &str, mb: u64, capacity: u64) -> Result<()> {
        if self.spaces.contains_key(id) {
            return Err(Error::DuplicateId(id.to_owned()));
        }
        if self.reserved_total + mb > capacity {
            return Err(Error::InsufficientSpace(format!(
                "{mb} MB requested, {} of {capacity} MB already reserved",
                self.reserved_total
            )));
        }
        self.reserved_total += mb;
        self.spaces.insert(
            id.to_owned(),
            SpaceUsage {
                reserved_mb: mb,
                ..Default::default()
            },
        );
        Ok(())
    }

    pub(crate) fn release(&mut self, id: &str) -> Result<()> {
        let usage = self
            .spaces
            .remove(id)
            .ok_or_else(|| Error::UnknownSpace(id.to_owned()))?;
        self.reserved_total -= usage.reserved_mb;
        Ok(())
    }

    fn usage(&mut self, id: &str) -> Result<&mut SpaceUsage> {
        self.spaces
            .get_mut(id)
            .ok_or_else(|| Error::UnknownSpace(id.to_owned()))
    }

    /// Charge a (re)write of `name` with `size` bytes. Returns the previous
    /// size so a failed write can be rolled back with [`Ledger::restore`].
    pub(crate) fn charge(&mut self, id: &str, name: &str, size: u64) -> Result<Option<u64>> {
        let usage = self.usage(id)?;
        let previous = usage.items.get(name).copied();
        let after = usage.used_mb - previous.map_or(0, charged_mb) + charged_mb(size);
        if after > usage.reserved_mb {
            return Err(Error::SpaceExhausted(format!(
                "{name}: {} MB needed, {} MB free in {id}",
                charged_mb(size),
                usage.reserved_mb - usage.used_mb
            )));
        }
        usage.used_mb = after;
        usage.items.insert(name.to_owned(), size);
        Ok(previous)
    }

    pub(crate) fn restore(&mut self, id: &str, name: &str, previous: Option<u64>) {
        if let Ok(usage) = self.usage(id) {
            if let Some(size) = usage.items.remove(name) {
                usage.used_mb -= charged_mb(size);
            }
            if let Some(size) = previous {
                usage.used_mb += charged_mb(size);
                usage.items.insert(name.to_owned(), size);
            }
        }
    }

    pub(crate) fn uncharge(&mut self, id: &str, name: &str) -> Result<()> {
        let usage = self.usage(id)?;
        let size = usage
            .items
            .remove(name)
            .ok_or_else(|| Error::ItemNotFound(format!("{id}/{name}")))?;
        usage.used_mb -= charged_mb(size);
        Ok(())
    }

    pub(crate) fn free_mb(&mut self, id: &str) -> Result<u64> {
        let usage = self.usage(id)?;
        Ok(usage.reserved_mb - usage.used_mb)
    }

    pub(crate) fn items(&mut self, id: &str) -> Result<Vec<(String, u64)>> {
        Ok(self
            .usage(id)?
            .items
            .iter()
            .map(|(n, s)| (n.clone(), *s))
            .collect())
    }

    pub(crate) fn size_of(&mut self, id: &str, name: &str) -> Result<u64> {
        self.usage(id)?
            .items
            .get(name)
            .copied()
            .ok_or_else(|| Error::ItemNotFound(format!("{id}/{name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accounting_granularity() {
        assert_eq!(charged_mb(0), 0);
        assert_eq!(charged_mb(1), 1);
        assert_eq!(charged_mb(MB), 1);
        assert_eq!(charged_mb(MB + 1), 2);
    }

    #[test]
    fn checksum_is_xxh64_seed_zero() {
        // Reference digests of the XXH64 test vectors.
        assert_eq!(checksum_hex(checksum(b"")), "ef46db3751d8e999");
        assert_eq!(checksum_hex(checksum(b"a")), "d24ec4f1a98c6e5b");
    }

    #[test]
    fn ledger_rollback() {
        let mut l = Ledger::default();
        l.reserve("s", 2, 10).unwrap();
        assert!(matches!(l.reserve("t", 9, 10), Err(Error::InsufficientSpace(_))));
        l.charge("s", "a", MB).unwrap();
        let prev = l.charge("s", "a", 2 * MB).unwrap();
        assert_eq!(prev, Some(MB));
        assert_eq!(l.free_mb("s").unwrap(), 0);
        l.restore("s", "a", prev);
        assert_eq!(l.free_mb("s").unwrap(), 1);
        assert!(matches!(l.charge("s", "b", 2 * MB), Err(Error::SpaceExhausted(_))));
        l.uncharge("s", "a").unwrap();
        assert_eq!(l.free_mb("s").unwrap(), 2);
    }
}
