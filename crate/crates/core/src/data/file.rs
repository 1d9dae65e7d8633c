use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use bytes::Bytes;
use parking_lot::Mutex;

use super::{ItemRef, Ledger, SpaceHandle, StorageAdaptor, StorageTier};
use crate::error::{Error, Result};
use crate::pilot::{AffinityLabels, BackendKind};

/// File tier rooted at a local directory: items live at
/// `<root>/<space_id>/<logical_name>`.
pub struct FileAdaptor {
    root: PathBuf,
    capacity_mb: u64,
    sync: bool,
    ledger: Mutex<Ledger>,
}

impl FileAdaptor {
    /// `sync` forces every put to reach the device before returning.
    pub fn new(root: impl Into<PathBuf>, capacity_mb: u64, sync: bool) -> Self {
        Self {
            root: root.into(),
            capacity_mb,
            sync,
            ledger: Mutex::new(Ledger::default()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn item_path(&self, space: &SpaceHandle, logical_name: &str) -> PathBuf {
        self.root.join(&space.id).join(logical_name)
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial~");
        let tmp = PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        if self.sync {
            f.sync_data()?;
        }
        drop(f);
        fs::rename(&tmp, path)
    }
}

impl StorageAdaptor for FileAdaptor {
    fn kind(&self) -> BackendKind {
        BackendKind::File
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
        let mut ledger = self.ledger.lock();
        ledger.reserve(id, reserved_mb, self.capacity_mb)?;
        if let Err(e) = fs::create_dir_all(self.root.join(id)) {
            let _ = ledger.release(id);
            return Err(e.into());
        }
        Ok(SpaceHandle {
            id: id.to_owned(),
            kind: BackendKind::File,
            tier,
            labels,
            reserved_mb,
        })
    }

    fn put(&self, space: &SpaceHandle, logical_name: &str, bytes: Bytes) -> Result<ItemRef> {
        let size = bytes.len() as u64;
        let previous = self.ledger.lock().charge(&space.id, logical_name, size)?;
        if let Err(e) = self.write(&self.item_path(space, logical_name), &bytes) {
            self.ledger.lock().restore(&space.id, logical_name, previous);
            return Err(e.into());
        }
        Ok(ItemRef {
            space_id: space.id.clone(),
            logical_name: logical_name.to_owned(),
            size_bytes: size,
        })
    }

    fn get(&self, space: &SpaceHandle, logical_name: &str) -> Result<Bytes> {
        self.ledger.lock().size_of(&space.id, logical_name)?;
        match fs::read(self.item_path(space, logical_name)) {
            Ok(v) => Ok(Bytes::from(v)),
            Err(e) if e.kind() == ErrorKind::NotFound => {
                Err(Error::ItemNotFound(format!("{}/{logical_name}", space.id)))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self, space: &SpaceHandle) -> Result<Vec<ItemRef>> {
        Ok(self
            .ledger
            .lock()
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
        self.ledger.lock().uncharge(&space.id, logical_name)?;
        match fs::remove_file(self.item_path(space, logical_name)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn free_mb(&self, space: &SpaceHandle) -> Result<u64> {
        self.ledger.lock().free_mb(&space.id)
    }

    fn release_space(&self, space: &SpaceHandle) -> Result<()> {
        self.ledger.lock().release(&space.id)?;
        match fs::remove_dir_all(self.root.join(&space.id)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MemoryAdaptor;
    use proptest::prelude::*;

    fn adaptors(dir: &Path) -> Vec<Box<dyn StorageAdaptor>> {
        vec![
            Box::new(FileAdaptor::new(dir, 64, false)),
            Box::new(MemoryAdaptor::new(64)),
        ]
    }

    #[test]
    fn contract_on_every_adaptor() {
        let dir = tempfile::tempdir().unwrap();
        for a in adaptors(dir.path()) {
            let s = a.create_space("s1", StorageTier::LocalDisk, AffinityLabels::none(), 4).unwrap();
            assert_eq!(a.free_mb(&s).unwrap(), 4);
            a.put(&s, "b", Bytes::from_static(b"hello")).unwrap();
            a.put(&s, "a", Bytes::new()).unwrap();
            assert_eq!(a.free_mb(&s).unwrap(), 3);
            assert_eq!(&a.get(&s, "b").unwrap()[..], b"hello");
            let names: Vec<_> = a.list(&s).unwrap().into_iter().map(|i| i.logical_name).collect();
            assert_eq!(names, ["a", "b"]);
            a.remove(&s, "b").unwrap();
            assert!(matches!(a.get(&s, "b"), Err(Error::ItemNotFound(_))));
            assert_eq!(a.free_mb(&s).unwrap(), 4);
            assert!(matches!(
                a.put(&s, "big", Bytes::from(vec![0u8; 5 << 20])),
                Err(Error::SpaceExhausted(_))
            ));
            assert!(matches!(
                a.create_space("s2", StorageTier::LocalDisk, AffinityLabels::none(), 61),
                Err(Error::InsufficientSpace(_))
            ));
            a.release_space(&s).unwrap();
            assert!(matches!(a.get(&s, "a"), Err(Error::UnknownSpace(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn put_get_round_trip(data in prop::collection::vec(any::<u8>(), 0..4096)) {
            let dir = tempfile::tempdir().unwrap();
            for a in adaptors(dir.path()) {
                let s = a.create_space("s", StorageTier::Memory, AffinityLabels::none(), 1).unwrap();
                a.put(&s, "x", Bytes::from(data.clone())).unwrap();
                prop_assert_eq!(&a.get(&s, "x").unwrap()[..], &data[..]);
            }
        }
    }
}
