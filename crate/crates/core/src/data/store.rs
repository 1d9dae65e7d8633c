use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::Mutex;

use super::{
    checksum, FileAdaptor, MemoryAdaptor, SpaceHandle, StorageAdaptor, StorageTier,
};
use crate::error::{Error, Result};
use crate::event::{Entity, EventLog};
use crate::pilot::{
    AffinityLabels, BackendKind, DataUnitDescription, PilotDataDescription, Validate,
};

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Root used by `file://` locators with an empty target.
    pub default_file_root: PathBuf,
    /// Capacity of each file tier (one tier per distinct root directory).
    pub file_capacity_mb: u64,
    pub memory_capacity_mb: u64,
    /// Sync file writes to the device.
    pub sync_file_writes: bool,
}

impl StoreConfig {
    pub fn new(file_root: impl Into<PathBuf>) -> Self {
        Self {
            default_file_root: file_root.into(),
            file_capacity_mb: 64 * 1024,
            memory_capacity_mb: 16 * 1024,
            sync_file_writes: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DuState {
    New,
    Pending,
    Available,
    Failed,
}

impl fmt::Display for DuState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DuState::New => "NEW",
            DuState::Pending => "PENDING",
            DuState::Available => "AVAILABLE",
            DuState::Failed => "FAILED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemStatus {
    Imported,
    SourceNotFound,
    RolledBack,
    NotAttempted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemInfo {
    pub size_bytes: u64,
    pub checksum: u64,
}

/// Snapshot of a materialized data unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataUnit {
    pub id: String,
    pub state: DuState,
    pub labels: AffinityLabels,
    pub items: BTreeMap<String, ItemInfo>,
    /// Per-item outcome of the last import.
    pub item_status: BTreeMap<String, ItemStatus>,
    /// Spaces holding a full, not-known-corrupt replica.
    pub resident_spaces: BTreeSet<String>,
    /// Union of the labels of `resident_spaces`.
    pub resident_labels: BTreeSet<String>,
}

impl DataUnit {
    pub fn total_bytes(&self) -> u64 {
        self.items.values().map(|i| i.size_bytes).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    /// Item copies performed by `stage`.
    pub staged_items: u64,
    pub staged_bytes: u64,
}

struct SpaceEntry {
    handle: SpaceHandle,
    adaptor: Arc<dyn StorageAdaptor>,
    alive: bool,
    owner: Option<String>,
}

struct DuRecord {
    labels: AffinityLabels,
    desc: Option<DataUnitDescription>,
    state: DuState,
    items: BTreeMap<String, ItemInfo>,
    item_status: BTreeMap<String, ItemStatus>,
    replicas: BTreeSet<String>,
}

#[derive(Default)]
struct State {
    spaces: BTreeMap<String, SpaceEntry>,
    dus: BTreeMap<String, DuRecord>,
}

/// Storage key of a data-unit item inside a space.
pub(crate) fn item_key(du_id: &str, logical_name: &str) -> String {
    format!("{du_id}/{logical_name}")
}

/// Pilot-Data spaces and the data units placed on them.
pub struct DataStore {
    config: StoreConfig,
    log: EventLog,
    memory: Arc<MemoryAdaptor>,
    files: Mutex<HashMap<PathBuf, Arc<FileAdaptor>>>,
    state: Mutex<State>,
    next_space: AtomicU64,
    next_du: AtomicU64,
    staged_items: AtomicU64,
    staged_bytes: AtomicU64,
}

impl DataStore {
    pub fn new(config: StoreConfig, log: EventLog) -> Self {
        Self {
            memory: Arc::new(MemoryAdaptor::new(config.memory_capacity_mb)),
            config,
            log,
            files: Mutex::new(HashMap::new()),
            state: Mutex::new(State::default()),
            next_space: AtomicU64::new(1),
            next_du: AtomicU64::new(1),
            staged_items: AtomicU64::new(0),
            staged_bytes: AtomicU64::new(0),
        }
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            staged_items: self.staged_items.load(Ordering::Relaxed),
            staged_bytes: self.staged_bytes.load(Ordering::Relaxed),
        }
    }

    fn file_adaptor(&self, target: &str) -> Arc<FileAdaptor> {
        let root = if target.is_empty() {
            self.config.default_file_root.clone()
        } else {
            PathBuf::from(target)
        };
        self.files
            .lock()
            .entry(root.clone())
            .or_insert_with(|| {
                Arc::new(FileAdaptor::new(
                    root,
                    self.config.file_capacity_mb,
                    self.config.sync_file_writes,
                ))
            })
            .clone()
    }

    /// Set the capacity of the file tier rooted at `root`. Only effective
    /// before the first space is created there.
    pub fn configure_file_tier(&self, root: impl Into<PathBuf>, capacity_mb: u64) {
        let root = root.into();
        let adaptor = Arc::new(FileAdaptor::new(
            root.clone(),
            capacity_mb,
            self.config.sync_file_writes,
        ));
        self.files.lock().insert(root, adaptor);
    }

    // ---- spaces ------------------------------------------------------

    pub fn create_pilot_data(&self, pdd: &PilotDataDescription) -> Result<SpaceHandle> {
        self.create_owned_pilot_data(pdd, None)
    }

    /// Like [`DataStore::create_pilot_data`], recording `owner` (a pilot id)
    /// so the space can be torn down with that pilot.
    pub fn create_owned_pilot_data(
        &self,
        pdd: &PilotDataDescription,
        owner: Option<&str>,
    ) -> Result<SpaceHandle> {
        let pdd = pdd.clone().validate()?;
        let loc = pdd.locator()?;
        let labels = pdd.labels();
        let (adaptor, tier): (Arc<dyn StorageAdaptor>, _) = match loc.kind {
            BackendKind::Mem => (self.memory.clone(), StorageTier::Memory),
            BackendKind::File => {
                let tier = if labels.machine.is_some() {
                    StorageTier::LocalDisk
                } else {
                    StorageTier::SharedDisk
                };
                (self.file_adaptor(&loc.target), tier)
            }
            other => return Err(Error::UnknownBackend(format!("{other} has no storage adaptor"))),
        };
        let id = format!("pd-{:04}", self.next_space.fetch_add(1, Ordering::Relaxed));
        let handle = adaptor.create_space(&id, tier, labels, pdd.space_mb)?;
        self.log.record(
            Entity::Space(id.clone()),
            "NEW",
            "ALIVE",
            format!("{} {} {} MB labels={}", loc, tier, pdd.space_mb, handle.labels),
        );
        self.state.lock().spaces.insert(
            id,
            SpaceEntry {
                handle: handle.clone(),
                adaptor,
                alive: true,
                owner: owner.map(str::to_owned),
            },
        );
        Ok(handle)
    }

    pub fn space(&self, space_id: &str) -> Result<SpaceHandle> {
        self.state
            .lock()
            .spaces
            .get(space_id)
            .filter(|s| s.alive)
            .map(|s| s.handle.clone())
            .ok_or_else(|| Error::UnknownSpace(space_id.to_owned()))
    }

    /// Live spaces in id order.
    pub fn spaces(&self) -> Vec<SpaceHandle> {
        self.state
            .lock()
            .spaces
            .values()
            .filter(|s| s.alive)
            .map(|s| s.handle.clone())
            .collect()
    }

    pub fn free_mb(&self, space_id: &str) -> Result<u64> {
        let (handle, adaptor) = self.live_space(space_id)?;
        adaptor.free_mb(&handle)
    }

    pub(crate) fn live_space(&self, space_id: &str) -> Result<(SpaceHandle, Arc<dyn StorageAdaptor>)> {
        let st = self.state.lock();
        let entry = st
            .spaces
            .get(space_id)
            .filter(|s| s.alive)
            .ok_or_else(|| Error::UnknownSpace(space_id.to_owned()))?;
        Ok((entry.handle.clone(), entry.adaptor.clone()))
    }

    /// The best live space reachable from compute labeled `pilot`: highest
    /// locality score first, then most free space, then id.
    pub fn reachable_space(&self, pilot: &AffinityLabels) -> Option<SpaceHandle> {
        let st = self.state.lock();
        st.spaces
            .values()
            .filter(|s| s.alive && s.handle.labels.reachable_from(pilot))
            .map(|s| {
                let free = s.adaptor.free_mb(&s.handle).unwrap_or(0);
                (s.handle.labels.locality_score(pilot), free, &s.handle)
            })
            .max_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then_with(|| b.2.id.cmp(&a.2.id)))
            .map(|(_, _, h)| h.clone())
    }

    /// The live space best suited to hold data labeled `labels`: highest
    /// locality score first, then most free space, then id.
    pub fn best_space_for(&self, labels: &AffinityLabels) -> Option<SpaceHandle> {
        let st = self.state.lock();
        st.spaces
            .values()
            .filter(|s| s.alive)
            .map(|s| {
                let free = s.adaptor.free_mb(&s.handle).unwrap_or(0);
                (labels.locality_score(&s.handle.labels), free, &s.handle)
            })
            .max_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then_with(|| b.2.id.cmp(&a.2.id)))
            .map(|(_, _, h)| h.clone())
    }

    /// Tear down a space. Memory-tier contents are lost; replicas there stop
    /// counting and data units left without a replica fail on next access.
    pub fn release_space(&self, space_id: &str) -> Result<()> {
        let mut st = self.state.lock();
        let entry = st
            .spaces
            .get_mut(space_id)
            .filter(|s| s.alive)
            .ok_or_else(|| Error::UnknownSpace(space_id.to_owned()))?;
        entry.alive = false;
        entry.adaptor.release_space(&entry.handle)?;
        self.log.record(Entity::Space(space_id.to_owned()), "ALIVE", "RELEASED", "released");
        Ok(())
    }

    /// Terminate the spaces owned by `pilot_id`. Volatile (memory) spaces
    /// are released; disk spaces keep their contents.
    pub fn terminate_owner(&self, pilot_id: &str) -> Vec<String> {
        let doomed: Vec<String> = {
            let st = self.state.lock();
            st.spaces
                .values()
                .filter(|s| s.alive && s.owner.as_deref() == Some(pilot_id) && s.handle.tier.is_volatile())
                .map(|s| s.handle.id.clone())
                .collect()
        };
        for id in &doomed {
            let _ = self.release_space(id);
        }
        doomed
    }

    // ---- data units --------------------------------------------------

    fn new_du_id(&self) -> String {
        format!("du-{:06}", self.next_du.fetch_add(1, Ordering::Relaxed))
    }

    /// Register a data unit in state NEW without placing it.
    pub fn register_data_unit(&self, dud: &DataUnitDescription) -> Result<String> {
        let dud = dud.clone().validate()?;
        let id = self.new_du_id();
        self.state.lock().dus.insert(
            id.clone(),
            DuRecord {
                labels: dud.labels(),
                desc: Some(dud),
                state: DuState::New,
                items: BTreeMap::new(),
                item_status: BTreeMap::new(),
                replicas: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn contains(&self, du_id: &str) -> bool {
        self.state.lock().dus.contains_key(du_id)
    }

    pub fn data_unit_ids(&self) -> Vec<String> {
        self.state.lock().dus.keys().cloned().collect()
    }

    /// Register `dud` and import its items into `space_id`.
    pub fn import_data_unit(&self, dud: &DataUnitDescription, space_id: &str) -> Result<DataUnit> {
        let id = self.register_data_unit(dud)?;
        self.import_registered(&id, space_id)
    }

    /// Import a registered NEW data unit by reading each `source_url`.
    pub fn import_registered(&self, du_id: &str, space_id: &str) -> Result<DataUnit> {
        let desc = {
            let st = self.state.lock();
            let rec = st
                .dus
                .get(du_id)
                .ok_or_else(|| Error::UnknownDataUnit(du_id.to_owned()))?;
            if rec.state != DuState::New {
                return Err(Error::DuNotAvailable(format!("{du_id} is {}", rec.state)));
            }
            rec.desc.clone().unwrap_or_default()
        };
        let sources = desc
            .item_refs
            .iter()
            .map(|item| (item.logical_name.clone(), Source::Url(item.source_url.clone())))
            .collect();
        self.ingest(du_id, space_id, sources)
    }

    /// Fill a registered data unit that has no items yet.
    pub fn fill_data_unit(&self, du_id: &str, items: Vec<(String, Bytes)>, space_id: &str) -> Result<DataUnit> {
        {
            let st = self.state.lock();
            let rec = st
                .dus
                .get(du_id)
                .ok_or_else(|| Error::UnknownDataUnit(du_id.to_owned()))?;
            let empty = rec.items.is_empty() && matches!(rec.state, DuState::New | DuState::Available);
            if !empty {
                return Err(Error::DuNotAvailable(format!("{du_id} is {} and not empty", rec.state)));
            }
        }
        let sources = items.into_iter().map(|(n, b)| (n, Source::Inline(b))).collect();
        self.ingest(du_id, space_id, sources)
    }

    /// Create an AVAILABLE data unit from in-memory items.
    pub fn put_data_unit(
        &self,
        labels: AffinityLabels,
        items: Vec<(String, Bytes)>,
        space_id: &str,
    ) -> Result<DataUnit> {
        let mut dud = DataUnitDescription::new(
            items
                .iter()
                .map(|(name, bytes)| crate::pilot::DataItemRef {
                    source_url: "inline:".into(),
                    logical_name: name.clone(),
                    size_bytes: bytes.len() as u64,
                })
                .collect(),
        );
        dud.affinity_datacenter_label = labels.datacenter;
        dud.affinity_machine_label = labels.machine;
        let id = self.register_data_unit(&dud)?;
        let sources = items.into_iter().map(|(n, b)| (n, Source::Inline(b))).collect();
        self.ingest(&id, space_id, sources)
    }

    fn set_state(&self, du_id: &str, rec: &mut DuRecord, to: DuState, reason: &str) {
        if rec.state != to {
            self.log
                .record(Entity::DataUnit(du_id.to_owned()), rec.state, to, reason);
            rec.state = to;
        }
    }

    fn ingest(&self, du_id: &str, space_id: &str, sources: Vec<(String, Source)>) -> Result<DataUnit> {
        let (space, adaptor) = self.live_space(space_id)?;
        {
            let mut st = self.state.lock();
            let rec = st.dus.get_mut(du_id).expect("registered");
            self.set_state(du_id, rec, DuState::Pending, "import");
        }
        let mut written: Vec<String> = Vec::new();
        let mut items = BTreeMap::new();
        let mut status: BTreeMap<String, ItemStatus> = sources
            .iter()
            .map(|(n, _)| (n.clone(), ItemStatus::NotAttempted))
            .collect();
        let mut failure = None;
        for (name, source) in sources {
            let bytes = match source.read() {
                Ok(b) => b,
                Err(e) => {
                    status.insert(name, ItemStatus::SourceNotFound);
                    failure = Some(e);
                    break;
                }
            };
            let info = ItemInfo {
                size_bytes: bytes.len() as u64,
                checksum: checksum(&bytes),
            };
            match adaptor.put(&space, &item_key(du_id, &name), bytes) {
                Ok(_) => {
                    status.insert(name.clone(), ItemStatus::Imported);
                    written.push(name.clone());
                    items.insert(name, info);
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }

        let mut guard = self.state.lock();
        let st = &mut *guard;
        let rec = st.dus.get_mut(du_id).expect("registered");
        if let Some(err) = failure {
            for name in &written {
                let _ = adaptor.remove(&space, &item_key(du_id, name));
                status.insert(name.clone(), ItemStatus::RolledBack);
            }
            rec.item_status = status;
            self.set_state(du_id, rec, DuState::Failed, &format!("import failed: {err}"));
            return Err(err);
        }
        rec.items = items;
        rec.item_status = status;
        rec.replicas.insert(space_id.to_owned());
        self.log.record(
            Entity::Replica {
                du: du_id.to_owned(),
                space: space_id.to_owned(),
            },
            "ABSENT",
            "PRESENT",
            format!("import labels={}", space.labels),
        );
        self.set_state(du_id, rec, DuState::Available, "import complete");
        Ok(snapshot(du_id, rec, &st.spaces))
    }

    /// Drop replicas on dead spaces; fail the unit if none remain.
    fn refresh(&self, du_id: &str, st: &mut State) -> Result<()> {
        let State { spaces, dus } = st;
        let rec = dus
            .get_mut(du_id)
            .ok_or_else(|| Error::UnknownDataUnit(du_id.to_owned()))?;
        let lost: Vec<String> = rec
            .replicas
            .iter()
            .filter(|s| !spaces.get(*s).is_some_and(|e| e.alive))
            .cloned()
            .collect();
        for space in lost {
            rec.replicas.remove(&space);
            self.log.record(
                Entity::Replica {
                    du: du_id.to_owned(),
                    space,
                },
                "PRESENT",
                "ABSENT",
                "space released",
            );
        }
        if rec.state == DuState::Available && rec.replicas.is_empty() {
            self.set_state(du_id, rec, DuState::Failed, "no replica left");
        }
        Ok(())
    }

    pub fn data_unit(&self, du_id: &str) -> Result<DataUnit> {
        let mut st = self.state.lock();
        self.refresh(du_id, &mut st)?;
        Ok(snapshot(du_id, &st.dus[du_id], &st.spaces))
    }

    /// Read every item of the replica on `space_id`, verifying checksums.
    fn read_replica(
        &self,
        du_id: &str,
        rec: &DuRecord,
        entry: &SpaceEntry,
    ) -> Result<Vec<(String, Bytes)>> {
        rec.items
            .iter()
            .map(|(name, info)| {
                let bytes = entry.adaptor.get(&entry.handle, &item_key(du_id, name))?;
                if bytes.len() as u64 != info.size_bytes || checksum(&bytes) != info.checksum {
                    return Err(Error::ChecksumMismatch(format!(
                        "{du_id}/{name} on {}",
                        entry.handle.id
                    )));
                }
                Ok((name.clone(), bytes))
            })
            .collect()
    }

    fn drop_replica(&self, du_id: &str, rec: &mut DuRecord, space: &str, reason: &str) {
        if rec.replicas.remove(space) {
            self.log.record(
                Entity::Replica {
                    du: du_id.to_owned(),
                    space: space.to_owned(),
                },
                "PRESENT",
                "ABSENT",
                reason,
            );
        }
    }

    /// Ensure a full replica of `du_id` on `to_space`. A replica already
    /// present with intact checksums is reused without copying.
    pub fn stage(&self, du_id: &str, to_space: &str) -> Result<DataUnit> {
        let mut guard = self.state.lock();
        let st = &mut *guard;
        self.refresh(du_id, st)?;
        let target = st
            .spaces
            .get(to_space)
            .filter(|s| s.alive)
            .ok_or_else(|| Error::UnknownSpace(to_space.to_owned()))?;
        let rec = st.dus.get_mut(du_id).expect("refreshed");
        if rec.state != DuState::Available {
            return Err(Error::DuNotAvailable(format!("{du_id} is {}", rec.state)));
        }
        if rec.replicas.contains(to_space) {
            if self.read_replica(du_id, rec, target).is_ok() {
                return Ok(snapshot(du_id, rec, &st.spaces));
            }
            self.drop_replica(du_id, rec, to_space, "corrupt");
        }

        let candidates: Vec<String> = rec.replicas.iter().cloned().collect();
        let mut payload = None;
        let mut last_err = None;
        for source in candidates {
            match self.read_replica(du_id, rec, &st.spaces[&source]) {
                Ok(items) => {
                    payload = Some((source, items));
                    break;
                }
                Err(e) => {
                    self.drop_replica(du_id, rec, &source, "corrupt");
                    last_err = Some(e);
                }
            }
        }
        let Some((source, items)) = payload else {
            self.set_state(du_id, rec, DuState::Failed, "no intact replica");
            return Err(last_err.unwrap_or_else(|| Error::DuNotAvailable(du_id.to_owned())));
        };

        let mut written: Vec<String> = Vec::new();
        for (name, bytes) in items {
            let len = bytes.len() as u64;
            if let Err(e) = target.adaptor.put(&target.handle, &item_key(du_id, &name), bytes) {
                for n in &written {
                    let _ = target.adaptor.remove(&target.handle, &item_key(du_id, n));
                }
                return Err(e);
            }
            self.staged_items.fetch_add(1, Ordering::Relaxed);
            self.staged_bytes.fetch_add(len, Ordering::Relaxed);
            written.push(name);
        }
        rec.replicas.insert(to_space.to_owned());
        self.log.record(
            Entity::Replica {
                du: du_id.to_owned(),
                space: to_space.to_owned(),
            },
            "ABSENT",
            "PRESENT",
            format!("stage from {source} labels={}", target.handle.labels),
        );
        Ok(snapshot(du_id, rec, &st.spaces))
    }

    /// A live space holding a replica of `du_id` that is reachable from
    /// compute labeled `pilot`.
    pub fn reachable_replica(&self, du_id: &str, pilot: &AffinityLabels) -> Option<String> {
        let mut st = self.state.lock();
        self.refresh(du_id, &mut st).ok()?;
        let rec = &st.dus[du_id];
        if rec.state != DuState::Available {
            return None;
        }
        rec.replicas
            .iter()
            .find(|s| st.spaces[*s].handle.labels.reachable_from(pilot))
            .cloned()
    }

    /// Read one item from any intact replica, preferring `prefer`.
    pub fn read_item(&self, du_id: &str, logical_name: &str, prefer: Option<&str>) -> Result<Bytes> {
        let (info, sources) = {
            let mut st = self.state.lock();
            self.refresh(du_id, &mut st)?;
            let rec = &st.dus[du_id];
            if rec.state != DuState::Available {
                return Err(Error::DuNotAvailable(format!("{du_id} is {}", rec.state)));
            }
            let info = rec
                .items
                .get(logical_name)
                .cloned()
                .ok_or_else(|| Error::ItemNotFound(format!("{du_id}/{logical_name}")))?;
            let mut sources: Vec<_> = rec
                .replicas
                .iter()
                .map(|s| {
                    let e = &st.spaces[s];
                    (e.handle.clone(), e.adaptor.clone())
                })
                .collect();
            sources.sort_by_key(|(h, _)| Some(h.id.as_str()) != prefer);
            (info, sources)
        };
        let key = item_key(du_id, logical_name);
        for (handle, adaptor) in sources {
            if let Ok(bytes) = adaptor.get(&handle, &key) {
                if checksum(&bytes) == info.checksum {
                    return Ok(bytes);
                }
            }
        }
        Err(Error::ChecksumMismatch(format!("{du_id}/{logical_name}")))
    }

    /// Write every item of `du_id` to `dest` under its logical name.
    pub fn export_data_unit(&self, du_id: &str, dest: &Path) -> Result<()> {
        let names: Vec<String> = {
            let mut st = self.state.lock();
            self.refresh(du_id, &mut st)?;
            let rec = &st.dus[du_id];
            if rec.state != DuState::Available {
                return Err(Error::DuNotAvailable(format!("{du_id} is {}", rec.state)));
            }
            rec.items.keys().cloned().collect()
        };
        let not_writable = |e: std::io::Error| Error::DestNotWritable(format!("{}: {e}", dest.display()));
        fs::create_dir_all(dest).map_err(not_writable)?;
        for name in names {
            let bytes = self.read_item(du_id, &name, None)?;
            fs::write(dest.join(&name), &bytes).map_err(not_writable)?;
        }
        Ok(())
    }

    /// Overwrite one item of the replica on `space_id` with different bytes,
    /// leaving the recorded checksum untouched. Fault-injection hook.
    pub fn inject_corruption(&self, du_id: &str, space_id: &str, logical_name: &str) -> Result<()> {
        let (handle, adaptor) = self.live_space(space_id)?;
        let key = item_key(du_id, logical_name);
        let mut bytes = adaptor.get(&handle, &key)?.to_vec();
        match bytes.first_mut() {
            Some(b) => *b ^= 0xff,
            None => bytes.push(0),
        }
        adaptor.put(&handle, &key, Bytes::from(bytes))?;
        Ok(())
    }
}

fn snapshot(du_id: &str, rec: &DuRecord, spaces: &BTreeMap<String, SpaceEntry>) -> DataUnit {
    let resident_labels = rec
        .replicas
        .iter()
        .filter_map(|s| spaces.get(s))
        .flat_map(|s| s.handle.labels.iter().map(str::to_owned).collect::<Vec<_>>())
        .collect();
    DataUnit {
        id: du_id.to_owned(),
        state: rec.state,
        labels: rec.labels.clone(),
        items: rec.items.clone(),
        item_status: rec.item_status.clone(),
        resident_spaces: rec.replicas.clone(),
        resident_labels,
    }
}

enum Source {
    Url(String),
    Inline(Bytes),
}

impl Source {
    fn read(self) -> Result<Bytes> {
        match self {
            Source::Inline(b) => Ok(b),
            Source::Url(url) => {
                let path = url.strip_prefix("file://").unwrap_or(&url);
                fs::read(path)
                    .map(Bytes::from)
                    .map_err(|e| Error::SourceNotFound(format!("{url}: {e}")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MB;
    use crate::pilot::DataItemRef;

    fn store(dir: &Path) -> DataStore {
        DataStore::new(StoreConfig::new(dir.join("tier")), EventLog::new())
    }

    fn write_sources(dir: &Path, sizes: &[usize]) -> DataUnitDescription {
        DataUnitDescription::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let path = dir.join(format!("src-{i}"));
                    fs::write(&path, vec![i as u8; n]).unwrap();
                    DataItemRef {
                        source_url: format!("file://{}", path.display()),
                        logical_name: format!("item-{i}"),
                        size_bytes: n as u64,
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn mem_space_has_memory_tier() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let h = s.create_pilot_data(&PilotDataDescription::new("mem://", 64)).unwrap();
        assert_eq!(h.tier, StorageTier::Memory);
        assert!(matches!(
            s.create_pilot_data(&PilotDataDescription::new("batch-emu://x", 1)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn tier_capacity_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let root = dir.path().join("small");
        s.configure_file_tier(&root, 100);
        let url = format!("file://{}", root.display());
        assert!(matches!(
            s.create_pilot_data(&PilotDataDescription::new(&url, 101)),
            Err(Error::InsufficientSpace(_))
        ));
        s.create_pilot_data(&PilotDataDescription::new(&url, 40)).unwrap();
        s.create_pilot_data(&PilotDataDescription::new(&url, 60)).unwrap();
        assert!(matches!(
            s.create_pilot_data(&PilotDataDescription::new(&url, 1)),
            Err(Error::InsufficientSpace(_))
        ));
    }

    #[test]
    fn import_accounts_space() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let space = s.create_pilot_data(&PilotDataDescription::new("file://", 64)).unwrap();
        let sizes = [MB as usize; 3];
        let du = s.import_data_unit(&write_sources(dir.path(), &sizes), &space.id).unwrap();
        assert_eq!(du.state, DuState::Available);
        let charged: u64 = sizes.iter().map(|&n| crate::data::charged_mb(n as u64)).sum();
        assert_eq!(s.free_mb(&space.id).unwrap(), 64 - charged);
        assert_eq!(s.free_mb(&space.id).unwrap(), 61);

        let empty = s.import_data_unit(&DataUnitDescription::default(), &space.id).unwrap();
        assert_eq!(empty.state, DuState::Available);
        assert!(empty.items.is_empty());
    }

    #[test]
    fn missing_source_rolls_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let space = s.create_pilot_data(&PilotDataDescription::new("mem://", 8)).unwrap();
        let mut dud = write_sources(dir.path(), &[10, 20, 30]);
        dud.item_refs[2].source_url = "file:///nonexistent/pilotkit".into();
        let err = s.import_data_unit(&dud, &space.id).unwrap_err();
        assert!(matches!(err, Error::SourceNotFound(_)));
        let du = s.data_unit("du-000001").unwrap();
        assert_eq!(du.state, DuState::Failed);
        assert_eq!(du.item_status["item-0"], ItemStatus::RolledBack);
        assert_eq!(du.item_status["item-2"], ItemStatus::SourceNotFound);
        let (h, a) = s.live_space(&space.id).unwrap();
        assert!(a.list(&h).unwrap().is_empty());
        assert_eq!(s.free_mb(&space.id).unwrap(), 8);
    }

    #[test]
    fn space_exhausted_mid_import_rolls_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let space = s.create_pilot_data(&PilotDataDescription::new("mem://", 2)).unwrap();
        let dud = write_sources(dir.path(), &[MB as usize, MB as usize, 1]);
        assert!(matches!(s.import_data_unit(&dud, &space.id), Err(Error::SpaceExhausted(_))));
        assert_eq!(s.free_mb(&space.id).unwrap(), 2);
    }

    #[test]
    fn stage_adds_labels_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let disk = s
            .create_pilot_data(&PilotDataDescription::new("file://", 64).with_labels(&AffinityLabels::new(Some("dc1"), None)))
            .unwrap();
        let mem = s
            .create_pilot_data(&PilotDataDescription::new("mem://", 64).with_labels(&AffinityLabels::machine("mem-node")))
            .unwrap();
        let du = s.import_data_unit(&write_sources(dir.path(), &[5 * MB as usize, 5 * MB as usize]), &disk.id).unwrap();
        assert_eq!(du.resident_labels, BTreeSet::from(["dc1".to_string()]));

        let staged = s.stage(&du.id, &mem.id).unwrap();
        let expected: BTreeSet<String> = ["dc1", "mem-node"].into_iter().map(String::from).collect();
        assert_eq!(staged.resident_labels, expected);
        assert_eq!(s.stats().staged_bytes, 10 * MB);

        let before = s.stats();
        s.stage(&du.id, &mem.id).unwrap();
        assert_eq!(s.stats(), before);
    }

    #[test]
    fn corrupt_only_replica_fails() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let a = s.create_pilot_data(&PilotDataDescription::new("mem://", 8)).unwrap();
        let b = s.create_pilot_data(&PilotDataDescription::new("mem://", 8)).unwrap();
        let du = s.import_data_unit(&write_sources(dir.path(), &[100]), &a.id).unwrap();
        s.inject_corruption(&du.id, &a.id, "item-0").unwrap();
        assert!(matches!(s.stage(&du.id, &b.id), Err(Error::ChecksumMismatch(_))));
        assert_eq!(s.data_unit(&du.id).unwrap().state, DuState::Failed);
    }

    #[test]
    fn corrupt_replica_falls_back_to_another() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let spaces: Vec<_> = (0..3)
            .map(|_| s.create_pilot_data(&PilotDataDescription::new("mem://", 8)).unwrap())
            .collect();
        let du = s.import_data_unit(&write_sources(dir.path(), &[100]), &spaces[0].id).unwrap();
        s.stage(&du.id, &spaces[1].id).unwrap();
        s.inject_corruption(&du.id, &spaces[0].id, "item-0").unwrap();
        let staged = s.stage(&du.id, &spaces[2].id).unwrap();
        assert_eq!(staged.state, DuState::Available);
        assert_eq!(
            staged.resident_spaces,
            BTreeSet::from([spaces[1].id.clone(), spaces[2].id.clone()])
        );
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let space = s.create_pilot_data(&PilotDataDescription::new("mem://", 8)).unwrap();
        let du = s.import_data_unit(&write_sources(dir.path(), &[0, 7, 4096]), &space.id).unwrap();
        let dest = dir.path().join("out");
        s.export_data_unit(&du.id, &dest).unwrap();
        assert_eq!(fs::read_dir(&dest).unwrap().count(), du.items.len());

        let back = DataUnitDescription::new(
            du.items
                .keys()
                .map(|n| DataItemRef {
                    source_url: format!("file://{}", dest.join(n).display()),
                    logical_name: n.clone(),
                    size_bytes: 0,
                })
                .collect(),
        );
        let again = s.import_data_unit(&back, &space.id).unwrap();
        assert_eq!(again.items, du.items);
    }

    #[test]
    fn export_to_unwritable_destination() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let space = s.create_pilot_data(&PilotDataDescription::new("mem://", 8)).unwrap();
        let du = s.import_data_unit(&write_sources(dir.path(), &[3]), &space.id).unwrap();
        // a regular file in the parent position cannot become a directory,
        // which holds even for privileged users
        let blocker = dir.path().join("blocker");
        fs::write(&blocker, b"x").unwrap();
        assert!(matches!(
            s.export_data_unit(&du.id, &blocker.join("out")),
            Err(Error::DestNotWritable(_))
        ));
    }

    #[test]
    fn memory_pilot_termination_is_volatile() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let mem = s
            .create_owned_pilot_data(&PilotDataDescription::new("mem://", 8), Some("p1"))
            .unwrap();
        let disk = s
            .create_owned_pilot_data(&PilotDataDescription::new("file://", 8), Some("p1"))
            .unwrap();
        let only_mem = s.import_data_unit(&write_sources(dir.path(), &[10]), &mem.id).unwrap();
        let both = s.import_data_unit(&write_sources(dir.path(), &[20]), &mem.id).unwrap();
        s.stage(&both.id, &disk.id).unwrap();
        let only_disk = s.import_data_unit(&write_sources(dir.path(), &[30]), &disk.id).unwrap();

        assert_eq!(s.terminate_owner("p1"), vec![mem.id.clone()]);
        assert_eq!(s.data_unit(&only_mem.id).unwrap().state, DuState::Failed);
        assert_eq!(s.data_unit(&both.id).unwrap().state, DuState::Available);
        assert_eq!(s.data_unit(&only_disk.id).unwrap().state, DuState::Available);
        assert!(s.reachable_replica(&only_mem.id, &AffinityLabels::none()).is_none());
    }
}
