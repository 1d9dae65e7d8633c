//! Applications on top of the engine: KMeans, an I/O benchmark and
//! declarative workload files, plus the CSV results they produce.

pub mod bench_io;
pub mod kmeans;
pub mod results;
pub mod workload;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use bench_io::{bench_io, BenchIoConfig, IoMeasurement, IoReport};
pub use kmeans::{generate_points, run_kmeans, KMeans, KMeansConfig, KMeansReport, Iteration};
pub use results::{BenchResult, BenchRow, Phase};
pub use workload::{run_workload, WorkloadReport, WorkloadSpec};

use crate::compute::{ComputeService, ServiceConfig};
use crate::data::{DataStore, SpaceHandle, StoreConfig};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::event::EventLog;
use crate::manager::{AffinityMode, Manager, ManagerConfig};
use crate::pilot::{PilotComputeDescription, PilotDataDescription, PilotState};

/// Sandbox root: `$PILOTKIT_ROOT`, else `pilotkit` under the system
/// temporary directory.
pub fn default_root() -> PathBuf {
    std::env::var_os("PILOTKIT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pilotkit"))
}

/// Where the engine keeps its partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineBackend {
    File,
    #[default]
    Memory,
}

impl EngineBackend {
    pub fn scheme(self) -> &'static str {
        match self {
            EngineBackend::File => "file://",
            EngineBackend::Memory => "mem://",
        }
    }
}

impl fmt::Display for EngineBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineBackend::File => "file",
            EngineBackend::Memory => "memory",
        })
    }
}

impl FromStr for EngineBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(EngineBackend::File),
            "memory" | "mem" => Ok(EngineBackend::Memory),
            other => Err(Error::UnknownBackend(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub mode: AffinityMode,
    /// Sync file-tier writes to the device.
    pub sync_file_writes: bool,
    pub poll_interval: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: AffinityMode::Soft,
            sync_file_writes: false,
            poll_interval: Duration::from_millis(20),
        }
    }
}

/// A data store, manager and compute service sharing one sandbox root.
pub struct Session {
    root: PathBuf,
    compute: Arc<ComputeService>,
}

impl Session {
    pub fn new(root: impl Into<PathBuf>, config: SessionConfig) -> Self {
        let root = root.into();
        let mut store = StoreConfig::new(root.join("tiers").join("file"));
        store.sync_file_writes = config.sync_file_writes;
        let data = Arc::new(DataStore::new(store, EventLog::new()));
        let manager = Arc::new(Manager::new(
            ManagerConfig {
                mode: config.mode,
                ..ManagerConfig::default()
            },
            data,
        ));
        let mut service = ServiceConfig::new(root.join("work"));
        service.poll_interval = config.poll_interval;
        Self {
            compute: Arc::new(ComputeService::new(manager, service)),
            root,
        }
    }

    /// A session with one RUNNING local pilot of `cores` cores.
    pub fn local(root: impl Into<PathBuf>, cores: u32) -> Result<Self> {
        let s = Self::new(root, SessionConfig::default());
        s.compute
            .create_pilot(PilotComputeDescription::new("local://", cores, 1024, 60))?;
        Ok(s)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn compute(&self) -> &Arc<ComputeService> {
        &self.compute
    }

    pub fn manager(&self) -> &Arc<Manager> {
        self.compute.manager()
    }

    pub fn data(&self) -> &Arc<DataStore> {
        self.compute.manager().data()
    }

    /// Cores of RUNNING pilots.
    pub fn running_cores(&self) -> u32 {
        self.manager()
            .pilots()
            .iter()
            .filter(|p| p.state == PilotState::Running)
            .map(|p| p.capacity)
            .sum()
    }

    pub fn create_space(&self, backend: EngineBackend, space_mb: u64) -> Result<SpaceHandle> {
        self.data()
            .create_pilot_data(&PilotDataDescription::new(backend.scheme(), space_mb))
    }

    pub fn engine(&self, backend: EngineBackend, spaces: Vec<String>) -> Result<Engine> {
        match backend {
            EngineBackend::Memory => Engine::in_memory(self.compute.clone(), spaces),
            EngineBackend::File => Engine::file_based(self.compute.clone(), spaces),
        }
    }
}
