use std::collections::HashMap;

use parking_lot::Mutex;

use super::{AllocationHandle, ComputeBackend, Container, ContainerRole};
use crate::error::{Error, Result};
use crate::pilot::{BackendCapacity, BackendKind, BackendRequest, PilotState};

/// Pool of logical cores on this host. Allocations are RUNNING as soon as
/// they are made.
pub struct LocalBackend {
    capacity: BackendCapacity,
    allocs: Mutex<HashMap<String, Alloc>>,
}

struct Alloc {
    state: PilotState,
    container: Container,
}

impl LocalBackend {
    pub fn new(cores: u32, memory_mb: u64) -> Self {
        Self {
            capacity: BackendCapacity {
                n_nodes: 1,
                cores_per_node: cores,
                memory_per_node_mb: memory_mb,
            },
            allocs: Mutex::new(HashMap::new()),
        }
    }

    fn in_use(allocs: &HashMap<String, Alloc>) -> (u64, u64) {
        allocs
            .values()
            .filter(|a| a.state == PilotState::Running)
            .fold((0, 0), |(c, m), a| (c + a.container.cores as u64, m + a.container.memory_mb))
    }
}

impl Default for LocalBackend {
    /// 64 logical cores and 64 GiB, independent of the physical host.
    fn default() -> Self {
        Self::new(64, 64 * 1024)
    }
}

impl ComputeBackend for LocalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Local
    }

    fn capacity_info(&self) -> BackendCapacity {
        self.capacity
    }

    fn allocate(&self, pilot_id: &str, request: &BackendRequest) -> Result<AllocationHandle> {
        let BackendRequest::Local { cores, memory_mb } = *request else {
            return Err(Error::CapacityUnsatisfiable(format!("{request:?} is not a local request")));
        };
        let mut allocs = self.allocs.lock();
        if allocs.contains_key(pilot_id) {
            return Err(Error::DuplicateId(pilot_id.to_owned()));
        }
        let (used_cores, used_mem) = Self::in_use(&allocs);
        if used_cores + cores as u64 > self.capacity.total_cores()
            || used_mem + memory_mb > self.capacity.total_memory_mb()
        {
            return Err(Error::CapacityUnsatisfiable(format!(
                "{cores} cores / {memory_mb} MB requested, {} cores / {} MB free",
                self.capacity.total_cores() - used_cores,
                self.capacity.total_memory_mb().saturating_sub(used_mem)
            )));
        }
        allocs.insert(
            pilot_id.to_owned(),
            Alloc {
                state: PilotState::Running,
                container: Container {
                    container_id: format!("{pilot_id}.c000"),
                    cores,
                    memory_mb,
                    role: ContainerRole::Worker,
                    node_label: "localhost".into(),
                },
            },
        );
        Ok(AllocationHandle {
            pilot_id: pilot_id.to_owned(),
            backend: BackendKind::Local,
        })
    }

    fn status(&self, handle: &AllocationHandle) -> Result<PilotState> {
        self.allocs
            .lock()
            .get(&handle.pilot_id)
            .map(|a| a.state)
            .ok_or_else(|| Error::UnknownPilot(handle.pilot_id.clone()))
    }

    fn containers(&self, handle: &AllocationHandle) -> Result<Vec<Container>> {
        let allocs = self.allocs.lock();
        let a = allocs
            .get(&handle.pilot_id)
            .ok_or_else(|| Error::UnknownPilot(handle.pilot_id.clone()))?;
        Ok(if a.state == PilotState::Running {
            vec![a.container.clone()]
        } else {
            Vec::new()
        })
    }

    fn cancel(&self, handle: &AllocationHandle) -> Result<()> {
        let mut allocs = self.allocs.lock();
        let a = allocs
            .get_mut(&handle.pilot_id)
            .ok_or_else(|| Error::UnknownPilot(handle.pilot_id.clone()))?;
        if !a.state.is_terminal() {
            a.state = PilotState::Canceled;
        }
        Ok(())
    }
}
