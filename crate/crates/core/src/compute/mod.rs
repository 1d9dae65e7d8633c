//! Compute backends and the agents that run units inside pilots.
//!
//! A [`ComputeBackend`] turns a translated [`BackendRequest`] into an
//! allocation made of [`Container`]s. Three backends exist: the local
//! process pool, an emulated batch scheduler (queue wait, whole nodes) and
//! an emulated two-stage container allocator (application master first,
//! then workers granted one per scheduler tick, preemptible). The
//! [`ComputeService`] ties backends to the [`Manager`](crate::manager::Manager):
//! it registers pilots, starts one agent per container and feeds backend
//! events (grants, preemptions, timeouts) back into the registry.

mod agent;
mod cluster;
mod emulator;
mod local;
mod service;

use std::fmt;
use std::time::Duration;

pub use agent::{TaskContext, TaskFn};
pub use cluster::{ClusterEndpoint, RuntimeKind};
pub use emulator::{ClusterConfig, EmulatedCluster, QueueWait};
pub use local::LocalBackend;
pub use service::{ComputeService, ServiceConfig};

use crate::error::Result;
use crate::pilot::{BackendCapacity, BackendKind, BackendRequest, PilotState};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AllocationHandle {
    pub pilot_id: String,
    pub backend: BackendKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContainerRole {
    AppMaster,
    Worker,
}

impl fmt::Display for ContainerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContainerRole::AppMaster => "APP_MASTER",
            ContainerRole::Worker => "WORKER",
        })
    }
}

/// A slice of one node granted to an allocation. Local and batch
/// allocations are described as one worker container per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub container_id: String,
    pub cores: u32,
    pub memory_mb: u64,
    pub role: ContainerRole,
    pub node_label: String,
}

/// State changes produced by a backend's scheduler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendEvent {
    /// The allocation reached RUNNING with these worker containers.
    Running {
        pilot_id: String,
        containers: Vec<Container>,
    },
    /// Another worker joined a RUNNING allocation.
    WorkerUp { pilot_id: String, container: Container },
    /// The allocation failed (e.g. it stayed pending past the timeout).
    Failed { pilot_id: String, reason: String },
}

/// Common allocation interface of all compute backends.
pub trait ComputeBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn capacity_info(&self) -> BackendCapacity;

    fn allocate(&self, pilot_id: &str, request: &BackendRequest) -> Result<AllocationHandle>;

    fn status(&self, handle: &AllocationHandle) -> Result<PilotState>;

    /// Live containers of the allocation, application master included.
    fn containers(&self, handle: &AllocationHandle) -> Result<Vec<Container>>;

    /// Release the allocation. Idempotent.
    fn cancel(&self, handle: &AllocationHandle) -> Result<()>;

    /// Revoke one worker container. Returns `None` when it was already
    /// revoked.
    fn preempt(&self, handle: &AllocationHandle, container_id: &str) -> Result<Option<Container>> {
        let _ = handle;
        Err(crate::Error::UnknownContainer(container_id.to_owned()))
    }

    /// Advance the scheduler by one tick.
    fn tick(&self) -> Vec<BackendEvent> {
        Vec::new()
    }

    fn tick_interval(&self) -> Option<Duration> {
        None
    }
}
