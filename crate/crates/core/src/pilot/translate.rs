use super::{BackendKind, PilotComputeDescription, DEFAULT_QUEUE};
use crate::error::{Error, Result};

/// Memory granted to the application-master container of a two-stage
/// allocation. The master holds memory only; it takes no worker cores.
pub const APP_MASTER_MEMORY_MB: u64 = 256;

/// Static capacity of a compute backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCapacity {
    pub n_nodes: u32,
    pub cores_per_node: u32,
    pub memory_per_node_mb: u64,
}

impl BackendCapacity {
    pub fn total_cores(&self) -> u64 {
        self.n_nodes as u64 * self.cores_per_node as u64
    }

    pub fn total_memory_mb(&self) -> u64 {
        self.n_nodes as u64 * self.memory_per_node_mb
    }
}

/// What a backend is asked for once a pilot description is translated into
/// its resource model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendRequest {
    Local {
        cores: u32,
        memory_mb: u64,
    },
    Batch {
        nodes: u32,
        cores_per_node: u32,
        walltime_min: u32,
        queue: String,
    },
    Container {
        workers: u32,
        cores_per_worker: u32,
        memory_per_worker_mb: u64,
        app_master_memory_mb: u64,
        walltime_min: u32,
        queue: String,
    },
}

impl BackendRequest {
    /// Cores the request provides once fully granted.
    pub fn cores(&self) -> u64 {
        match self {
            BackendRequest::Local { cores, .. } => *cores as u64,
            BackendRequest::Batch { nodes, cores_per_node, .. } => *nodes as u64 * *cores_per_node as u64,
            BackendRequest::Container { workers, cores_per_worker, .. } => {
                *workers as u64 * *cores_per_worker as u64
            }
        }
    }
}

pub fn translate_description(
    pcd: &PilotComputeDescription,
    kind: BackendKind,
    capacity: &BackendCapacity,
) -> Result<BackendRequest> {
    let queue = pcd.queue_name.clone().unwrap_or_else(|| DEFAULT_QUEUE.to_owned());
    match kind {
        BackendKind::Local => {
            if pcd.cores as u64 > capacity.total_cores() || pcd.memory_mb > capacity.total_memory_mb() {
                return Err(Error::CapacityUnsatisfiable(format!(
                    "{} cores / {} MB requested, host has {} cores / {} MB",
                    pcd.cores,
                    pcd.memory_mb,
                    capacity.total_cores(),
                    capacity.total_memory_mb()
                )));
            }
            Ok(BackendRequest::Local {
                cores: pcd.cores,
                memory_mb: pcd.memory_mb,
            })
        }
        BackendKind::BatchEmu => {
            let nodes = pcd.cores.div_ceil(capacity.cores_per_node);
            if nodes > capacity.n_nodes {
                return Err(Error::CapacityUnsatisfiable(format!(
                    "{nodes} nodes requested on a {}-node cluster",
                    capacity.n_nodes
                )));
            }
            Ok(BackendRequest::Batch {
                nodes,
                cores_per_node: capacity.cores_per_node,
                walltime_min: pcd.walltime_min,
                queue,
            })
        }
        BackendKind::YarnEmu => {
            let workers = pcd.cores;
            let per_worker = pcd.memory_mb.div_ceil(workers as u64);
            let fits_node = per_worker <= capacity.memory_per_node_mb
                && APP_MASTER_MEMORY_MB <= capacity.memory_per_node_mb;
            let total = per_worker * workers as u64 + APP_MASTER_MEMORY_MB;
            if !fits_node || workers as u64 > capacity.total_cores() || total > capacity.total_memory_mb() {
                return Err(Error::CapacityUnsatisfiable(format!(
                    "{workers} containers of {per_worker} MB plus a {APP_MASTER_MEMORY_MB} MB master \
                     exceed {} nodes × ({} cores, {} MB)",
                    capacity.n_nodes, capacity.cores_per_node, capacity.memory_per_node_mb
                )));
            }
            Ok(BackendRequest::Container {
                workers,
                cores_per_worker: 1,
                memory_per_worker_mb: per_worker,
                app_master_memory_mb: APP_MASTER_MEMORY_MB,
                walltime_min: pcd.walltime_min,
                queue,
            })
        }
        BackendKind::File | BackendKind::Mem => Err(Error::UnknownBackend(format!(
            "{kind} is a storage backend"
        ))),
    }
}
