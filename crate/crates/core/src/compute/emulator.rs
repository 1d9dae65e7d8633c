use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AllocationHandle, BackendEvent, ComputeBackend, Container, ContainerRole};
use crate::error::{Error, FieldError, Result};
use crate::event::{Entity, EventLog};
use crate::pilot::{BackendCapacity, BackendKind, BackendRequest, PilotState};

/// How long an allocation sits in the emulated queue before resources are
/// considered, in virtual milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueWait {
    Fixed(u64),
    Uniform { low: u64, high: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_nodes: u32,
    pub cores_per_node: u32,
    pub memory_per_node_mb: u64,
    #[serde(default = "no_wait")]
    pub queue_wait_ms: QueueWait,
    #[serde(default)]
    pub preemption_enabled: bool,
    /// Scheduler tick; one worker container is granted per tick.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    /// Fail allocations still pending after this many virtual ms.
    #[serde(default)]
    pub allocation_timeout_ms: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

fn no_wait() -> QueueWait {
    QueueWait::Fixed(0)
}

fn default_tick_ms() -> u64 {
    10
}

impl ClusterConfig {
    pub fn new(n_nodes: u32, cores_per_node: u32, memory_per_node_mb: u64) -> Self {
        Self {
            n_nodes,
            cores_per_node,
            memory_per_node_mb,
            queue_wait_ms: no_wait(),
            preemption_enabled: false,
            tick_ms: default_tick_ms(),
            allocation_timeout_ms: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut positive = |field, ok: bool| {
            if !ok {
                errors.push(FieldError::new(field, "must be positive"));
            }
        };
        positive("n_nodes", self.n_nodes > 0);
        positive("cores_per_node", self.cores_per_node > 0);
        positive("memory_per_node_mb", self.memory_per_node_mb > 0);
        positive("tick_ms", self.tick_ms > 0);
        if let QueueWait::Uniform { low, high } = self.queue_wait_ms {
            if low > high {
                errors.push(FieldError::new("queue_wait_ms", "low must not exceed high"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// In-process cluster scheduler emulating a batch system (`batch-emu`) or a
/// two-stage container allocator (`yarn-emu`). Time only moves on
/// [`ComputeBackend::tick`], so runs are reproducible for a given seed.
pub struct EmulatedCluster {
    kind: BackendKind,
    config: ClusterConfig,
    log: EventLog,
    state: Mutex<State>,
}

struct State {
    now_ms: u64,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    allocs: BTreeMap<String, Alloc>,
    order: Vec<String>,
}

struct Node {
    label: String,
    free_cores: u32,
    free_mem: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Queued,
    MasterGranted,
    Workers,
}

struct Alloc {
    request: BackendRequest,
    state: PilotState,
    submitted_ms: u64,
    ready_ms: u64,
    stage: Stage,
    containers: Vec<Container>,
    revoked: HashSet<String>,
    next_container: u32,
    workers_granted: u32,
}

impl Alloc {
    fn new_container(&mut self, pilot_id: &str, cores: u32, memory_mb: u64, role: ContainerRole, node: &str) -> Container {
        let c = Container {
            container_id: format!("{pilot_id}.c{:03}", self.next_container),
            cores,
            memory_mb,
            role,
            node_label: node.to_owned(),
        };
        self.next_container += 1;
        self.containers.push(c.clone());
        c
    }
}

impl EmulatedCluster {
    pub fn new(kind: BackendKind, config: ClusterConfig, log: EventLog) -> Result<Self> {
        if !matches!(kind, BackendKind::BatchEmu | BackendKind::YarnEmu) {
            return Err(Error::UnknownBackend(format!("{kind} is not an emulated cluster")));
        }
        config.validate()?;
        let nodes = (0..config.n_nodes)
            .map(|i| Node {
                label: format!("node-{i:02}"),
                free_cores: config.cores_per_node,
                free_mem: config.memory_per_node_mb,
            })
            .collect();
        Ok(Self {
            kind,
            log,
            state: Mutex::new(State {
                now_ms: 0,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                nodes,
                allocs: BTreeMap::new(),
                order: Vec::new(),
            }),
            config,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    /// Virtual time in milliseconds.
    pub fn now_ms(&self) -> u64 {
        self.state.lock().now_ms
    }

    fn record(&self, c: &Container, from: &str, to: &str, now_ms: u64) {
        self.log.record(
            Entity::Container(c.container_id.clone()),
            from,
            to,
            format!("t={now_ms}ms role={} node={} cores={}", c.role, c.node_label, c.cores),
        );
    }

    fn release(nodes: &mut [Node], c: &Container) {
        if let Some(n) = nodes.iter_mut().find(|n| n.label == c.node_label) {
            n.free_cores += c.cores;
            n.free_mem += c.memory_mb;
        }
    }

    fn step_alloc(&self, st: &mut State, pilot_id: &str, events: &mut Vec<BackendEvent>) {
        let State {
            now_ms, nodes, allocs, ..
        } = st;
        let now = *now_ms;
        let a = allocs.get_mut(pilot_id).expect("ordered alloc exists");
        if a.state.is_terminal() {
            return;
        }
        if a.state == PilotState::Pending {
            if let Some(limit) = self.config.allocation_timeout_ms {
                if now - a.submitted_ms > limit {
                    for c in std::mem::take(&mut a.containers) {
                        Self::release(nodes, &c);
                        self.record(&c, "RUNNING", "RELEASED", now);
                    }
                    a.state = PilotState::Failed;
                    events.push(BackendEvent::Failed {
                        pilot_id: pilot_id.to_owned(),
                        reason: format!("ALLOCATION_TIMEOUT pending for more than {limit} ms"),
                    });
                    return;
                }
            }
        }
        match a.request.clone() {
            BackendRequest::Batch {
                nodes: want,
                cores_per_node,
                ..
            } => {
                if a.state != PilotState::Pending || now < a.ready_ms {
                    return;
                }
                let free: Vec<usize> = nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| n.free_cores == self.config.cores_per_node)
                    .map(|(i, _)| i)
                    .take(want as usize)
                    .collect();
                if free.len() < want as usize {
                    return;
                }
                let mut granted = Vec::new();
                for i in free {
                    let node = &mut nodes[i];
                    node.free_cores -= cores_per_node;
                    let mem = node.free_mem;
                    node.free_mem = 0;
                    let c = a.new_container(pilot_id, cores_per_node, mem, ContainerRole::Worker, &node.label);
                    self.record(&c, "-", "GRANTED", now);
                    self.record(&c, "GRANTED", "RUNNING", now);
                    granted.push(c);
                }
                a.state = PilotState::Running;
                events.push(BackendEvent::Running {
                    pilot_id: pilot_id.to_owned(),
                    containers: granted,
                });
            }
            BackendRequest::Container {
                workers,
                cores_per_worker,
                memory_per_worker_mb,
                app_master_memory_mb,
                ..
            } => match a.stage {
                Stage::Queued => {
                    if now < a.ready_ms {
                        return;
                    }
                    let Some(node) = nodes.iter_mut().find(|n| n.free_mem >= app_master_memory_mb) else {
                        return;
                    };
                    node.free_mem -= app_master_memory_mb;
                    let c = a.new_container(pilot_id, 0, app_master_memory_mb, ContainerRole::AppMaster, &node.label);
                    self.record(&c, "-", "GRANTED", now);
                    a.stage = Stage::MasterGranted;
                }
                Stage::MasterGranted => {
                    let am = a.containers[0].clone();
                    self.record(&am, "GRANTED", "RUNNING", now);
                    a.stage = Stage::Workers;
                }
                Stage::Workers => {
                    if a.workers_granted >= workers {
                        return;
                    }
                    let Some(node) = nodes
                        .iter_mut()
                        .find(|n| n.free_cores >= cores_per_worker && n.free_mem >= memory_per_worker_mb)
                    else {
                        return;
                    };
                    node.free_cores -= cores_per_worker;
                    node.free_mem -= memory_per_worker_mb;
                    let c = a.new_container(pilot_id, cores_per_worker, memory_per_worker_mb, ContainerRole::Worker, &node.label);
                    self.record(&c, "-", "GRANTED", now);
                    self.record(&c, "GRANTED", "RUNNING", now);
                    a.workers_granted += 1;
                    if a.state == PilotState::Pending {
                        a.state = PilotState::Running;
                        events.push(BackendEvent::Running {
                            pilot_id: pilot_id.to_owned(),
                            containers: vec![c],
                        });
                    } else {
                        events.push(BackendEvent::WorkerUp {
                            pilot_id: pilot_id.to_owned(),
                            container: c,
                        });
                    }
                }
            },
            BackendRequest::Local { .. } => {}
        }
    }
}

impl ComputeBackend for EmulatedCluster {
    fn kind(&self) -> BackendKind {
        self.kind
    }

    fn capacity_info(&self) -> BackendCapacity {
        BackendCapacity {
            n_nodes: self.config.n_nodes,
            cores_per_node: self.config.cores_per_node,
            memory_per_node_mb: self.config.memory_per_node_mb,
        }
    }

    fn allocate(&self, pilot_id: &str, request: &BackendRequest) -> Result<AllocationHandle> {
        let cap = self.capacity_info();
        match (self.kind, request) {
            (BackendKind::BatchEmu, BackendRequest::Batch { nodes, cores_per_node, .. }) => {
                if *nodes > cap.n_nodes || *cores_per_node > cap.cores_per_node {
                    return Err(Error::CapacityUnsatisfiable(format!(
                        "{nodes} nodes × {cores_per_node} cores requested on {} nodes × {} cores",
                        cap.n_nodes, cap.cores_per_node
                    )));
                }
            }
            (
                BackendKind::YarnEmu,
                BackendRequest::Container {
                    workers,
                    cores_per_worker,
                    memory_per_worker_mb,
                    app_master_memory_mb,
                    ..
                },
            ) => {
                if *cores_per_worker > cap.cores_per_node
                    || *memory_per_worker_mb > cap.memory_per_node_mb
                    || *app_master_memory_mb > cap.memory_per_node_mb
                    || *workers as u64 * *cores_per_worker as u64 > cap.total_cores()
                {
                    return Err(Error::CapacityUnsatisfiable(format!(
                        "{workers} containers do not fit {} nodes × {} cores",
                        cap.n_nodes, cap.cores_per_node
                    )));
                }
            }
            _ => {
                return Err(Error::CapacityUnsatisfiable(format!(
                    "{request:?} cannot be served by {}",
                    self.kind
                )))
            }
        }
        let mut st = self.state.lock();
        if st.allocs.contains_key(pilot_id) {
            return Err(Error::DuplicateId(pilot_id.to_owned()));
        }
        let wait = match self.config.queue_wait_ms {
            QueueWait::Fixed(ms) => ms,
            QueueWait::Uniform { low, high } => st.rng.gen_range(low..=high),
        };
        let now = st.now_ms;
        st.allocs.insert(
            pilot_id.to_owned(),
            Alloc {
                request: request.clone(),
                state: PilotState::Pending,
                submitted_ms: now,
                ready_ms: now + wait,
                stage: Stage::Queued,
                containers: Vec::new(),
                revoked: HashSet::new(),
                next_container: 0,
                workers_granted: 0,
            },
        );
        st.order.push(pilot_id.to_owned());
        Ok(AllocationHandle {
            pilot_id: pilot_id.to_owned(),
            backend: self.kind,
        })
    }

    fn status(&self, handle: &AllocationHandle) -> Result<PilotState> {
        self.state
            .lock()
            .allocs
            .get(&handle.pilot_id)
            .map(|a| a.state)
            .ok_or_else(|| Error::UnknownPilot(handle.pilot_id.clone()))
    }

    fn containers(&self, handle: &AllocationHandle) -> Result<Vec<Container>> {
        self.state
            .lock()
            .allocs
            .get(&handle.pilot_id)
            .map(|a| a.containers.clone())
            .ok_or_else(|| Error::UnknownPilot(handle.pilot_id.clone()))
    }

    fn cancel(&self, handle: &AllocationHandle) -> Result<()> {
        let mut guard = self.state.lock();
        let st = &mut *guard;
        let now = st.now_ms;
        let a = st
            .allocs
            .get_mut(&handle.pilot_id)
            .ok_or_else(|| Error::UnknownPilot(handle.pilot_id.clone()))?;
        for c in std::mem::take(&mut a.containers) {
            Self::release(&mut st.nodes, &c);
            self.record(&c, "RUNNING", "RELEASED", now);
        }
        if !a.state.is_terminal() {
            a.state = PilotState::Canceled;
        }
        Ok(())
    }

    fn preempt(&self, handle: &AllocationHandle, container_id: &str) -> Result<Option<Container>> {
        if !self.config.preemption_enabled {
            return Err(Error::PreemptionDisabled);
        }
        let mut guard = self.state.lock();
        let st = &mut *guard;
        let now = st.now_ms;
        let a = st
            .allocs
            .get_mut(&handle.pilot_id)
            .ok_or_else(|| Error::UnknownPilot(handle.pilot_id.clone()))?;
        if a.revoked.contains(container_id) {
            return Ok(None);
        }
        let pos = a
            .containers
            .iter()
            .position(|c| c.container_id == container_id)
            .ok_or_else(|| Error::UnknownContainer(container_id.to_owned()))?;
        if a.containers[pos].role == ContainerRole::AppMaster {
            return Err(Error::PreemptOnAm);
        }
        let c = a.containers.remove(pos);
        a.revoked.insert(c.container_id.clone());
        Self::release(&mut st.nodes, &c);
        self.record(&c, "RUNNING", "PREEMPTED", now);
        Ok(Some(c))
    }

    fn tick(&self) -> Vec<BackendEvent> {
        let mut st = self.state.lock();
        st.now_ms += self.config.tick_ms;
        let mut events = Vec::new();
        let order = st.order.clone();
        for id in &order {
            self.step_alloc(&mut st, id, &mut events);
        }
        let State { order, allocs, .. } = &mut *st;
        order.retain(|id| !allocs[id].state.is_terminal());
        events
    }

    fn tick_interval(&self) -> Option<Duration> {
        Some(Duration::from_millis(self.config.tick_ms))
    }
}
