use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use super::agent::{run_task, Agent, TaskContext, TaskFn};
use super::cluster::{ClusterEndpoint, ClusterRuntime, RuntimeKind};
use super::emulator::{ClusterConfig, EmulatedCluster};
use super::local::LocalBackend;
use super::{AllocationHandle, BackendEvent, ComputeBackend, Container, ContainerRole};
use crate::error::{BootstrapPhase, Error, Result};
use crate::manager::Manager;
use crate::pilot::{
    translate_description, BackendKind, Event, PilotComputeDescription, PilotState, Validate,
};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Pilot sandboxes live under `<work_dir>/pilots/<pilot_id>/`.
    pub work_dir: PathBuf,
    /// How long an idle agent waits on its queue before checking again.
    pub poll_interval: Duration,
}

impl ServiceConfig {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Self {
            work_dir: work_dir.into(),
            poll_interval: Duration::from_millis(50),
        }
    }
}

struct PilotRecord {
    handle: AllocationHandle,
    description: PilotComputeDescription,
    capacity: u32,
    agents: Vec<Arc<Agent>>,
}

pub(crate) struct Shared {
    pub(crate) manager: Arc<Manager>,
    pub(crate) config: ServiceConfig,
    backends: RwLock<HashMap<BackendKind, Arc<dyn ComputeBackend>>>,
    tasks: RwLock<HashMap<String, TaskFn>>,
    pilots: Mutex<BTreeMap<String, PilotRecord>>,
    clusters: RwLock<HashMap<String, Arc<ClusterRuntime>>>,
    next_pilot: AtomicU64,
    bootstrap_fault: Mutex<Option<BootstrapPhase>>,
}

impl Shared {
    pub(crate) fn pilot_dir(&self, pilot_id: &str) -> PathBuf {
        self.config.work_dir.join("pilots").join(pilot_id)
    }

    /// Run a MAP_TASK / REDUCE_TASK body, through the pilot's cluster
    /// runtime when one was bootstrapped.
    pub(crate) fn run_typed(&self, ctx: &TaskContext) -> Result<()> {
        let name = ctx.payload.split('#').next().unwrap_or_default();
        let task = self
            .tasks
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::TaskFailed {
                unit_id: ctx.unit_id.clone(),
                attempt: ctx.attempt,
                reason: format!("no task registered as {name:?}"),
            })?;
        let cluster = self.clusters.read().get(&ctx.pilot_id).cloned();
        match cluster {
            Some(c) => c.submit(task, ctx),
            None => run_task(&task, ctx),
        }
    }
}

/// Creates pilots on compute backends, runs their agents and keeps the
/// manager's registry in step with backend events.
///
/// Emulated clusters only advance when ticked: either explicitly with
/// [`ComputeService::step`], implicitly while waiting in
/// [`ComputeService::wait_running`], or in real time after
/// [`ComputeService::start_clock`].
pub struct ComputeService {
    shared: Arc<Shared>,
    clock: Mutex<Option<(Arc<AtomicBool>, JoinHandle<()>)>>,
}

impl ComputeService {
    /// A service with the local backend installed.
    pub fn new(manager: Arc<Manager>, config: ServiceConfig) -> Self {
        let service = Self {
            shared: Arc::new(Shared {
                manager,
                config,
                backends: RwLock::new(HashMap::new()),
                tasks: RwLock::new(HashMap::new()),
                pilots: Mutex::new(BTreeMap::new()),
                clusters: RwLock::new(HashMap::new()),
                next_pilot: AtomicU64::new(1),
                bootstrap_fault: Mutex::new(None),
            }),
            clock: Mutex::new(None),
        };
        service.add_backend(Arc::new(LocalBackend::default()));
        service
    }

    pub fn manager(&self) -> &Arc<Manager> {
        &self.shared.manager
    }

    /// Install or replace the backend serving its scheme.
    pub fn add_backend(&self, backend: Arc<dyn ComputeBackend>) {
        self.shared.backends.write().insert(backend.kind(), backend);
    }

    /// Install an emulated cluster for `batch-emu` or `yarn-emu`.
    pub fn add_cluster(&self, kind: BackendKind, config: ClusterConfig) -> Result<()> {
        let log = self.shared.manager.log().clone();
        self.add_backend(Arc::new(EmulatedCluster::new(kind, config, log)?));
        Ok(())
    }

    pub fn register_task(&self, name: &str, task: TaskFn) {
        self.shared.tasks.write().insert(name.to_owned(), task);
    }

    pub fn unregister_task(&self, name: &str) {
        self.shared.tasks.write().remove(name);
    }

    pub fn pilot_dir(&self, pilot_id: &str) -> PathBuf {
        self.shared.pilot_dir(pilot_id)
    }

    fn backend(&self, kind: BackendKind) -> Result<Arc<dyn ComputeBackend>> {
        self.shared
            .backends
            .read()
            .get(&kind)
            .cloned()
            .ok_or_else(|| Error::UnknownBackend(format!("{kind}:// has no configured backend")))
    }

    /// Validate, translate and allocate; the pilot is registered with the
    /// manager as PENDING and becomes a placement candidate once RUNNING.
    pub fn create_pilot(&self, description: PilotComputeDescription) -> Result<String> {
        let description = description.validate()?;
        let kind = description.locator()?.kind;
        let backend = self.backend(kind)?;
        let request = translate_description(&description, kind, &backend.capacity_info())?;
        let id = format!("pilot-{:04}", self.shared.next_pilot.fetch_add(1, Ordering::Relaxed));
        fs::create_dir_all(self.shared.pilot_dir(&id))?;
        let handle = backend.allocate(&id, &request)?;
        self.shared
            .manager
            .register_pilot(&id, &description, PilotState::Pending, 0)?;
        self.shared.pilots.lock().insert(
            id.clone(),
            PilotRecord {
                handle: handle.clone(),
                description,
                capacity: 0,
                agents: Vec::new(),
            },
        );
        if backend.status(&handle)? == PilotState::Running {
            let containers = backend
                .containers(&handle)?
                .into_iter()
                .filter(|c| c.role == ContainerRole::Worker)
                .collect();
            self.apply(BackendEvent::Running {
                pilot_id: id.clone(),
                containers,
            })?;
        }
        Ok(id)
    }

    fn apply(&self, event: BackendEvent) -> Result<()> {
        let manager = &self.shared.manager;
        match event {
            BackendEvent::Running { pilot_id, containers } => {
                let mut pilots = self.shared.pilots.lock();
                let rec = pilots
                    .get_mut(&pilot_id)
                    .ok_or_else(|| Error::UnknownPilot(pilot_id.clone()))?;
                rec.capacity += containers.iter().map(|c| c.cores).sum::<u32>();
                manager.set_capacity(&pilot_id, rec.capacity, "allocation granted")?;
                manager.pilot_event(&pilot_id, Event::AgentUp, "agents starting")?;
                for c in containers {
                    self.launch(rec, &pilot_id, c)?;
                }
            }
            BackendEvent::WorkerUp { pilot_id, container } => {
                let mut pilots = self.shared.pilots.lock();
                let rec = pilots
                    .get_mut(&pilot_id)
                    .ok_or_else(|| Error::UnknownPilot(pilot_id.clone()))?;
                rec.capacity += container.cores;
                manager.set_capacity(&pilot_id, rec.capacity, &format!("{} granted", container.container_id))?;
                self.launch(rec, &pilot_id, container)?;
            }
            BackendEvent::Failed { pilot_id, reason } => {
                let agents = self.take_agents(&pilot_id);
                for a in &agents {
                    a.stop();
                }
                manager.fail_pilot(&pilot_id, &reason)?;
                self.join(agents);
            }
        }
        Ok(())
    }

    fn launch(&self, rec: &mut PilotRecord, pilot_id: &str, container: Container) -> Result<()> {
        let agent = Agent::spawn(&self.shared, pilot_id, rec.description.labels(), container)?;
        rec.agents.push(agent);
        Ok(())
    }

    fn take_agents(&self, pilot_id: &str) -> Vec<Arc<Agent>> {
        self.shared
            .pilots
            .lock()
            .get_mut(pilot_id)
            .map(|r| std::mem::take(&mut r.agents))
            .unwrap_or_default()
    }

    fn join(&self, agents: Vec<Arc<Agent>>) {
        self.shared.manager.notify();
        for a in agents {
            a.join();
        }
    }

    /// Advance every emulated backend by one tick and apply what happened.
    /// Returns the number of backend events.
    pub fn step(&self) -> usize {
        let backends: Vec<_> = self.shared.backends.read().values().cloned().collect();
        let mut n = 0;
        for b in backends {
            for event in b.tick() {
                n += 1;
                if let Err(e) = self.apply(event) {
                    log::warn!("backend event not applied: {e}");
                }
            }
        }
        n
    }

    /// Tick emulated backends from a background thread at their configured
    /// interval.
    pub fn start_clock(self: &Arc<Self>) {
        let mut clock = self.clock.lock();
        if clock.is_some() {
            return;
        }
        let interval = self
            .shared
            .backends
            .read()
            .values()
            .filter_map(|b| b.tick_interval())
            .min()
            .unwrap_or(Duration::from_millis(10));
        let stop = Arc::new(AtomicBool::new(false));
        let weak: Weak<ComputeService> = Arc::downgrade(self);
        let flag = stop.clone();
        let handle = thread::Builder::new()
            .name("cluster-clock".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    thread::sleep(interval);
                    match weak.upgrade() {
                        Some(service) => {
                            service.step();
                        }
                        None => return,
                    }
                }
            })
            .expect("spawn clock thread");
        *clock = Some((stop, handle));
    }

    fn clock_running(&self) -> bool {
        self.clock.lock().is_some()
    }

    /// Wait until the pilot leaves PENDING. Without a running clock the
    /// emulated backends are ticked from this thread.
    pub fn wait_running(&self, pilot_id: &str, timeout: Duration) -> Result<PilotState> {
        let deadline = Instant::now() + timeout;
        loop {
            let state = self.shared.manager.pilot_info(pilot_id)?.state;
            if state != PilotState::Pending {
                return Ok(state);
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout(format!("{pilot_id} still pending")));
            }
            if self.clock_running() {
                thread::sleep(Duration::from_millis(1));
            } else {
                self.step();
            }
        }
    }

    pub fn containers(&self, pilot_id: &str) -> Result<Vec<Container>> {
        let handle = self.handle(pilot_id)?;
        self.backend(handle.backend)?.containers(&handle)
    }

    fn handle(&self, pilot_id: &str) -> Result<AllocationHandle> {
        self.shared
            .pilots
            .lock()
            .get(pilot_id)
            .map(|r| r.handle.clone())
            .ok_or_else(|| Error::UnknownPilot(pilot_id.to_owned()))
    }

    /// Number of live agents of a pilot.
    pub fn agent_count(&self, pilot_id: &str) -> usize {
        self.shared
            .pilots
            .lock()
            .get(pilot_id)
            .map_or(0, |r| r.agents.iter().filter(|a| !a.is_stopped()).count())
    }

    /// Revoke a worker container: its agent stops, units it was running go
    /// back through the manager's failure path and the pilot shrinks.
    pub fn preempt(&self, pilot_id: &str, container_id: &str) -> Result<()> {
        let handle = self.handle(pilot_id)?;
        let Some(container) = self.backend(handle.backend)?.preempt(&handle, container_id)? else {
            return Ok(());
        };
        let agent = {
            let mut pilots = self.shared.pilots.lock();
            let rec = pilots.get_mut(pilot_id).expect("handle found");
            rec.capacity -= container.cores;
            let pos = rec.agents.iter().position(|a| a.container.container_id == container_id);
            let agent = pos.map(|i| rec.agents.remove(i));
            if let Some(a) = &agent {
                a.stop_and_requeue(&self.shared, &format!("{container_id} preempted"));
            }
            self.shared
                .manager
                .set_capacity(pilot_id, rec.capacity, &format!("{container_id} preempted"))?;
            agent
        };
        self.join(agent.into_iter().collect());
        Ok(())
    }

    /// Fault injection: crash every agent of the pilot. The pilot is marked
    /// FAILED and the units it held are requeued.
    pub fn kill_agents(&self, pilot_id: &str) -> Result<()> {
        let handle = self.handle(pilot_id)?;
        let agents = self.take_agents(pilot_id);
        for a in &agents {
            a.stop();
        }
        self.shared.manager.fail_pilot(pilot_id, "agent crashed")?;
        self.backend(handle.backend)?.cancel(&handle)?;
        self.stop_cluster(pilot_id);
        self.join(agents);
        Ok(())
    }

    /// Release the pilot's allocation. Idempotent.
    pub fn cancel_pilot(&self, pilot_id: &str) -> Result<()> {
        let handle = self.handle(pilot_id)?;
        let agents = self.take_agents(pilot_id);
        for a in &agents {
            a.stop();
        }
        let state = self.shared.manager.pilot_info(pilot_id)?.state;
        if !state.is_terminal() {
            self.shared.manager.pilot_event(pilot_id, Event::Cancel, "canceled")?;
        }
        self.backend(handle.backend)?.cancel(&handle)?;
        self.stop_cluster(pilot_id);
        self.join(agents);
        Ok(())
    }

    fn stop_cluster(&self, pilot_id: &str) {
        let cluster = self.shared.clusters.write().remove(pilot_id);
        if let Some(c) = cluster {
            c.stop();
        }
    }

    /// Make the next bootstrap fail in `phase`.
    pub fn inject_bootstrap_fault(&self, phase: BootstrapPhase) {
        *self.shared.bootstrap_fault.lock() = Some(phase);
    }

    /// Start an emulated cluster runtime inside a RUNNING local or
    /// batch-emu pilot. Its typed units are then forwarded to the runtime's
    /// coordinator. A second call returns the existing endpoint.
    pub fn bootstrap_cluster(&self, pilot_id: &str, runtime: RuntimeKind) -> Result<ClusterEndpoint> {
        let handle = self.handle(pilot_id)?;
        if let Some(c) = self.shared.clusters.read().get(pilot_id) {
            return Ok(c.endpoint.clone());
        }
        let config_gen = |detail: String| Error::BootstrapFailed {
            phase: BootstrapPhase::ConfigGen,
            detail,
        };
        if !matches!(handle.backend, BackendKind::Local | BackendKind::BatchEmu) {
            return Err(config_gen(format!("{} pilots cannot host a cluster runtime", handle.backend)));
        }
        let state = self.shared.manager.pilot_info(pilot_id)?.state;
        if state != PilotState::Running {
            return Err(config_gen(format!("{pilot_id} is {state}")));
        }
        let nodes: Vec<Container> = self
            .containers(pilot_id)?
            .into_iter()
            .filter(|c| c.role == ContainerRole::Worker)
            .collect();
        let fault = self.shared.bootstrap_fault.lock().take();
        let dir = self.shared.pilot_dir(pilot_id).join("cluster");
        let runtime = Arc::new(ClusterRuntime::start(pilot_id, runtime, &nodes, &dir, fault)?);
        let endpoint = runtime.endpoint.clone();
        self.shared.clusters.write().insert(pilot_id.to_owned(), runtime);
        Ok(endpoint)
    }

    /// Whether typed units of the pilot are forwarded to a cluster runtime.
    pub fn has_cluster(&self, pilot_id: &str) -> bool {
        self.shared.clusters.read().contains_key(pilot_id)
    }

    /// Cancel every pilot and wait for all agents to exit.
    pub fn shutdown(&self) {
        if let Some((stop, handle)) = self.clock.lock().take() {
            stop.store(true, Ordering::Relaxed);
            if handle.thread().id() != thread::current().id() {
                let _ = handle.join();
            }
        }
        let ids: Vec<String> = self.shared.pilots.lock().keys().cloned().collect();
        for id in ids {
            let _ = self.cancel_pilot(&id);
        }
    }
}

impl Drop for ComputeService {
    fn drop(&mut self) {
        self.shutdown();
    }
}
