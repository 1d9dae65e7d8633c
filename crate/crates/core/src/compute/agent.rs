use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use bytes::Bytes;
use parking_lot::Mutex;

use super::service::Shared;
use super::Container;
use crate::data::DataStore;
use crate::error::{Error, Result};
use crate::manager::{ComputeUnit, UnitOutcome};
use crate::pilot::{AffinityLabels, UnitKind};

/// Body of a MAP_TASK or REDUCE_TASK unit. Registered on the
/// [`ComputeService`](super::ComputeService) under a name; a unit whose
/// `task` payload is `name` or `name#anything` runs it.
pub type TaskFn = Arc<dyn Fn(&TaskContext) -> Result<()> + Send + Sync>;

/// What a task body sees of the unit it runs as.
#[derive(Clone)]
pub struct TaskContext {
    pub unit_id: String,
    pub pilot_id: String,
    pub kind: UnitKind,
    /// The full `task` payload of the unit.
    pub payload: String,
    pub arguments: Vec<String>,
    pub attempt: u32,
    /// Labels of the pilot the unit runs on.
    pub labels: AffinityLabels,
    pub input_du_ids: Vec<String>,
    pub output_du_ids: Vec<String>,
    pub data: Arc<DataStore>,
    pub sandbox: PathBuf,
    pub(crate) abort: Arc<AtomicBool>,
}

impl TaskContext {
    /// Set when the agent running the unit is killed or preempted.
    pub fn is_aborted(&self) -> bool {
        self.abort.load(Ordering::Relaxed)
    }

    /// Part of the payload after the first `#`.
    pub fn payload_arg(&self) -> &str {
        self.payload.split_once('#').map_or("", |(_, rest)| rest)
    }
}

pub(crate) fn run_task(task: &TaskFn, ctx: &TaskContext) -> Result<()> {
    match catch_unwind(AssertUnwindSafe(|| task(ctx))) {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "task panicked".into());
            Err(Error::TaskFailed {
                unit_id: ctx.unit_id.clone(),
                attempt: ctx.attempt,
                reason: msg,
            })
        }
    }
}

/// One agent per container: `cores` threads pulling from the pilot's queue.
pub(crate) struct Agent {
    pub(crate) container: Container,
    pub(crate) pilot_id: String,
    labels: AffinityLabels,
    state: Mutex<AgentState>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

#[derive(Default)]
struct AgentState {
    stopped: bool,
    current: Vec<(String, Arc<AtomicBool>)>,
}

impl Agent {
    pub(crate) fn spawn(
        shared: &Arc<Shared>,
        pilot_id: &str,
        labels: AffinityLabels,
        container: Container,
    ) -> Result<Arc<Agent>> {
        let agent = Arc::new(Agent {
            pilot_id: pilot_id.to_owned(),
            labels,
            state: Mutex::new(AgentState::default()),
            threads: Mutex::new(Vec::new()),
            container,
        });
        for slot in 0..agent.container.cores.max(1) {
            let (a, s) = (agent.clone(), shared.clone());
            let handle = thread::Builder::new()
                .name(format!("agent-{}-{slot}", agent.container.container_id))
                .spawn(move || a.slot_loop(&s))
                .map_err(|e| Error::AgentSpawnFailed(format!("{}: {e}", agent.container.container_id)))?;
            agent.threads.lock().push(handle);
        }
        Ok(agent)
    }

    /// Stop pulling, abort running units and return their ids. Units
    /// returned are no longer reported by this agent.
    pub(crate) fn stop(&self) -> Vec<String> {
        let mut st = self.state.lock();
        st.stopped = true;
        st.current
            .drain(..)
            .map(|(id, abort)| {
                abort.store(true, Ordering::Relaxed);
                id
            })
            .collect()
    }

    /// Stop and hand the units this agent holds back through the manager's
    /// failure path while still holding the agent lock, so the slots cannot
    /// report them afterwards.
    pub(crate) fn stop_and_requeue(&self, shared: &Shared, reason: &str) {
        let mut st = self.state.lock();
        st.stopped = true;
        for (id, abort) in st.current.drain(..) {
            abort.store(true, Ordering::Relaxed);
            let _ = shared.manager.requeue_unit(&id, reason);
        }
    }

    pub(crate) fn join(&self) {
        let handles: Vec<_> = self.threads.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    pub(crate) fn is_stopped(&self) -> bool {
        self.state.lock().stopped
    }

    fn slot_loop(&self, shared: &Shared) {
        loop {
            if self.is_stopped() {
                return;
            }
            match shared.manager.pull_next_timeout(&self.pilot_id, shared.config.poll_interval) {
                Err(_) => return,
                Ok(None) => {}
                Ok(Some(cu)) => self.run(shared, cu),
            }
        }
    }

    fn run(&self, shared: &Shared, cu: ComputeUnit) {
        let abort = Arc::new(AtomicBool::new(false));
        {
            let mut st = self.state.lock();
            if st.stopped {
                let _ = shared.manager.requeue_unit(&cu.id, "agent stopped");
                return;
            }
            st.current.push((cu.id.clone(), abort.clone()));
        }
        let outcome = self.execute(shared, &cu, &abort);
        let mut st = self.state.lock();
        if st.stopped {
            return;
        }
        st.current.retain(|(id, _)| *id != cu.id);
        let result = match outcome {
            UnitOutcome::Success { .. } => shared.manager.complete_unit(&cu.id, outcome),
            UnitOutcome::Failure { reason } => shared.manager.fail_unit(&cu.id, &reason),
        };
        if let Err(e) = result {
            log::warn!("{}: could not report {}: {e}", self.container.container_id, cu.id);
        }
    }

    fn execute(&self, shared: &Shared, cu: &ComputeUnit, abort: &Arc<AtomicBool>) -> UnitOutcome {
        let data = shared.manager.data();
        let desc = &cu.description;
        for du in &desc.input_du_ids {
            if let Err(e) = stage_in(data, du, &self.labels) {
                return UnitOutcome::failed(format!("stage-in of {du}: {e}"));
            }
        }
        if let Err(e) = shared.manager.begin_execution(&cu.id) {
            return UnitOutcome::failed(e.to_string());
        }
        let sandbox = shared.pilot_dir(&self.pilot_id).join("units").join(&cu.id);
        let outcome = match desc.kind {
            UnitKind::Executable => run_executable(data, cu, &self.labels, &sandbox, abort),
            UnitKind::MapTask | UnitKind::ReduceTask => {
                let payload = desc.task.clone().unwrap_or_default();
                let ctx = TaskContext {
                    unit_id: cu.id.clone(),
                    pilot_id: self.pilot_id.clone(),
                    kind: desc.kind,
                    arguments: desc.arguments.clone(),
                    attempt: cu.attempt,
                    labels: self.labels.clone(),
                    input_du_ids: desc.input_du_ids.clone(),
                    output_du_ids: desc.output_du_ids.clone(),
                    data: data.clone(),
                    sandbox,
                    abort: abort.clone(),
                    payload,
                };
                match shared.run_typed(&ctx) {
                    Ok(()) => UnitOutcome::ok(),
                    Err(e) => UnitOutcome::failed(e.to_string()),
                }
            }
        };
        if matches!(outcome, UnitOutcome::Success { .. }) {
            if let Err(e) = shared.manager.finish_execution(&cu.id) {
                return UnitOutcome::failed(e.to_string());
            }
            if desc.kind == UnitKind::Executable {
                let sandbox = shared.pilot_dir(&self.pilot_id).join("units").join(&cu.id);
                if let Err(e) = stage_out(data, &desc.output_du_ids, &self.labels, &sandbox) {
                    return UnitOutcome::failed(format!("stage-out: {e}"));
                }
            }
        }
        outcome
    }
}

/// Make sure `du` has a replica the pilot can reach, staging one if needed.
fn stage_in(data: &DataStore, du: &str, labels: &AffinityLabels) -> Result<()> {
    if data.reachable_replica(du, labels).is_some() {
        return Ok(());
    }
    let space = data
        .reachable_space(labels)
        .ok_or_else(|| Error::DuNotAvailable(format!("no space reachable from labels {labels}")))?;
    data.stage(du, &space.id).map(|_| ())
}

fn run_executable(
    data: &DataStore,
    cu: &ComputeUnit,
    labels: &AffinityLabels,
    sandbox: &Path,
    abort: &AtomicBool,
) -> UnitOutcome {
    match spawn_and_wait(data, cu, labels, sandbox, abort) {
        Ok(Some(0)) => UnitOutcome::Success { exit_code: Some(0) },
        Ok(Some(code)) => UnitOutcome::failed(format!("exit code {code}")),
        Ok(None) => UnitOutcome::failed("terminated by signal"),
        Err(e) => UnitOutcome::failed(e.to_string()),
    }
}

fn spawn_and_wait(
    data: &DataStore,
    cu: &ComputeUnit,
    labels: &AffinityLabels,
    sandbox: &Path,
    abort: &AtomicBool,
) -> Result<Option<i32>> {
    let desc = &cu.description;
    if sandbox.exists() {
        fs::remove_dir_all(sandbox)?;
    }
    fs::create_dir_all(sandbox.join("output"))?;
    for du in &desc.input_du_ids {
        let prefer = data.reachable_replica(du, labels);
        let unit = data.data_unit(du)?;
        let dir = sandbox.join("inputs").join(du);
        fs::create_dir_all(&dir)?;
        for name in unit.items.keys() {
            fs::write(dir.join(name), data.read_item(du, name, prefer.as_deref())?)?;
        }
    }
    let mut child = Command::new(&desc.executable)
        .args(&desc.arguments)
        .envs(&desc.env)
        .current_dir(sandbox)
        .stdin(Stdio::null())
        .stdout(fs::File::create(sandbox.join("stdout"))?)
        .stderr(fs::File::create(sandbox.join("stderr"))?)
        .spawn()
        .map_err(|e| Error::AgentSpawnFailed(format!("{}: {e}", desc.executable)))?;
    let mut pause = Duration::from_micros(200);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(status.code());
        }
        if abort.load(Ordering::Relaxed) {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::TaskFailed {
                unit_id: cu.id.clone(),
                attempt: cu.attempt,
                reason: "aborted".into(),
            });
        }
        thread::sleep(pause);
        pause = (pause * 2).min(Duration::from_millis(10));
    }
}

/// Files the executable left in `<sandbox>/output/` become the items of
/// each output data unit.
fn stage_out(data: &DataStore, outputs: &[String], labels: &AffinityLabels, sandbox: &Path) -> Result<()> {
    if outputs.is_empty() {
        return Ok(());
    }
    let mut items = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(sandbox.join("output"))?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        if e.file_type()?.is_file() {
            items.push((e.file_name().to_string_lossy().into_owned(), Bytes::from(fs::read(e.path())?)));
        }
    }
    let space = data
        .reachable_space(labels)
        .ok_or_else(|| Error::DuNotAvailable(format!("no space reachable from labels {labels}")))?;
    for du in outputs {
        data.fill_data_unit(du, items.clone(), &space.id)?;
    }
    Ok(())
}
