//! The pilot manager: registry of pilots, per-pilot unit queues, late
//! binding of units to pilots, and the pull interface used by agents.
//!
//! All operations go through one lock, so concurrent callers observe a
//! single linearizable order of mutations. Every unit and pilot transition
//! is written to the shared [`EventLog`].

mod placement;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

pub use placement::{admissible, schedule, AffinityMode, PilotView, PlacementDecision, PlacementReason};

use crate::data::{DataStore, SpaceHandle};
use crate::error::{Error, Result};
use crate::event::{Entity, EventLog};
use crate::pilot::{
    AffinityLabels, ComputeUnitDescription, DataUnitDescription, Event, PilotComputeDescription,
    PilotDataDescription, PilotState, UnitState, Validate,
};

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub mode: AffinityMode,
    /// Requeues after pilot failure before a unit is failed for good.
    pub max_requeues: u32,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            mode: AffinityMode::Soft,
            max_requeues: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitOutcome {
    Success { exit_code: Option<i32> },
    Failure { reason: String },
}

impl UnitOutcome {
    pub fn ok() -> Self {
        UnitOutcome::Success { exit_code: None }
    }

    pub fn failed(reason: impl Into<String>) -> Self {
        UnitOutcome::Failure {
            reason: reason.into(),
        }
    }
}

/// A unit handed to an agent by [`Manager::pull_next`].
#[derive(Debug, Clone)]
pub struct ComputeUnit {
    pub id: String,
    pub pilot_id: String,
    pub description: ComputeUnitDescription,
    /// 1 for the first delivery, incremented on every requeue.
    pub attempt: u32,
}

#[derive(Debug, Clone)]
pub struct UnitInfo {
    pub id: String,
    pub state: UnitState,
    pub pilot_id: Option<String>,
    pub requeues: u32,
    pub outcome: Option<UnitOutcome>,
    pub last_decision: Option<PlacementDecision>,
    pub description: ComputeUnitDescription,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotInfo {
    pub id: String,
    pub state: PilotState,
    pub labels: AffinityLabels,
    pub capacity: u32,
    pub in_use: u32,
    pub queued: Vec<String>,
}

struct PilotEntry {
    labels: AffinityLabels,
    state: PilotState,
    capacity: u32,
    in_use: u32,
    queue: VecDeque<String>,
}

struct UnitEntry {
    desc: ComputeUnitDescription,
    state: UnitState,
    pilot: Option<String>,
    requeues: u32,
    outcome: Option<UnitOutcome>,
    decision: Option<PlacementDecision>,
}

#[derive(Default)]
struct State {
    pilots: BTreeMap<String, PilotEntry>,
    units: HashMap<String, UnitEntry>,
    global: VecDeque<String>,
    /// Data units waiting for a Pilot-Data to land on.
    pending_dus: VecDeque<String>,
}

pub struct Manager {
    config: ManagerConfig,
    log: EventLog,
    data: Arc<DataStore>,
    state: Mutex<State>,
    changed: Condvar,
    next_unit: AtomicU64,
}

impl fmt::Debug for Manager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Manager").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Manager {
    pub fn new(config: ManagerConfig, data: Arc<DataStore>) -> Self {
        Self {
            config,
            log: data.log().clone(),
            data,
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
            next_unit: AtomicU64::new(1),
        }
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn data(&self) -> &Arc<DataStore> {
        &self.data
    }

    pub fn mode(&self) -> AffinityMode {
        self.config.mode
    }

    // ---- registry ----------------------------------------------------

    /// Add a pilot whose backend allocation is PENDING or RUNNING.
    pub fn register_pilot(
        &self,
        pilot_id: &str,
        description: &PilotComputeDescription,
        state: PilotState,
        capacity: u32,
    ) -> Result<String> {
        if !matches!(state, PilotState::Pending | PilotState::Running) {
            return Err(Error::IllegalTransition {
                state: crate::pilot::LifecycleState::Pilot(state),
                event: Event::Submit,
            });
        }
        let mut st = self.state.lock();
        if st.pilots.contains_key(pilot_id) {
            return Err(Error::DuplicateId(pilot_id.to_owned()));
        }
        st.pilots.insert(
            pilot_id.to_owned(),
            PilotEntry {
                labels: description.labels(),
                state,
                capacity,
                in_use: 0,
                queue: VecDeque::new(),
            },
        );
        self.log.record(
            Entity::Pilot(pilot_id.to_owned()),
            "-",
            state,
            format!("registered capacity={capacity} labels={}", description.labels()),
        );
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(pilot_id.to_owned())
    }

    /// Remove a pilot. Its queued units go back to the global queue as NEW;
    /// units already pulled take the failure path.
    pub fn deregister_pilot(&self, pilot_id: &str) -> Result<()> {
        let mut st = self.state.lock();
        let pilot = st
            .pilots
            .get_mut(pilot_id)
            .ok_or_else(|| Error::UnknownPilot(pilot_id.to_owned()))?;
        let queued: Vec<String> = pilot.queue.drain(..).collect();
        for id in &queued {
            self.release_unit(&mut st, id, "pilot deregistered", false);
        }
        let in_flight = Self::units_on(&st, pilot_id);
        for id in &in_flight {
            self.release_unit(&mut st, id, "pilot deregistered", true);
        }
        st.pilots.remove(pilot_id);
        self.log.record(Entity::Pilot(pilot_id.to_owned()), "-", "DEREGISTERED", "");
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(())
    }

    /// Apply a lifecycle event to a registered pilot. A pilot leaving
    /// RUNNING for a terminal state requeues every unit it holds.
    pub fn pilot_event(&self, pilot_id: &str, event: Event, reason: &str) -> Result<PilotState> {
        let mut st = self.state.lock();
        let pilot = st
            .pilots
            .get_mut(pilot_id)
            .ok_or_else(|| Error::UnknownPilot(pilot_id.to_owned()))?;
        let from = pilot.state;
        let to = from.on(event)?;
        pilot.state = to;
        self.log.record(Entity::Pilot(pilot_id.to_owned()), from, to, reason);
        if to.is_terminal() {
            let queued: Vec<String> = pilot.queue.drain(..).collect();
            for id in &queued {
                self.release_unit(&mut st, id, &format!("pilot {to}"), false);
            }
            for id in &Self::units_on(&st, pilot_id) {
                self.release_unit(&mut st, id, &format!("pilot {to}"), true);
            }
            st.pilots.get_mut(pilot_id).expect("present").capacity = 0;
            drop(st);
            self.data.terminate_owner(pilot_id);
            st = self.state.lock();
        }
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(to)
    }

    /// Mark a pilot FAILED (agent crash, allocation loss).
    pub fn fail_pilot(&self, pilot_id: &str, reason: &str) -> Result<()> {
        self.pilot_event(pilot_id, Event::Error, reason).map(|_| ())
    }

    /// Grow or shrink a pilot's core capacity. When shrinking below what is
    /// held, queued units are handed back newest first, then in-flight
    /// units, until it fits.
    pub fn set_capacity(&self, pilot_id: &str, capacity: u32, reason: &str) -> Result<()> {
        let mut st = self.state.lock();
        let pilot = st
            .pilots
            .get_mut(pilot_id)
            .ok_or_else(|| Error::UnknownPilot(pilot_id.to_owned()))?;
        let from = pilot.capacity;
        pilot.capacity = capacity;
        self.log.record(
            Entity::Pilot(pilot_id.to_owned()),
            pilot.state,
            pilot.state,
            format!("capacity {from}->{capacity} {reason}"),
        );
        loop {
            let pilot = &st.pilots[pilot_id];
            if pilot.in_use <= pilot.capacity {
                break;
            }
            if let Some(id) = st.pilots.get_mut(pilot_id).expect("present").queue.pop_back() {
                self.release_unit(&mut st, &id, "capacity shrank", false);
                continue;
            }
            let Some(id) = Self::units_on(&st, pilot_id).pop() else {
                break;
            };
            self.release_unit(&mut st, &id, "capacity shrank", true);
        }
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(())
    }

    pub fn pilot_info(&self, pilot_id: &str) -> Result<PilotInfo> {
        let st = self.state.lock();
        let p = st
            .pilots
            .get(pilot_id)
            .ok_or_else(|| Error::UnknownPilot(pilot_id.to_owned()))?;
        Ok(PilotInfo {
            id: pilot_id.to_owned(),
            state: p.state,
            labels: p.labels.clone(),
            capacity: p.capacity,
            in_use: p.in_use,
            queued: p.queue.iter().cloned().collect(),
        })
    }

    pub fn pilots(&self) -> Vec<PilotInfo> {
        let ids: Vec<String> = self.state.lock().pilots.keys().cloned().collect();
        ids.iter().filter_map(|id| self.pilot_info(id).ok()).collect()
    }

    // ---- data ---------------------------------------------------------

    /// Create a Pilot-Data space and place any data units that were waiting
    /// for one.
    pub fn register_pilot_data(&self, pdd: &PilotDataDescription, owner: Option<&str>) -> Result<SpaceHandle> {
        let handle = self.data.create_owned_pilot_data(pdd, owner)?;
        let waiting: Vec<String> = self.state.lock().pending_dus.drain(..).collect();
        for du in waiting {
            self.place_data_unit(&du)?;
        }
        Ok(handle)
    }

    /// Accept a data unit. It is imported into the best-matching space right
    /// away if one exists, otherwise it waits (NEW) for a Pilot-Data.
    pub fn submit_data_unit(&self, dud: &DataUnitDescription) -> Result<String> {
        let id = self.data.register_data_unit(dud)?;
        self.place_data_unit(&id)?;
        Ok(id)
    }

    fn place_data_unit(&self, du_id: &str) -> Result<()> {
        let du = self.data.data_unit(du_id)?;
        match self.data.best_space_for(&du.labels) {
            Some(space) => {
                // import failures leave the DU FAILED with per-item status
                let _ = self.data.import_registered(du_id, &space.id);
            }
            None => self.state.lock().pending_dus.push_back(du_id.to_owned()),
        }
        Ok(())
    }

    // ---- units --------------------------------------------------------

    /// Accept a compute-unit into the global queue in state NEW. Never
    /// blocks on placement.
    pub fn submit_compute_unit(&self, cud: ComputeUnitDescription) -> Result<String> {
        let cud = cud.validate()?;
        for du in cud.input_du_ids.iter().chain(&cud.output_du_ids) {
            if !self.data.contains(du) {
                return Err(Error::UnknownDataUnit(du.clone()));
            }
        }
        let id = format!("cu-{:06}", self.next_unit.fetch_add(1, Ordering::Relaxed));
        let mut st = self.state.lock();
        st.units.insert(
            id.clone(),
            UnitEntry {
                desc: cud,
                state: UnitState::New,
                pilot: None,
                requeues: 0,
                outcome: None,
                decision: None,
            },
        );
        st.global.push_back(id.clone());
        self.log.record(Entity::Unit(id.clone()), "-", UnitState::New, "submitted");
        self.changed.notify_all();
        Ok(id)
    }

    /// Try to place every NEW unit in FIFO order; returns how many moved.
    pub fn schedule_pending(&self) -> usize {
        let mut st = self.state.lock();
        let n = self.place_pending(&mut st);
        if n > 0 {
            self.changed.notify_all();
        }
        n
    }

    fn candidates(st: &State) -> Vec<PilotView> {
        st.pilots
            .iter()
            .filter(|(_, p)| p.state == PilotState::Running)
            .map(|(id, p)| PilotView {
                id: id.clone(),
                labels: p.labels.clone(),
                capacity: p.capacity,
                in_use: p.in_use,
            })
            .collect()
    }

    fn place_pending(&self, st: &mut State) -> usize {
        if st.global.is_empty() {
            return 0;
        }
        let mut views = Self::candidates(st);
        if views.is_empty() {
            return 0;
        }
        let mut placed = 0;
        let mut waiting = VecDeque::with_capacity(st.global.len());
        while let Some(id) = st.global.pop_front() {
            let unit = st.units.get_mut(&id).expect("queued unit exists");
            let labels = unit.desc.labels();
            match schedule(&id, unit.desc.cores, &labels, &views, self.config.mode) {
                None => waiting.push_back(id),
                Some(decision) => {
                    let view = views.iter_mut().find(|v| v.id == decision.pilot_id).expect("candidate");
                    view.in_use += unit.desc.cores;
                    unit.state = unit.state.on(Event::Allocated).expect("NEW unit");
                    unit.pilot = Some(decision.pilot_id.clone());
                    let pilot = st.pilots.get_mut(&decision.pilot_id).expect("candidate");
                    pilot.in_use += unit.desc.cores;
                    pilot.queue.push_back(id.clone());
                    self.log.record(
                        Entity::Unit(id.clone()),
                        UnitState::New,
                        UnitState::Scheduled,
                        format!(
                            "pilot={} score={} util={:.4} reason={}",
                            decision.pilot_id,
                            decision.locality_score,
                            decision.utilization_at_decision,
                            decision.reason
                        ),
                    );
                    unit.decision = Some(decision);
                    placed += 1;
                }
            }
        }
        st.global = waiting;
        placed
    }

    /// Dequeue the head of the pilot's queue (SCHEDULED → STAGING_IN).
    /// Each unit is delivered to exactly one caller.
    pub fn pull_next(&self, pilot_id: &str) -> Result<Option<ComputeUnit>> {
        let mut st = self.state.lock();
        self.pull_locked(&mut st, pilot_id)
    }

    /// Like [`Manager::pull_next`] but waits up to `timeout` for work.
    pub fn pull_next_timeout(&self, pilot_id: &str, timeout: Duration) -> Result<Option<ComputeUnit>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            if let Some(unit) = self.pull_locked(&mut st, pilot_id)? {
                return Ok(Some(unit));
            }
            if self.changed.wait_until(&mut st, deadline).timed_out() {
                return self.pull_locked(&mut st, pilot_id);
            }
        }
    }

    fn pull_locked(&self, st: &mut State, pilot_id: &str) -> Result<Option<ComputeUnit>> {
        match st.pilots.get(pilot_id) {
            Some(p) if p.state == PilotState::Running => {}
            _ => return Err(Error::UnknownPilot(pilot_id.to_owned())),
        }
        if self.place_pending(st) > 0 {
            self.changed.notify_all();
        }
        let Some(id) = st.pilots.get_mut(pilot_id).expect("checked").queue.pop_front() else {
            return Ok(None);
        };
        let unit = st.units.get_mut(&id).expect("queued unit exists");
        let from = unit.state;
        unit.state = from.on(Event::AgentUp)?;
        self.log.record(Entity::Unit(id.clone()), from, unit.state, format!("pulled by {pilot_id}"));
        Ok(Some(ComputeUnit {
            id,
            pilot_id: pilot_id.to_owned(),
            description: unit.desc.clone(),
            attempt: unit.requeues + 1,
        }))
    }

    /// STAGING_IN → RUNNING. Refused while any input data unit lacks a
    /// replica on a space reachable from the unit's pilot.
    pub fn begin_execution(&self, unit_id: &str) -> Result<()> {
        let mut st = self.state.lock();
        let unit = st
            .units
            .get(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))?;
        if unit.state != UnitState::StagingIn {
            return Err(Error::IllegalTransition {
                state: crate::pilot::LifecycleState::Unit(unit.state),
                event: Event::StageDone,
            });
        }
        let pilot_id = unit.pilot.clone().expect("pulled unit has a pilot");
        let labels = st.pilots.get(&pilot_id).map(|p| p.labels.clone()).unwrap_or_default();
        let mut placed_inputs = Vec::with_capacity(unit.desc.input_du_ids.len());
        for du in &unit.desc.input_du_ids {
            match self.data.reachable_replica(du, &labels) {
                Some(space) => placed_inputs.push(format!("{du}@{space}")),
                None => {
                    return Err(Error::DuNotAvailable(format!(
                        "{du} has no replica reachable from {pilot_id}"
                    )))
                }
            }
        }
        let unit = st.units.get_mut(unit_id).expect("present");
        unit.state = UnitState::StagingIn.on(Event::StageDone)?;
        self.log.record(
            Entity::Unit(unit_id.to_owned()),
            UnitState::StagingIn,
            UnitState::Running,
            format!("pilot={pilot_id} inputs=[{}]", placed_inputs.join(",")),
        );
        Ok(())
    }

    /// RUNNING → STAGING_OUT.
    pub fn finish_execution(&self, unit_id: &str) -> Result<()> {
        self.unit_event(unit_id, Event::ExecDone, "executed")
    }

    fn unit_event(&self, unit_id: &str, event: Event, reason: &str) -> Result<()> {
        let mut st = self.state.lock();
        let unit = st
            .units
            .get_mut(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))?;
        let from = unit.state;
        unit.state = from.on(event)?;
        self.log.record(Entity::Unit(unit_id.to_owned()), from, unit.state, reason);
        Ok(())
    }

    /// Record the outcome of a unit in RUNNING or STAGING_OUT, releasing
    /// its cores.
    pub fn complete_unit(&self, unit_id: &str, outcome: UnitOutcome) -> Result<()> {
        let mut st = self.state.lock();
        let unit = st
            .units
            .get_mut(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))?;
        if !matches!(unit.state, UnitState::Running | UnitState::StagingOut) {
            return Err(Error::IllegalTransition {
                state: crate::pilot::LifecycleState::Unit(unit.state),
                event: match outcome {
                    UnitOutcome::Success { .. } => Event::OutDone,
                    UnitOutcome::Failure { .. } => Event::Error,
                },
            });
        }
        let steps: &[Event] = match (&outcome, unit.state) {
            (UnitOutcome::Failure { .. }, _) => &[Event::Error],
            (UnitOutcome::Success { .. }, UnitState::Running) => &[Event::ExecDone, Event::OutDone],
            (UnitOutcome::Success { .. }, _) => &[Event::OutDone],
        };
        let reason = match &outcome {
            UnitOutcome::Success { exit_code } => format!("ok exit={exit_code:?}"),
            UnitOutcome::Failure { reason } => format!("error: {reason}"),
        };
        for &event in steps {
            let from = unit.state;
            unit.state = from.on(event)?;
            self.log.record(Entity::Unit(unit_id.to_owned()), from, unit.state, reason.clone());
        }
        unit.outcome = Some(outcome);
        let cores = unit.desc.cores;
        if let Some(p) = unit.pilot.clone().and_then(|p| st.pilots.get_mut(&p)) {
            p.in_use -= cores;
        }
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(())
    }

    /// Fail a unit that an agent could not stage or run, releasing its
    /// cores. Accepted from STAGING_IN, RUNNING and STAGING_OUT.
    pub fn fail_unit(&self, unit_id: &str, reason: &str) -> Result<()> {
        let mut st = self.state.lock();
        let unit = st
            .units
            .get_mut(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))?;
        if !matches!(unit.state, UnitState::StagingIn | UnitState::Running | UnitState::StagingOut) {
            return Err(Error::IllegalTransition {
                state: crate::pilot::LifecycleState::Unit(unit.state),
                event: Event::Error,
            });
        }
        let from = unit.state;
        unit.state = from.on(Event::Error)?;
        self.log.record(Entity::Unit(unit_id.to_owned()), from, unit.state, format!("error: {reason}"));
        unit.outcome = Some(UnitOutcome::failed(reason));
        let cores = unit.desc.cores;
        if let Some(p) = unit.pilot.clone().and_then(|p| st.pilots.get_mut(&p)) {
            p.in_use -= cores;
        }
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(())
    }

    /// Failure path for one unit (its agent or container died): release its
    /// cores and requeue it, or fail it once the requeue budget is spent.
    pub fn requeue_unit(&self, unit_id: &str, reason: &str) -> Result<()> {
        let mut st = self.state.lock();
        let unit = st
            .units
            .get(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))?;
        if !unit.state.holds_capacity() {
            return Err(Error::IllegalTransition {
                state: crate::pilot::LifecycleState::Unit(unit.state),
                event: Event::Requeue,
            });
        }
        if unit.state == UnitState::Scheduled {
            if let Some(p) = unit.pilot.clone().and_then(|p| st.pilots.get_mut(&p)) {
                p.queue.retain(|u| u != unit_id);
            }
        }
        self.release_unit(&mut st, unit_id, reason, true);
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(())
    }

    /// Detach a capacity-holding unit from its pilot. `counted` releases
    /// consume the requeue budget; the caller removes it from pilot queues.
    fn release_unit(&self, st: &mut State, unit_id: &str, reason: &str, counted: bool) {
        let max = self.config.max_requeues;
        let unit = st.units.get_mut(unit_id).expect("unit exists");
        debug_assert!(unit.state.holds_capacity());
        if let Some(p) = unit.pilot.take().and_then(|p| st.pilots.get_mut(&p)) {
            p.in_use -= unit.desc.cores;
        }
        let from = unit.state;
        if counted {
            unit.requeues += 1;
        }
        if unit.requeues > max {
            unit.state = UnitState::Failed;
            unit.outcome = Some(UnitOutcome::failed(format!("{reason}; requeue limit {max} reached")));
            self.log.record(Entity::Unit(unit_id.to_owned()), from, unit.state, format!("{reason}; retries exhausted"));
        } else {
            unit.state = from.on(Event::Requeue).expect("capacity-holding state");
            self.log.record(
                Entity::Unit(unit_id.to_owned()),
                from,
                unit.state,
                format!("requeue #{} {reason}", unit.requeues),
            );
            st.global.push_back(unit_id.to_owned());
        }
    }

    fn units_on(st: &State, pilot_id: &str) -> Vec<String> {
        let mut ids: Vec<String> = st
            .units
            .iter()
            .filter(|(_, u)| u.state.holds_capacity() && u.pilot.as_deref() == Some(pilot_id))
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    }

    /// Cancel a unit that has not finished yet.
    pub fn cancel_unit(&self, unit_id: &str) -> Result<()> {
        let mut st = self.state.lock();
        let unit = st
            .units
            .get_mut(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))?;
        let from = unit.state;
        unit.state = from.on(Event::Cancel)?;
        let cores = unit.desc.cores;
        let pilot = unit.pilot.take();
        self.log.record(Entity::Unit(unit_id.to_owned()), from, UnitState::Canceled, "canceled");
        if from == UnitState::New {
            st.global.retain(|u| u != unit_id);
        }
        if let Some(p) = pilot.and_then(|p| st.pilots.get_mut(&p)) {
            p.queue.retain(|u| u != unit_id);
            if from.holds_capacity() {
                p.in_use -= cores;
            }
        }
        self.place_pending(&mut st);
        self.changed.notify_all();
        Ok(())
    }

    pub fn unit_state(&self, unit_id: &str) -> Result<UnitState> {
        self.state
            .lock()
            .units
            .get(unit_id)
            .map(|u| u.state)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))
    }

    pub fn unit_info(&self, unit_id: &str) -> Result<UnitInfo> {
        let st = self.state.lock();
        let u = st
            .units
            .get(unit_id)
            .ok_or_else(|| Error::UnknownUnit(unit_id.to_owned()))?;
        Ok(UnitInfo {
            id: unit_id.to_owned(),
            state: u.state,
            pilot_id: u.pilot.clone(),
            requeues: u.requeues,
            outcome: u.outcome.clone(),
            last_decision: u.decision.clone(),
            description: u.desc.clone(),
        })
    }

    pub fn global_queue(&self) -> Vec<String> {
        self.state.lock().global.iter().cloned().collect()
    }

    /// Block until every unit in `ids` is terminal, or time out.
    pub fn wait_units(&self, ids: &[String], timeout: Duration) -> Result<Vec<UnitState>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            let states: Vec<UnitState> = ids
                .iter()
                .map(|id| {
                    st.units
                        .get(id)
                        .map(|u| u.state)
                        .ok_or_else(|| Error::UnknownUnit(id.clone()))
                })
                .collect::<Result<_>>()?;
            if states.iter().all(|s| s.is_terminal()) {
                return Ok(states);
            }
            if self.changed.wait_until(&mut st, deadline).timed_out() {
                let open = ids.iter().zip(&states).filter(|(_, s)| !s.is_terminal()).count();
                return Err(Error::Timeout(format!("{open} of {} units still running", ids.len())));
            }
        }
    }

    /// Wake everything blocked in `pull_next_timeout` / `wait_units`.
    pub fn notify(&self) {
        self.changed.notify_all();
    }

    /// Check the registry bookkeeping: `0 ≤ in_use ≤ capacity`, `in_use`
    /// equals the cores of units holding capacity on the pilot, every unit
    /// sits in at most one queue, and queue membership matches unit state.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let st = self.state.lock();
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for id in &st.global {
            if seen.insert(id, "global").is_some() {
                return Err(format!("{id} queued twice"));
            }
            if st.units[id].state != UnitState::New {
                return Err(format!("{id} in global queue but {}", st.units[id].state));
            }
        }
        for (pid, p) in &st.pilots {
            for id in &p.queue {
                if let Some(other) = seen.insert(id, pid) {
                    return Err(format!("{id} in queues {other} and {pid}"));
                }
                let u = &st.units[id];
                if u.state != UnitState::Scheduled || u.pilot.as_deref() != Some(pid) {
                    return Err(format!("{id} queued on {pid} but {} on {:?}", u.state, u.pilot));
                }
            }
            let held: u32 = st
                .units
                .values()
                .filter(|u| u.state.holds_capacity() && u.pilot.as_deref() == Some(pid))
                .map(|u| u.desc.cores)
                .sum();
            if held != p.in_use {
                return Err(format!("{pid}: in_use {} but units hold {held}", p.in_use));
            }
            if p.in_use > p.capacity && p.state == PilotState::Running {
                return Err(format!("{pid}: in_use {} > capacity {}", p.in_use, p.capacity));
            }
        }
        for (id, u) in &st.units {
            if u.state == UnitState::Scheduled && !seen.contains_key(id.as_str()) {
                return Err(format!("{id} SCHEDULED but in no queue"));
            }
            if u.state == UnitState::New && !st.global.contains(id) {
                return Err(format!("{id} NEW but not in the global queue"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
