use std::collections::HashSet;
use std::thread;

use bytes::Bytes;
use proptest::prelude::*;

use super::*;
use crate::data::StoreConfig;
use crate::pilot::UnitKind;

fn manager(dir: &std::path::Path, mode: AffinityMode) -> Manager {
    let store = DataStore::new(StoreConfig::new(dir), EventLog::new());
    Manager::new(
        ManagerConfig {
            mode,
            ..Default::default()
        },
        Arc::new(store),
    )
}

fn pcd(machine: Option<&str>) -> PilotComputeDescription {
    PilotComputeDescription::new("local://", 4, 1024, 10).with_labels(&AffinityLabels::new(None, machine))
}

fn task() -> ComputeUnitDescription {
    ComputeUnitDescription::task(UnitKind::MapTask, "noop")
}

fn run_to_done(m: &Manager, pilot: &str) -> Option<String> {
    let cu = m.pull_next(pilot).unwrap()?;
    m.begin_execution(&cu.id).unwrap();
    m.complete_unit(&cu.id, UnitOutcome::ok()).unwrap();
    Some(cu.id)
}

#[test]
fn late_binding_waits_for_a_running_pilot() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    let id = m.submit_compute_unit(task()).unwrap();
    assert_eq!(m.unit_state(&id).unwrap(), UnitState::New);
    m.register_pilot("p1", &pcd(None), PilotState::Pending, 4).unwrap();
    assert_eq!(m.schedule_pending(), 0);
    assert_eq!(m.unit_state(&id).unwrap(), UnitState::New);
    m.pilot_event("p1", Event::AgentUp, "agent up").unwrap();
    assert_eq!(m.unit_state(&id).unwrap(), UnitState::Scheduled);
    assert_eq!(run_to_done(&m, "p1"), Some(id.clone()));
    assert_eq!(m.unit_state(&id).unwrap(), UnitState::Done);
    let info = m.unit_info(&id).unwrap();
    assert_eq!(info.last_decision.unwrap().reason, PlacementReason::OnlyCandidate);
    m.check_invariants().unwrap();
}

#[test]
fn affinity_match_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    let p1 = pcd(Some("rack-A"));
    m.register_pilot("P1", &p1, PilotState::Running, 10).unwrap();
    m.register_pilot("P2", &pcd(None), PilotState::Running, 10).unwrap();
    let filler: Vec<_> = (0..9).map(|_| m.submit_compute_unit(task().with_labels(&AffinityLabels::machine("rack-A"))).unwrap()).collect();
    m.schedule_pending();
    assert!(filler.iter().all(|u| m.unit_info(u).unwrap().pilot_id.as_deref() == Some("P1")));
    let id = m
        .submit_compute_unit(task().with_labels(&AffinityLabels::machine("rack-A")))
        .unwrap();
    m.schedule_pending();
    let d = m.unit_info(&id).unwrap().last_decision.unwrap();
    assert_eq!((d.pilot_id.as_str(), d.reason), ("P1", PlacementReason::AffinityMatch));
    let line = m
        .log()
        .events_for(&Entity::Unit(id))
        .into_iter()
        .find(|e| e.to == "SCHEDULED")
        .unwrap();
    assert!(line.reason.contains("AFFINITY_MATCH"), "{line}");
}

#[test]
fn pull_is_exactly_once_under_contention() {
    let dir = tempfile::tempdir().unwrap();
    let m = Arc::new(manager(dir.path(), AffinityMode::Soft));
    m.register_pilot("p", &pcd(None), PilotState::Running, 64).unwrap();
    let ids: HashSet<String> = (0..64).map(|_| m.submit_compute_unit(task()).unwrap()).collect();
    let got: Vec<String> = (0..8)
        .map(|_| {
            let m = m.clone();
            thread::spawn(move || {
                let mut mine = Vec::new();
                while let Some(cu) = m.pull_next("p").unwrap() {
                    mine.push(cu.id);
                }
                mine
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flat_map(|h| h.join().unwrap())
        .collect();
    assert_eq!(got.len(), 64);
    assert_eq!(got.into_iter().collect::<HashSet<_>>(), ids);
    m.check_invariants().unwrap();
}

#[test]
fn pull_from_unknown_or_idle_pilot() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    assert!(matches!(m.pull_next("nope"), Err(Error::UnknownPilot(_))));
    m.register_pilot("p", &pcd(None), PilotState::Pending, 1).unwrap();
    assert!(matches!(m.pull_next("p"), Err(Error::UnknownPilot(_))));
    assert!(matches!(
        m.register_pilot("p", &pcd(None), PilotState::Running, 1),
        Err(Error::DuplicateId(_))
    ));
}

#[test]
fn pilot_failure_requeues_then_fails_after_three() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    let id = m.submit_compute_unit(task()).unwrap();
    for round in 0..4 {
        let pilot = format!("p{round}");
        m.register_pilot(&pilot, &pcd(None), PilotState::Running, 1).unwrap();
        let cu = m.pull_next(&pilot).unwrap().unwrap();
        assert_eq!(cu.attempt, round + 1);
        m.begin_execution(&cu.id).unwrap();
        m.fail_pilot(&pilot, "node lost").unwrap();
        m.check_invariants().unwrap();
    }
    let info = m.unit_info(&id).unwrap();
    assert_eq!(info.state, UnitState::Failed);
    assert_eq!(info.requeues, 4);
}

#[test]
fn queued_units_move_when_pilot_deregisters() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    m.register_pilot("a", &pcd(None), PilotState::Running, 2).unwrap();
    let ids: Vec<_> = (0..2).map(|_| m.submit_compute_unit(task()).unwrap()).collect();
    m.schedule_pending();
    m.deregister_pilot("a").unwrap();
    for id in &ids {
        let info = m.unit_info(id).unwrap();
        assert_eq!((info.state, info.requeues), (UnitState::New, 0));
    }
    m.register_pilot("b", &pcd(None), PilotState::Running, 2).unwrap();
    assert_eq!(m.pilot_info("b").unwrap().queued, ids);
    assert!(matches!(m.deregister_pilot("a"), Err(Error::UnknownPilot(_))));
}

#[test]
fn capacity_shrink_hands_back_queued_units() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    m.register_pilot("p", &pcd(None), PilotState::Running, 4).unwrap();
    let ids: Vec<_> = (0..4).map(|_| m.submit_compute_unit(task()).unwrap()).collect();
    m.schedule_pending();
    m.pull_next("p").unwrap().unwrap();
    m.set_capacity("p", 2, "preempted").unwrap();
    let p = m.pilot_info("p").unwrap();
    assert_eq!((p.capacity, p.in_use), (2, 2));
    assert_eq!(m.global_queue(), vec![ids[3].clone(), ids[2].clone()]);
    m.check_invariants().unwrap();
}

#[test]
fn hard_mode_keeps_unmatched_units_new() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Hard);
    m.register_pilot("p", &pcd(Some("m1")), PilotState::Running, 4).unwrap();
    let id = m
        .submit_compute_unit(task().with_labels(&AffinityLabels::machine("m2")))
        .unwrap();
    assert_eq!(m.schedule_pending(), 0);
    assert_eq!(m.unit_state(&id).unwrap(), UnitState::New);
}

#[test]
fn inputs_must_be_reachable_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    let far = m
        .register_pilot_data(
            &PilotDataDescription::new("mem://", 8).with_labels(&AffinityLabels::machine("m2")),
            None,
        )
        .unwrap();
    let du = m
        .data()
        .put_data_unit(AffinityLabels::machine("m2"), vec![("x".into(), Bytes::from_static(b"1"))], &far.id)
        .unwrap();
    assert!(matches!(
        m.submit_compute_unit(task().with_inputs(&["du-999999"])),
        Err(Error::UnknownDataUnit(_))
    ));
    m.register_pilot("p", &pcd(Some("m1")), PilotState::Running, 1).unwrap();
    let id = m.submit_compute_unit(task().with_inputs(&[&du.id])).unwrap();
    let cu = m.pull_next("p").unwrap().unwrap();
    assert!(matches!(m.begin_execution(&id), Err(Error::DuNotAvailable(_))));
    let near = m
        .register_pilot_data(
            &PilotDataDescription::new("mem://", 8).with_labels(&AffinityLabels::machine("m1")),
            None,
        )
        .unwrap();
    m.data().stage(&du.id, &near.id).unwrap();
    m.begin_execution(&cu.id).unwrap();
    let running = m
        .log()
        .events_for(&Entity::Unit(id))
        .into_iter()
        .find(|e| e.to == "RUNNING")
        .unwrap();
    assert!(running.reason.contains(&format!("{}@{}", du.id, near.id)));
}

#[test]
fn data_units_wait_for_pilot_data() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    let src = dir.path().join("src.txt");
    std::fs::write(&src, b"abc").unwrap();
    let dud = DataUnitDescription::new(vec![crate::pilot::DataItemRef {
        source_url: src.display().to_string(),
        logical_name: "a".into(),
        size_bytes: 3,
    }]);
    let du = m.submit_data_unit(&dud).unwrap();
    assert_eq!(m.data().data_unit(&du).unwrap().state, crate::data::DuState::New);
    m.register_pilot_data(&PilotDataDescription::new("mem://", 4), None).unwrap();
    assert_eq!(m.data().data_unit(&du).unwrap().state, crate::data::DuState::Available);
}

#[test]
fn wait_units_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), AffinityMode::Soft);
    let id = m.submit_compute_unit(task()).unwrap();
    assert!(matches!(
        m.wait_units(&[id.clone()], Duration::from_millis(20)),
        Err(Error::Timeout(_))
    ));
    m.cancel_unit(&id).unwrap();
    assert_eq!(m.wait_units(&[id], Duration::from_millis(20)).unwrap(), [UnitState::Canceled]);
}

#[derive(Debug, Clone)]
enum Op {
    Submit(u32),
    AddPilot(u32),
    Pull(usize),
    Complete(usize),
    Fail(usize),
    Resize(usize, u32),
    Deregister(usize),
}

fn arb_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1u32..3).prop_map(Op::Submit),
        (1u32..6).prop_map(Op::AddPilot),
        (0usize..8).prop_map(Op::Pull),
        (0usize..8).prop_map(Op::Complete),
        (0usize..8).prop_map(Op::Fail),
        ((0usize..8), (0u32..6)).prop_map(|(p, c)| Op::Resize(p, c)),
        (0usize..8).prop_map(Op::Deregister),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]
    #[test]
    fn registry_invariants_hold(ops in prop::collection::vec(arb_op(), 1..60)) {
        let dir = tempfile::tempdir().unwrap();
        let m = manager(dir.path(), AffinityMode::Soft);
        let mut pilots: Vec<String> = Vec::new();
        let mut running: Vec<String> = Vec::new();
        for (n, op) in ops.into_iter().enumerate() {
            match op {
                Op::Submit(c) => { m.submit_compute_unit(task().with_cores(c)).unwrap(); }
                Op::AddPilot(c) => {
                    let id = format!("p{n}");
                    m.register_pilot(&id, &pcd(None), PilotState::Running, c).unwrap();
                    pilots.push(id);
                }
                Op::Pull(i) => if let Some(p) = pilots.get(i) {
                    if let Ok(Some(cu)) = m.pull_next(p) {
                        m.begin_execution(&cu.id).unwrap();
                        running.push(cu.id);
                    }
                },
                Op::Complete(i) => if i < running.len() {
                    let id = running.swap_remove(i);
                    if m.unit_state(&id).unwrap() == UnitState::Running {
                        m.complete_unit(&id, UnitOutcome::ok()).unwrap();
                    }
                },
                Op::Fail(i) => if let Some(p) = pilots.get(i) { let _ = m.fail_pilot(p, "fault"); },
                Op::Resize(i, c) => if let Some(p) = pilots.get(i) { let _ = m.set_capacity(p, c, "resize"); },
                Op::Deregister(i) => if i < pilots.len() {
                    m.deregister_pilot(&pilots.remove(i)).unwrap();
                },
            }
            if let Err(e) = m.check_invariants() {
                return Err(TestCaseError::fail(e));
            }
        }
    }
}
