use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PilotState {
    New,
    Pending,
    Running,
    Done,
    Failed,
    Canceled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnitState {
    New,
    Scheduled,
    StagingIn,
    Running,
    StagingOut,
    Done,
    Failed,
    Canceled,
}

/// Lifecycle events. `Requeue` returns an in-flight unit to `New`; it is
/// used when a unit's pilot dies, is deregistered, or loses the container
/// the unit ran in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Submit,
    Allocated,
    AgentUp,
    StageDone,
    ExecDone,
    OutDone,
    Error,
    Cancel,
    Requeue,
}

impl Event {
    pub const ALL: [Event; 9] = [
        Event::Submit,
        Event::Allocated,
        Event::AgentUp,
        Event::StageDone,
        Event::ExecDone,
        Event::OutDone,
        Event::Error,
        Event::Cancel,
        Event::Requeue,
    ];
}

impl PilotState {
    pub const ALL: [PilotState; 6] = [
        PilotState::New,
        PilotState::Pending,
        PilotState::Running,
        PilotState::Done,
        PilotState::Failed,
        PilotState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, PilotState::Done | PilotState::Failed | PilotState::Canceled)
    }

    pub fn on(self, event: Event) -> Result<PilotState> {
        use Event as E;
        use PilotState as S;
        let next = match (self, event) {
            (S::New, E::Submit) => S::Pending,
            (S::New | S::Pending, E::Cancel) => S::Canceled,
            (S::Pending, E::AgentUp) => S::Running,
            (S::Pending, E::Error) => S::Failed,
            (S::Running, E::ExecDone) => S::Done,
            (S::Running, E::Error) => S::Failed,
            (S::Running, E::Cancel) => S::Canceled,
            _ => {
                return Err(Error::IllegalTransition {
                    state: LifecycleState::Pilot(self),
                    event,
                })
            }
        };
        Ok(next)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PilotState::New => "NEW",
            PilotState::Pending => "PENDING",
            PilotState::Running => "RUNNING",
            PilotState::Done => "DONE",
            PilotState::Failed => "FAILED",
            PilotState::Canceled => "CANCELED",
        }
    }
}

impl UnitState {
    pub const ALL: [UnitState; 8] = [
        UnitState::New,
        UnitState::Scheduled,
        UnitState::StagingIn,
        UnitState::Running,
        UnitState::StagingOut,
        UnitState::Done,
        UnitState::Failed,
        UnitState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, UnitState::Done | UnitState::Failed | UnitState::Canceled)
    }

    /// Whether a unit in this state holds cores on its pilot.
    pub fn holds_capacity(self) -> bool {
        matches!(
            self,
            UnitState::Scheduled | UnitState::StagingIn | UnitState::Running | UnitState::StagingOut
        )
    }

    pub fn on(self, event: Event) -> Result<UnitState> {
        use Event as E;
        use UnitState as S;
        let next = match (self, event) {
            (s, _) if s.is_terminal() => {
                return Err(Error::IllegalTransition {
                    state: LifecycleState::Unit(self),
                    event,
                })
            }
            (_, E::Error) => S::Failed,
            (_, E::Cancel) => S::Canceled,
            (S::New, E::Allocated) => S::Scheduled,
            (S::Scheduled, E::AgentUp) => S::StagingIn,
            (S::StagingIn, E::StageDone) => S::Running,
            (S::Running, E::ExecDone) => S::StagingOut,
            (S::StagingOut, E::OutDone) => S::Done,
            (s, E::Requeue) if s.holds_capacity() => S::New,
            _ => {
                return Err(Error::IllegalTransition {
                    state: LifecycleState::Unit(self),
                    event,
                })
            }
        };
        Ok(next)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnitState::New => "NEW",
            UnitState::Scheduled => "SCHEDULED",
            UnitState::StagingIn => "STAGING_IN",
            UnitState::Running => "RUNNING",
            UnitState::StagingOut => "STAGING_OUT",
            UnitState::Done => "DONE",
            UnitState::Failed => "FAILED",
            UnitState::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for PilotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for UnitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleState {
    Pilot(PilotState),
    Unit(UnitState),
}

impl fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LifecycleState::Pilot(s) => write!(f, "pilot {s}"),
            LifecycleState::Unit(s) => write!(f, "unit {s}"),
        }
    }
}

/// Pure successor function over both lifecycle tables.
pub fn transition(state: LifecycleState, event: Event) -> Result<LifecycleState> {
    match state {
        LifecycleState::Pilot(s) => s.on(event).map(LifecycleState::Pilot),
        LifecycleState::Unit(s) => s.on(event).map(LifecycleState::Unit),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pilot_examples() {
        assert_eq!(PilotState::Pending.on(Event::AgentUp).unwrap(), PilotState::Running);
        assert!(matches!(
            PilotState::Done.on(Event::Cancel),
            Err(Error::IllegalTransition { state: LifecycleState::Pilot(PilotState::Done), event: Event::Cancel })
        ));
    }

    /// Hand-enumerated legal pilot rows; everything else is illegal.
    const PILOT_TABLE: &[(PilotState, Event, PilotState)] = &[
        (PilotState::New, Event::Submit, PilotState::Pending),
        (PilotState::New, Event::Cancel, PilotState::Canceled),
        (PilotState::Pending, Event::AgentUp, PilotState::Running),
        (PilotState::Pending, Event::Error, PilotState::Failed),
        (PilotState::Pending, Event::Cancel, PilotState::Canceled),
        (PilotState::Running, Event::ExecDone, PilotState::Done),
        (PilotState::Running, Event::Error, PilotState::Failed),
        (PilotState::Running, Event::Cancel, PilotState::Canceled),
    ];

    const UNIT_TABLE: &[(UnitState, Event, UnitState)] = &[
        (UnitState::New, Event::Allocated, UnitState::Scheduled),
        (UnitState::New, Event::Error, UnitState::Failed),
        (UnitState::New, Event::Cancel, UnitState::Canceled),
        (UnitState::Scheduled, Event::AgentUp, UnitState::StagingIn),
        (UnitState::Scheduled, Event::Error, UnitState::Failed),
        (UnitState::Scheduled, Event::Cancel, UnitState::Canceled),
        (UnitState::Scheduled, Event::Requeue, UnitState::New),
        (UnitState::StagingIn, Event::StageDone, UnitState::Running),
        (UnitState::StagingIn, Event::Error, UnitState::Failed),
        (UnitState::StagingIn, Event::Cancel, UnitState::Canceled),
        (UnitState::StagingIn, Event::Requeue, UnitState::New),
        (UnitState::Running, Event::ExecDone, UnitState::StagingOut),
        (UnitState::Running, Event::Error, UnitState::Failed),
        (UnitState::Running, Event::Cancel, UnitState::Canceled),
        (UnitState::Running, Event::Requeue, UnitState::New),
        (UnitState::StagingOut, Event::OutDone, UnitState::Done),
        (UnitState::StagingOut, Event::Error, UnitState::Failed),
        (UnitState::StagingOut, Event::Cancel, UnitState::Canceled),
        (UnitState::StagingOut, Event::Requeue, UnitState::New),
    ];

    #[test]
    fn exhaustive_pilot_matrix() {
        for s in PilotState::ALL {
            for e in Event::ALL {
                let expected = PILOT_TABLE.iter().find(|r| r.0 == s && r.1 == e).map(|r| r.2);
                match (s.on(e), expected) {
                    (Ok(got), Some(want)) => assert_eq!(got, want, "{s} {e:?}"),
                    (Err(Error::IllegalTransition { .. }), None) => {}
                    (got, want) => panic!("{s} {e:?}: got {got:?}, want {want:?}"),
                }
            }
        }
    }

    #[test]
    fn exhaustive_unit_matrix() {
        for s in UnitState::ALL {
            for e in Event::ALL {
                let expected = UNIT_TABLE.iter().find(|r| r.0 == s && r.1 == e).map(|r| r.2);
                let got = transition(LifecycleState::Unit(s), e);
                match (got, expected) {
                    (Ok(LifecycleState::Unit(got)), Some(want)) => assert_eq!(got, want, "{s} {e:?}"),
                    (Err(Error::IllegalTransition { state, event }), None) => {
                        assert_eq!(state, LifecycleState::Unit(s));
                        assert_eq!(event, e);
                    }
                    (got, want) => panic!("{s} {e:?}: got {got:?}, want {want:?}"),
                }
            }
        }
    }

    #[test]
    fn terminal_states_have_no_exits() {
        for s in PilotState::ALL.into_iter().filter(|s| s.is_terminal()) {
            assert!(Event::ALL.iter().all(|e| s.on(*e).is_err()));
        }
        for s in UnitState::ALL.into_iter().filter(|s| s.is_terminal()) {
            assert!(Event::ALL.iter().all(|e| s.on(*e).is_err()));
        }
    }
}
