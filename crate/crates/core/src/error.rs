use std::fmt;

use crate::pilot::{Event, LifecycleState};

/// One violated field reported by validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl FieldError {
    pub fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// The phase of cluster bootstrap that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapPhase {
    ConfigGen,
    Coordinator,
    Worker,
}

impl fmt::Display for BootstrapPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BootstrapPhase::ConfigGen => "config-gen",
            BootstrapPhase::Coordinator => "coordinator",
            BootstrapPhase::Worker => "worker",
        })
    }
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation failed: {}", join_fields(.0))]
    Validation(Vec<FieldError>),
    #[error("unknown backend in {0:?}")]
    UnknownBackend(String),
    #[error("capacity unsatisfiable: {0}")]
    CapacityUnsatisfiable(String),
    #[error("illegal transition: {event:?} in state {state}")]
    IllegalTransition { state: LifecycleState, event: Event },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("unknown pilot {0}")]
    UnknownPilot(String),
    #[error("unknown unit {0}")]
    UnknownUnit(String),
    #[error("unknown data unit {0}")]
    UnknownDataUnit(String),
    #[error("unknown container {0}")]
    UnknownContainer(String),
    #[error("unknown space {0}")]
    UnknownSpace(String),
    #[error("the application master container cannot be preempted")]
    PreemptOnAm,
    #[error("preemption is disabled on this cluster")]
    PreemptionDisabled,
    #[error("allocation {0} timed out while pending")]
    AllocationTimeout(String),
    #[error("agent spawn failed: {0}")]
    AgentSpawnFailed(String),
    #[error("bootstrap failed in phase {phase}: {detail}")]
    BootstrapFailed {
        phase: BootstrapPhase,
        detail: String,
    },
    #[error("insufficient space: {0}")]
    InsufficientSpace(String),
    #[error("source not found: {0}")]
    SourceNotFound(String),
    #[error("space exhausted: {0}")]
    SpaceExhausted(String),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("destination not writable: {0}")]
    DestNotWritable(String),
    #[error("item not found: {0}")]
    ItemNotFound(String),
    #[error("data unit {0} is not available")]
    DuNotAvailable(String),
    #[error("allocation failed: {0}")]
    AllocFailed(String),
    #[error("task {unit_id} failed on attempt {attempt}: {reason}")]
    TaskFailed {
        unit_id: String,
        attempt: u32,
        reason: String,
    },
    #[error("partition {partition} of {imdu} lost")]
    PartitionLost { imdu: String, partition: usize },
    #[error("broadcast of {size} bytes exceeds limit {limit}")]
    BroadcastTooLarge { size: usize, limit: usize },
    #[error("unknown or released broadcast {0}")]
    UnknownBroadcast(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("iteration {iteration}: {source}")]
    InIteration {
        iteration: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("no pilots available")]
    NoPilots,
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("corrupt encoding: {0}")]
    Encoding(String),
    #[error("workload spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Validation-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::UnknownBackend(_) | Error::Spec(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
