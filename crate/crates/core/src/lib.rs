//! Pilot-based resource management.
//!
//! Pilots reserve compute ([`pilot::PilotComputeDescription`]) or storage
//! ([`pilot::PilotDataDescription`]) capacity on a backend. Compute-units
//! and data-units are submitted to a [`manager::Manager`] and bound to
//! pilots late, when capacity is actually there, using utilization and
//! affinity labels. Agents running inside pilots pull units, stage their
//! input data next to them, execute and stage results out.
//!
//! On top sits an in-memory map/reduce engine ([`engine`]) whose tasks are
//! ordinary compute-units, and the applications in [`apps`]: workload
//! files, KMeans and an I/O benchmark.

pub mod apps;
pub mod compute;
pub mod data;
pub mod engine;
pub mod error;
pub mod event;
pub mod manager;
pub mod pilot;

pub use error::{Error, Result};
pub use event::{Entity, EventLog, LogEvent};
