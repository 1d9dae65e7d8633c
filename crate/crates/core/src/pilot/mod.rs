//! Domain types shared by every layer: descriptions of pilots and units,
//! backend locators, translation of pilot descriptions into backend
//! requests, and the pilot/unit lifecycle tables.

mod description;
mod labels;
mod locator;
mod state;
mod translate;

pub use description::{
    ComputeUnitDescription, DataItemRef, DataUnitDescription, PilotComputeDescription,
    PilotDataDescription, UnitKind, Validate, DEFAULT_QUEUE,
};
pub use labels::AffinityLabels;
pub use locator::{BackendKind, Locator};
pub use state::{transition, Event, LifecycleState, PilotState, UnitState};
pub use translate::{translate_description, BackendCapacity, BackendRequest, APP_MASTER_MEMORY_MB};
