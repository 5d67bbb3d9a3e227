//! Event payloads exchanged between simulation entities.

use crate::application::{Gridlet, GridletId, GridletStatus};
use crate::broker::Experiment;
use crate::kernel::{Engine, EntityId};
use crate::resource::{ResourceCharacteristics, ResourceDynamics};
use crate::stats::{AccumulatorSummary, StatRecord};

/// Self-addressed resource events.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InternalEvent {
    /// Forecast completion carrying the tag it was scheduled with.
    Completion(u64),
    /// Local-load regime change on the resource calendar.
    LoadBoundary(u64),
    /// Broker polling timer.
    Timer(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Empty,
    ResourceListRequest,
    ResourceList(Vec<EntityId>),
    CharacteristicsRequest,
    Characteristics(Box<ResourceCharacteristics>),
    DynamicsRequest,
    Dynamics(ResourceDynamics),
    Gridlet(Box<Gridlet>),
    GridletStatusRequest(GridletId),
    GridletStatus {
        id: GridletId,
        status: Option<GridletStatus>,
    },
    Internal(InternalEvent),
    Experiment(Box<Experiment>),
    Stat(StatRecord),
    /// Category pattern to filter recorded statistics by.
    StatListRequest(String),
    StatList(Vec<StatRecord>),
    AccStatsRequest(String),
    AccStats {
        pattern: String,
        summary: Option<AccumulatorSummary>,
    },
}

/// Engine specialised to the grid message vocabulary.
pub type GridEngine = Engine<Message>;
pub type GridContext<'a> = crate::kernel::Context<'a, Message>;
pub type GridEvent = crate::kernel::Event<Message>;
