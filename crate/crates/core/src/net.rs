//! Networked entity plumbing: message tags, I/O ports with baud-rate delays,
//! the resource directory and the shutdown coordinator.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Entity, EntityId, Next, SimTime};
use crate::message::{GridContext, GridEvent, Message};

/// Protocol tags shared by all entities.
pub mod tags {
    pub const END_OF_SIMULATION: i32 = -1;
    pub const INSIGNIFICANT: i32 = 0;
    pub const EXPERIMENT: i32 = 1;
    pub const REGISTER_RESOURCE: i32 = 2;
    pub const RESOURCE_LIST: i32 = 3;
    pub const RESOURCE_CHARACTERISTICS: i32 = 4;
    pub const RESOURCE_DYNAMICS: i32 = 5;
    pub const GRIDLET_SUBMIT: i32 = 6;
    pub const GRIDLET_RETURN: i32 = 7;
    pub const GRIDLET_STATUS: i32 = 8;
    pub const RECORD_STATISTICS: i32 = 9;
    pub const RETURN_STAT_LIST: i32 = 10;
    pub const RETURN_ACC_STATISTICS_BY_CATEGORY: i32 = 11;
    pub const DEFAULT_BAUD_RATE: i32 = 9600;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(i32)]
pub enum MessageTag {
    EndOfSimulation = tags::END_OF_SIMULATION,
    Insignificant = tags::INSIGNIFICANT,
    Experiment = tags::EXPERIMENT,
    RegisterResource = tags::REGISTER_RESOURCE,
    ResourceList = tags::RESOURCE_LIST,
    ResourceCharacteristics = tags::RESOURCE_CHARACTERISTICS,
    ResourceDynamics = tags::RESOURCE_DYNAMICS,
    GridletSubmit = tags::GRIDLET_SUBMIT,
    GridletReturn = tags::GRIDLET_RETURN,
    GridletStatus = tags::GRIDLET_STATUS,
    RecordStatistics = tags::RECORD_STATISTICS,
    ReturnStatList = tags::RETURN_STAT_LIST,
    ReturnAccStatisticsByCategory = tags::RETURN_ACC_STATISTICS_BY_CATEGORY,
}

impl MessageTag {
    pub const ALL: [MessageTag; 13] = [
        MessageTag::EndOfSimulation,
        MessageTag::Insignificant,
        MessageTag::Experiment,
        MessageTag::RegisterResource,
        MessageTag::ResourceList,
        MessageTag::ResourceCharacteristics,
        MessageTag::ResourceDynamics,
        MessageTag::GridletSubmit,
        MessageTag::GridletReturn,
        MessageTag::GridletStatus,
        MessageTag::RecordStatistics,
        MessageTag::ReturnStatList,
        MessageTag::ReturnAccStatisticsByCategory,
    ];

    pub fn value(self) -> i32 {
        self as i32
    }
}

impl TryFrom<i32> for MessageTag {
    type Error = i32;

    fn try_from(v: i32) -> std::result::Result<Self, i32> {
        MessageTag::ALL
            .into_iter()
            .find(|t| t.value() == v)
            .ok_or(v)
    }
}

/// Baud rate used when an entity is created without one.
pub const DEFAULT_BAUD_RATE: f64 = tags::DEFAULT_BAUD_RATE as f64;

/// Time to push `size_bytes` through a link of `baud_rate` bits per time unit.
pub fn transfer_delay(size_bytes: u64, baud_rate: f64) -> Result<SimTime> {
    if !(baud_rate.is_finite() && baud_rate > 0.0) {
        return Err(Error::InvalidRate(baud_rate));
    }
    Ok(8.0 * size_bytes as f64 / baud_rate)
}

/// Network behaviour switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Directory replies skip the output port and arrive instantly.
    pub gis_bypass_network: bool,
    /// Returned gridlets are sized by their output size rather than zero.
    pub return_uses_output_size: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            gis_bypass_network: false,
            return_uses_output_size: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PortDirection {
    Input,
    Output,
}

/// A buffered network port. Outgoing transfers are serialized: a transfer
/// starts only once the previous one has left the port, which keeps delivery
/// FIFO per destination.
#[derive(Clone, Debug)]
pub struct IoPort {
    owner: EntityId,
    direction: PortDirection,
    baud_rate: f64,
    busy_until: SimTime,
    transfers: u64,
}

impl IoPort {
    pub fn new(owner: EntityId, direction: PortDirection, baud_rate: f64) -> Result<Self> {
        if !(baud_rate.is_finite() && baud_rate > 0.0) {
            return Err(Error::InvalidRate(baud_rate));
        }
        Ok(Self {
            owner,
            direction,
            baud_rate,
            busy_until: 0.0,
            transfers: 0,
        })
    }

    pub fn output(owner: EntityId, baud_rate: f64) -> Result<Self> {
        Self::new(owner, PortDirection::Output, baud_rate)
    }

    pub fn owner(&self) -> EntityId {
        self.owner
    }

    pub fn direction(&self) -> PortDirection {
        self.direction
    }

    pub fn baud_rate(&self) -> f64 {
        self.baud_rate
    }

    pub fn transfers(&self) -> u64 {
        self.transfers
    }

    /// Sends `payload` to `destination`; returns the arrival time.
    pub fn send(
        &mut self,
        ctx: &mut GridContext<'_>,
        destination: EntityId,
        tag: i32,
        size_bytes: u64,
        payload: Message,
    ) -> Result<SimTime> {
        if self.direction != PortDirection::Output {
            return Err(Error::protocol(self.owner, "send through an input port"));
        }
        let now = ctx.now();
        let start = self.busy_until.max(now);
        let arrival = start + transfer_delay(size_bytes, self.baud_rate)?;
        ctx.schedule(destination, arrival - now, tag, payload)?;
        self.busy_until = arrival;
        self.transfers += 1;
        Ok(arrival)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectoryRecord {
    pub resource: EntityId,
    pub registration_time: SimTime,
}

/// Registration and discovery directory for resources.
#[derive(Debug)]
pub struct GridInformationService {
    records: Vec<DirectoryRecord>,
    port: IoPort,
    bypass_network: bool,
}

impl GridInformationService {
    pub fn new(id: EntityId, baud_rate: f64, net: NetConfig) -> Result<Self> {
        Ok(Self {
            records: Vec::new(),
            port: IoPort::output(id, baud_rate)?,
            bypass_network: net.gis_bypass_network,
        })
    }

    /// Stores or refreshes the record for `resource`. A refreshed record moves
    /// behind every record registered earlier.
    pub fn register_resource(&mut self, resource: EntityId, now: SimTime) {
        self.records.retain(|r| r.resource != resource);
        self.records.push(DirectoryRecord {
            resource,
            registration_time: now,
        });
    }

    /// Registered resources ordered by registration time.
    pub fn resource_list(&self) -> Vec<EntityId> {
        self.records.iter().map(|r| r.resource).collect()
    }

    pub fn records(&self) -> &[DirectoryRecord] {
        &self.records
    }

    fn reply(&mut self, ctx: &mut GridContext<'_>, to: EntityId, tag: i32, payload: Message) -> Result<()> {
        if self.bypass_network {
            ctx.schedule(to, 0.0, tag, payload)?;
        } else {
            self.port.send(ctx, to, tag, 0, payload)?;
        }
        Ok(())
    }
}

impl Entity<Message> for GridInformationService {
    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        match ev.tag {
            tags::END_OF_SIMULATION => return Ok(Next::Finish),
            tags::REGISTER_RESOURCE => self.register_resource(ev.source, ctx.now()),
            tags::RESOURCE_LIST => {
                let list = self.resource_list();
                self.reply(ctx, ev.source, tags::RESOURCE_LIST, Message::ResourceList(list))?;
            }
            other => {
                return Err(Error::protocol(ctx.id(), format!("directory got tag {other}")));
            }
        }
        Ok(Next::Wait)
    }
}

/// Waits for every user to signal completion, lets the report writer (if any)
/// collect its data, then broadcasts the end of simulation.
#[derive(Debug)]
pub struct ShutdownCoordinator {
    user_count: usize,
    finished_users: HashSet<EntityId>,
    report_writer: Option<EntityId>,
    recipients: Vec<EntityId>,
    awaiting_writer: bool,
    fired_at: Option<SimTime>,
}

impl ShutdownCoordinator {
    pub fn new(user_count: usize, report_writer: Option<EntityId>, recipients: Vec<EntityId>) -> Self {
        Self {
            user_count,
            finished_users: HashSet::new(),
            report_writer,
            recipients,
            awaiting_writer: false,
            fired_at: None,
        }
    }

    pub fn fired_at(&self) -> Option<SimTime> {
        self.fired_at
    }

    fn users_done(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        match self.report_writer {
            Some(writer) => {
                ctx.schedule(writer, 0.0, tags::END_OF_SIMULATION, Message::Empty)?;
                self.awaiting_writer = true;
                Ok(Next::Wait)
            }
            None => self.broadcast(ctx),
        }
    }

    fn broadcast(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        for &to in &self.recipients {
            ctx.schedule(to, 0.0, tags::END_OF_SIMULATION, Message::Empty)?;
        }
        self.fired_at = Some(ctx.now());
        Ok(Next::Finish)
    }
}

impl Entity<Message> for ShutdownCoordinator {
    fn start(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        if self.user_count == 0 {
            self.users_done(ctx)
        } else {
            Ok(Next::Wait)
        }
    }

    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        if ev.tag != tags::END_OF_SIMULATION {
            return Err(Error::protocol(ctx.id(), format!("shutdown got tag {}", ev.tag)));
        }
        if self.awaiting_writer {
            if Some(ev.source) == self.report_writer {
                return self.broadcast(ctx);
            }
            return Ok(Next::Wait);
        }
        self.finished_users.insert(ev.source);
        if self.finished_users.len() >= self.user_count {
            self.users_done(ctx)
        } else {
            Ok(Next::Wait)
        }
    }
}
