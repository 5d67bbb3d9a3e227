//! Process-oriented discrete-event kernel.
//!
//! Entities are resumable state machines. The engine owns every entity and a
//! single future-event queue ordered by `(time, seq)`, pops the earliest entry,
//! advances the clock and resumes exactly one entity until it blocks again by
//! returning a [`Next`] directive:
//!
//! * [`Next::Wait`] blocks until the next event addressed to the entity. Events
//!   that arrived while the entity was holding are delivered first, in order.
//! * [`Next::Hold`] suspends the entity for a span of simulated time. Events that
//!   arrive meanwhile are deferred into its inbox; they can be drained with
//!   [`Context::next_pending`] after waking.
//! * [`Next::Finish`] terminates the entity; later events addressed to it are
//!   counted as dropped.
//!
//! Equal timestamps are broken by insertion order, which makes every run with the
//! same inputs replay the same trace.

use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Simulation time in abstract time units.
pub type SimTime = f64;

/// Absolute tolerance used when comparing forecast times against arrivals.
pub const TIME_EPSILON: SimTime = 1e-9;

/// Default per-entity resumption budget for a single run.
pub const DEFAULT_STEP_BUDGET: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub usize);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event<P> {
    pub time: SimTime,
    pub source: EntityId,
    pub destination: EntityId,
    pub tag: i32,
    pub seq: u64,
    pub payload: P,
}

/// An item popped from a [`FutureEventQueue`].
#[derive(Debug)]
pub struct Scheduled<T> {
    pub time: SimTime,
    pub seq: u64,
    pub item: T,
}

impl<T> PartialEq for Scheduled<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Scheduled<T> {}

impl<T> PartialOrd for Scheduled<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Scheduled<T> {
    // Reversed so that the max-heap yields the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Timestamp-ordered queue with FIFO tie-breaking on insertion sequence.
#[derive(Debug)]
pub struct FutureEventQueue<T> {
    heap: BinaryHeap<Scheduled<T>>,
    next_seq: u64,
}

impl<T> Default for FutureEventQueue<T> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<T> FutureEventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `item` at `time` and returns the sequence number it was given.
    pub fn push(&mut self, time: SimTime, item: T) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, seq, item });
        seq
    }

    pub fn pop(&mut self) -> Option<Scheduled<T>> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|s| s.time)
    }

    /// Sequence number the next insertion will receive.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// What an entity does after it has handled a resumption.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Next {
    Wait,
    Hold(SimTime),
    Finish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityState {
    Runnable,
    Waiting,
    Holding,
    Finished,
}

/// A simulation entity. Every callback runs to completion and tells the engine
/// how to block next.
pub trait Entity<P>: Any {
    fn start(&mut self, _ctx: &mut Context<'_, P>) -> Result<Next> {
        Ok(Next::Wait)
    }

    fn on_event(&mut self, event: Event<P>, ctx: &mut Context<'_, P>) -> Result<Next>;

    fn on_wake(&mut self, _ctx: &mut Context<'_, P>) -> Result<Next> {
        Ok(Next::Wait)
    }
}

#[derive(Debug)]
enum Entry<P> {
    Deliver(Event<P>),
    Wake(EntityId),
}

#[derive(Debug, Default)]
struct Registry {
    names: Vec<String>,
    by_name: HashMap<String, EntityId>,
}

impl Registry {
    fn check(&self, id: EntityId) -> Result<()> {
        if id.0 < self.names.len() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(id.to_string()))
        }
    }
}

/// Handle given to an entity while it runs.
pub struct Context<'a, P> {
    me: EntityId,
    clock: SimTime,
    queue: &'a mut FutureEventQueue<Entry<P>>,
    registry: &'a Registry,
    inbox: &'a mut VecDeque<Event<P>>,
    stop: &'a mut bool,
}

impl<P> Context<'_, P> {
    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn id(&self) -> EntityId {
        self.me
    }

    pub fn name(&self) -> &str {
        &self.registry.names[self.me.0]
    }

    pub fn name_of(&self, id: EntityId) -> Option<&str> {
        self.registry.names.get(id.0).map(String::as_str)
    }

    pub fn lookup(&self, name: &str) -> Option<EntityId> {
        self.registry.by_name.get(name).copied()
    }

    /// Schedules an event from this entity to `destination` after `delay`.
    /// Events to self are allowed and model internal events.
    pub fn schedule(&mut self, destination: EntityId, delay: SimTime, tag: i32, payload: P) -> Result<u64> {
        push_event(
            self.queue,
            self.registry,
            self.clock,
            self.me,
            destination,
            delay,
            tag,
            payload,
        )
    }

    /// Pops the oldest deferred event, if any arrived while this entity was
    /// holding.
    pub fn next_pending(&mut self) -> Option<Event<P>> {
        self.inbox.pop_front()
    }

    pub fn pending_count(&self) -> usize {
        self.inbox.len()
    }

    /// Stops the engine once the current entity blocks. Events still queued stay
    /// queued and are reported as pending.
    pub fn stop_simulation(&mut self) {
        *self.stop = true;
    }
}

#[allow(clippy::too_many_arguments)]
fn push_event<P>(
    queue: &mut FutureEventQueue<Entry<P>>,
    registry: &Registry,
    clock: SimTime,
    source: EntityId,
    destination: EntityId,
    delay: SimTime,
    tag: i32,
    payload: P,
) -> Result<u64> {
    if !(delay.is_finite() && delay >= 0.0) {
        return Err(Error::InvalidDelay(delay));
    }
    registry.check(destination)?;
    let time = clock + delay;
    let seq = queue.next_seq();
    queue.push(
        time,
        Entry::Deliver(Event {
            time,
            source,
            destination,
            tag,
            seq,
            payload,
        }),
    );
    Ok(seq)
}

struct Slot<P> {
    entity: Option<Box<dyn Entity<P>>>,
    state: EntityState,
    inbox: VecDeque<Event<P>>,
    resumptions: u64,
    delivered: u64,
}

enum Resume<P> {
    Start,
    Event(Event<P>),
    Wake,
}

/// One popped queue entry, kept when tracing is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time: SimTime,
    pub seq: u64,
    /// `None` for hold wake-ups.
    pub source: Option<EntityId>,
    pub destination: EntityId,
    pub tag: Option<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityCount {
    pub entity: String,
    pub events: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub final_clock: SimTime,
    pub events_delivered: u64,
    pub events_dropped: u64,
    /// Events still queued when the engine stopped.
    pub events_pending: usize,
    pub entity_events: Vec<EntityCount>,
    /// SHA-256 over every popped entry `(time bits, seq, source, destination, tag)`.
    pub trace_digest: String,
}

pub struct Engine<P> {
    clock: SimTime,
    queue: FutureEventQueue<Entry<P>>,
    registry: Registry,
    slots: Vec<Slot<P>>,
    step_budget: u64,
    started: bool,
    stop: bool,
    delivered: u64,
    dropped: u64,
    hasher: Sha256,
    trace: Option<Vec<TraceEntry>>,
}

impl<P: 'static> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: 'static> Engine<P> {
    pub fn new() -> Self {
        Self {
            clock: 0.0,
            queue: FutureEventQueue::new(),
            registry: Registry::default(),
            slots: Vec::new(),
            step_budget: DEFAULT_STEP_BUDGET,
            started: false,
            stop: false,
            delivered: 0,
            dropped: 0,
            hasher: Sha256::new(),
            trace: None,
        }
    }

    pub fn set_step_budget(&mut self, budget: u64) {
        self.step_budget = budget;
    }

    /// Keeps every popped entry in memory, see [`Engine::trace`].
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    /// Registers an entity under a unique name. Entities are started in
    /// registration order when the run begins.
    pub fn register(&mut self, name: impl Into<String>, entity: impl Entity<P>) -> Result<EntityId> {
        self.register_boxed(name, Box::new(entity))
    }

    pub fn register_boxed(&mut self, name: impl Into<String>, entity: Box<dyn Entity<P>>) -> Result<EntityId> {
        let name = name.into();
        if self.registry.by_name.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = EntityId(self.slots.len());
        self.registry.by_name.insert(name.clone(), id);
        self.registry.names.push(name);
        self.slots.push(Slot {
            entity: Some(entity),
            state: EntityState::Runnable,
            inbox: VecDeque::new(),
            resumptions: 0,
            delivered: 0,
        });
        Ok(id)
    }

    /// Id the next registered entity will receive.
    pub fn next_id(&self) -> EntityId {
        EntityId(self.slots.len())
    }

    pub fn lookup(&self, name: &str) -> Option<EntityId> {
        self.registry.by_name.get(name).copied()
    }

    pub fn name(&self, id: EntityId) -> Option<&str> {
        self.registry.names.get(id.0).map(String::as_str)
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn state(&self, id: EntityId) -> Option<EntityState> {
        self.slots.get(id.0).map(|s| s.state)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn entity<T: Entity<P>>(&self, id: EntityId) -> Option<&T> {
        let entity: &dyn Any = self.slots.get(id.0)?.entity.as_deref()?;
        entity.downcast_ref::<T>()
    }

    /// Schedules an event from outside any entity, e.g. during set-up.
    pub fn schedule(
        &mut self,
        source: EntityId,
        destination: EntityId,
        delay: SimTime,
        tag: i32,
        payload: P,
    ) -> Result<u64> {
        self.registry.check(source)?;
        push_event(
            &mut self.queue,
            &self.registry,
            self.clock,
            source,
            destination,
            delay,
            tag,
            payload,
        )
    }

    /// Runs until the queue is empty or an entity stops the simulation.
    pub fn run(&mut self) -> Result<SimulationReport> {
        if !self.started {
            self.started = true;
            for i in 0..self.slots.len() {
                self.resume(EntityId(i), Resume::Start)?;
                if self.stop {
                    break;
                }
            }
        }
        while !self.stop {
            let Some(next) = self.queue.pop() else { break };
            debug_assert!(next.time >= self.clock);
            self.clock = next.time;
            match next.item {
                Entry::Deliver(event) => {
                    self.record(next.time, next.seq, Some(event.source), event.destination, Some(event.tag));
                    self.deliver(event)?;
                }
                Entry::Wake(id) => {
                    self.record(next.time, next.seq, None, id, None);
                    self.resume(id, Resume::Wake)?;
                }
            }
        }
        for slot in &mut self.slots {
            slot.state = EntityState::Finished;
        }
        Ok(self.report())
    }

    fn record(&mut self, time: SimTime, seq: u64, source: Option<EntityId>, destination: EntityId, tag: Option<i32>) {
        self.hasher.update(time.to_bits().to_le_bytes());
        self.hasher.update(seq.to_le_bytes());
        self.hasher
            .update(source.map_or(u64::MAX, |s| s.0 as u64).to_le_bytes());
        self.hasher.update((destination.0 as u64).to_le_bytes());
        self.hasher.update(tag.map_or(i64::MIN, i64::from).to_le_bytes());
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEntry {
                time,
                seq,
                source,
                destination,
                tag,
            });
        }
    }

    fn deliver(&mut self, event: Event<P>) -> Result<()> {
        self.delivered += 1;
        let id = event.destination;
        let slot = &mut self.slots[id.0];
        slot.delivered += 1;
        match slot.state {
            EntityState::Waiting => self.resume(id, Resume::Event(event)),
            EntityState::Holding | EntityState::Runnable => {
                slot.inbox.push_back(event);
                Ok(())
            }
            EntityState::Finished => {
                self.dropped += 1;
                Ok(())
            }
        }
    }

    fn resume(&mut self, id: EntityId, mut cause: Resume<P>) -> Result<()> {
        loop {
            let slot = &mut self.slots[id.0];
            slot.resumptions += 1;
            if slot.resumptions > self.step_budget {
                return Err(Error::RunawayEntity {
                    name: self.registry.names[id.0].clone(),
                    budget: self.step_budget,
                });
            }
            slot.state = EntityState::Runnable;
            let mut entity = slot
                .entity
                .take()
                .expect("entity is resumed while already running");
            let mut ctx = Context {
                me: id,
                clock: self.clock,
                queue: &mut self.queue,
                registry: &self.registry,
                inbox: &mut slot.inbox,
                stop: &mut self.stop,
            };
            let outcome = match cause {
                Resume::Start => entity.start(&mut ctx),
                Resume::Event(event) => entity.on_event(event, &mut ctx),
                Resume::Wake => entity.on_wake(&mut ctx),
            };
            slot.entity = Some(entity);
            match outcome? {
                Next::Wait => match slot.inbox.pop_front() {
                    Some(event) => cause = Resume::Event(event),
                    None => {
                        slot.state = EntityState::Waiting;
                        return Ok(());
                    }
                },
                Next::Hold(duration) => {
                    if !(duration.is_finite() && duration >= 0.0) {
                        return Err(Error::InvalidDelay(duration));
                    }
                    slot.state = EntityState::Holding;
                    self.queue.push(self.clock + duration, Entry::Wake(id));
                    return Ok(());
                }
                Next::Finish => {
                    slot.state = EntityState::Finished;
                    self.dropped += slot.inbox.len() as u64;
                    slot.inbox.clear();
                    return Ok(());
                }
            }
        }
    }

    fn report(&self) -> SimulationReport {
        SimulationReport {
            final_clock: self.clock,
            events_delivered: self.delivered,
            events_dropped: self.dropped,
            events_pending: self.queue.len(),
            entity_events: self
                .slots
                .iter()
                .zip(&self.registry.names)
                .map(|(slot, name)| EntityCount {
                    entity: name.clone(),
                    events: slot.delivered,
                })
                .collect(),
            trace_digest: hex_digest(self.hasher.clone()),
        }
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
