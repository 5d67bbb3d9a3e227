//! Grid resources: PEs grouped into machines, a local-load calendar, and the
//! event-driven time-shared and space-shared schedulers.
//!
//! The schedulers are plain state machines that turn arrivals and internal
//! events into [`Directive`]s; [`GridResource`] wires them to the kernel.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::application::{Gridlet, GridletId, GridletStatus};
use crate::error::{Error, Result};
use crate::kernel::{Entity, EntityId, Next, SimTime, TIME_EPSILON};
use crate::message::{GridContext, GridEvent, InternalEvent, Message};
use crate::net::{tags, IoPort, NetConfig};

/// Remaining work at or below this (relative to the gridlet length, floored
/// at 1 MI) counts as complete.
pub const MI_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeStatus {
    Free,
    Busy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessingElement {
    pub id: usize,
    pub mips_rating: f64,
    pub status: PeStatus,
}

impl ProcessingElement {
    pub fn new(id: usize, mips_rating: f64) -> Self {
        Self {
            id,
            mips_rating,
            status: PeStatus::Free,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub id: usize,
    pub pes: Vec<ProcessingElement>,
}

impl Machine {
    /// A machine of `n_pes` identical PEs.
    pub fn uniform(id: usize, n_pes: usize, mips_rating: f64) -> Self {
        Self {
            id,
            pes: (0..n_pes).map(|i| ProcessingElement::new(i, mips_rating)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationPolicy {
    TimeShared,
    SpaceShared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceCharacteristics {
    pub architecture: String,
    pub os: String,
    pub machines: Vec<Machine>,
    pub policy: AllocationPolicy,
    /// Hours offset from the simulation's reference time zone.
    pub time_zone: f64,
    /// G$ per PE per time unit.
    pub cost_per_pe_time_unit: f64,
}

impl ResourceCharacteristics {
    pub fn validate(&self) -> Result<()> {
        if self.machines.is_empty() {
            return Err(Error::InvalidResource("resource has no machines".into()));
        }
        for m in &self.machines {
            if m.pes.is_empty() {
                return Err(Error::InvalidResource(format!("machine {} has no PEs", m.id)));
            }
            if let Some(pe) = m.pes.iter().find(|pe| !(pe.mips_rating.is_finite() && pe.mips_rating > 0.0)) {
                return Err(Error::InvalidResource(format!(
                    "machine {} PE {} has rating {}",
                    m.id, pe.id, pe.mips_rating
                )));
            }
        }
        if !(self.cost_per_pe_time_unit.is_finite() && self.cost_per_pe_time_unit >= 0.0) {
            return Err(Error::InvalidResource(format!(
                "negative cost {}",
                self.cost_per_pe_time_unit
            )));
        }
        if self.policy == AllocationPolicy::TimeShared {
            if self.machines.len() != 1 {
                return Err(Error::InvalidResource(
                    "a time-shared resource must have exactly one machine".into(),
                ));
            }
            let rating = self.pe_mips();
            if self.machines[0].pes.iter().any(|pe| pe.mips_rating != rating) {
                return Err(Error::InvalidResource(
                    "a time-shared resource needs identical PE ratings".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_pes(&self) -> usize {
        self.machines.iter().map(|m| m.pes.len()).sum()
    }

    /// Rating of the first PE; PEs of time-shared resources are identical.
    pub fn pe_mips(&self) -> f64 {
        self.machines
            .first()
            .and_then(|m| m.pes.first())
            .map_or(0.0, |pe| pe.mips_rating)
    }

    pub fn slowest_pe_mips(&self) -> f64 {
        self.pe_ratings().fold(f64::INFINITY, f64::min)
    }

    pub fn total_mips(&self) -> f64 {
        self.pe_ratings().sum()
    }

    pub fn pe_ratings(&self) -> impl Iterator<Item = f64> + '_ {
        self.machines.iter().flat_map(|m| m.pes.iter().map(|pe| pe.mips_rating))
    }
}

/// Local (non-grid) load as a function of local time.
///
/// Simulation time is mapped to local wall-clock hours through
/// `time_units_per_hour` and the time zone; local day 0 falls on
/// `start_weekday` (0 = Sunday). Weekends and holidays use `holiday_load`,
/// other days use `peak_load` inside `[peak_start_hour, peak_end_hour)` and
/// `off_peak_load` outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceCalendar {
    pub time_zone: f64,
    pub weekends: BTreeSet<u8>,
    /// Local day indices counted from simulation start.
    pub holidays: BTreeSet<i64>,
    pub peak_load: f64,
    pub off_peak_load: f64,
    pub holiday_load: f64,
    pub peak_start_hour: f64,
    pub peak_end_hour: f64,
    pub start_weekday: u8,
    pub time_units_per_hour: f64,
}

impl Default for ResourceCalendar {
    fn default() -> Self {
        Self {
            time_zone: 0.0,
            weekends: [0, 6].into_iter().collect(),
            holidays: BTreeSet::new(),
            peak_load: 0.0,
            off_peak_load: 0.0,
            holiday_load: 0.0,
            peak_start_hour: 9.0,
            peak_end_hour: 17.0,
            start_weekday: 1,
            time_units_per_hour: 3600.0,
        }
    }
}

const HOUR_NUDGE: f64 = 1e-9;

impl ResourceCalendar {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("peak_load", self.peak_load),
            ("off_peak_load", self.off_peak_load),
            ("holiday_load", self.holiday_load),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidResource(format!("{name} = {v} is outside [0, 1)")));
            }
        }
        if !(0.0 <= self.peak_start_hour
            && self.peak_start_hour <= self.peak_end_hour
            && self.peak_end_hour <= 24.0)
        {
            return Err(Error::InvalidResource("peak hours must satisfy 0 <= start <= end <= 24".into()));
        }
        if !(self.time_units_per_hour.is_finite() && self.time_units_per_hour > 0.0) {
            return Err(Error::InvalidResource("time_units_per_hour must be positive".into()));
        }
        if self.start_weekday > 6 || self.weekends.iter().any(|&d| d > 6) {
            return Err(Error::InvalidResource("weekday indices must be 0..=6".into()));
        }
        Ok(())
    }

    /// True when the load never changes, so no regime boundaries exist.
    pub fn is_constant(&self) -> bool {
        let weekday_constant = self.peak_load == self.off_peak_load
            || self.peak_start_hour == self.peak_end_hour;
        let no_special_days = self.weekends.is_empty() && self.holidays.is_empty();
        weekday_constant && (no_special_days || self.holiday_load == self.off_peak_load)
    }

    fn local_hours(&self, now: SimTime) -> f64 {
        now / self.time_units_per_hour + self.time_zone
    }

    pub fn load_at(&self, now: SimTime) -> f64 {
        let local = self.local_hours(now) + HOUR_NUDGE;
        let day = (local / 24.0).floor();
        let hour = local - day * 24.0;
        let day = day as i64;
        let weekday = (i64::from(self.start_weekday) + day).rem_euclid(7) as u8;
        if self.weekends.contains(&weekday) || self.holidays.contains(&day) {
            self.holiday_load
        } else if self.peak_start_hour <= hour && hour < self.peak_end_hour {
            self.peak_load
        } else {
            self.off_peak_load
        }
    }

    /// Fraction of a PE available to grid work at `now`.
    pub fn availability(&self, now: SimTime) -> f64 {
        1.0 - self.load_at(now)
    }

    /// Next instant after `now` at which the load regime may change.
    pub fn next_boundary(&self, now: SimTime) -> Option<SimTime> {
        if self.is_constant() {
            return None;
        }
        let local = self.local_hours(now);
        let day_start = (local / 24.0).floor() * 24.0;
        let candidates = [
            day_start + self.peak_start_hour,
            day_start + self.peak_end_hour,
            day_start + 24.0,
            day_start + 24.0 + self.peak_start_hour,
        ];
        let next = candidates
            .into_iter()
            .filter(|&h| h > local + 1e-6)
            .fold(f64::INFINITY, f64::min);
        Some((next - self.time_zone) * self.time_units_per_hour)
    }
}

/// `rating * (1 - load(now))`.
pub fn effective_mips(pe: &ProcessingElement, calendar: &ResourceCalendar, now: SimTime) -> f64 {
    pe.mips_rating * calendar.availability(now)
}

/// Per-gridlet MI shares for one interval on a time-shared resource.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShareTable {
    pub max_share_mi: f64,
    pub min_share_mi: f64,
    pub n_max_share_gridlets: usize,
}

/// Splits `duration` worth of PE capacity among `n_gridlets` gridlets: PEs
/// hosting one gridlet fewer hand out the larger share.
pub fn pe_share_allocation(
    duration: SimTime,
    n_gridlets: usize,
    n_pes: usize,
    mips_per_pe: f64,
) -> Result<ShareTable> {
    if n_pes == 0 {
        return Err(Error::InvalidResource("no processing elements".into()));
    }
    if n_gridlets == 0 {
        return Err(Error::NoWork);
    }
    let total_mi_per_pe = mips_per_pe * duration;
    if n_gridlets <= n_pes {
        return Ok(ShareTable {
            max_share_mi: total_mi_per_pe,
            min_share_mi: total_mi_per_pe,
            n_max_share_gridlets: n_gridlets,
        });
    }
    let per_pe = n_gridlets / n_pes;
    let pes_with_extra = n_gridlets % n_pes;
    Ok(ShareTable {
        max_share_mi: total_mi_per_pe / per_pe as f64,
        min_share_mi: total_mi_per_pe / (per_pe + 1) as f64,
        n_max_share_gridlets: (n_pes - pes_with_extra) * per_pe,
    })
}

/// A gridlet held by a resource.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidentGridlet {
    pub gridlet: Gridlet,
    pub arrival_time: SimTime,
    pub remaining_mi: f64,
    pub machine_id: Option<usize>,
    pub pe_id: Option<usize>,
    pub last_update: SimTime,
    /// Total MI credited so far; equals the length on completion.
    pub credited_mi: f64,
    arrival_seq: u64,
    tag: u64,
}

impl ResidentGridlet {
    fn new(mut gridlet: Gridlet, now: SimTime, arrival_seq: u64) -> Self {
        gridlet.status = GridletStatus::Queued;
        Self {
            remaining_mi: gridlet.length_mi,
            gridlet,
            arrival_time: now,
            machine_id: None,
            pe_id: None,
            last_update: now,
            credited_mi: 0.0,
            arrival_seq,
            tag: 0,
        }
    }

    fn credit(&mut self, mi: f64, now: SimTime) {
        let mi = mi.min(self.remaining_mi).max(0.0);
        self.remaining_mi -= mi;
        self.credited_mi += mi;
        self.last_update = now;
    }

    fn is_done(&self) -> bool {
        self.remaining_mi <= MI_TOLERANCE * self.gridlet.length_mi.max(1.0)
    }

    fn finish(mut self, now: SimTime) -> Gridlet {
        self.credited_mi += self.remaining_mi;
        self.remaining_mi = 0.0;
        let g = &mut self.gridlet;
        g.status = GridletStatus::Success;
        g.finish_time = now;
        g.wall_clock = now - self.arrival_time;
        self.gridlet
    }
}

/// Bookkeeping for internal completion events; only the most recently
/// scheduled tag is live.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompletionForecast {
    pub event_tag_counter: u64,
    pub latest_tag: u64,
    pub forecast_time: SimTime,
}

impl CompletionForecast {
    fn issue(&mut self, at: SimTime) -> u64 {
        self.event_tag_counter += 1;
        self.latest_tag = self.event_tag_counter;
        self.forecast_time = at;
        self.latest_tag
    }

    pub fn is_current(&self, tag: u64) -> bool {
        self.latest_tag != 0 && tag == self.latest_tag
    }
}

/// Side effects requested by a scheduler.
#[derive(Clone, Debug, PartialEq)]
pub enum Directive {
    /// Schedule an internal completion event at absolute time `at`.
    Internal { at: SimTime, tag: u64 },
    /// Send a finished gridlet back to its owner.
    Return(Gridlet),
}

/// Completion time of the earliest-finishing gridlet when `remaining` are
/// shared round-robin over `n_pes` PEs, starting at `now`.
pub fn forecast_next_completion(remaining: &[f64], n_pes: usize, mips_per_pe: f64, now: SimTime) -> Result<SimTime> {
    let rates = share_rates(remaining, n_pes, mips_per_pe)?;
    Ok(now + earliest_finish(remaining, &rates))
}

/// MI per time unit each gridlet receives. Gridlets with the least remaining
/// work get the larger share; ties go to the earlier entry.
fn share_rates(remaining: &[f64], n_pes: usize, mips_per_pe: f64) -> Result<Vec<f64>> {
    let table = pe_share_allocation(1.0, remaining.len(), n_pes, mips_per_pe)?;
    let mut order: Vec<usize> = (0..remaining.len()).collect();
    order.sort_by(|&a, &b| remaining[a].total_cmp(&remaining[b]).then(a.cmp(&b)));
    let mut rates = vec![table.min_share_mi; remaining.len()];
    for &i in order.iter().take(table.n_max_share_gridlets) {
        rates[i] = table.max_share_mi;
    }
    Ok(rates)
}

fn earliest_finish(remaining: &[f64], rates: &[f64]) -> SimTime {
    remaining
        .iter()
        .zip(rates)
        .map(|(r, rate)| r / rate)
        .fold(f64::INFINITY, f64::min)
}

/// Round-robin scheduler: every resident gridlet executes, sharing the PEs.
#[derive(Clone, Debug)]
pub struct TimeSharedScheduler {
    n_pes: usize,
    pe_mips: f64,
    availability: f64,
    exec: Vec<ResidentGridlet>,
    last_update: SimTime,
    forecast: CompletionForecast,
    arrivals: u64,
}

impl TimeSharedScheduler {
    pub fn new(n_pes: usize, pe_mips: f64) -> Result<Self> {
        if n_pes == 0 {
            return Err(Error::InvalidResource("no processing elements".into()));
        }
        Ok(Self {
            n_pes,
            pe_mips,
            availability: 1.0,
            exec: Vec::new(),
            last_update: 0.0,
            forecast: CompletionForecast::default(),
            arrivals: 0,
        })
    }

    pub fn executing(&self) -> &[ResidentGridlet] {
        &self.exec
    }

    pub fn forecast(&self) -> CompletionForecast {
        self.forecast
    }

    fn effective_mips(&self) -> f64 {
        self.pe_mips * self.availability
    }

    fn remaining(&self) -> Vec<f64> {
        self.exec.iter().map(|g| g.remaining_mi).collect()
    }

    /// Credits every executing gridlet with its share since the last update.
    fn advance(&mut self, now: SimTime) {
        let dt = now - self.last_update;
        if dt > 0.0 && !self.exec.is_empty() {
            let rates = share_rates(&self.remaining(), self.n_pes, self.effective_mips())
                .expect("non-empty execution set on a resource with PEs");
            for (g, rate) in self.exec.iter_mut().zip(rates) {
                g.credit(rate * dt, now);
            }
        }
        self.last_update = self.last_update.max(now);
    }

    fn reforecast(&mut self, now: SimTime) -> Option<Directive> {
        if self.exec.is_empty() {
            return None;
        }
        let at = forecast_next_completion(&self.remaining(), self.n_pes, self.effective_mips(), now)
            .expect("non-empty execution set");
        let tag = self.forecast.issue(at);
        Some(Directive::Internal { at, tag })
    }

    pub fn submit(&mut self, gridlet: Gridlet, now: SimTime, availability: f64) -> Vec<Directive> {
        self.advance(now);
        self.availability = availability;
        let mut rg = ResidentGridlet::new(gridlet, now, self.arrivals);
        self.arrivals += 1;
        rg.gridlet.status = GridletStatus::InExec;
        rg.gridlet.exec_start_time = now;
        rg.machine_id = Some(0);
        self.exec.push(rg);
        self.reforecast(now).into_iter().collect()
    }

    /// Handles an internal event; stale tags are ignored.
    pub fn on_internal(&mut self, tag: u64, now: SimTime, availability: f64) -> Vec<Directive> {
        if !self.forecast.is_current(tag) {
            return Vec::new();
        }
        self.advance(now);
        let rates = share_rates(&self.remaining(), self.n_pes, self.effective_mips())
            .unwrap_or_default();
        self.availability = availability;
        let (done, running): (Vec<_>, Vec<_>) = std::mem::take(&mut self.exec)
            .into_iter()
            .zip(rates)
            .partition(|(g, rate)| g.is_done() || g.remaining_mi / rate <= TIME_EPSILON);
        self.exec = running.into_iter().map(|(g, _)| g).collect();
        let mut out: Vec<Directive> = done
            .into_iter()
            .map(|(g, _)| Directive::Return(g.finish(now)))
            .collect();
        out.extend(self.reforecast(now));
        out
    }

    /// Re-plans after the local load changed.
    pub fn on_load_change(&mut self, now: SimTime, availability: f64) -> Vec<Directive> {
        self.advance(now);
        self.availability = availability;
        self.reforecast(now).into_iter().collect()
    }

    pub fn n_executing(&self) -> usize {
        self.exec.len()
    }

    pub fn status_of(&self, id: GridletId) -> Option<GridletStatus> {
        self.exec.iter().find(|g| g.gridlet.id == id).map(|g| g.gridlet.status)
    }
}

/// FCFS scheduler: each running gridlet owns one PE, the rest queue.
#[derive(Clone, Debug)]
pub struct SpaceSharedScheduler {
    machines: Vec<Machine>,
    availability: f64,
    exec: Vec<ResidentGridlet>,
    queue: VecDeque<ResidentGridlet>,
    last_update: SimTime,
    tag_counter: u64,
    arrivals: u64,
}

impl SpaceSharedScheduler {
    pub fn new(machines: Vec<Machine>) -> Result<Self> {
        if machines.iter().all(|m| m.pes.is_empty()) {
            return Err(Error::InvalidResource("no processing elements".into()));
        }
        let machines = machines
            .into_iter()
            .map(|mut m| {
                for pe in &mut m.pes {
                    pe.status = PeStatus::Free;
                }
                m
            })
            .collect();
        Ok(Self {
            machines,
            availability: 1.0,
            exec: Vec::new(),
            queue: VecDeque::new(),
            last_update: 0.0,
            tag_counter: 0,
            arrivals: 0,
        })
    }

    pub fn machines(&self) -> &[Machine] {
        &self.machines
    }

    pub fn executing(&self) -> &[ResidentGridlet] {
        &self.exec
    }

    pub fn queued(&self) -> impl Iterator<Item = &ResidentGridlet> {
        self.queue.iter()
    }

    fn pe_rate(&self, g: &ResidentGridlet) -> f64 {
        let (m, p) = (g.machine_id.unwrap_or(0), g.pe_id.unwrap_or(0));
        self.machines[m].pes[p].mips_rating * self.availability
    }

    fn advance(&mut self, now: SimTime) {
        let dt = now - self.last_update;
        if dt > 0.0 {
            for i in 0..self.exec.len() {
                let rate = self.pe_rate(&self.exec[i]);
                self.exec[i].credit(rate * dt, now);
            }
        }
        self.last_update = self.last_update.max(now);
    }

    fn free_pe(&self) -> Option<(usize, usize)> {
        self.machines.iter().enumerate().find_map(|(mi, m)| {
            m.pes
                .iter()
                .position(|pe| pe.status == PeStatus::Free)
                .map(|pi| (mi, pi))
        })
    }

    /// Places `rg` on the lowest-indexed free PE of the lowest-indexed machine
    /// that has one and schedules its completion.
    pub fn allocate_pe_to_gridlet(&mut self, mut rg: ResidentGridlet, now: SimTime) -> Result<Directive> {
        let (mi, pi) = self.free_pe().ok_or(Error::NoFreePe)?;
        self.machines[mi].pes[pi].status = PeStatus::Busy;
        rg.machine_id = Some(mi);
        rg.pe_id = Some(pi);
        rg.last_update = now;
        rg.gridlet.status = GridletStatus::InExec;
        rg.gridlet.exec_start_time = now;
        let directive = self.schedule_completion(&mut rg, now);
        self.exec.push(rg);
        Ok(directive)
    }

    fn schedule_completion(&mut self, rg: &mut ResidentGridlet, now: SimTime) -> Directive {
        self.tag_counter += 1;
        rg.tag = self.tag_counter;
        let at = now + rg.remaining_mi / self.pe_rate(rg);
        Directive::Internal { at, tag: rg.tag }
    }

    pub fn submit(&mut self, gridlet: Gridlet, now: SimTime, availability: f64) -> Vec<Directive> {
        self.advance(now);
        self.availability = availability;
        let rg = ResidentGridlet::new(gridlet, now, self.arrivals);
        self.arrivals += 1;
        match self.free_pe() {
            Some(_) => vec![self.allocate_pe_to_gridlet(rg, now).expect("a PE is free")],
            None => {
                self.queue.push_back(rg);
                Vec::new()
            }
        }
    }

    /// Completes the gridlet whose live tag is `tag`, frees its PE and starts
    /// queued gridlets in arrival order. Unknown tags are stale.
    pub fn on_internal(&mut self, tag: u64, now: SimTime, availability: f64) -> Vec<Directive> {
        let Some(idx) = self.exec.iter().position(|g| g.tag == tag) else {
            return Vec::new();
        };
        self.advance(now);
        self.availability = availability;
        let done = self.exec.remove(idx);
        let (mi, pi) = (done.machine_id.unwrap_or(0), done.pe_id.unwrap_or(0));
        self.machines[mi].pes[pi].status = PeStatus::Free;
        let mut out = vec![Directive::Return(done.finish(now))];
        while self.free_pe().is_some() {
            let Some(next) = self.queue.pop_front() else { break };
            out.push(self.allocate_pe_to_gridlet(next, now).expect("a PE is free"));
        }
        out
    }

    /// Re-plans every running gridlet after the local load changed.
    pub fn on_load_change(&mut self, now: SimTime, availability: f64) -> Vec<Directive> {
        self.advance(now);
        self.availability = availability;
        let mut exec = std::mem::take(&mut self.exec);
        let out = exec
            .iter_mut()
            .map(|rg| self.schedule_completion(rg, now))
            .collect();
        self.exec = exec;
        out
    }

    pub fn n_executing(&self) -> usize {
        self.exec.len()
    }

    pub fn n_queued(&self) -> usize {
        self.queue.len()
    }

    pub fn status_of(&self, id: GridletId) -> Option<GridletStatus> {
        self.exec
            .iter()
            .chain(self.queue.iter())
            .find(|g| g.gridlet.id == id)
            .map(|g| g.gridlet.status)
    }
}

#[derive(Clone, Debug)]
pub enum Scheduler {
    TimeShared(TimeSharedScheduler),
    SpaceShared(SpaceSharedScheduler),
}

impl Scheduler {
    pub fn for_resource(c: &ResourceCharacteristics) -> Result<Self> {
        c.validate()?;
        Ok(match c.policy {
            AllocationPolicy::TimeShared => Scheduler::TimeShared(TimeSharedScheduler::new(c.num_pes(), c.pe_mips())?),
            AllocationPolicy::SpaceShared => Scheduler::SpaceShared(SpaceSharedScheduler::new(c.machines.clone())?),
        })
    }

    pub fn submit(&mut self, g: Gridlet, now: SimTime, availability: f64) -> Vec<Directive> {
        match self {
            Scheduler::TimeShared(s) => s.submit(g, now, availability),
            Scheduler::SpaceShared(s) => s.submit(g, now, availability),
        }
    }

    pub fn on_internal(&mut self, tag: u64, now: SimTime, availability: f64) -> Vec<Directive> {
        match self {
            Scheduler::TimeShared(s) => s.on_internal(tag, now, availability),
            Scheduler::SpaceShared(s) => s.on_internal(tag, now, availability),
        }
    }

    pub fn on_load_change(&mut self, now: SimTime, availability: f64) -> Vec<Directive> {
        match self {
            Scheduler::TimeShared(s) => s.on_load_change(now, availability),
            Scheduler::SpaceShared(s) => s.on_load_change(now, availability),
        }
    }

    pub fn n_executing(&self) -> usize {
        match self {
            Scheduler::TimeShared(s) => s.n_executing(),
            Scheduler::SpaceShared(s) => s.n_executing(),
        }
    }

    pub fn n_queued(&self) -> usize {
        match self {
            Scheduler::TimeShared(_) => 0,
            Scheduler::SpaceShared(s) => s.n_queued(),
        }
    }

    pub fn status_of(&self, id: GridletId) -> Option<GridletStatus> {
        match self {
            Scheduler::TimeShared(s) => s.status_of(id),
            Scheduler::SpaceShared(s) => s.status_of(id),
        }
    }
}

/// Reply to a resource-dynamics query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceDynamics {
    pub n_executing: usize,
    pub n_queued: usize,
    pub effective_load: f64,
}

/// A resource entity: registers with the directory, answers queries and
/// executes submitted gridlets.
#[derive(Debug)]
pub struct GridResource {
    characteristics: ResourceCharacteristics,
    calendar: ResourceCalendar,
    scheduler: Scheduler,
    port: IoPort,
    gis: Option<EntityId>,
    net: NetConfig,
    submitted: u64,
    returned: u64,
    boundary_token: u64,
    boundary_pending: bool,
}

impl GridResource {
    pub fn new(
        id: EntityId,
        characteristics: ResourceCharacteristics,
        calendar: ResourceCalendar,
        baud_rate: f64,
        gis: Option<EntityId>,
        net: NetConfig,
    ) -> Result<Self> {
        calendar.validate()?;
        let scheduler = Scheduler::for_resource(&characteristics)?;
        Ok(Self {
            characteristics,
            calendar,
            scheduler,
            port: IoPort::output(id, baud_rate)?,
            gis,
            net,
            submitted: 0,
            returned: 0,
            boundary_token: 0,
            boundary_pending: false,
        })
    }

    pub fn characteristics(&self) -> &ResourceCharacteristics {
        &self.characteristics
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    pub fn returned(&self) -> u64 {
        self.returned
    }

    fn apply(&mut self, ctx: &mut GridContext<'_>, directives: Vec<Directive>) -> Result<()> {
        let now = ctx.now();
        for d in directives {
            match d {
                Directive::Internal { at, tag } => {
                    let me = ctx.id();
                    ctx.schedule(
                        me,
                        (at - now).max(0.0),
                        tags::INSIGNIFICANT,
                        Message::Internal(InternalEvent::Completion(tag)),
                    )?;
                }
                Directive::Return(mut g) => {
                    let owner = g
                        .owner
                        .ok_or_else(|| Error::protocol(ctx.id(), format!("gridlet {} has no owner", g.id)))?;
                    g.resource = Some(ctx.id());
                    g.processing_cost = g.length_mi / self.characteristics.pe_mips()
                        * self.characteristics.cost_per_pe_time_unit;
                    let size = if self.net.return_uses_output_size {
                        g.output_size_bytes
                    } else {
                        0
                    };
                    self.port
                        .send(ctx, owner, tags::GRIDLET_RETURN, size, Message::Gridlet(Box::new(g)))?;
                    self.returned += 1;
                }
            }
        }
        self.arm_boundary(ctx)
    }

    fn arm_boundary(&mut self, ctx: &mut GridContext<'_>) -> Result<()> {
        if self.boundary_pending || self.scheduler.n_executing() == 0 {
            return Ok(());
        }
        if let Some(at) = self.calendar.next_boundary(ctx.now()) {
            self.boundary_token += 1;
            self.boundary_pending = true;
            let me = ctx.id();
            ctx.schedule(
                me,
                (at - ctx.now()).max(0.0),
                tags::INSIGNIFICANT,
                Message::Internal(InternalEvent::LoadBoundary(self.boundary_token)),
            )?;
        }
        Ok(())
    }

    fn reply(&mut self, ctx: &mut GridContext<'_>, to: EntityId, tag: i32, payload: Message) -> Result<()> {
        self.port.send(ctx, to, tag, 0, payload).map(|_| ())
    }
}

impl Entity<Message> for GridResource {
    fn start(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        if let Some(gis) = self.gis {
            self.port
                .send(ctx, gis, tags::REGISTER_RESOURCE, 0, Message::Empty)?;
        }
        Ok(Next::Wait)
    }

    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        let now = ctx.now();
        match (ev.tag, ev.payload) {
            (tags::END_OF_SIMULATION, _) => return Ok(Next::Finish),
            (tags::GRIDLET_SUBMIT, Message::Gridlet(g)) => {
                self.submitted += 1;
                let availability = self.calendar.availability(now);
                let directives = self.scheduler.submit(*g, now, availability);
                self.apply(ctx, directives)?;
            }
            (tags::INSIGNIFICANT, Message::Internal(internal)) if ev.source == ctx.id() => {
                let availability = self.calendar.availability(now);
                let directives = match internal {
                    InternalEvent::Completion(tag) => self.scheduler.on_internal(tag, now, availability),
                    InternalEvent::LoadBoundary(token) => {
                        if token != self.boundary_token {
                            return Ok(Next::Wait);
                        }
                        self.boundary_pending = false;
                        self.scheduler.on_load_change(now, availability)
                    }
                    InternalEvent::Timer(_) => return Ok(Next::Wait),
                };
                self.apply(ctx, directives)?;
            }
            (tags::RESOURCE_CHARACTERISTICS, _) => {
                let c = Message::Characteristics(Box::new(self.characteristics.clone()));
                self.reply(ctx, ev.source, tags::RESOURCE_CHARACTERISTICS, c)?;
            }
            (tags::RESOURCE_DYNAMICS, _) => {
                let d = ResourceDynamics {
                    n_executing: self.scheduler.n_executing(),
                    n_queued: self.scheduler.n_queued(),
                    effective_load: self.calendar.load_at(now),
                };
                self.reply(ctx, ev.source, tags::RESOURCE_DYNAMICS, Message::Dynamics(d))?;
            }
            (tags::GRIDLET_STATUS, Message::GridletStatusRequest(id)) => {
                let status = self.scheduler.status_of(id);
                self.reply(ctx, ev.source, tags::GRIDLET_STATUS, Message::GridletStatus { id, status })?;
            }
            (tag, payload) => {
                return Err(Error::protocol(
                    ctx.id(),
                    format!("resource cannot handle tag {tag} with {payload:?}"),
                ));
            }
        }
        Ok(Next::Wait)
    }
}
