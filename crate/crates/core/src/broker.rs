//! Economic resource broker: deadline and budget derivation, the
//! cost-optimising schedule advisor, dispatcher and receiver, and the broker
//! entity that drives them.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::application::{Gridlet, GridletBatch, GridletId, GridletStatus};
use crate::error::{Error, Result};
use crate::kernel::{Entity, EntityId, Next, SimTime};
use crate::message::{GridContext, GridEvent, InternalEvent, Message};
use crate::net::{tags, IoPort};
use crate::resource::ResourceCharacteristics;

pub const DEFAULT_MAX_GRIDLET_PER_PE: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    CostOptimization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Constraints {
    Factors { d_factor: f64, b_factor: f64 },
    Absolute { deadline: SimTime, budget: f64 },
}

impl Constraints {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Constraints::Factors { d_factor, b_factor } => {
                if !(d_factor.is_finite() && d_factor >= 0.0 && b_factor.is_finite() && b_factor >= 0.0) {
                    return Err(Error::InvalidFactor(format!(
                        "d_factor = {d_factor}, b_factor = {b_factor} must be finite and non-negative"
                    )));
                }
            }
            Constraints::Absolute { deadline, budget } => {
                if !(deadline.is_finite() && deadline > 0.0) {
                    return Err(Error::Config(format!("deadline must be positive, got {deadline}")));
                }
                if !(budget.is_finite() && budget >= 0.0) {
                    return Err(Error::Config(format!("budget must be non-negative, got {budget}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentStatus {
    Created,
    Running,
    /// Every gridlet finished.
    Completed,
    /// The deadline passed with work left.
    DeadlineReached,
    /// Expenses reached the budget with work left.
    BudgetExhausted,
    NoResources,
}

/// A user's application plus its constraints, handed to a broker and back.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub gridlets: Vec<Gridlet>,
    pub policy: Policy,
    pub constraints: Constraints,
    /// Resolved deadline, relative to `start_time`.
    pub deadline: Option<SimTime>,
    pub budget: Option<f64>,
    pub start_time: SimTime,
    pub end_time: SimTime,
    pub expenses: f64,
    pub status: ExperimentStatus,
}

impl Experiment {
    pub fn new(batch: GridletBatch, constraints: Constraints) -> Result<Self> {
        constraints.validate()?;
        let (deadline, budget) = match constraints {
            Constraints::Absolute { deadline, budget } => (Some(deadline), Some(budget)),
            Constraints::Factors { .. } => (None, None),
        };
        Ok(Self {
            gridlets: batch.into_vec(),
            policy: Policy::CostOptimization,
            constraints,
            deadline,
            budget,
            start_time: 0.0,
            end_time: 0.0,
            expenses: 0.0,
            status: ExperimentStatus::Created,
        })
    }

    pub fn completed(&self) -> usize {
        self.gridlets.iter().filter(|g| g.is_finished()).count()
    }
}

/// G$ per MI on one PE of `r`.
pub fn cost_per_mi(r: &ResourceCharacteristics) -> f64 {
    r.cost_per_pe_time_unit / r.pe_mips()
}

/// MIPS delivered per G$; infinite for free resources.
pub fn mips_per_gdollar(r: &ResourceCharacteristics) -> f64 {
    r.pe_mips() / r.cost_per_pe_time_unit
}

/// Price of running `length_mi` on `r`.
pub fn processing_cost(length_mi: f64, r: &ResourceCharacteristics) -> f64 {
    length_mi / r.pe_mips() * r.cost_per_pe_time_unit
}

/// Resource indices ordered by ascending G$/MI, ties by index.
pub fn cheapest_first(resources: &[ResourceCharacteristics]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..resources.len()).collect();
    order.sort_by(|&a, &b| {
        cost_per_mi(&resources[a])
            .total_cmp(&cost_per_mi(&resources[b]))
            .then(a.cmp(&b))
    });
    order
}

/// Makespan of greedy earliest-finish list scheduling: jobs in batch order,
/// PEs of all resources ordered fastest first, ties to the earlier PE.
pub fn t_min(lengths: &[f64], resources: &[ResourceCharacteristics]) -> Result<SimTime> {
    if resources.is_empty() {
        return Err(Error::NoResources);
    }
    let mut pes: Vec<f64> = resources.iter().flat_map(|r| r.pe_ratings()).collect();
    pes.sort_by(|a, b| b.total_cmp(a));
    let mut ready = vec![0.0_f64; pes.len()];
    for &len in lengths {
        let (best, finish) = pes
            .iter()
            .zip(&ready)
            .map(|(mips, t)| t + len / mips)
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, f)| if f < acc.1 { (i, f) } else { acc });
        ready[best] = finish;
    }
    Ok(ready.into_iter().fold(0.0, f64::max))
}

/// Total work run serially on the slowest PE available.
pub fn t_max(lengths: &[f64], resources: &[ResourceCharacteristics]) -> Result<SimTime> {
    if resources.is_empty() {
        return Err(Error::NoResources);
    }
    let slowest = resources
        .iter()
        .map(ResourceCharacteristics::slowest_pe_mips)
        .fold(f64::INFINITY, f64::min);
    Ok(lengths.iter().sum::<f64>() / slowest)
}

/// `T_MIN + d_factor * (T_MAX - T_MIN)`.
pub fn compute_deadline(lengths: &[f64], resources: &[ResourceCharacteristics], d_factor: f64) -> Result<SimTime> {
    let lo = t_min(lengths, resources)?;
    let hi = t_max(lengths, resources)?;
    Ok(lo + d_factor * (hi - lo))
}

/// Cost of first-fit placement of whole jobs, resources visited in `order`,
/// each holding at most `n_pes * mips * deadline` MI.
fn fill_cost(lengths: &[f64], resources: &[ResourceCharacteristics], order: &[usize], deadline: SimTime) -> Result<f64> {
    let mut capacity: Vec<f64> = resources
        .iter()
        .map(|r| r.total_mips() * deadline)
        .collect();
    let mut cost = 0.0;
    for &len in lengths {
        let r = order
            .iter()
            .copied()
            .find(|&r| capacity[r] >= len)
            .ok_or(Error::InfeasibleDeadline(deadline))?;
        capacity[r] -= len;
        cost += processing_cost(len, &resources[r]);
    }
    Ok(cost)
}

pub fn c_min(lengths: &[f64], resources: &[ResourceCharacteristics], deadline: SimTime) -> Result<f64> {
    if resources.is_empty() {
        return Err(Error::NoResources);
    }
    fill_cost(lengths, resources, &cheapest_first(resources), deadline)
}

pub fn c_max(lengths: &[f64], resources: &[ResourceCharacteristics], deadline: SimTime) -> Result<f64> {
    if resources.is_empty() {
        return Err(Error::NoResources);
    }
    let mut order: Vec<usize> = (0..resources.len()).collect();
    order.sort_by(|&a, &b| {
        cost_per_mi(&resources[b])
            .total_cmp(&cost_per_mi(&resources[a]))
            .then(a.cmp(&b))
    });
    fill_cost(lengths, resources, &order, deadline)
}

/// `C_MIN + b_factor * (C_MAX - C_MIN)`.
pub fn compute_budget(
    lengths: &[f64],
    resources: &[ResourceCharacteristics],
    b_factor: f64,
    deadline: SimTime,
) -> Result<f64> {
    let lo = c_min(lengths, resources, deadline)?;
    let hi = c_max(lengths, resources, deadline)?;
    Ok(lo + b_factor * (hi - lo))
}

/// Whole jobs of `mean_job_mi` a resource delivering `share_mips` finishes in
/// `time_left`.
pub fn jobs_consumable(share_mips: f64, time_left: SimTime, mean_job_mi: f64) -> usize {
    if time_left <= 0.0 || mean_job_mi <= 0.0 || share_mips <= 0.0 {
        return 0;
    }
    let jobs = (share_mips * time_left / mean_job_mi).floor();
    if jobs >= usize::MAX as f64 {
        usize::MAX
    } else {
        jobs as usize
    }
}

/// Submission slots left on a resource under the per-PE staging limit.
pub fn staging_slots(n_pes: usize, in_flight: usize, max_per_pe: usize) -> usize {
    (max_per_pe * n_pes).saturating_sub(in_flight)
}

/// How the broker turns observed completions into an MI share.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareEstimator {
    /// MI completed per unit of slot occupancy, scaled by the staging window
    /// and capped at the resource's aggregate rating.
    #[default]
    SlotThroughput,
    /// MI completed divided by time since the first dispatch.
    ElapsedSinceFirstDispatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrokerConfig {
    pub max_gridlet_per_pe: usize,
    pub share_estimator: ShareEstimator,
    /// Idle wait is `max(hold_fraction * deadline_left, min_hold)`.
    pub hold_fraction: f64,
    pub min_hold: SimTime,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            max_gridlet_per_pe: DEFAULT_MAX_GRIDLET_PER_PE,
            share_estimator: ShareEstimator::default(),
            hold_fraction: 0.01,
            min_hold: 1.0,
        }
    }
}

/// The broker's view of one resource.
#[derive(Clone, Debug, PartialEq)]
pub struct BrokerResourceRecord {
    pub resource: EntityId,
    pub characteristics: ResourceCharacteristics,
    /// Assigned but not yet dispatched, in dispatch order.
    pub queued: VecDeque<GridletId>,
    pub in_flight: Vec<GridletId>,
    pub dispatched: usize,
    pub completed: usize,
    pub measured_share_mips: f64,
    pub cost_per_mi: f64,
    pub expenses: f64,
    pub mi_completed: f64,
    /// Sum of dispatch-to-return times of completed gridlets.
    pub slot_time: SimTime,
    pub first_dispatch: Option<SimTime>,
}

impl BrokerResourceRecord {
    pub fn new(resource: EntityId, characteristics: ResourceCharacteristics) -> Self {
        Self {
            resource,
            measured_share_mips: characteristics.total_mips(),
            cost_per_mi: cost_per_mi(&characteristics),
            characteristics,
            queued: VecDeque::new(),
            in_flight: Vec::new(),
            dispatched: 0,
            completed: 0,
            expenses: 0.0,
            mi_completed: 0.0,
            slot_time: 0.0,
            first_dispatch: None,
        }
    }

    pub fn assigned(&self) -> usize {
        self.queued.len() + self.in_flight.len()
    }

    pub fn job_cost(&self, length_mi: f64) -> f64 {
        processing_cost(length_mi, &self.characteristics)
    }

    /// Folds one completed gridlet into the share estimate.
    pub fn record_completion(
        &mut self,
        length_mi: f64,
        dispatched_at: SimTime,
        now: SimTime,
        estimator: ShareEstimator,
        window: usize,
    ) {
        self.completed += 1;
        self.mi_completed += length_mi;
        self.slot_time += now - dispatched_at;
        let cap = self.characteristics.total_mips();
        let estimate = match estimator {
            ShareEstimator::SlotThroughput if self.slot_time > 0.0 => {
                (self.mi_completed / self.slot_time * window as f64).min(cap)
            }
            ShareEstimator::ElapsedSinceFirstDispatch => {
                let since = now - self.first_dispatch.unwrap_or(dispatched_at);
                if since > 0.0 {
                    self.mi_completed / since
                } else {
                    cap
                }
            }
            ShareEstimator::SlotThroughput => cap,
        };
        self.measured_share_mips = estimate;
    }
}

/// Outcome of one advisor pass, indexed like the record slice.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SchedulePlan {
    /// Predicted jobs each resource can consume by the deadline.
    pub quotas: Vec<usize>,
    pub newly_assigned: Vec<usize>,
    pub reclaimed: Vec<usize>,
}

impl SchedulePlan {
    pub fn is_empty(&self) -> bool {
        self.quotas.is_empty()
    }

    pub fn total_assigned(&self) -> usize {
        self.newly_assigned.iter().sum()
    }
}

/// One cost-optimising advisor pass over `records`, which must be sorted
/// cheapest first.
///
/// Over-committed resources give their undispatched jobs back to the head of
/// `unassigned`; then each resource, cheapest first, takes jobs up to its
/// quota from `unassigned` or, when that is empty, from the most expensive
/// resource still holding undispatched work. A job is only assigned when the
/// committed spend (expenses, in-flight and queued work) stays within budget.
#[allow(clippy::too_many_arguments)]
pub fn schedule_advisor(
    records: &mut [BrokerResourceRecord],
    unassigned: &mut VecDeque<GridletId>,
    lengths: &HashMap<GridletId, f64>,
    clock: SimTime,
    deadline: SimTime,
    budget: f64,
    expenses: f64,
) -> SchedulePlan {
    if clock >= deadline || expenses >= budget {
        return SchedulePlan::default();
    }
    let len = |id: &GridletId| lengths[id];
    let unfinished: Vec<f64> = unassigned
        .iter()
        .chain(records.iter().flat_map(|r| r.queued.iter().chain(&r.in_flight)))
        .map(len)
        .collect();
    if unfinished.is_empty() {
        return SchedulePlan::default();
    }
    let mean = unfinished.iter().sum::<f64>() / unfinished.len() as f64;
    let time_left = deadline - clock;
    let quotas: Vec<usize> = records
        .iter()
        .map(|r| jobs_consumable(r.measured_share_mips, time_left, mean))
        .collect();

    let mut reclaimed_ids = Vec::new();
    let mut reclaimed = vec![0; records.len()];
    for (i, r) in records.iter_mut().enumerate() {
        let excess = r.assigned().saturating_sub(quotas[i]).min(r.queued.len());
        for _ in 0..excess {
            reclaimed_ids.extend(r.queued.pop_back());
        }
        reclaimed[i] = excess;
    }
    reclaimed_ids.sort_unstable();
    for id in reclaimed_ids.into_iter().rev() {
        unassigned.push_front(id);
    }

    let mut committed = expenses
        + records
            .iter()
            .map(|r| r.queued.iter().chain(&r.in_flight).map(|id| r.job_cost(len(id))).sum::<f64>())
            .sum::<f64>();
    let mut newly_assigned = vec![0; records.len()];
    for i in 0..records.len() {
        while records[i].assigned() < quotas[i] {
            if let Some(&id) = unassigned.front() {
                let cost = records[i].job_cost(len(&id));
                if committed + cost > budget {
                    break;
                }
                unassigned.pop_front();
                committed += cost;
                records[i].queued.push_back(id);
            } else if let Some(j) = (i + 1..records.len()).rev().find(|&j| !records[j].queued.is_empty()) {
                let id = records[j].queued.pop_back().expect("non-empty queue");
                committed += records[i].job_cost(len(&id)) - records[j].job_cost(len(&id));
                records[i].queued.push_back(id);
            } else {
                break;
            }
            newly_assigned[i] += 1;
        }
    }
    SchedulePlan {
        quotas,
        newly_assigned,
        reclaimed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    AwaitList,
    AwaitCharacteristics,
    Scheduling,
    Draining,
}

/// Per-user broker entity running the cost-optimisation loop.
#[derive(Debug)]
pub struct Broker {
    gis: EntityId,
    port: IoPort,
    config: BrokerConfig,
    phase: Phase,
    user: Option<EntityId>,
    experiment: Option<Experiment>,
    resource_list: Vec<EntityId>,
    characteristics: HashMap<EntityId, ResourceCharacteristics>,
    records: Vec<BrokerResourceRecord>,
    unassigned: VecDeque<GridletId>,
    index: HashMap<GridletId, usize>,
    lengths: HashMap<GridletId, f64>,
    dispatch_time: HashMap<GridletId, (usize, SimTime)>,
    deadline_at: SimTime,
    budget: f64,
    timer_token: u64,
    finished: usize,
    dispatched_total: usize,
}

impl Broker {
    pub fn new(id: EntityId, gis: EntityId, baud_rate: f64, config: BrokerConfig) -> Result<Self> {
        if config.max_gridlet_per_pe == 0 {
            return Err(Error::Config("max_gridlet_per_pe must be at least 1".into()));
        }
        Ok(Self {
            gis,
            port: IoPort::output(id, baud_rate)?,
            config,
            phase: Phase::Idle,
            user: None,
            experiment: None,
            resource_list: Vec::new(),
            characteristics: HashMap::new(),
            records: Vec::new(),
            unassigned: VecDeque::new(),
            index: HashMap::new(),
            lengths: HashMap::new(),
            dispatch_time: HashMap::new(),
            deadline_at: 0.0,
            budget: 0.0,
            timer_token: 0,
            finished: 0,
            dispatched_total: 0,
        })
    }

    pub fn records(&self) -> &[BrokerResourceRecord] {
        &self.records
    }

    pub fn dispatched_total(&self) -> usize {
        self.dispatched_total
    }

    fn experiment_mut(&mut self) -> &mut Experiment {
        self.experiment.as_mut().expect("experiment in progress")
    }

    fn expenses(&self) -> f64 {
        self.experiment.as_ref().map_or(0.0, |e| e.expenses)
    }

    fn begin(&mut self, mut exp: Experiment, user: EntityId, ctx: &mut GridContext<'_>) -> Result<Next> {
        exp.start_time = ctx.now();
        exp.status = ExperimentStatus::Running;
        exp.expenses = 0.0;
        for g in &mut exp.gridlets {
            g.owner = Some(ctx.id());
        }
        self.user = Some(user);
        self.index = exp.gridlets.iter().enumerate().map(|(i, g)| (g.id, i)).collect();
        self.lengths = exp.gridlets.iter().map(|g| (g.id, g.length_mi)).collect();
        self.finished = exp.gridlets.iter().filter(|g| g.is_finished()).count();
        self.experiment = Some(exp);
        self.port
            .send(ctx, self.gis, tags::RESOURCE_LIST, 0, Message::ResourceListRequest)?;
        self.phase = Phase::AwaitList;
        Ok(Next::Wait)
    }

    fn on_resource_list(&mut self, list: Vec<EntityId>, ctx: &mut GridContext<'_>) -> Result<Next> {
        if list.is_empty() {
            self.experiment_mut().status = ExperimentStatus::NoResources;
            return self.finish(ctx);
        }
        for &r in &list {
            self.port
                .send(ctx, r, tags::RESOURCE_CHARACTERISTICS, 0, Message::CharacteristicsRequest)?;
        }
        self.resource_list = list;
        self.characteristics.clear();
        self.phase = Phase::AwaitCharacteristics;
        Ok(Next::Wait)
    }

    fn on_characteristics(&mut self, from: EntityId, c: ResourceCharacteristics, ctx: &mut GridContext<'_>) -> Result<Next> {
        self.characteristics.insert(from, c);
        if self.characteristics.len() < self.resource_list.len() {
            return Ok(Next::Wait);
        }
        let chars: Vec<ResourceCharacteristics> = self
            .resource_list
            .iter()
            .map(|id| self.characteristics[id].clone())
            .collect();
        self.records = cheapest_first(&chars)
            .into_iter()
            .map(|i| BrokerResourceRecord::new(self.resource_list[i], chars[i].clone()))
            .collect();

        let exp = self.experiment.as_mut().expect("experiment in progress");
        let lengths: Vec<f64> = exp.gridlets.iter().map(|g| g.length_mi).collect();
        if let Constraints::Factors { d_factor, b_factor } = exp.constraints {
            let deadline = compute_deadline(&lengths, &chars, d_factor)?;
            exp.budget = Some(compute_budget(&lengths, &chars, b_factor, deadline)?);
            exp.deadline = Some(deadline);
        }
        self.deadline_at = exp.start_time + exp.deadline.unwrap_or(0.0);
        self.budget = exp.budget.unwrap_or(0.0);
        let mut ids: Vec<GridletId> = exp
            .gridlets
            .iter()
            .filter(|g| !g.is_finished())
            .map(|g| g.id)
            .collect();
        ids.sort_unstable();
        self.unassigned = ids.into();
        self.dispatch_time.clear();
        self.phase = Phase::Scheduling;
        self.round(0, ctx)
    }

    fn total(&self) -> usize {
        self.experiment.as_ref().map_or(0, |e| e.gridlets.len())
    }

    /// Advisor, dispatcher and receiver until the broker must wait.
    fn round(&mut self, mut received: usize, ctx: &mut GridContext<'_>) -> Result<Next> {
        loop {
            if self.finished == self.total() {
                self.experiment_mut().status = ExperimentStatus::Completed;
                return self.drain(ctx);
            }
            let now = ctx.now();
            if now >= self.deadline_at {
                self.experiment_mut().status = ExperimentStatus::DeadlineReached;
                return self.drain(ctx);
            }
            if self.expenses() >= self.budget {
                self.experiment_mut().status = ExperimentStatus::BudgetExhausted;
                return self.drain(ctx);
            }
            let expenses = self.expenses();
            schedule_advisor(
                &mut self.records,
                &mut self.unassigned,
                &self.lengths,
                now,
                self.deadline_at,
                self.budget,
                expenses,
            );
            let dispatched = self.dispatch(ctx)?;
            received += self.receive_pending(ctx)?;
            if dispatched == 0 && received == 0 {
                let wait = (self.config.hold_fraction * (self.deadline_at - now)).max(self.config.min_hold);
                self.timer_token += 1;
                let me = ctx.id();
                ctx.schedule(
                    me,
                    wait,
                    tags::INSIGNIFICANT,
                    Message::Internal(InternalEvent::Timer(self.timer_token)),
                )?;
                return Ok(Next::Wait);
            }
            received = 0;
        }
    }

    /// Submits queued gridlets up to each resource's staging limit.
    fn dispatch(&mut self, ctx: &mut GridContext<'_>) -> Result<usize> {
        let now = ctx.now();
        let mut total = 0;
        for ri in 0..self.records.len() {
            let rec = &mut self.records[ri];
            let slots = staging_slots(rec.characteristics.num_pes(), rec.in_flight.len(), self.config.max_gridlet_per_pe);
            for _ in 0..slots {
                let Some(id) = rec.queued.pop_front() else { break };
                rec.in_flight.push(id);
                rec.dispatched += 1;
                rec.first_dispatch.get_or_insert(now);
                let dest = rec.resource;
                self.dispatch_time.insert(id, (ri, now));
                let exp = self.experiment.as_mut().expect("experiment in progress");
                let g = &mut exp.gridlets[self.index[&id]];
                g.status = GridletStatus::Submitted;
                g.submission_time = now;
                let size = g.input_size_bytes;
                let payload = Message::Gridlet(Box::new(g.clone()));
                self.port.send(ctx, dest, tags::GRIDLET_SUBMIT, size, payload)?;
                total += 1;
            }
        }
        self.dispatched_total += total;
        Ok(total)
    }

    fn receive_pending(&mut self, ctx: &mut GridContext<'_>) -> Result<usize> {
        let mut received = 0;
        while let Some(ev) = ctx.next_pending() {
            match (ev.tag, ev.payload) {
                (tags::GRIDLET_RETURN, Message::Gridlet(g)) => {
                    self.receive(*g, ctx)?;
                    received += 1;
                }
                (tags::INSIGNIFICANT, Message::Internal(InternalEvent::Timer(_))) => {}
                (tag, _) => return Err(Error::protocol(ctx.id(), format!("broker got tag {tag} while scheduling"))),
            }
        }
        Ok(received)
    }

    /// Books a returned gridlet: status, expenses and the share estimate.
    pub fn receive(&mut self, returned: Gridlet, ctx: &GridContext<'_>) -> Result<()> {
        let me = ctx.id();
        let now = ctx.now();
        let Some(&slot) = self.index.get(&returned.id) else {
            return Err(Error::protocol(me, format!("return of unknown gridlet {}", returned.id)));
        };
        let Some((ri, dispatched_at)) = self.dispatch_time.remove(&returned.id) else {
            return Err(Error::protocol(me, format!("gridlet {} returned twice or never sent", returned.id)));
        };
        let window = self.config.max_gridlet_per_pe * self.records[ri].characteristics.num_pes();
        let rec = &mut self.records[ri];
        rec.in_flight.retain(|&id| id != returned.id);
        let cost = rec.job_cost(returned.length_mi);
        rec.expenses += cost;
        rec.record_completion(returned.length_mi, dispatched_at, now, self.config.share_estimator, window);
        let resource = rec.resource;
        let exp = self.experiment.as_mut().expect("experiment in progress");
        exp.expenses += cost;
        let g = &mut exp.gridlets[slot];
        *g = returned;
        g.status = GridletStatus::Success;
        g.processing_cost = cost;
        g.resource = Some(resource);
        self.finished += 1;
        Ok(())
    }

    fn in_flight(&self) -> usize {
        self.records.iter().map(|r| r.in_flight.len()).sum()
    }

    fn drain(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        if self.in_flight() == 0 {
            return self.finish(ctx);
        }
        self.phase = Phase::Draining;
        Ok(Next::Wait)
    }

    fn finish(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        let mut exp = self.experiment.take().expect("experiment in progress");
        exp.end_time = ctx.now();
        if exp.status == ExperimentStatus::Running {
            exp.status = ExperimentStatus::Completed;
        }
        let user = self.user.take().expect("experiment has a user");
        self.port
            .send(ctx, user, tags::EXPERIMENT, 0, Message::Experiment(Box::new(exp)))?;
        self.phase = Phase::Idle;
        self.timer_token += 1;
        Ok(Next::Wait)
    }
}

impl Entity<Message> for Broker {
    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        let me = ctx.id();
        match (self.phase, ev.tag, ev.payload) {
            (_, tags::END_OF_SIMULATION, _) => Ok(Next::Finish),
            (_, tags::INSIGNIFICANT, Message::Internal(InternalEvent::Timer(token))) => {
                if self.phase == Phase::Scheduling && token == self.timer_token && ev.source == me {
                    self.round(0, ctx)
                } else {
                    Ok(Next::Wait)
                }
            }
            (Phase::Idle, tags::EXPERIMENT, Message::Experiment(exp)) => self.begin(*exp, ev.source, ctx),
            (Phase::AwaitList, tags::RESOURCE_LIST, Message::ResourceList(list)) => self.on_resource_list(list, ctx),
            (Phase::AwaitCharacteristics, tags::RESOURCE_CHARACTERISTICS, Message::Characteristics(c)) => {
                self.on_characteristics(ev.source, *c, ctx)
            }
            (Phase::Scheduling, tags::GRIDLET_RETURN, Message::Gridlet(g)) => {
                self.receive(*g, ctx)?;
                self.round(1, ctx)
            }
            (Phase::Draining, tags::GRIDLET_RETURN, Message::Gridlet(g)) => {
                self.receive(*g, ctx)?;
                if self.finished == self.total() {
                    self.experiment_mut().status = ExperimentStatus::Completed;
                }
                self.drain(ctx)
            }
            (phase, tag, payload) => Err(Error::protocol(
                me,
                format!("broker in {phase:?} cannot handle tag {tag} with {payload:?}"),
            )),
        }
    }
}
