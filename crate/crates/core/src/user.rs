//! User entities: a broker client that hands over an experiment, and a direct
//! submitter that sends gridlets to one resource at fixed times.

use crate::application::Gridlet;
use crate::broker::Experiment;
use crate::error::{Error, Result};
use crate::kernel::{Entity, EntityId, Next, SimTime};
use crate::message::{GridContext, GridEvent, Message};
use crate::net::{tags, IoPort};
use crate::stats::record_stat;

/// Hands an experiment to its broker, records the outcome and reports to the
/// shutdown entity.
#[derive(Debug)]
pub struct UserEntity {
    broker: EntityId,
    shutdown: EntityId,
    statistics: Option<EntityId>,
    port: IoPort,
    pending: Option<Experiment>,
    result: Option<Experiment>,
}

impl UserEntity {
    pub fn new(
        id: EntityId,
        broker: EntityId,
        shutdown: EntityId,
        statistics: Option<EntityId>,
        baud_rate: f64,
        experiment: Experiment,
    ) -> Result<Self> {
        Ok(Self {
            broker,
            shutdown,
            statistics,
            port: IoPort::output(id, baud_rate)?,
            pending: Some(experiment),
            result: None,
        })
    }

    /// The experiment as returned by the broker.
    pub fn result(&self) -> Option<&Experiment> {
        self.result.as_ref()
    }
}

impl Entity<Message> for UserEntity {
    fn start(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        let exp = self.pending.take().expect("experiment is sent once");
        self.port
            .send(ctx, self.broker, tags::EXPERIMENT, 0, Message::Experiment(Box::new(exp)))?;
        Ok(Next::Wait)
    }

    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        match (ev.tag, ev.payload) {
            (tags::END_OF_SIMULATION, _) => Ok(Next::Finish),
            (tags::EXPERIMENT, Message::Experiment(exp)) if self.result.is_none() => {
                if let Some(stats) = self.statistics {
                    let name = ctx.name().to_owned();
                    let total = exp.gridlets.len().max(1) as f64;
                    let values = [
                        ("TimeUtilization", exp.end_time - exp.start_time),
                        ("GridletCompletionFactor", exp.completed() as f64 / total),
                        ("BudgetUtilization", exp.expenses),
                    ];
                    for (what, value) in values {
                        record_stat(ctx, stats, format!("{name}.USER.{what}"), value)?;
                    }
                }
                self.result = Some(*exp);
                ctx.schedule(self.shutdown, 0.0, tags::END_OF_SIMULATION, Message::Empty)?;
                Ok(Next::Finish)
            }
            (tag, _) => Err(Error::protocol(ctx.id(), format!("user got tag {tag}"))),
        }
    }
}

/// Submits each gridlet to one resource at its release time, bypassing any
/// broker.
#[derive(Debug)]
pub struct DirectUser {
    resource: EntityId,
    shutdown: EntityId,
    statistics: Option<EntityId>,
    port: IoPort,
    /// Unreleased gridlets, latest release first.
    releases: Vec<(SimTime, Gridlet)>,
    outstanding: usize,
    returned: Vec<Gridlet>,
}

impl DirectUser {
    pub fn new(
        id: EntityId,
        resource: EntityId,
        shutdown: EntityId,
        statistics: Option<EntityId>,
        baud_rate: f64,
        mut releases: Vec<(SimTime, Gridlet)>,
    ) -> Result<Self> {
        if let Some((t, g)) = releases.iter().find(|(t, _)| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Config(format!("gridlet {} has release time {t}", g.id)));
        }
        releases.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(Self {
            resource,
            shutdown,
            statistics,
            port: IoPort::output(id, baud_rate)?,
            outstanding: releases.len(),
            releases,
            returned: Vec::new(),
        })
    }

    /// Gridlets returned so far, in return order.
    pub fn returned(&self) -> &[Gridlet] {
        &self.returned
    }

    /// Submits everything due now, then holds until the next release.
    fn release(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        let now = ctx.now();
        while let Some((t, _)) = self.releases.last() {
            if *t > now {
                return Ok(Next::Hold(t - now));
            }
            let (_, mut g) = self.releases.pop().expect("peeked");
            g.owner = Some(ctx.id());
            g.submission_time = now;
            let size = g.input_size_bytes;
            self.port
                .send(ctx, self.resource, tags::GRIDLET_SUBMIT, size, Message::Gridlet(Box::new(g)))?;
        }
        self.done_check(ctx)
    }

    fn done_check(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        if self.outstanding == 0 {
            ctx.schedule(self.shutdown, 0.0, tags::END_OF_SIMULATION, Message::Empty)?;
            return Ok(Next::Finish);
        }
        Ok(Next::Wait)
    }
}

impl Entity<Message> for DirectUser {
    fn start(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        self.release(ctx)
    }

    fn on_wake(&mut self, ctx: &mut GridContext<'_>) -> Result<Next> {
        self.release(ctx)
    }

    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        match (ev.tag, ev.payload) {
            (tags::END_OF_SIMULATION, _) => Ok(Next::Finish),
            (tags::GRIDLET_RETURN, Message::Gridlet(g)) => {
                if let Some(stats) = self.statistics {
                    let category = format!("{}.GRIDLET.FinishTime", ctx.name());
                    record_stat(ctx, stats, category, g.finish_time)?;
                }
                self.returned.push(*g);
                self.outstanding = self.outstanding.saturating_sub(1);
                // returns are only handled once every release is out
                self.done_check(ctx)
            }
            (tag, _) => Err(Error::protocol(ctx.id(), format!("direct user got tag {tag}"))),
        }
    }
}
