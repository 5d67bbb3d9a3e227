//! Category-tagged statistics, running accumulators and the CSV report.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Entity, EntityId, Next, SimTime};
use crate::message::{GridContext, GridEvent, Message};
use crate::net::tags;

/// Running count, sum, sum of squares and extremes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accumulator {
    count: u64,
    sum: f64,
    sum_sq: f64,
    min: f64,
    max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorSummary {
    pub count: u64,
    pub sum: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if self.count == 0 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn query(&self) -> Result<AccumulatorSummary> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        Ok(AccumulatorSummary {
            count: self.count,
            sum: self.sum,
            mean: mean.clamp(self.min, self.max),
            std: var.sqrt(),
            min: self.min,
            max: self.max,
        })
    }
}

impl FromIterator<f64> for Accumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Accumulator::new();
        iter.into_iter().for_each(|x| acc.add(x));
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub time: SimTime,
    pub entity: EntityId,
    /// Registered name of `entity`, used in reports.
    pub entity_name: String,
    pub category: String,
    pub value: f64,
}

/// Matches a dotted category against a pattern where `*` stands for exactly
/// one segment.
pub fn category_matches(pattern: &str, category: &str) -> bool {
    let mut p = pattern.split('.');
    let mut c = category.split('.');
    loop {
        match (p.next(), c.next()) {
            (None, None) => return true,
            (Some(ps), Some(cs)) if ps == "*" || ps == cs => {}
            _ => return false,
        }
    }
}

/// Records in arrival order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatisticsStore {
    records: Vec<StatRecord>,
}

impl StatisticsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, record: StatRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[StatRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn by_category<'a>(&'a self, pattern: &'a str) -> impl Iterator<Item = &'a StatRecord> + 'a {
        self.records.iter().filter(move |r| category_matches(pattern, &r.category))
    }

    pub fn by_entity(&self, entity: EntityId) -> impl Iterator<Item = &StatRecord> + '_ {
        self.records.iter().filter(move |r| r.entity == entity)
    }

    pub fn accumulate(&self, pattern: &str) -> Accumulator {
        self.by_category(pattern).map(|r| r.value).collect()
    }
}

/// Pattern that selects every record in list requests.
pub const ALL_CATEGORIES: &str = "";

fn select(records: &[StatRecord], pattern: &str) -> Vec<StatRecord> {
    records
        .iter()
        .filter(|r| pattern == ALL_CATEGORIES || category_matches(pattern, &r.category))
        .cloned()
        .collect()
}

/// Entity that stores [`StatRecord`]s sent with `RECORD_STATISTICS` and
/// answers list and summary queries.
#[derive(Debug, Default)]
pub struct Statistics {
    store: StatisticsStore,
}

impl Statistics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&self) -> &StatisticsStore {
        &self.store
    }
}

impl Entity<Message> for Statistics {
    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        match (ev.tag, ev.payload) {
            (tags::END_OF_SIMULATION, _) => return Ok(Next::Finish),
            (tags::RECORD_STATISTICS, Message::Stat(r)) => self.store.record(r),
            (tags::RETURN_STAT_LIST, Message::StatListRequest(pattern)) => {
                let list = select(self.store.records(), &pattern);
                ctx.schedule(ev.source, 0.0, tags::RETURN_STAT_LIST, Message::StatList(list))?;
            }
            (tags::RETURN_ACC_STATISTICS_BY_CATEGORY, Message::AccStatsRequest(pattern)) => {
                let summary = self.store.accumulate(&pattern).query().ok();
                ctx.schedule(
                    ev.source,
                    0.0,
                    tags::RETURN_ACC_STATISTICS_BY_CATEGORY,
                    Message::AccStats { pattern, summary },
                )?;
            }
            (tag, payload) => {
                return Err(Error::protocol(
                    ctx.id(),
                    format!("statistics cannot handle tag {tag} with {payload:?}"),
                ));
            }
        }
        Ok(Next::Wait)
    }
}

/// Sends a statistics record from the running entity.
pub fn record_stat(ctx: &mut GridContext<'_>, statistics: EntityId, category: String, value: f64) -> Result<()> {
    let record = StatRecord {
        time: ctx.now(),
        entity: ctx.id(),
        entity_name: ctx.name().to_owned(),
        category,
        value,
    };
    ctx.schedule(statistics, 0.0, tags::RECORD_STATISTICS, Message::Stat(record))?;
    Ok(())
}

/// Collects the statistics list when the shutdown entity signals the end of
/// the run, then acknowledges.
#[derive(Debug)]
pub struct ReportWriter {
    statistics: EntityId,
    pattern: String,
    shutdown: Option<EntityId>,
    collected: Vec<StatRecord>,
}

impl ReportWriter {
    pub fn new(statistics: EntityId, pattern: impl Into<String>) -> Self {
        Self {
            statistics,
            pattern: pattern.into(),
            shutdown: None,
            collected: Vec::new(),
        }
    }

    pub fn collected(&self) -> &[StatRecord] {
        &self.collected
    }
}

impl Entity<Message> for ReportWriter {
    fn on_event(&mut self, ev: GridEvent, ctx: &mut GridContext<'_>) -> Result<Next> {
        match (ev.tag, ev.payload) {
            (tags::END_OF_SIMULATION, _) if self.shutdown.is_none() => {
                self.shutdown = Some(ev.source);
                let request = Message::StatListRequest(self.pattern.clone());
                ctx.schedule(self.statistics, 0.0, tags::RETURN_STAT_LIST, request)?;
                Ok(Next::Wait)
            }
            (tags::END_OF_SIMULATION, _) => Ok(Next::Finish),
            (tags::RETURN_STAT_LIST, Message::StatList(list)) => {
                self.collected = list;
                let shutdown = self.shutdown.ok_or_else(|| Error::protocol(ctx.id(), "stat list before shutdown"))?;
                ctx.schedule(shutdown, 0.0, tags::END_OF_SIMULATION, Message::Empty)?;
                Ok(Next::Finish)
            }
            (tag, _) => Err(Error::protocol(ctx.id(), format!("report writer got tag {tag}"))),
        }
    }
}

/// Writes every record matching any of `categories` as CSV ordered by time,
/// entity name, then category. An empty category list selects everything.
pub fn write_report_to<W: Write>(records: &[StatRecord], categories: &[&str], out: W) -> Result<()> {
    let mut rows: Vec<&StatRecord> = records
        .iter()
        .filter(|r| categories.is_empty() || categories.iter().any(|p| category_matches(p, &r.category)))
        .collect();
    rows.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then_with(|| a.entity_name.cmp(&b.entity_name))
            .then_with(|| a.category.cmp(&b.category))
    });
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["time", "entity", "category", "value"])?;
    for r in rows {
        w.write_record([
            format!("{:.9}", r.time),
            r.entity_name.clone(),
            r.category.clone(),
            format!("{:.9}", r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(records: &[StatRecord], categories: &[&str], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_report_to(records, categories, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accumulator_examples() {
        let s = Accumulator::from_iter([1.0, 2.0, 3.0]).query().unwrap();
        assert_eq!((s.mean, s.min, s.max, s.sum, s.count), (2.0, 1.0, 3.0, 6.0, 3));
        let s = Accumulator::from_iter([2.0, 2.0, 2.0]).query().unwrap();
        assert_eq!(s.std, 0.0);
        assert!(matches!(Accumulator::new().query(), Err(Error::EmptyAccumulator)));
    }

    #[test]
    fn accumulator_matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-50.0..150.0)).collect();
        let s = xs.iter().copied().collect::<Accumulator>().query().unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        assert!(rel(s.mean, mean) < 1e-9);
        assert!(rel(s.std, var.sqrt()) < 1e-9);
        assert_eq!(s.min, xs.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(s.max, xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn glob_segments() {
        assert!(category_matches("*.USER.*", "U3.USER.BudgetUtilization"));
        assert!(category_matches("*.USER.TimeUtilization", "U0.USER.TimeUtilization"));
        assert!(!category_matches("*.USER.*", "U3.USER"));
        assert!(!category_matches("*", "a.b"));
        assert!(category_matches("a.b", "a.b"));
        assert!(!category_matches("a.c", "a.b"));
    }

    fn rec(time: f64, name: &str, category: &str, value: f64) -> StatRecord {
        StatRecord {
            time,
            entity: EntityId(0),
            entity_name: name.into(),
            category: category.into(),
            value,
        }
    }

    #[test]
    fn store_filters() {
        let mut s = StatisticsStore::new();
        assert_eq!(s.by_category("*").count(), 0);
        s.record(rec(1.0, "U0", "U0.USER.x", 1.0));
        assert_eq!(s.by_category("*.USER.x").count(), 1);
        assert_eq!(s.by_entity(EntityId(0)).count(), 1);
        assert_eq!(s.by_entity(EntityId(1)).count(), 0);
    }

    #[test]
    fn report_is_sorted_and_filtered() {
        let records = vec![
            rec(2.0, "b", "b.X", 1.0),
            rec(1.0, "b", "b.Y", 2.0),
            rec(1.0, "a", "a.Y", 3.0),
            rec(1.0, "a", "a.Z.q", 4.0),
        ];
        let mut out = Vec::new();
        write_report_to(&records, &["*.Y", "*.X"], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "time,entity,category,value\n\
             1.000000000,a,a.Y,3.000000000\n\
             1.000000000,b,b.Y,2.000000000\n\
             2.000000000,b,b.X,1.000000000\n"
        );
        let mut out = Vec::new();
        write_report_to(&records, &["nothing"], &mut out).unwrap();
        assert_eq!(out, b"time,entity,category,value\n");
    }
}
