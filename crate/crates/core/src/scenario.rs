//! Scenario configuration, entity wiring, single runs, parameter sweeps and
//! the results table.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::application::{synth_workload, Gridlet, GridletBatch, GridletId, StandardPe, WorkloadSpec};
use crate::broker::{Broker, BrokerConfig, Constraints, Experiment, Policy};
use crate::error::{Error, Result};
use crate::kernel::{EntityId, SimTime, SimulationReport};
use crate::message::GridEngine;
use crate::net::{GridInformationService, NetConfig, ShutdownCoordinator, DEFAULT_BAUD_RATE};
use crate::resource::{AllocationPolicy, GridResource, Machine, ResourceCalendar, ResourceCharacteristics};
use crate::stats::{ReportWriter, StatRecord, Statistics, ALL_CATEGORIES};
use crate::user::{DirectUser, UserEntity};

/// Baud rate used by the WWG preset for every entity.
pub const WWG_BAUD_RATE: f64 = 28_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConfig {
    pub name: String,
    #[serde(default = "one")]
    pub n_machines: usize,
    pub pes_per_machine: usize,
    pub pe_mips: f64,
    pub policy: AllocationPolicy,
    pub price_per_pe_time_unit: f64,
    #[serde(default)]
    pub time_zone: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calendar: Option<ResourceCalendar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baud_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub architecture: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub os: String,
}

fn one() -> usize {
    1
}

impl ResourceConfig {
    pub fn characteristics(&self) -> ResourceCharacteristics {
        ResourceCharacteristics {
            architecture: self.architecture.clone(),
            os: self.os.clone(),
            machines: (0..self.n_machines)
                .map(|m| Machine::uniform(m, self.pes_per_machine, self.pe_mips))
                .collect(),
            policy: self.policy,
            time_zone: self.time_zone,
            cost_per_pe_time_unit: self.price_per_pe_time_unit,
        }
    }

    /// The configured calendar, with the resource's time zone applied.
    pub fn calendar(&self) -> ResourceCalendar {
        let mut cal = self.calendar.clone().unwrap_or_default();
        if self.calendar.is_none() {
            cal.time_zone = self.time_zone;
        }
        cal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridletConfig {
    pub length_mi: f64,
    /// Release time for direct submission.
    #[serde(default)]
    pub submit_time: SimTime,
    #[serde(default)]
    pub input_size_bytes: u64,
    #[serde(default)]
    pub output_size_bytes: u64,
}

/// A user: either a synthetic task farm (`n_gridlets`, `base_time_units`,
/// `variation`) or an explicit `gridlets` list; brokered with `d_factor` and
/// `b_factor` or `deadline` and `budget`, or sent straight to the resource
/// named by `submit_to`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_gridlets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_time_units: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation: Option<f64>,
    #[serde(default)]
    pub input_size_bytes: u64,
    #[serde(default)]
    pub output_size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gridlets: Option<Vec<GridletConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baud_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submit_to: Option<String>,
}

impl UserConfig {
    /// Synthetic task-farm user with absolute constraints.
    pub fn task_farm(n_gridlets: usize, base_time_units: f64, variation: f64, deadline: SimTime, budget: f64) -> Self {
        Self {
            n_gridlets: Some(n_gridlets),
            base_time_units: Some(base_time_units),
            variation: Some(variation),
            deadline: Some(deadline),
            budget: Some(budget),
            ..Self::default()
        }
    }

    pub fn constraints(&self) -> Option<Constraints> {
        match (self.d_factor, self.b_factor, self.deadline, self.budget) {
            (Some(d_factor), Some(b_factor), None, None) => Some(Constraints::Factors { d_factor, b_factor }),
            (None, None, Some(deadline), Some(budget)) => Some(Constraints::Absolute { deadline, budget }),
            _ => None,
        }
    }

    fn with_absolute(&self, deadline: SimTime, budget: f64) -> Self {
        Self {
            d_factor: None,
            b_factor: None,
            deadline: Some(deadline),
            budget: Some(budget),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub deadline_values: Vec<SimTime>,
    pub budget_values: Vec<f64>,
    /// When present, each cell runs this many copies of the configured users
    /// (cycling through them); otherwise the users run as configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_counts: Option<Vec<usize>>,
}

impl SweepConfig {
    /// Deadlines 100..=3600 step 500 and budgets 5000..=22000 step 1000.
    pub fn wwg_grid() -> Self {
        Self {
            deadline_values: (0..8).map(|i| 100.0 + 500.0 * i as f64).collect(),
            budget_values: (0..18).map(|i| 5000.0 + 1000.0 * i as f64).collect(),
            user_counts: None,
        }
    }

    /// User counts 1, 10, 20, ..., 100.
    pub fn wwg_user_counts() -> Vec<usize> {
        std::iter::once(1).chain((1..=10).map(|i| 10 * i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub resources: Vec<ResourceConfig>,
    pub users: Vec<UserConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Baud rate for entities without their own; falls back to 9600.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_baud_rate: Option<f64>,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub broker: BrokerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_pe_mips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn config_err(path: impl std::fmt::Display, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

fn check_baud(path: String, baud: Option<f64>) -> Result<()> {
    match baud {
        Some(b) if !(b.is_finite() && b > 0.0) => Err(config_err(path, format!("baud rate must be positive, got {b}"))),
        _ => Ok(()),
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.resources.is_empty() {
            return Err(config_err("resources", "at least one resource is required"));
        }
        if self.users.is_empty() {
            return Err(config_err("users", "at least one user is required"));
        }
        check_baud("default_baud_rate".into(), self.default_baud_rate)?;
        if let Some(m) = self.standard_pe_mips {
            StandardPe::new(m).map_err(|e| config_err("standard_pe_mips", e))?;
        }
        let mut names = BTreeSet::new();
        for (i, r) in self.resources.iter().enumerate() {
            let path = format!("resources[{i}]");
            if !names.insert(r.name.clone()) {
                return Err(config_err(format!("{path}.name"), format!("duplicate name `{}`", r.name)));
            }
            if r.n_machines == 0 {
                return Err(config_err(format!("{path}.n_machines"), "must be at least 1"));
            }
            if r.pes_per_machine == 0 {
                return Err(config_err(format!("{path}.pes_per_machine"), "must be at least 1"));
            }
            if !(r.pe_mips.is_finite() && r.pe_mips > 0.0) {
                return Err(config_err(format!("{path}.pe_mips"), "must be positive"));
            }
            if !(r.price_per_pe_time_unit.is_finite() && r.price_per_pe_time_unit >= 0.0) {
                return Err(config_err(format!("{path}.price_per_pe_time_unit"), "must be non-negative"));
            }
            check_baud(format!("{path}.baud_rate"), r.baud_rate)?;
            r.characteristics().validate().map_err(|e| config_err(&path, e))?;
            r.calendar().validate().map_err(|e| config_err(format!("{path}.calendar"), e))?;
        }
        for (i, u) in self.users.iter().enumerate() {
            let path = format!("users[{i}]");
            check_baud(format!("{path}.baud_rate"), u.baud_rate)?;
            let name = user_name(u, i);
            if !names.insert(name.clone()) {
                return Err(config_err(format!("{path}.name"), format!("duplicate name `{name}`")));
            }
            match (&u.gridlets, u.n_gridlets) {
                (Some(_), Some(_)) => {
                    return Err(config_err(&path, "give either `gridlets` or `n_gridlets`, not both"));
                }
                (None, None) => return Err(config_err(&path, "needs `gridlets` or `n_gridlets`")),
                (Some(list), None) => {
                    if list.is_empty() {
                        return Err(config_err(format!("{path}.gridlets"), "must not be empty"));
                    }
                    for (j, g) in list.iter().enumerate() {
                        if !(g.length_mi.is_finite() && g.length_mi > 0.0) {
                            return Err(config_err(format!("{path}.gridlets[{j}].length_mi"), "must be positive"));
                        }
                        if !(g.submit_time.is_finite() && g.submit_time >= 0.0) {
                            return Err(config_err(format!("{path}.gridlets[{j}].submit_time"), "must be non-negative"));
                        }
                        if g.submit_time > 0.0 && u.submit_to.is_none() {
                            return Err(config_err(
                                format!("{path}.gridlets[{j}].submit_time"),
                                "release times need `submit_to`",
                            ));
                        }
                    }
                }
                (None, Some(n)) => {
                    if n == 0 {
                        return Err(config_err(format!("{path}.n_gridlets"), "must be at least 1"));
                    }
                    match u.base_time_units {
                        Some(b) if b.is_finite() && b > 0.0 => {}
                        _ => return Err(config_err(format!("{path}.base_time_units"), "must be given and positive")),
                    }
                    match u.variation {
                        Some(v) if (0.0..=1.0).contains(&v) => {}
                        _ => return Err(config_err(format!("{path}.variation"), "must be given and in [0, 1]")),
                    }
                }
            }
            match &u.submit_to {
                Some(target) => {
                    if !self.resources.iter().any(|r| &r.name == target) {
                        return Err(config_err(format!("{path}.submit_to"), format!("unknown resource `{target}`")));
                    }
                }
                None => {
                    let c = u.constraints().ok_or_else(|| {
                        config_err(&path, "needs either `d_factor` and `b_factor` or `deadline` and `budget`")
                    })?;
                    c.validate().map_err(|e| config_err(&path, e))?;
                }
            }
        }
        if self.broker.max_gridlet_per_pe == 0 {
            return Err(config_err("broker.max_gridlet_per_pe", "must be at least 1"));
        }
        if let Some(s) = &self.sweep {
            if s.deadline_values.is_empty() {
                return Err(config_err("sweep.deadline_values", "must not be empty"));
            }
            if s.budget_values.is_empty() {
                return Err(config_err("sweep.budget_values", "must not be empty"));
            }
            if let Some(deadline) = s.deadline_values.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
                return Err(config_err("sweep.deadline_values", format!("{deadline} is not positive")));
            }
            if let Some(budget) = s.budget_values.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
                return Err(config_err("sweep.budget_values", format!("{budget} is negative")));
            }
            if let Some(counts) = &s.user_counts {
                if counts.is_empty() || counts.contains(&0) {
                    return Err(config_err("sweep.user_counts", "must be non-empty and positive"));
                }
            }
        }
        Ok(())
    }

    fn baud(&self, own: Option<f64>) -> f64 {
        own.or(self.default_baud_rate).unwrap_or(DEFAULT_BAUD_RATE)
    }

    fn standard_pe(&self) -> Result<StandardPe> {
        self.standard_pe_mips.map_or(Ok(StandardPe::default()), StandardPe::new)
    }
}

fn user_name(u: &UserConfig, index: usize) -> String {
    u.name.clone().unwrap_or_else(|| format!("U{index}"))
}

/// Workload seed of user `index`: `seed * 997 * (1 + index) + 1`, wrapping.
pub fn user_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(997)
        .wrapping_mul(1 + index as u64)
        .wrapping_add(1)
}

/// The eleven-resource WWG testbed with one task-farm user (200 jobs of about
/// 100 standard time units, 10% variation, deadline 3100, budget 22000).
pub fn preset_wwg() -> ScenarioConfig {
    let table: [(&str, &str, usize, f64, AllocationPolicy, f64); 11] = [
        ("Compaq AlphaServer", "OSF1", 4, 515.0, AllocationPolicy::TimeShared, 8.0),
        ("Sun Ultra", "Solaris", 4, 377.0, AllocationPolicy::TimeShared, 4.0),
        ("Sun Ultra", "Solaris", 4, 377.0, AllocationPolicy::TimeShared, 3.0),
        ("Sun Ultra", "Solaris", 2, 377.0, AllocationPolicy::TimeShared, 3.0),
        ("Intel Pentium/VC820", "Linux", 2, 380.0, AllocationPolicy::TimeShared, 2.0),
        ("SGI Origin 3200", "IRIX", 6, 410.0, AllocationPolicy::TimeShared, 5.0),
        ("SGI Origin 3200", "IRIX", 16, 410.0, AllocationPolicy::TimeShared, 5.0),
        ("SGI Origin 3200", "IRIX", 16, 410.0, AllocationPolicy::SpaceShared, 4.0),
        ("Intel Pentium/VC820", "Linux", 2, 380.0, AllocationPolicy::TimeShared, 1.0),
        ("SGI Origin 3200", "IRIX", 4, 410.0, AllocationPolicy::TimeShared, 6.0),
        ("Sun Ultra", "Solaris", 8, 377.0, AllocationPolicy::TimeShared, 3.0),
    ];
    let resources = table
        .iter()
        .enumerate()
        .map(|(i, &(arch, os, pes, mips, policy, price))| ResourceConfig {
            name: format!("R{i}"),
            n_machines: 1,
            pes_per_machine: pes,
            pe_mips: mips,
            policy,
            price_per_pe_time_unit: price,
            time_zone: 0.0,
            calendar: None,
            baud_rate: None,
            architecture: arch.into(),
            os: os.into(),
        })
        .collect();
    ScenarioConfig {
        resources,
        users: vec![UserConfig::task_farm(200, 100.0, 0.1, 3100.0, 22_000.0)],
        seed: 1,
        default_baud_rate: Some(WWG_BAUD_RATE),
        net: NetConfig::default(),
        broker: BrokerConfig::default(),
        standard_pe_mips: None,
        sweep: None,
    }
}

/// Per-user outcome of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub user_count: usize,
    /// Resolved constraints; absent for direct submitters.
    pub deadline: Option<SimTime>,
    pub budget: Option<f64>,
    pub user_id: usize,
    pub gridlets_completed: usize,
    pub time_utilized: SimTime,
    pub budget_spent: f64,
    pub termination_time: SimTime,
    /// Completions per resource, in configuration order.
    pub per_resource_completion: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserOutcome {
    pub name: String,
    pub gridlets: Vec<Gridlet>,
    pub experiment: Option<Experiment>,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub rows: Vec<ResultRow>,
    pub users: Vec<UserOutcome>,
    pub stats: Vec<StatRecord>,
    pub report: SimulationReport,
}

fn build_batch(cfg: &ScenarioConfig, u: &UserConfig, index: usize) -> Result<(GridletBatch, Vec<SimTime>)> {
    match &u.gridlets {
        Some(list) => {
            let gridlets = list
                .iter()
                .enumerate()
                .map(|(j, g)| Gridlet::new(j as GridletId, g.length_mi, g.input_size_bytes, g.output_size_bytes))
                .collect::<Result<Vec<_>>>()?;
            Ok((GridletBatch::new(gridlets)?, list.iter().map(|g| g.submit_time).collect()))
        }
        None => {
            let spec = WorkloadSpec {
                n_gridlets: u.n_gridlets.unwrap_or(0),
                base_time_units: u.base_time_units.unwrap_or(0.0),
                variation: u.variation.unwrap_or(0.0),
                input_size_bytes: u.input_size_bytes,
                output_size_bytes: u.output_size_bytes,
            };
            let batch = synth_workload(&spec, cfg.standard_pe()?, user_seed(cfg.seed, index))?;
            let releases = vec![0.0; batch.len()];
            Ok((batch, releases))
        }
    }
}

enum UserSlot {
    Brokered { user: EntityId },
    Direct { user: EntityId },
}

/// Builds the engine for `cfg`, runs it to completion and collects per-user
/// results.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let mut engine = GridEngine::new();
    let mut next = 0usize;
    let mut alloc = || {
        let id = EntityId(next);
        next += 1;
        id
    };
    let gis = alloc();
    let statistics = alloc();
    let writer = alloc();
    let shutdown = alloc();
    let resource_ids: Vec<EntityId> = cfg.resources.iter().map(|_| alloc()).collect();
    let plan: Vec<(Option<EntityId>, EntityId)> = cfg
        .users
        .iter()
        .map(|u| {
            let broker = u.submit_to.is_none().then(&mut alloc);
            (broker, alloc())
        })
        .collect();

    let check = |engine: &GridEngine, expected: EntityId| {
        debug_assert_eq!(engine.next_id(), expected);
    };
    let default_baud = cfg.baud(None);
    check(&engine, gis);
    engine.register("GIS", GridInformationService::new(gis, default_baud, cfg.net)?)?;
    engine.register("Statistics", Statistics::new())?;
    engine.register("ReportWriter", ReportWriter::new(statistics, ALL_CATEGORIES))?;
    let mut recipients = vec![gis, statistics];
    recipients.extend(&resource_ids);
    recipients.extend(plan.iter().filter_map(|(b, _)| *b));
    engine.register("Shutdown", ShutdownCoordinator::new(cfg.users.len(), Some(writer), recipients))?;

    for (r, &id) in cfg.resources.iter().zip(&resource_ids) {
        check(&engine, id);
        let entity = GridResource::new(id, r.characteristics(), r.calendar(), cfg.baud(r.baud_rate), Some(gis), cfg.net)?;
        engine.register(r.name.clone(), entity)?;
    }

    let mut slots = Vec::with_capacity(cfg.users.len());
    for (i, (u, &(broker, user))) in cfg.users.iter().zip(&plan).enumerate() {
        let name = user_name(u, i);
        let baud = cfg.baud(u.baud_rate);
        let (batch, releases) = build_batch(cfg, u, i)?;
        match broker {
            Some(broker) => {
                check(&engine, broker);
                engine.register(format!("{name}_Broker"), Broker::new(broker, gis, baud, cfg.broker)?)?;
                let constraints = u.constraints().expect("validated");
                let mut exp = Experiment::new(batch, constraints)?;
                exp.policy = u.policy;
                engine.register(name, UserEntity::new(user, broker, shutdown, Some(statistics), baud, exp)?)?;
                slots.push(UserSlot::Brokered { user });
            }
            None => {
                let target = u.submit_to.as_deref().expect("validated");
                let resource = cfg
                    .resources
                    .iter()
                    .position(|r| r.name == target)
                    .map(|p| resource_ids[p])
                    .expect("validated");
                let items = releases.into_iter().zip(batch.into_vec()).collect();
                engine.register(name, DirectUser::new(user, resource, shutdown, Some(statistics), baud, items)?)?;
                slots.push(UserSlot::Direct { user });
            }
        }
    }

    let report = engine.run()?;

    let resource_names: HashMap<EntityId, usize> = resource_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut rows = Vec::with_capacity(slots.len());
    let mut users = Vec::with_capacity(slots.len());
    for (i, slot) in slots.into_iter().enumerate() {
        let (user, gridlets, experiment) = match slot {
            UserSlot::Brokered { user } => {
                let exp = engine
                    .entity::<UserEntity>(user)
                    .and_then(UserEntity::result)
                    .cloned()
                    .ok_or_else(|| Error::Protocol {
                        entity: Some(user),
                        message: "user finished without its experiment".into(),
                    })?;
                (user, exp.gridlets.clone(), Some(exp))
            }
            UserSlot::Direct { user } => {
                let entity = engine.entity::<DirectUser>(user).expect("registered as direct user");
                (user, entity.returned().to_vec(), None)
            }
        };
        let mut per_resource = vec![0usize; cfg.resources.len()];
        for g in gridlets.iter().filter(|g| g.is_finished()) {
            if let Some(&r) = g.resource.and_then(|id| resource_names.get(&id)) {
                per_resource[r] += 1;
            }
        }
        let completed = gridlets.iter().filter(|g| g.is_finished()).count();
        let row = match &experiment {
            Some(exp) => ResultRow {
                user_count: cfg.users.len(),
                deadline: exp.deadline,
                budget: exp.budget,
                user_id: i,
                gridlets_completed: completed,
                time_utilized: exp.end_time - exp.start_time,
                budget_spent: exp.expenses,
                termination_time: exp.end_time,
                per_resource_completion: Vec::new(),
            },
            None => {
                let start = gridlets.iter().map(|g| g.submission_time).fold(f64::INFINITY, f64::min);
                let end = gridlets.iter().map(|g| g.finish_time).fold(0.0, f64::max);
                ResultRow {
                    user_count: cfg.users.len(),
                    deadline: None,
                    budget: None,
                    user_id: i,
                    gridlets_completed: completed,
                    time_utilized: if start.is_finite() { end - start } else { 0.0 },
                    budget_spent: gridlets.iter().map(|g| g.processing_cost).sum(),
                    termination_time: end,
                    per_resource_completion: Vec::new(),
                }
            }
        };
        let row = ResultRow {
            per_resource_completion: cfg
                .resources
                .iter()
                .zip(per_resource)
                .map(|(r, n)| (r.name.clone(), n))
                .collect(),
            ..row
        };
        rows.push(row);
        users.push(UserOutcome {
            name: engine.name(user).unwrap_or_default().to_owned(),
            gridlets,
            experiment,
        });
    }
    let stats = engine
        .entity::<Statistics>(statistics)
        .map(|s| s.store().records().to_vec())
        .unwrap_or_default();
    Ok(ScenarioOutcome {
        rows,
        users,
        stats,
        report,
    })
}

/// Runs a configuration without a sweep block.
pub fn run_single(cfg: &ScenarioConfig) -> Result<Vec<ResultRow>> {
    if cfg.sweep.is_some() {
        return Err(config_err("sweep", "single runs take no sweep block"));
    }
    Ok(run_scenario(cfg)?.rows)
}

/// One point of a sweep grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub user_count: usize,
    pub deadline: SimTime,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub cell: SweepCell,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// Every cell of the sweep grid, user counts outermost.
pub fn sweep_cells(cfg: &ScenarioConfig, sweep: &SweepConfig) -> Vec<SweepCell> {
    let counts = sweep.user_counts.clone().unwrap_or_else(|| vec![cfg.users.len()]);
    let mut cells = Vec::new();
    for &user_count in &counts {
        for &deadline in &sweep.deadline_values {
            for &budget in &sweep.budget_values {
                cells.push(SweepCell {
                    user_count,
                    deadline,
                    budget,
                });
            }
        }
    }
    cells
}

/// Standalone configuration of one sweep cell: the sweep's constraints
/// replace every user's own, and user counts replicate the configured users
/// round-robin.
pub fn cell_config(cfg: &ScenarioConfig, cell: SweepCell) -> ScenarioConfig {
    let replicate = cfg.sweep.as_ref().is_some_and(|s| s.user_counts.is_some());
    let users = (0..cell.user_count)
        .map(|i| {
            let template = &cfg.users[i % cfg.users.len()];
            let mut u = template.with_absolute(cell.deadline, cell.budget);
            if replicate {
                u.name = None;
            }
            u
        })
        .collect();
    ScenarioConfig {
        users,
        sweep: None,
        ..cfg.clone()
    }
}

/// Runs every sweep cell in parallel; failed cells are reported, not fatal.
pub fn run_sweep(cfg: &ScenarioConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let sweep = cfg.sweep.as_ref().ok_or_else(|| config_err("sweep", "a sweep block is required"))?;
    let cells = sweep_cells(cfg, sweep);
    let results: Vec<(SweepCell, Result<Vec<ResultRow>>)> = cells
        .par_iter()
        .map(|&cell| (cell, run_scenario(&cell_config(cfg, cell)).map(|o| o.rows)))
        .collect();
    let mut out = SweepOutput::default();
    for (cell, result) in results {
        match result {
            Ok(rows) => out.rows.extend(rows.into_iter().map(|r| ResultRow {
                deadline: Some(cell.deadline),
                budget: Some(cell.budget),
                ..r
            })),
            Err(e) => out.failures.push(CellFailure {
                cell,
                message: e.to_string(),
            }),
        }
    }
    sort_rows(&mut out.rows);
    Ok(out)
}

fn key(r: &ResultRow) -> (usize, f64, f64, usize) {
    (r.user_count, r.deadline.unwrap_or(f64::NAN), r.budget.unwrap_or(f64::NAN), r.user_id)
}

fn cmp_keys(a: (usize, f64, f64, usize), b: (usize, f64, f64, usize)) -> std::cmp::Ordering {
    a.0.cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
        .then(a.3.cmp(&b.3))
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| cmp_keys(key(a), key(b)));
}

pub const RESULTS_HEADER: [&str; 10] = [
    "user_count",
    "deadline",
    "budget",
    "user_id",
    "completed",
    "time_utilized",
    "budget_spent",
    "termination_time",
    "resource",
    "resource_completed",
];

fn num(v: f64) -> String {
    format!("{v:.9}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Writes the long-form results table: one line per (cell, user, resource),
/// ordered by user count, deadline, budget and user id. A failed cell takes a
/// single line whose `resource` field is `error`.
pub fn emit_results<W: Write>(rows: &[ResultRow], failures: &[CellFailure], out: W) -> Result<()> {
    enum Line<'a> {
        Row(&'a ResultRow),
        Failed(&'a CellFailure),
    }
    let mut lines: Vec<((usize, f64, f64, usize), Line<'_>)> = rows
        .iter()
        .map(|r| (key(r), Line::Row(r)))
        .chain(
            failures
                .iter()
                .map(|f| ((f.cell.user_count, f.cell.deadline, f.cell.budget, usize::MAX), Line::Failed(f))),
        )
        .collect();
    lines.sort_by(|a, b| cmp_keys(a.0, b.0));

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for (_, line) in lines {
        match line {
            Line::Row(r) => {
                for (resource, n) in &r.per_resource_completion {
                    w.write_record([
                        r.user_count.to_string(),
                        opt(r.deadline),
                        opt(r.budget),
                        r.user_id.to_string(),
                        r.gridlets_completed.to_string(),
                        num(r.time_utilized),
                        num(r.budget_spent),
                        num(r.termination_time),
                        resource.clone(),
                        n.to_string(),
                    ])?;
                }
            }
            Line::Failed(f) => {
                w.write_record([
                    f.cell.user_count.to_string(),
                    num(f.cell.deadline),
                    num(f.cell.budget),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    "error".to_owned(),
                    String::new(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_results_to_path(rows: &[ResultRow], failures: &[CellFailure], path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    emit_results(rows, failures, std::io::BufWriter::new(file))
}
