//! Acceptance gate: every criterion at its stated tolerance and time limit,
//! one PASS/FAIL line each.

mod common;

use std::time::{Duration, Instant};

use gridsched::broker::{c_max, c_min, compute_budget, compute_deadline, t_max, t_min};
use gridsched::kernel::{Engine, Entity, EntityId, Event, Next, Context};
use gridsched::resource::{AllocationPolicy, Machine, ResourceCharacteristics};
use gridsched::scenario::{emit_results, preset_wwg, run_scenario, run_sweep, SweepConfig};
use gridsched::Result as SimResult;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{direct_config, exhaustive_cost_bounds, exhaustive_min_makespan, stepping_finish_times, three_gridlet_config};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn criterion_1() -> Outcome {
    // (start, finish, elapsed) per gridlet
    let cases = [
        (AllocationPolicy::TimeShared, [(0.0, 10.0, 10.0), (4.0, 14.0, 10.0), (7.0, 18.0, 11.0)]),
        (AllocationPolicy::SpaceShared, [(0.0, 10.0, 10.0), (4.0, 12.5, 8.5), (10.0, 19.5, 12.5)]),
    ];
    let mut detail = Vec::new();
    for (policy, expected) in cases {
        let out = run_scenario(&three_gridlet_config(policy)).map_err(|e| e.to_string())?;
        let mut gridlets = out.users[0].gridlets.clone();
        gridlets.sort_by_key(|g| g.id);
        ensure(gridlets.len() == 3, || format!("{policy:?}: {} gridlets returned", gridlets.len()))?;
        for (g, &(start, finish, elapsed)) in gridlets.iter().zip(&expected) {
            ensure(
                close(g.exec_start_time, start, 1e-9) && close(g.finish_time, finish, 1e-9) && close(g.wall_clock, elapsed, 1e-9),
                || {
                    format!(
                        "{policy:?} G{}: start {} finish {} elapsed {}, want {start}/{finish}/{elapsed}",
                        g.id + 1,
                        g.exec_start_time,
                        g.finish_time,
                        g.wall_clock
                    )
                },
            )?;
        }
        let finishes: Vec<f64> = gridlets.iter().map(|g| g.finish_time).collect();
        detail.push(format!("{policy:?} {finishes:?}"));
    }
    Ok(detail.join("; "))
}

fn one_pe_resource(mips: f64, price: f64) -> ResourceCharacteristics {
    ResourceCharacteristics {
        architecture: String::new(),
        os: String::new(),
        machines: vec![Machine::uniform(0, 1, mips)],
        policy: AllocationPolicy::TimeShared,
        time_zone: 0.0,
        cost_per_pe_time_unit: price,
    }
}

fn criterion_2() -> Outcome {
    let jobs = [100.0, 100.0];
    let speed = [one_pe_resource(100.0, 1.0), one_pe_resource(50.0, 1.0)];
    let oracle_t_min = exhaustive_min_makespan(&jobs, &[100.0, 50.0]);
    let oracle_t_max = jobs.iter().sum::<f64>() / 50.0;
    let e = |e: gridsched::Error| e.to_string();
    let got_t_min = t_min(&jobs, &speed).map_err(e)?;
    let got_t_max = t_max(&jobs, &speed).map_err(e)?;
    ensure(got_t_min == oracle_t_min && got_t_min == 2.0, || format!("T_MIN {got_t_min} vs oracle {oracle_t_min}"))?;
    ensure(got_t_max == oracle_t_max && got_t_max == 4.0, || format!("T_MAX {got_t_max} vs oracle {oracle_t_max}"))?;
    for (d, want) in [(0.0, oracle_t_min), (1.0, oracle_t_max), (0.5, 3.0)] {
        let got = compute_deadline(&jobs, &speed, d).map_err(e)?;
        ensure(got == want, || format!("deadline at d={d}: {got}, want {want}"))?;
    }

    let priced = [one_pe_resource(100.0, 1.0), one_pe_resource(100.0, 5.0)];
    let (oracle_c_min, oracle_c_max) = exhaustive_cost_bounds(&jobs, &[(1, 100.0, 1.0), (1, 100.0, 5.0)], 2.0);
    let got_c_min = c_min(&jobs, &priced, 2.0).map_err(e)?;
    let got_c_max = c_max(&jobs, &priced, 2.0).map_err(e)?;
    ensure(got_c_min == oracle_c_min && got_c_min == 2.0, || format!("C_MIN {got_c_min} vs oracle {oracle_c_min}"))?;
    ensure(got_c_max == oracle_c_max && got_c_max == 10.0, || format!("C_MAX {got_c_max} vs oracle {oracle_c_max}"))?;
    for (b, want) in [(0.0, oracle_c_min), (1.0, oracle_c_max), (0.5, 6.0)] {
        let got = compute_budget(&jobs, &priced, b, 2.0).map_err(e)?;
        ensure(got == want, || format!("budget at b={b}: {got}, want {want}"))?;
    }
    Ok("T_MIN 2, T_MAX 4, deadline(0.5) 3; C_MIN 2, C_MAX 10, budget(0.5) 6".into())
}

fn criterion_3() -> Outcome {
    let cfg = preset_wwg();
    let user = &cfg.users[0];
    ensure(
        user.n_gridlets == Some(200) && user.deadline == Some(3100.0) && user.budget == Some(22_000.0),
        || format!("preset user is {user:?}"),
    )?;
    let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let row = &out.rows[0];
    ensure(row.gridlets_completed == 200, || format!("{} of 200 completed", row.gridlets_completed))?;
    let on_r8 = row
        .per_resource_completion
        .iter()
        .find(|(name, _)| name == "R8")
        .map_or(0, |(_, n)| *n);
    ensure(on_r8 == 200, || format!("per-resource completions {:?}", row.per_resource_completion))?;
    Ok(format!(
        "200/200 on R8, spent {:.2}, finished at {:.2}",
        row.budget_spent, row.termination_time
    ))
}

fn non_decreasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

fn criterion_4() -> Outcome {
    let mut cfg = preset_wwg();
    cfg.sweep = Some(SweepConfig::wwg_grid());
    let out = run_sweep(&cfg).map_err(|e| e.to_string())?;
    ensure(out.failures.is_empty(), || format!("failed cells: {:?}", out.failures))?;
    ensure(out.rows.len() == 144, || format!("{} cells", out.rows.len()))?;
    let grid = SweepConfig::wwg_grid();
    let completed = |d: f64, b: f64| -> usize {
        out.rows
            .iter()
            .find(|r| r.deadline == Some(d) && r.budget == Some(b))
            .map_or(usize::MAX, |r| r.gridlets_completed)
    };
    let by_budget: Vec<usize> = grid.budget_values.iter().map(|&b| completed(100.0, b)).collect();
    let by_deadline: Vec<usize> = grid.deadline_values.iter().map(|&d| completed(d, 5000.0)).collect();
    ensure(non_decreasing(&by_budget), || format!("deadline 100 over budgets: {by_budget:?}"))?;
    ensure(non_decreasing(&by_deadline), || format!("budget 5000 over deadlines: {by_deadline:?}"))?;
    Ok(format!("deadline 100: {by_budget:?}; budget 5000: {by_deadline:?}"))
}

fn criterion_5() -> Outcome {
    let mut means = Vec::new();
    for users in [1usize, 10, 20] {
        let mut cfg = preset_wwg();
        cfg.users = vec![cfg.users[0].clone(); users];
        let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let mean = out.rows.iter().map(|r| r.gridlets_completed as f64).sum::<f64>() / users as f64;
        means.push(mean);
    }
    ensure(means.windows(2).all(|w| w[0] >= w[1]), || format!("means {means:?}"))?;
    Ok(format!("mean completed for 1/10/20 users: {means:?}"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let n = rng.gen_range(1..=8);
        let pes = rng.gen_range(1..=4);
        let mips = rng.gen_range(1..=4) as f64;
        let jobs: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(1.0..20.0), rng.gen_range(0.0..15.0)))
            .collect();
        let out = run_scenario(&direct_config(AllocationPolicy::TimeShared, pes, mips, &jobs)).map_err(|e| e.to_string())?;
        let mut got = out.users[0].gridlets.clone();
        got.sort_by_key(|g| g.id);
        let arrivals: Vec<(f64, f64)> = jobs.iter().map(|&(len, at)| (at, len)).collect();
        let want = stepping_finish_times(&arrivals, pes, mips, 1e-3);
        ensure(got.len() == n, || format!("instance {instance}: {} of {n} returned", got.len()))?;
        for (g, w) in got.iter().zip(&want) {
            let rel = (g.finish_time - w).abs() / w.abs();
            worst = worst.max(rel);
            ensure(rel <= 0.01, || {
                format!("instance {instance} ({pes} PEs, {jobs:?}): gridlet {} finished {} vs oracle {w}", g.id, g.finish_time)
            })?;
        }
    }
    Ok(format!("100 instances, worst relative error {worst:.2e}"))
}

fn criterion_7() -> Outcome {
    let mut multi = preset_wwg();
    multi.users = vec![multi.users[0].clone(); 5];
    multi.users[0].input_size_bytes = 50_000;
    multi.users[0].output_size_bytes = 20_000;
    let scenarios = [
        ("wwg", preset_wwg()),
        ("wwg-5-users-with-io", multi),
        ("direct-time-shared", three_gridlet_config(AllocationPolicy::TimeShared)),
        ("direct-space-shared", three_gridlet_config(AllocationPolicy::SpaceShared)),
    ];
    for (name, cfg) in scenarios {
        let run = || -> Result<(Vec<u8>, String), String> {
            let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
            let mut csv = Vec::new();
            emit_results(&out.rows, &[], &mut csv).map_err(|e| e.to_string())?;
            Ok((csv, out.report.trace_digest))
        };
        let (csv_a, digest_a) = run()?;
        let (csv_b, digest_b) = run()?;
        ensure(csv_a == csv_b, || format!("{name}: results CSV differs"))?;
        ensure(digest_a == digest_b, || format!("{name}: trace digest {digest_a} vs {digest_b}"))?;
    }
    Ok("4 scenarios byte-identical with matching digests".into())
}

/// Follows a script of sends and holds, logging every delivery.
struct Scripted {
    script: Vec<(u8, usize, u8)>,
    at: usize,
    peers: usize,
    seen: Vec<(f64, u64)>,
}

impl Scripted {
    fn act(&mut self, ctx: &mut Context<'_, ()>) -> SimResult<Next> {
        while let Some(&(kind, dst, span)) = self.script.get(self.at) {
            self.at += 1;
            let delay = f64::from(span) * 0.5;
            if kind % 3 == 0 {
                return Ok(Next::Hold(delay));
            }
            ctx.schedule(EntityId(dst % self.peers), delay, 1, ())?;
        }
        Ok(Next::Wait)
    }
}

impl Entity<()> for Scripted {
    fn start(&mut self, ctx: &mut Context<'_, ()>) -> SimResult<Next> {
        self.act(ctx)
    }

    fn on_event(&mut self, ev: Event<()>, ctx: &mut Context<'_, ()>) -> SimResult<Next> {
        self.seen.push((ev.time, ev.seq));
        self.act(ctx)
    }

    fn on_wake(&mut self, ctx: &mut Context<'_, ()>) -> SimResult<Next> {
        while let Some(ev) = ctx.next_pending() {
            self.seen.push((ev.time, ev.seq));
        }
        self.act(ctx)
    }
}

fn check_kernel(scripts: Vec<Vec<(u8, usize, u8)>>) -> Result<(), TestCaseError> {
    let peers = scripts.len();
    let mut engine: Engine<()> = Engine::new();
    engine.enable_trace();
    let ids: Vec<EntityId> = scripts
        .into_iter()
        .enumerate()
        .map(|(i, script)| {
            engine
                .register(format!("e{i}"), Scripted { script, at: 0, peers, seen: Vec::new() })
                .unwrap()
        })
        .collect();
    engine.run().map_err(|e| TestCaseError::fail(e.to_string()))?;
    let trace = engine.trace().unwrap();
    for w in trace.windows(2) {
        prop_assert!(w[0].time <= w[1].time, "clock went back: {:?} then {:?}", w[0], w[1]);
        if w[0].time == w[1].time {
            prop_assert!(w[0].seq < w[1].seq, "tie not FIFO: {:?} then {:?}", w[0], w[1]);
        }
    }
    for id in ids {
        let seen = &engine.entity::<Scripted>(id).unwrap().seen;
        for w in seen.windows(2) {
            prop_assert!(
                w[0].0 < w[1].0 || (w[0].0 == w[1].0 && w[0].1 < w[1].1),
                "entity {id} saw {:?} before {:?}",
                w[0],
                w[1]
            );
        }
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let script = prop::collection::vec((any::<u8>(), 0usize..8, 0u8..4), 0..12);
    let strategy = prop::collection::vec(script, 1..6);
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&strategy, check_kernel)
        .map_err(|e| format!("{e}"))?;
    Ok("10000 random schedule/hold sequences".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 three-gridlet golden finish times", criterion_1, Duration::from_secs(1)),
        ("2 deadline/budget boundaries", criterion_2, Duration::from_secs(1)),
        ("3 cheapest-resource dominance", criterion_3, Duration::from_secs(10)),
        ("4 budget/deadline monotonicity", criterion_4, Duration::from_secs(300)),
        ("5 multi-user contention trend", criterion_5, Duration::from_secs(300)),
        ("6 time-stepping oracle agreement", criterion_6, Duration::from_secs(60)),
        ("7 determinism", criterion_7, Duration::from_secs(300)),
        ("8 kernel ordering properties", criterion_8, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if took <= limit {
                Ok(detail)
            } else {
                Err(format!("took {took:.2?}, limit {limit:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({took:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
