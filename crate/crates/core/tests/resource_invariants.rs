use std::cmp::Reverse;
use std::collections::BinaryHeap;

use gridsched::application::{Gridlet, GridletStatus};
use gridsched::resource::{AllocationPolicy, Directive, Machine, ResourceCharacteristics, Scheduler};
use proptest::prelude::*;

#[derive(Debug, PartialEq)]
struct Key(f64, u64);
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Key {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0).then(self.1.cmp(&o.1))
    }
}

enum Step {
    Submit(usize),
    Internal(u64),
}

/// Drives a scheduler with its own directives; returns (arrival, gridlet) per
/// return in return order and the peak executing count.
fn drive(policy: AllocationPolicy, machines: Vec<Machine>, jobs: &[(f64, f64)]) -> (Vec<(f64, Gridlet)>, usize) {
    let chars = ResourceCharacteristics {
        architecture: String::new(),
        os: String::new(),
        machines,
        policy,
        time_zone: 0.0,
        cost_per_pe_time_unit: 1.0,
    };
    let mut sched = Scheduler::for_resource(&chars).unwrap();
    let mut heap = BinaryHeap::new();
    let mut steps = Vec::new();
    for (i, &(at, _)) in jobs.iter().enumerate() {
        heap.push(Reverse((Key(at, steps.len() as u64), steps.len())));
        steps.push(Step::Submit(i));
    }
    let mut returned = Vec::new();
    let mut peak = 0;
    while let Some(Reverse((Key(now, _), idx))) = heap.pop() {
        let directives = match steps[idx] {
            Step::Submit(i) => sched.submit(Gridlet::new(i as u32, jobs[i].1, 0, 0).unwrap(), now, 1.0),
            Step::Internal(tag) => sched.on_internal(tag, now, 1.0),
        };
        peak = peak.max(sched.n_executing());
        for d in directives {
            match d {
                Directive::Internal { at, tag } => {
                    assert!(at >= now, "forecast {at} before now {now}");
                    heap.push(Reverse((Key(at, steps.len() as u64), steps.len())));
                    steps.push(Step::Internal(tag));
                }
                Directive::Return(g) => returned.push((jobs[g.id as usize].0, g)),
            }
        }
    }
    (returned, peak)
}

fn jobs_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0u32..40, 1u32..60), 1..12)
        .prop_map(|v| v.into_iter().map(|(a, l)| (f64::from(a) * 0.5, f64::from(l))).collect())
}

proptest! {
    #[test]
    fn every_gridlet_returns_once_with_its_full_length(
        jobs in jobs_strategy(),
        pes in 1usize..4,
        mips in 1u32..5,
        space in any::<bool>(),
    ) {
        let mips = f64::from(mips);
        let policy = if space { AllocationPolicy::SpaceShared } else { AllocationPolicy::TimeShared };
        let (returned, _) = drive(policy, vec![Machine::uniform(0, pes, mips)], &jobs);
        let mut ids: Vec<u32> = returned.iter().map(|(_, g)| g.id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..jobs.len() as u32).collect::<Vec<_>>());
        for (arrival, g) in &returned {
            prop_assert_eq!(g.status, GridletStatus::Success);
            // no gridlet runs faster than one whole PE
            let fastest = g.length_mi / mips;
            prop_assert!(g.finish_time - arrival >= fastest - 1e-9, "{g:?} beat {fastest}");
            prop_assert!((g.wall_clock - (g.finish_time - arrival)).abs() <= 1e-9);
        }
        let total: f64 = jobs.iter().map(|j| j.1).sum();
        let first = jobs.iter().map(|j| j.0).fold(f64::INFINITY, f64::min);
        let last = returned.iter().map(|(_, g)| g.finish_time).fold(0.0, f64::max);
        prop_assert!(last - first >= total / (pes as f64 * mips) - 1e-9);
    }

    #[test]
    fn space_shared_is_fcfs_within_capacity(
        jobs in jobs_strategy(),
        pes_a in 1usize..3,
        pes_b in 0usize..3,
    ) {
        let mut machines = vec![Machine::uniform(0, pes_a, 2.0)];
        if pes_b > 0 {
            machines.push(Machine::uniform(1, pes_b, 2.0));
        }
        let (returned, peak) = drive(AllocationPolicy::SpaceShared, machines, &jobs);
        prop_assert!(peak <= pes_a + pes_b);
        let mut by_arrival: Vec<&(f64, Gridlet)> = returned.iter().collect();
        by_arrival.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
        for w in by_arrival.windows(2) {
            prop_assert!(w[0].1.exec_start_time <= w[1].1.exec_start_time, "{:?} started after {:?}", w[0], w[1]);
        }
        for (arrival, g) in &returned {
            prop_assert!(g.exec_start_time >= *arrival);
            prop_assert!((g.finish_time - g.exec_start_time - g.length_mi / 2.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn time_shared_keeps_every_pe_busy_while_work_waits(
        lengths in prop::collection::vec(1u32..60, 1..10),
        pes in 1usize..4,
    ) {
        // all arrive together, so the busy period ends no later than serial
        // execution and no earlier than perfect packing
        let jobs: Vec<(f64, f64)> = lengths.iter().map(|&l| (0.0, f64::from(l))).collect();
        let (returned, peak) = drive(AllocationPolicy::TimeShared, vec![Machine::uniform(0, pes, 1.0)], &jobs);
        prop_assert_eq!(peak, jobs.len());
        let total: f64 = jobs.iter().map(|j| j.1).sum();
        let longest = jobs.iter().map(|j| j.1).fold(0.0, f64::max);
        let last = returned.iter().map(|(_, g)| g.finish_time).fold(0.0, f64::max);
        prop_assert!(last >= (total / pes as f64).max(longest) - 1e-6);
        prop_assert!(last <= total + 1e-6);
        for (_, g) in &returned {
            prop_assert_eq!(g.exec_start_time, 0.0);
        }
    }
}

#[test]
fn stale_completion_tags_are_ignored() {
    let chars = ResourceCharacteristics {
        architecture: String::new(),
        os: String::new(),
        machines: vec![Machine::uniform(0, 1, 1.0)],
        policy: AllocationPolicy::TimeShared,
        time_zone: 0.0,
        cost_per_pe_time_unit: 1.0,
    };
    let mut s = Scheduler::for_resource(&chars).unwrap();
    let first = s.submit(Gridlet::new(0, 10.0, 0, 0).unwrap(), 0.0, 1.0);
    let Directive::Internal { tag: stale, .. } = first[0] else { panic!("{first:?}") };
    let second = s.submit(Gridlet::new(1, 10.0, 0, 0).unwrap(), 5.0, 1.0);
    assert!(matches!(second[0], Directive::Internal { .. }));
    assert!(s.on_internal(stale, 10.0, 1.0).is_empty());
    assert_eq!(s.n_executing(), 2);
}
