//! Reference computations shared by the integration tests. Each is written
//! from first principles and shares no code with the crate.

#![allow(dead_code)]

use gridsched::resource::AllocationPolicy;
use gridsched::scenario::{GridletConfig, ResourceConfig, ScenarioConfig, UserConfig};

/// Finish times of jobs `(arrival, length_mi)` on a round-robin resource with
/// `pes` PEs of `mips`, advanced in fixed steps of `dt`.
///
/// In each step the active jobs are dealt over the PEs as evenly as possible;
/// PEs carrying fewer jobs go to the jobs with the least work left (earlier
/// arrival first on ties) and a job runs at `mips / jobs on its PE`.
pub fn stepping_finish_times(jobs: &[(f64, f64)], pes: usize, mips: f64, dt: f64) -> Vec<f64> {
    let mut left: Vec<f64> = jobs.iter().map(|j| j.1).collect();
    let mut done = vec![f64::NAN; jobs.len()];
    let mut t = 0.0;
    let mut step = 0u64;
    while done.iter().any(|d| d.is_nan()) {
        let mut active: Vec<usize> = (0..jobs.len())
            .filter(|&i| done[i].is_nan() && jobs[i].0 <= t + 1e-12)
            .collect();
        if active.is_empty() {
            step += 1;
            t = step as f64 * dt;
            continue;
        }
        active.sort_by(|&a, &b| left[a].partial_cmp(&left[b]).unwrap().then(a.cmp(&b)));
        // load[k] = jobs on PE k, lightest PEs first
        let mut load = vec![0usize; pes];
        for k in 0..active.len() {
            load[k % pes] += 1;
        }
        load.sort_unstable();
        let mut rates = Vec::with_capacity(active.len());
        for &count in &load {
            for _ in 0..count {
                rates.push(mips / count as f64);
            }
        }
        for (&i, &rate) in active.iter().zip(&rates) {
            let work = rate * dt;
            if left[i] <= work {
                done[i] = t + left[i] / rate;
                left[i] = 0.0;
            } else {
                left[i] -= work;
            }
        }
        step += 1;
        t = step as f64 * dt;
    }
    done
}

/// Smallest makespan over every assignment of jobs to PEs, each PE running its
/// jobs back to back.
pub fn exhaustive_min_makespan(lengths: &[f64], pe_mips: &[f64]) -> f64 {
    let n = lengths.len();
    let p = pe_mips.len();
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; n];
    loop {
        let mut busy = vec![0.0; p];
        for (j, &pe) in choice.iter().enumerate() {
            busy[pe] += lengths[j] / pe_mips[pe];
        }
        best = best.min(busy.iter().cloned().fold(0.0, f64::max));
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            choice[k] += 1;
            if choice[k] < p {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// Cheapest and costliest total cost over every assignment of jobs to
/// resources `(n_pes, mips, price)` whose MI fits `n_pes * mips * deadline`.
pub fn exhaustive_cost_bounds(lengths: &[f64], resources: &[(usize, f64, f64)], deadline: f64) -> (f64, f64) {
    let n = lengths.len();
    let r = resources.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut choice = vec![0usize; n];
    'outer: loop {
        let mut used = vec![0.0; r];
        let mut cost = 0.0;
        for (j, &k) in choice.iter().enumerate() {
            used[k] += lengths[j];
            cost += lengths[j] / resources[k].1 * resources[k].2;
        }
        let fits = used
            .iter()
            .zip(resources)
            .all(|(u, &(pes, mips, _))| *u <= pes as f64 * mips * deadline);
        if fits {
            lo = lo.min(cost);
            hi = hi.max(cost);
        }
        let mut k = 0;
        loop {
            if k == n {
                break 'outer;
            }
            choice[k] += 1;
            if choice[k] < r {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
    (lo, hi)
}

/// One resource of `pes` PEs, gridlets `(length, arrival)` submitted directly.
pub fn direct_config(policy: AllocationPolicy, pes: usize, mips: f64, jobs: &[(f64, f64)]) -> ScenarioConfig {
    ScenarioConfig {
        resources: vec![ResourceConfig {
            name: "R".into(),
            n_machines: 1,
            pes_per_machine: pes,
            pe_mips: mips,
            policy,
            price_per_pe_time_unit: 1.0,
            time_zone: 0.0,
            calendar: None,
            baud_rate: None,
            architecture: String::new(),
            os: String::new(),
        }],
        users: vec![UserConfig {
            gridlets: Some(
                jobs.iter()
                    .map(|&(length_mi, submit_time)| GridletConfig {
                        length_mi,
                        submit_time,
                        input_size_bytes: 0,
                        output_size_bytes: 0,
                    })
                    .collect(),
            ),
            submit_to: Some("R".into()),
            ..UserConfig::default()
        }],
        seed: 0,
        default_baud_rate: None,
        net: Default::default(),
        broker: Default::default(),
        standard_pe_mips: None,
        sweep: None,
    }
}

/// The three-gridlet, two-PE scenario: 10, 8.5 and 9.5 MI at t = 0, 4, 7.
pub fn three_gridlet_config(policy: AllocationPolicy) -> ScenarioConfig {
    direct_config(policy, 2, 1.0, &[(10.0, 0.0), (8.5, 4.0), (9.5, 7.0)])
}
