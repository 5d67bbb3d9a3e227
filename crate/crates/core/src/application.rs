//! Jobs (gridlets), task-farming batches and the randomness mapper.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{EntityId, SimTime};

pub type GridletId = u32;

/// MIPS rating of the reference PE job lengths are expressed against.
pub const DEFAULT_STANDARD_PE_MIPS: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridletStatus {
    Created,
    Submitted,
    Queued,
    InExec,
    Success,
    Canceled,
}

/// A job package travelling between brokers and resources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gridlet {
    pub id: GridletId,
    pub length_mi: f64,
    pub input_size_bytes: u64,
    pub output_size_bytes: u64,
    pub owner: Option<EntityId>,
    pub status: GridletStatus,
    pub submission_time: SimTime,
    pub exec_start_time: SimTime,
    pub finish_time: SimTime,
    /// Time spent at the resource, arrival to completion.
    pub wall_clock: SimTime,
    pub processing_cost: f64,
    /// Resource that executed the gridlet.
    pub resource: Option<EntityId>,
}

impl Gridlet {
    pub fn new(id: GridletId, length_mi: f64, input_size_bytes: u64, output_size_bytes: u64) -> Result<Self> {
        if !(length_mi.is_finite() && length_mi > 0.0) {
            return Err(Error::Config(format!(
                "gridlet {id}: length must be positive, got {length_mi}"
            )));
        }
        Ok(Self {
            id,
            length_mi,
            input_size_bytes,
            output_size_bytes,
            owner: None,
            status: GridletStatus::Created,
            submission_time: 0.0,
            exec_start_time: 0.0,
            finish_time: 0.0,
            wall_clock: 0.0,
            processing_cost: 0.0,
            resource: None,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.status == GridletStatus::Success
    }
}

/// Ordered list of gridlets with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridletBatch {
    gridlets: Vec<Gridlet>,
}

impl GridletBatch {
    pub fn new(gridlets: Vec<Gridlet>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(gridlets.len());
        for g in &gridlets {
            if !seen.insert(g.id) {
                return Err(Error::Config(format!("duplicate gridlet id {}", g.id)));
            }
        }
        Ok(Self { gridlets })
    }

    pub fn len(&self) -> usize {
        self.gridlets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gridlets.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gridlet> {
        self.gridlets.iter()
    }

    pub fn as_slice(&self) -> &[Gridlet] {
        &self.gridlets
    }

    pub fn as_mut_slice(&mut self) -> &mut [Gridlet] {
        &mut self.gridlets
    }

    pub fn total_mi(&self) -> f64 {
        self.gridlets.iter().map(|g| g.length_mi).sum()
    }

    pub fn into_vec(self) -> Vec<Gridlet> {
        self.gridlets
    }
}

/// Maps an estimate `d` to a randomised real-world value in
/// `[(1 - f_l) d, (1 + f_m) d)`.
pub fn real_random(d: f64, f_l: f64, f_m: f64, rd: f64) -> Result<f64> {
    check_fraction("f_l", f_l)?;
    check_fraction("f_m", f_m)?;
    if !(0.0..1.0).contains(&rd) {
        return Err(Error::InvalidFactor(format!("rd = {rd} is outside [0, 1)")));
    }
    Ok(d * (1.0 - f_l + (f_l + f_m) * rd))
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidFactor(format!("{name} = {v} is outside [0, 1]")))
    }
}

/// Seeded source of uniform draws plus a per-situation `(f_l, f_m)` table.
///
/// The generator is ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`), and
/// draws are `Rng::gen::<f64>()`, uniform on `[0, 1)`. Traces depend on this
/// choice, so changing it changes every synthesized workload.
#[derive(Clone, Debug)]
pub struct RandomMapper {
    seed: u64,
    rng: ChaCha8Rng,
    factors: HashMap<String, (f64, f64)>,
}

impl RandomMapper {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            factors: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_factors(&mut self, situation: impl Into<String>, f_l: f64, f_m: f64) -> Result<()> {
        check_fraction("f_l", f_l)?;
        check_fraction("f_m", f_m)?;
        self.factors.insert(situation.into(), (f_l, f_m));
        Ok(())
    }

    pub fn factors(&self, situation: &str) -> Option<(f64, f64)> {
        self.factors.get(situation).copied()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn real(&mut self, d: f64, f_l: f64, f_m: f64) -> Result<f64> {
        let rd = self.uniform();
        real_random(d, f_l, f_m, rd)
    }

    /// Like [`RandomMapper::real`] with the factors registered for `situation`.
    /// Unknown situations map `d` to itself without consuming a draw.
    pub fn real_for(&mut self, situation: &str, d: f64) -> Result<f64> {
        match self.factors(situation) {
            Some((f_l, f_m)) => self.real(d, f_l, f_m),
            None => Ok(d),
        }
    }
}

/// Reference PE rating used to convert time-based job sizes to MI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardPe {
    rating: f64,
}

impl Default for StandardPe {
    fn default() -> Self {
        Self {
            rating: DEFAULT_STANDARD_PE_MIPS,
        }
    }
}

impl StandardPe {
    pub fn new(rating: f64) -> Result<Self> {
        if rating.is_finite() && rating > 0.0 {
            Ok(Self { rating })
        } else {
            Err(Error::InvalidRating(rating))
        }
    }

    pub fn rating(&self) -> f64 {
        self.rating
    }
}

/// Parameters of a synthetic task-farming application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_gridlets: usize,
    /// Job runtime on the standard PE.
    pub base_time_units: f64,
    /// Upward variation fraction applied to each job length.
    pub variation: f64,
    #[serde(default)]
    pub input_size_bytes: u64,
    #[serde(default)]
    pub output_size_bytes: u64,
}

/// Builds `n` gridlets of `real_random(base * standard, 0, variation, rd_i)` MI.
pub fn synth_workload(spec: &WorkloadSpec, standard: StandardPe, seed: u64) -> Result<GridletBatch> {
    if spec.n_gridlets == 0 {
        return Err(Error::Config("workload needs at least one gridlet".into()));
    }
    check_fraction("variation", spec.variation)?;
    let nominal = spec.base_time_units * standard.rating();
    let mut mapper = RandomMapper::new(seed);
    let gridlets = (0..spec.n_gridlets)
        .map(|i| {
            let length = mapper.real(nominal, 0.0, spec.variation)?;
            Gridlet::new(i as GridletId, length, spec.input_size_bytes, spec.output_size_bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    GridletBatch::new(gridlets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn real_random_examples() {
        assert_eq!(real_random(100.0, 0.2, 0.3, 0.0).unwrap(), 80.0);
        assert!((real_random(100.0, 0.0, 0.1, 0.5).unwrap() - 105.0).abs() < 1e-12);
        assert_eq!(real_random(100.0, 0.0, 0.0, 0.73).unwrap(), 100.0);
        assert!(matches!(real_random(1.0, 1.5, 0.0, 0.1), Err(Error::InvalidFactor(_))));
        assert!(matches!(real_random(1.0, 0.0, -0.1, 0.1), Err(Error::InvalidFactor(_))));
        assert!(matches!(real_random(1.0, 0.0, 0.0, 1.0), Err(Error::InvalidFactor(_))));
    }

    #[test]
    fn real_random_bounds_hold_for_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let d = rng.gen_range(0.0..1e6);
            let f_l = rng.gen::<f64>();
            let f_m = rng.gen::<f64>();
            let rd = rng.gen::<f64>();
            let v = real_random(d, f_l, f_m, rd).unwrap();
            let lo = (1.0 - f_l) * d;
            let hi = (1.0 + f_m) * d;
            assert!(v >= lo - 1e-9 * d.max(1.0), "{v} < {lo}");
            assert!(v <= hi + 1e-9 * d.max(1.0), "{v} > {hi}");
        }
    }

    #[test]
    fn standard_pe_rating() {
        assert_eq!(StandardPe::default().rating(), 100.0);
        assert_eq!(StandardPe::new(500.0).unwrap().rating(), 500.0);
        assert!(matches!(StandardPe::new(0.0), Err(Error::InvalidRating(_))));
    }

    fn spec(n: usize, variation: f64) -> WorkloadSpec {
        WorkloadSpec {
            n_gridlets: n,
            base_time_units: 100.0,
            variation,
            input_size_bytes: 0,
            output_size_bytes: 0,
        }
    }

    #[test]
    fn task_farm_lengths_stay_in_range() {
        let batch = synth_workload(&spec(200, 0.1), StandardPe::default(), 42).unwrap();
        assert_eq!(batch.len(), 200);
        for g in batch.iter() {
            assert!(g.length_mi >= 10_000.0 && g.length_mi < 11_000.0, "{}", g.length_mi);
        }
    }

    #[test]
    fn zero_variation_gives_nominal_lengths() {
        let batch = synth_workload(&spec(10, 0.0), StandardPe::default(), 1).unwrap();
        assert!(batch.iter().all(|g| g.length_mi == 10_000.0));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let g = Gridlet::new(1, 5.0, 0, 0).unwrap();
        assert!(GridletBatch::new(vec![g.clone(), g]).is_err());
    }

    #[test]
    fn situation_table_defaults_to_identity() {
        let mut m = RandomMapper::new(3);
        assert_eq!(m.real_for("io", 50.0).unwrap(), 50.0);
        m.set_factors("io", 0.5, 0.5).unwrap();
        let v = m.real_for("io", 50.0).unwrap();
        assert!((25.0..75.0).contains(&v));
        assert!(m.set_factors("bad", 2.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn workload_is_a_pure_function_of_its_inputs(seed in any::<u64>(), n in 1usize..50, var in 0.0f64..=1.0) {
            let a = synth_workload(&spec(n, var), StandardPe::default(), seed).unwrap();
            let b = synth_workload(&spec(n, var), StandardPe::default(), seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
