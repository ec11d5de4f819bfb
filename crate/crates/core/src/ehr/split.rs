use rand::seq::SliceRandom;
use rand::Rng;

use super::PatientCohort;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 4.0 / 6.0, validation: 1.0 / 6.0, test: 1.0 / 6.0 }
    }
}

#[derive(Debug, Clone)]
pub struct CohortSplits {
    pub train: PatientCohort,
    pub validation: PatientCohort,
    pub test: PatientCohort,
}

/// Patient-level split. Patients are shuffled by `seed`, then counts are
/// assigned by flooring the validation and test ratios; the remainder goes
/// to train, so train is never starved by rounding.
pub fn split_cohort(
    cohort: &PatientCohort,
    ratios: SplitRatios,
    seed: u64,
) -> Result<CohortSplits> {
    let sum = ratios.train + ratios.validation + ratios.test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
    }
    if ratios.train < 0.0 || ratios.validation < 0.0 || ratios.test < 0.0 {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let n = cohort.patients.len();
    if n < 3 {
        return Err(Error::Config(format!("cohort has {n} patients, need at least 3 to split")));
    }

    let n_val = (n as f64 * ratios.validation).floor() as usize;
    let n_test = (n as f64 * ratios.test).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "split"));

    let take = |idx: &[usize]| -> PatientCohort {
        PatientCohort {
            diseases: cohort.diseases.clone(),
            procedures: cohort.procedures.clone(),
            medications: cohort.medications.clone(),
            ddi: cohort.ddi.clone(),
            patients: idx.iter().map(|&i| cohort.patients[i].clone()).collect(),
        }
    };

    Ok(CohortSplits {
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// Patient-level bootstrap: each round draws `ceil(fraction * n)` patient
/// indices with replacement. Returns index lists rather than cohort copies.
pub fn bootstrap_sample(
    cohort: &PatientCohort,
    rounds: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = cohort.patients.len();
    if n == 0 {
        return Err(Error::Config("cannot bootstrap an empty cohort".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("bootstrap fraction {fraction} outside (0, 1]")));
    }
    let per_round = (fraction * n as f64).ceil() as usize;
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let mut rng = stream(seed, &format!("bootstrap/{round}"));
        out.push((0..per_round).map(|_| rng.gen_range(0..n)).collect());
    }
    Ok(out)
}
