//! Cohort data model: entity vocabularies, per-patient visit sequences,
//! drug-drug interaction table, multi-hot encoding, splits and bootstrap
//! resampling, and the JSON-Lines / CSV file formats.

mod ddi;
mod io;
mod split;
mod visit;
mod vocab;

pub use ddi::DdiMatrix;
pub use io::{load_cohort, load_ddi_csv, save_cohort, save_ddi_csv};
pub use split::{bootstrap_sample, split_cohort, CohortSplits, SplitRatios};
pub use visit::{decode_multi_hot, encode_visit, MultiHot, PatientHistory, Visit};
pub use vocab::{EntityKind, EntityVocab};

use crate::{Error, Result};

/// Sizes of the three entity vocabularies plus the unified variable
/// indexing used by discovery and effect estimation: diseases first,
/// then procedures, then medications.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntitySpace {
    pub n_diseases: usize,
    pub n_procedures: usize,
    pub n_medications: usize,
}

impl EntitySpace {
    pub fn total(&self) -> usize {
        self.n_diseases + self.n_procedures + self.n_medications
    }

    pub fn disease_var(&self, ordinal: usize) -> usize {
        debug_assert!(ordinal < self.n_diseases);
        ordinal
    }

    pub fn procedure_var(&self, ordinal: usize) -> usize {
        debug_assert!(ordinal < self.n_procedures);
        self.n_diseases + ordinal
    }

    pub fn medication_var(&self, ordinal: usize) -> usize {
        debug_assert!(ordinal < self.n_medications);
        self.n_diseases + self.n_procedures + ordinal
    }

    /// Maps a unified variable index back to (kind, within-kind ordinal).
    pub fn kind_of(&self, var: usize) -> (EntityKind, usize) {
        if var < self.n_diseases {
            (EntityKind::Disease, var)
        } else if var < self.n_diseases + self.n_procedures {
            (EntityKind::Procedure, var - self.n_diseases)
        } else {
            debug_assert!(var < self.total());
            (EntityKind::Medication, var - self.n_diseases - self.n_procedures)
        }
    }
}

/// A cohort: three vocabularies, an interaction table over the medication
/// vocabulary, and per-patient visit sequences with entities stored as
/// within-kind ordinals.
#[derive(Debug, Clone)]
pub struct PatientCohort {
    pub diseases: EntityVocab,
    pub procedures: EntityVocab,
    pub medications: EntityVocab,
    pub ddi: DdiMatrix,
    pub patients: Vec<PatientHistory>,
}

impl PatientCohort {
    pub fn new(
        diseases: EntityVocab,
        procedures: EntityVocab,
        medications: EntityVocab,
        ddi: DdiMatrix,
        patients: Vec<PatientHistory>,
    ) -> Result<Self> {
        let cohort = PatientCohort { diseases, procedures, medications, ddi, patients };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn space(&self) -> EntitySpace {
        EntitySpace {
            n_diseases: self.diseases.len(),
            n_procedures: self.procedures.len(),
            n_medications: self.medications.len(),
        }
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    pub fn visits(&self) -> impl Iterator<Item = &Visit> {
        self.patients.iter().flat_map(|p| p.visits.iter())
    }

    /// Replaces the interaction table, checking vocabulary agreement.
    pub fn with_ddi(mut self, ddi: DdiMatrix) -> Result<Self> {
        if ddi.len() != self.medications.len() {
            return Err(Error::Validation(format!(
                "interaction table covers {} medications, vocabulary has {}",
                ddi.len(),
                self.medications.len()
            )));
        }
        self.ddi = ddi;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.ddi.len() != self.medications.len() {
            return Err(Error::Validation(
                "interaction table size does not match medication vocabulary".into(),
            ));
        }
        let space = self.space();
        let mut seen_ids = std::collections::HashSet::new();
        for patient in &self.patients {
            if !seen_ids.insert(patient.id.as_str()) {
                return Err(Error::Validation(format!("duplicate patient id {:?}", patient.id)));
            }
            if patient.visits.is_empty() {
                return Err(Error::Validation(format!("patient {:?} has no visits", patient.id)));
            }
            for (t, visit) in patient.visits.iter().enumerate() {
                visit.validate(&space).map_err(|e| {
                    Error::Validation(format!("patient {:?} visit {t}: {e}", patient.id))
                })?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    pub(crate) fn tiny_cohort() -> PatientCohort {
        let diseases = EntityVocab::new(EntityKind::Disease, &["d0", "d1"]).unwrap();
        let procedures = EntityVocab::new(EntityKind::Procedure, &["p0"]).unwrap();
        let medications = EntityVocab::new(EntityKind::Medication, &["m0", "m1", "m2"]).unwrap();
        let ddi = DdiMatrix::from_pairs(3, &[(0, 1)]).unwrap();
        let patients = vec![
            PatientHistory {
                id: "a".into(),
                visits: vec![
                    Visit { diseases: set(&[0]), procedures: set(&[0]), medications: set(&[0, 2]) },
                    Visit { diseases: set(&[0, 1]), procedures: set(&[]), medications: set(&[1]) },
                ],
            },
            PatientHistory {
                id: "b".into(),
                visits: vec![Visit {
                    diseases: set(&[1]),
                    procedures: set(&[]),
                    medications: set(&[]),
                }],
            },
        ];
        PatientCohort::new(diseases, procedures, medications, ddi, patients).unwrap()
    }

    #[test]
    fn unified_indexing_round_trips() {
        let space = EntitySpace { n_diseases: 3, n_procedures: 2, n_medications: 4 };
        assert_eq!(space.total(), 9);
        assert_eq!(space.disease_var(2), 2);
        assert_eq!(space.procedure_var(0), 3);
        assert_eq!(space.medication_var(3), 8);
        for var in 0..space.total() {
            let (kind, ord) = space.kind_of(var);
            let back = match kind {
                EntityKind::Disease => space.disease_var(ord),
                EntityKind::Procedure => space.procedure_var(ord),
                EntityKind::Medication => space.medication_var(ord),
            };
            assert_eq!(back, var);
        }
    }

    #[test]
    fn rejects_duplicate_patient_ids() {
        let mut cohort = tiny_cohort();
        let mut dup = cohort.patients[0].clone();
        dup.visits.truncate(1);
        cohort.patients.push(dup);
        let err = cohort.validate().unwrap_err();
        assert!(err.to_string().contains("duplicate patient id"));
    }

    #[test]
    fn rejects_visit_with_no_diseases_and_no_procedures() {
        let mut cohort = tiny_cohort();
        cohort.patients[0].visits[0].diseases.clear();
        cohort.patients[0].visits[0].procedures.clear();
        let err = cohort.validate().unwrap_err();
        assert!(err.to_string().contains("no diseases and no procedures"));
    }

    #[test]
    fn rejects_out_of_range_ordinals() {
        let mut cohort = tiny_cohort();
        cohort.patients[1].visits[0].medications.insert(99);
        assert!(cohort.validate().is_err());
    }
}
