use std::collections::BTreeSet;

use super::EntitySpace;
use crate::{Error, Result};

/// One hospital visit: sets of within-kind entity ordinals. Sets are
/// ordered so that downstream iteration (encoding, file output) is
/// independent of input ordering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Visit {
    pub diseases: BTreeSet<usize>,
    pub procedures: BTreeSet<usize>,
    pub medications: BTreeSet<usize>,
}

impl Visit {
    pub(super) fn validate(&self, space: &EntitySpace) -> Result<()> {
        if self.diseases.is_empty() && self.procedures.is_empty() {
            return Err(Error::Validation("no diseases and no procedures".into()));
        }
        let check = |set: &BTreeSet<usize>, limit: usize, what: &str| -> Result<()> {
            if let Some(&max) = set.iter().next_back() {
                if max >= limit {
                    return Err(Error::Validation(format!(
                        "{what} ordinal {max} out of range (vocabulary size {limit})"
                    )));
                }
            }
            Ok(())
        };
        check(&self.diseases, space.n_diseases, "disease")?;
        check(&self.procedures, space.n_procedures, "procedure")?;
        check(&self.medications, space.n_medications, "medication")?;
        Ok(())
    }
}

/// Ordered visit sequence for one patient.
#[derive(Debug, Clone)]
pub struct PatientHistory {
    pub id: String,
    pub visits: Vec<Visit>,
}

/// Multi-hot encoding of a visit over the three vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHot {
    pub diseases: Vec<u8>,
    pub procedures: Vec<u8>,
    pub medications: Vec<u8>,
}

pub fn encode_visit(visit: &Visit, space: &EntitySpace) -> MultiHot {
    let hot = |set: &BTreeSet<usize>, len: usize| {
        let mut v = vec![0u8; len];
        for &i in set {
            v[i] = 1;
        }
        v
    };
    MultiHot {
        diseases: hot(&visit.diseases, space.n_diseases),
        procedures: hot(&visit.procedures, space.n_procedures),
        medications: hot(&visit.medications, space.n_medications),
    }
}

pub fn decode_multi_hot(hot: &MultiHot) -> Visit {
    let back = |v: &[u8]| v.iter().enumerate().filter(|(_, &x)| x != 0).map(|(i, _)| i).collect();
    Visit {
        diseases: back(&hot.diseases),
        procedures: back(&hot.procedures),
        medications: back(&hot.medications),
    }
}
