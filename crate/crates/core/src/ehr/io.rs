//! Cohort file formats.
//!
//! Cohort: JSON-Lines. Line 1 is a header object naming the three
//! vocabularies; every following line is one patient:
//!
//! ```text
//! {"diseases":["d0",...],"procedures":[...],"medications":[...]}
//! {"patient_id":"p1","visits":[{"d":["d0"],"p":[],"m":["m2"]}, ...]}
//! ```
//!
//! Interactions: CSV with one `med_a,med_b` code pair per row.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    DdiMatrix, EntityKind, EntityVocab, PatientCohort, PatientHistory, Visit,
};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    diseases: Vec<String>,
    procedures: Vec<String>,
    medications: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VisitLine {
    d: Vec<String>,
    p: Vec<String>,
    m: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PatientLine {
    patient_id: String,
    visits: Vec<VisitLine>,
}

/// Loads a cohort. The interaction table is zero-filled; pair it with
/// [`load_ddi_csv`] when an interaction file is available.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<PatientCohort> {
    let path = path.as_ref();
    let file = fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open cohort file {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected header line"))?;
    let header: HeaderLine = serde_json::from_str(&first?)
        .map_err(|e| Error::parse(1, format!("bad header: {e}")))?;

    let diseases = EntityVocab::new(EntityKind::Disease, &header.diseases)?;
    let procedures = EntityVocab::new(EntityKind::Procedure, &header.procedures)?;
    let medications = EntityVocab::new(EntityKind::Medication, &header.medications)?;

    let mut patients = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(line_no, format!("bad patient record: {e}")))?;
        let mut visits = Vec::with_capacity(record.visits.len());
        for v in &record.visits {
            let resolve = |vocab: &EntityVocab, codes: &[String]| -> Result<BTreeSet<usize>> {
                codes.iter().map(|c| vocab.require(c)).collect()
            };
            visits.push(Visit {
                diseases: resolve(&diseases, &v.d).map_err(at_line(line_no))?,
                procedures: resolve(&procedures, &v.p).map_err(at_line(line_no))?,
                medications: resolve(&medications, &v.m).map_err(at_line(line_no))?,
            });
        }
        patients.push(PatientHistory { id: record.patient_id, visits });
    }

    let ddi = DdiMatrix::zeros(medications.len());
    PatientCohort::new(diseases, procedures, medications, ddi, patients)
}

fn at_line(line: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Validation(msg) => Error::parse(line, msg),
        other => other,
    }
}

pub fn save_cohort(cohort: &PatientCohort, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    let header = HeaderLine {
        diseases: cohort.diseases.codes().to_vec(),
        procedures: cohort.procedures.codes().to_vec(),
        medications: cohort.medications.codes().to_vec(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for patient in &cohort.patients {
        let codes = |vocab: &EntityVocab, set: &BTreeSet<usize>| -> Vec<String> {
            set.iter().map(|&i| vocab.code(i).to_string()).collect()
        };
        let record = PatientLine {
            patient_id: patient.id.clone(),
            visits: patient
                .visits
                .iter()
                .map(|v| VisitLine {
                    d: codes(&cohort.diseases, &v.diseases),
                    p: codes(&cohort.procedures, &v.procedures),
                    m: codes(&cohort.medications, &v.medications),
                })
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads `med_a,med_b` rows against a medication vocabulary.
pub fn load_ddi_csv(path: impl AsRef<Path>, medications: &EntityVocab) -> Result<DdiMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot open interaction file {}: {e}", path.display()))
    })?;
    let mut ddi = DdiMatrix::zeros(medications.len());
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(Error::parse(
                    line_no,
                    format!("expected two comma-separated medication codes, got {line:?}"),
                ))
            }
        };
        let a = medications.require(a).map_err(at_line(line_no))?;
        let b = medications.require(b).map_err(at_line(line_no))?;
        ddi.mark(a, b).map_err(at_line(line_no))?;
    }
    Ok(ddi)
}

pub fn save_ddi_csv(
    ddi: &DdiMatrix,
    medications: &EntityVocab,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::new();
    for (a, b) in ddi.pairs() {
        let code_a = medications.code(a);
        let code_b = medications.code(b);
        for code in [code_a, code_b] {
            if code.contains(',') || code.contains('"') || code.contains('\n') {
                return Err(Error::Validation(format!(
                    "medication code {code:?} cannot be written to CSV"
                )));
            }
        }
        out.push_str(code_a);
        out.push(',');
        out.push_str(code_b);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::tests::tiny_cohort;

    #[test]
    fn cohort_save_load_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        let cohort = tiny_cohort();
        save_cohort(&cohort, &path).unwrap();
        let loaded = load_cohort(&path).unwrap();
        assert_eq!(loaded.patients.len(), cohort.patients.len());
        assert_eq!(loaded.patients[0].visits, cohort.patients[0].visits);
        assert_eq!(loaded.medications.codes(), cohort.medications.codes());

        let again = dir.path().join("again.jsonl");
        save_cohort(&loaded, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"diseases\":[\"d0\"],\"procedures\":[],\"medications\":[]}\nnot json\n",
        )
        .unwrap();
        let err = load_cohort(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_visit_code_is_named_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"diseases\":[\"d0\"],\"procedures\":[],\"medications\":[\"m0\"]}\n",
                "{\"patient_id\":\"x\",\"visits\":[{\"d\":[\"dX\"],\"p\":[],\"m\":[]}]}\n",
            ),
        )
        .unwrap();
        let err = load_cohort(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("\"dX\""), "{msg}");
    }

    #[test]
    fn missing_cohort_file_is_a_config_error() {
        assert!(load_cohort("/nonexistent/cohort.jsonl").unwrap_err().is_config());
    }

    #[test]
    fn ddi_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ddi.csv");
        let cohort = tiny_cohort();
        save_ddi_csv(&cohort.ddi, &cohort.medications, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "m0,m1\n");
        let loaded = load_ddi_csv(&path, &cohort.medications).unwrap();
        assert_eq!(loaded, cohort.ddi);
    }

    #[test]
    fn ddi_csv_rejects_unknown_codes_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = tiny_cohort();
        let path = dir.path().join("ddi.csv");
        fs::write(&path, "m0,zzz\n").unwrap();
        let err = load_ddi_csv(&path, &cohort.medications).unwrap_err();
        assert!(err.to_string().contains("\"zzz\""));

        fs::write(&path, "m0\n").unwrap();
        assert!(load_ddi_csv(&path, &cohort.medications).is_err());

        fs::write(&path, "m0,m0\n").unwrap();
        assert!(load_ddi_csv(&path, &cohort.medications).is_err());
    }
}
