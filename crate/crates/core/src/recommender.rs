//! Longitudinal recommendation: a gated recurrent unit folds the visit
//! vectors into a patient state, a two-layer scoring head squashes it to
//! per-medication probabilities, and a threshold picks the set.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::autodiff::{NodeId, Tape};
use crate::discovery::{induce_visit_graphs, CausalGraph};
use crate::ehr::{EntitySpace, EntityVocab, PatientHistory};
use crate::encoder::{encode_visit_state, DsaMode, EdgeTyping, EncodeContext};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParameters, ParameterLeaves};

/// One recurrent update: update and reset gates squash affine maps of the
/// input and carried state, the candidate passes through a hyperbolic
/// tangent, and the new state is their gate-weighted convex combination.
/// The initial state is the zero vector.
pub fn gru_step(
    tape: &mut Tape,
    leaves: &ParameterLeaves,
    dims: &ModelDims,
    input: NodeId,
    state: NodeId,
) -> Result<NodeId> {
    if tape.rows(input) != 3 * dims.dim || tape.rows(state) != dims.dim_h {
        return Err(Error::Usage(format!(
            "recurrent step on input {} / state {}, expected {} / {}",
            tape.rows(input),
            tape.rows(state),
            3 * dims.dim,
            dims.dim_h
        )));
    }
    let gate = |tape: &mut Tape, w: NodeId, u: NodeId, b: NodeId, h: NodeId| {
        let wx = tape.matvec(w, input);
        let uh = tape.matvec(u, h);
        let sum = tape.add(wx, uh);
        tape.add(sum, b)
    };
    let z_pre = gate(tape, leaves.gru_wz, leaves.gru_uz, leaves.gru_bz, state);
    let z = tape.sigmoid_node(z_pre);
    let r_pre = gate(tape, leaves.gru_wr, leaves.gru_ur, leaves.gru_br, state);
    let r = tape.sigmoid_node(r_pre);
    let masked = tape.mul(r, state);
    let n_pre = gate(tape, leaves.gru_wn, leaves.gru_un, leaves.gru_bn, masked);
    let n = tape.tanh(n_pre);
    let keep = tape.mul(z, state);
    let z_flip = tape.one_minus(z);
    let blend = tape.mul(z_flip, n);
    Ok(tape.add(keep, blend))
}

/// Scoring head: hidden rectified layer then per-medication squashing, so
/// every score lies strictly in (0, 1).
pub fn score_medications(
    tape: &mut Tape,
    leaves: &ParameterLeaves,
    dims: &ModelDims,
    state: NodeId,
) -> Result<NodeId> {
    if tape.rows(state) != dims.dim_h {
        return Err(Error::Usage(format!(
            "scoring a state of {} entries, expected {}",
            tape.rows(state),
            dims.dim_h
        )));
    }
    let pre = tape.matvec(leaves.head_w1, state);
    let pre = tape.add(pre, leaves.head_b1);
    let hidden = tape.relu(pre);
    let out = tape.matvec(leaves.head_w2, hidden);
    let out = tape.add(out, leaves.head_b2);
    Ok(tape.sigmoid_node(out))
}

/// Medications whose score reaches the threshold.
pub fn threshold_select(scores: &[f64], threshold: f64) -> BTreeSet<usize> {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Read-only inputs shared by every prediction: the learned structure for
/// role induction and the relation typing for the graph convolution.
pub struct RecommendArtifacts<'a> {
    pub graph: &'a CausalGraph,
    pub space: &'a EntitySpace,
    pub typing: &'a EdgeTyping,
    pub dsa_mode: DsaMode,
}

pub struct RecommendOptions {
    pub threshold: f64,
    /// Feed the model's own previous selections instead of the recorded
    /// medication history.
    pub autoregressive: bool,
}

impl Default for RecommendOptions {
    fn default() -> Self {
        RecommendOptions { threshold: 0.5, autoregressive: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitPrediction {
    pub scores: Vec<f64>,
    pub selected: BTreeSet<usize>,
}

/// Scores every visit of one patient in sequence. The medication history
/// fed to visit t is the recorded set of visit t-1 (teacher forcing) or
/// the model's own previous selection when `autoregressive`; the first
/// visit always sees an empty history.
pub fn recommend(
    params: &ModelParameters,
    artifacts: &RecommendArtifacts,
    history: &PatientHistory,
    options: &RecommendOptions,
) -> Result<Vec<VisitPrediction>> {
    if !(options.threshold > 0.0 && options.threshold < 1.0) {
        return Err(Error::Usage(format!(
            "selection threshold {} outside (0, 1)",
            options.threshold
        )));
    }
    let dims = &params.dims;
    if dims.n_diseases != artifacts.space.n_diseases
        || dims.n_procedures != artifacts.space.n_procedures
        || dims.n_medications != artifacts.space.n_medications
    {
        return Err(Error::Usage("model and entity space disagree on vocabulary sizes".into()));
    }
    let mut tape = Tape::new();
    let leaves = ParameterLeaves::load(&mut tape, params);
    let mut state = tape.zeros(dims.dim_h);
    let mut prev: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::with_capacity(history.visits.len());
    for visit in &history.visits {
        let graphs = induce_visit_graphs(
            artifacts.graph,
            artifacts.space,
            &visit.diseases,
            &visit.procedures,
            &prev,
        );
        let ctx = EncodeContext {
            diseases: &visit.diseases,
            procedures: &visit.procedures,
            prev_medications: &prev,
            graphs: &graphs,
            typing: artifacts.typing,
            dsa_mode: artifacts.dsa_mode,
            dropout: None,
        };
        let enc = encode_visit_state(&mut tape, &leaves, dims, &ctx, None)?;
        state = gru_step(&mut tape, &leaves, dims, enc.h_v, state)?;
        let scored = score_medications(&mut tape, &leaves, dims, state)?;
        let scores = tape.value(scored).to_vec();
        let selected = threshold_select(&scores, options.threshold);
        prev = if options.autoregressive { selected.clone() } else { visit.medications.clone() };
        out.push(VisitPrediction { scores, selected });
    }
    Ok(out)
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    patient: &'a str,
    visit: usize,
    scores: &'a [f64],
    selected: Vec<&'a str>,
    actual: Vec<&'a str>,
}

/// One JSON line per visit: patient id, visit index, raw scores, selected
/// and recorded medication codes.
pub fn predictions_to_jsonl(
    patient: &PatientHistory,
    predictions: &[VisitPrediction],
    medications: &EntityVocab,
) -> Result<String> {
    if patient.visits.len() != predictions.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} visits",
            predictions.len(),
            patient.visits.len()
        )));
    }
    let mut lines = String::new();
    for (t, (visit, prediction)) in patient.visits.iter().zip(predictions).enumerate() {
        let codes = |set: &BTreeSet<usize>| -> Vec<&str> {
            set.iter().map(|&m| medications.code(m)).collect()
        };
        let record = PredictionRecord {
            patient: &patient.id,
            visit: t,
            scores: &prediction.scores,
            selected: codes(&prediction.selected),
            actual: codes(&visit.medications),
        };
        lines.push_str(&serde_json::to_string(&record).map_err(|e| {
            Error::Validation(format!("prediction record serialization: {e}"))
        })?);
        lines.push('\n');
    }
    Ok(lines)
}
