//! Losses, the interaction-controlled loss combination, adaptive-moment
//! optimization with decoupled weight decay, the training loop, and
//! bootstrap evaluation metrics.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::discovery::{induce_visit_graphs, CausalGraph};
use crate::effects::{EdgeTypeMap, EffectMatrix};
use crate::ehr::{
    bootstrap_sample, encode_visit, CohortSplits, DdiMatrix, EntitySpace, PatientCohort,
    PatientHistory, Visit,
};
use crate::encoder::{encode_visit_state, DsaMode, EdgeTyping, EncodeContext};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParameters, ParameterLeaves};
use crate::recommender::{
    gru_step, recommend, score_medications, threshold_select, RecommendArtifacts,
    RecommendOptions, VisitPrediction,
};
use crate::rng::stream;

const SCORE_CLAMP: f64 = 1e-7;

/// Hyperparameters of the combined objective and the optimizer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Mix between cross-entropy and margin terms.
    pub beta: f64,
    /// Accepted interaction rate; below it the safety term is off.
    pub gamma: f64,
    /// Width of the ramp from task-only to safety-only loss.
    pub kp: f64,
    /// Selection threshold for predictions.
    pub threshold: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Visits per optimizer step; the interaction rate steering the mix is
    /// pooled over the batch.
    pub batch_visits: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.95,
            gamma: 0.06,
            kp: 0.05,
            threshold: 0.5,
            learning_rate: 5e-4,
            weight_decay: 0.005,
            dropout: 0.5,
            epochs: 30,
            batch_visits: 1,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("kp", self.kp),
            ("threshold", self.threshold),
            ("dropout", self.dropout),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1)")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_visits == 0 {
            return Err(Error::Config("batch size must be at least 1 visit".into()));
        }
        Ok(())
    }
}

/// Summed binary cross-entropy with scores clamped away from 0 and 1.
pub fn loss_bce(scores: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(scores.len(), targets.len());
    let mut total = 0.0;
    for (&s, &t) in scores.iter().zip(targets) {
        let s = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        total -= t * s.ln() + (1.0 - t) * (1.0 - s).ln();
    }
    total
}

/// Pairwise hinge between every (positive, negative) pair, divided by the
/// vocabulary size.
pub fn loss_multi(scores: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(scores.len(), targets.len());
    let mut total = 0.0;
    for (i, &ti) in targets.iter().enumerate() {
        if ti < 0.5 {
            continue;
        }
        for (j, &tj) in targets.iter().enumerate() {
            if tj < 0.5 {
                total += (1.0 - (scores[i] - scores[j])).max(0.0);
            }
        }
    }
    total / scores.len() as f64
}

/// Interaction penalty on raw scores: both orderings of every interacting
/// pair contribute.
pub fn loss_ddi(scores: &[f64], ddi: &DdiMatrix) -> f64 {
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if ddi.interacts(i, j) {
                total += si * sj;
            }
        }
    }
    total
}

/// Mixing weight: 1 while the measured interaction rate is acceptable,
/// then a linear ramp down to 0 over `kp`.
pub fn alpha(ddi_rate: f64, config: &LossConfig) -> f64 {
    if ddi_rate <= config.gamma {
        1.0
    } else {
        (1.0 - (ddi_rate - config.gamma) / config.kp).max(0.0)
    }
}

/// Full objective: alpha · (beta·bce + (1−beta)·multi) + (1−alpha)·ddi.
pub fn combine_loss(bce: f64, multi: f64, ddi: f64, ddi_rate: f64, config: &LossConfig) -> f64 {
    let a = alpha(ddi_rate, config);
    a * (config.beta * bce + (1.0 - config.beta) * multi) + (1.0 - a) * ddi
}

/// Batch-level mixing weight from pooled thresholded selections.
pub fn pooled_alpha(selections: &[BTreeSet<usize>], ddi: &DdiMatrix, config: &LossConfig) -> f64 {
    alpha(metric_ddi_rate(selections, ddi), config)
}

pub fn metric_jaccard(predicted: &BTreeSet<usize>, actual: &BTreeSet<usize>) -> f64 {
    if predicted.is_empty() && actual.is_empty() {
        return 1.0;
    }
    let intersection = predicted.intersection(actual).count() as f64;
    let union = predicted.union(actual).count() as f64;
    intersection / union
}

pub fn metric_f1(predicted: &BTreeSet<usize>, actual: &BTreeSet<usize>) -> f64 {
    if predicted.is_empty() && actual.is_empty() {
        return 1.0;
    }
    let hits = predicted.intersection(actual).count() as f64;
    if predicted.is_empty() || actual.is_empty() || hits == 0.0 {
        return 0.0;
    }
    let precision = hits / predicted.len() as f64;
    let recall = hits / actual.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Pooled rate: interacting unordered pairs over all unordered pairs,
/// summed across visits before dividing. No pairs anywhere → 0.
pub fn metric_ddi_rate(predictions: &[BTreeSet<usize>], ddi: &DdiMatrix) -> f64 {
    let mut pairs = 0u64;
    let mut interacting = 0u64;
    for set in predictions {
        let items: Vec<usize> = set.iter().copied().collect();
        for (k, &a) in items.iter().enumerate() {
            for &b in &items[k + 1..] {
                pairs += 1;
                if ddi.interacts(a, b) {
                    interacting += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        interacting as f64 / pairs as f64
    }
}

/// Average precision over a descending-score ranking (ties broken by
/// ordinal): mean of precision-at-rank over the positive positions.
/// `None` when the visit has no positive labels.
pub fn metric_prauc(scores: &[f64], actual: &[u8]) -> Option<f64> {
    debug_assert_eq!(scores.len(), actual.len());
    let positives = actual.iter().filter(|&&t| t != 0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if actual[i] != 0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

pub fn metric_avg_med(predictions: &[BTreeSet<usize>]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().map(|s| s.len() as f64).sum::<f64>() / predictions.len() as f64
}

/// Model variants: the full model, three ablations, and the non-causal
/// co-occurrence baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "full")]
    Full,
    /// Effect typing replaced by one co-occurrence presence relation.
    #[serde(rename = "wo_T")]
    WoT,
    /// Role attention weights all forced to 1.
    #[serde(rename = "wo_P")]
    WoP,
    #[serde(rename = "wo_TP")]
    WoTP,
    /// Co-occurrence rates in place of causal effects, attention removed.
    #[serde(rename = "cooccurrence")]
    Cooccurrence,
}

impl Mode {
    pub const ALL: [Mode; 5] =
        [Mode::Full, Mode::WoT, Mode::WoP, Mode::WoTP, Mode::Cooccurrence];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::WoT => "wo_T",
            Mode::WoP => "wo_P",
            Mode::WoTP => "wo_TP",
            Mode::Cooccurrence => "cooccurrence",
        }
    }

    pub fn dsa_mode(self) -> DsaMode {
        match self {
            Mode::Full | Mode::WoT => DsaMode::Learned,
            Mode::WoP | Mode::WoTP => DsaMode::ForcedOne,
            Mode::Cooccurrence => DsaMode::Removed,
        }
    }

    pub fn edge_typing(self, artifacts: &ModelArtifacts) -> EdgeTyping {
        match self {
            Mode::Full | Mode::WoP => EdgeTyping::from_bins(&artifacts.effect_bins),
            Mode::WoT | Mode::WoTP => EdgeTyping::presence(&artifacts.coocc_rates),
            Mode::Cooccurrence => EdgeTyping::from_bins(&artifacts.coocc_bins),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}', expected one of full, wo_T, wo_P, wo_TP, cooccurrence")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything the model consumes besides the cohort: the learned structure
/// plus both causal and co-occurrence relation sources, so any mode can be
/// resolved without re-estimating.
#[derive(Debug, Clone)]
pub struct ModelArtifacts {
    pub graph: CausalGraph,
    pub effect_bins: EdgeTypeMap,
    pub coocc_rates: EffectMatrix,
    pub coocc_bins: EdgeTypeMap,
}

/// Adaptive-moment optimizer with decoupled weight decay
/// (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct AdamW {
    learning_rate: f64,
    weight_decay: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(params: &ModelParameters, learning_rate: f64, weight_decay: f64) -> AdamW {
        let shapes: Vec<Vec<f64>> =
            params.tensors().iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        AdamW { learning_rate, weight_decay, step_count: 0, m: shapes.clone(), v: shapes }
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Vec<f64>]) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} gradient blocks for {} tensors",
                grads.len(),
                tensors.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step_count as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step_count as i32);
        for (i, (_, tensor)) in tensors.iter_mut().enumerate() {
            if tensor.data.len() != grads[i].len() {
                return Err(Error::Usage(format!("gradient block {i} has the wrong shape")));
            }
            for (k, g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                let p = &mut tensor.data[k];
                *p -= self.learning_rate * (update + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// One visit of the forward pass shared by training and the sequence-level
/// gradient path: encode, recurrent update, score.
#[allow(clippy::too_many_arguments)]
fn visit_forward(
    tape: &mut Tape,
    leaves: &ParameterLeaves,
    dims: &ModelDims,
    graph: &CausalGraph,
    space: &EntitySpace,
    typing: &EdgeTyping,
    dsa_mode: DsaMode,
    visit: &Visit,
    prev_meds: &BTreeSet<usize>,
    state: NodeId,
    dropout: Option<&[f64]>,
) -> Result<(NodeId, NodeId)> {
    let graphs =
        induce_visit_graphs(graph, space, &visit.diseases, &visit.procedures, prev_meds);
    let ctx = EncodeContext {
        diseases: &visit.diseases,
        procedures: &visit.procedures,
        prev_medications: prev_meds,
        graphs: &graphs,
        typing,
        dsa_mode,
        dropout,
    };
    let enc = encode_visit_state(tape, leaves, dims, &ctx, None)?;
    let next = gru_step(tape, leaves, dims, enc.h_v, state)?;
    let scores = score_medications(tape, leaves, dims, next)?;
    Ok((scores, next))
}

fn combine_on_tape(tape: &mut Tape, bce: NodeId, multi: NodeId, ddi: NodeId, a: f64, beta: f64) -> NodeId {
    let b = tape.scale_const(bce, a * beta);
    let m = tape.scale_const(multi, a * (1.0 - beta));
    let d = tape.scale_const(ddi, 1.0 - a);
    tape.sum_list(&[b, m, d])
}

/// Whole-sequence objective on one tape (state never detached), teacher
/// forced, no dropout, with a caller-fixed mixing weight. This is the
/// reference path for gradient checking; the training loop differs only in
/// detaching state at visit boundaries and in measuring the mixing weight
/// from live predictions.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss(
    tape: &mut Tape,
    leaves: &ParameterLeaves,
    dims: &ModelDims,
    patient: &PatientHistory,
    graph: &CausalGraph,
    space: &EntitySpace,
    typing: &EdgeTyping,
    dsa_mode: DsaMode,
    ddi: &DdiMatrix,
    beta: f64,
    fixed_alpha: f64,
) -> Result<NodeId> {
    let ddi_dense = ddi.dense();
    let mut state = tape.zeros(dims.dim_h);
    let mut prev = BTreeSet::new();
    let mut per_visit = Vec::with_capacity(patient.visits.len());
    for visit in &patient.visits {
        let (scores, next) = visit_forward(
            tape, leaves, dims, graph, space, typing, dsa_mode, visit, &prev, state, None,
        )?;
        state = next;
        let hot = encode_visit(visit, space);
        let targets: Vec<f64> = hot.medications.iter().map(|&b| b as f64).collect();
        let bce = tape.bce_loss(scores, &targets);
        let multi = tape.margin_loss(scores, &targets);
        let pen = tape.ddi_loss(scores, &ddi_dense);
        per_visit.push(combine_on_tape(tape, bce, multi, pen, fixed_alpha, beta));
        prev = visit.medications.clone();
    }
    Ok(tape.sum_list(&per_visit))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq)]
pub struct RoundMetrics {
    pub jaccard: f64,
    pub ddi_rate: f64,
    pub f1: f64,
    pub prauc: f64,
    pub avg_med: f64,
}

/// Per-round rows plus mean and sample standard deviation across rounds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub rounds: Vec<RoundMetrics>,
    pub mean: RoundMetrics,
    pub std: RoundMetrics,
}

pub fn metrics_to_json(report: &MetricsReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Validation(format!("metrics serialization: {e}")))
}

pub fn metrics_from_json(text: &str) -> Result<MetricsReport> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("metrics report: {e}"),
    })
}

/// One scored visit held against its recorded prescription.
#[derive(Debug, Clone)]
pub struct VisitOutcome {
    pub scores: Vec<f64>,
    pub selected: BTreeSet<usize>,
    pub actual: BTreeSet<usize>,
}

/// Aggregates a collection of visit outcomes: mean overlap and F1 across
/// visits, pooled interaction rate, mean average precision over visits
/// with at least one prescribed medication, mean selection size.
pub fn outcome_metrics(outcomes: &[VisitOutcome], ddi: &DdiMatrix) -> RoundMetrics {
    let selections: Vec<BTreeSet<usize>> =
        outcomes.iter().map(|o| o.selected.clone()).collect();
    let n = outcomes.len().max(1) as f64;
    let jaccard =
        outcomes.iter().map(|o| metric_jaccard(&o.selected, &o.actual)).sum::<f64>() / n;
    let f1 = outcomes.iter().map(|o| metric_f1(&o.selected, &o.actual)).sum::<f64>() / n;
    let mut prauc_sum = 0.0;
    let mut prauc_n = 0usize;
    for o in outcomes {
        let mut hot = vec![0u8; o.scores.len()];
        for &m in &o.actual {
            hot[m] = 1;
        }
        if let Some(ap) = metric_prauc(&o.scores, &hot) {
            prauc_sum += ap;
            prauc_n += 1;
        }
    }
    RoundMetrics {
        jaccard,
        ddi_rate: metric_ddi_rate(&selections, ddi),
        f1,
        prauc: if prauc_n == 0 { 0.0 } else { prauc_sum / prauc_n as f64 },
        avg_med: metric_avg_med(&selections),
    }
}

/// Mode-resolved evaluation inputs.
pub struct EvalContext<'a> {
    pub graph: &'a CausalGraph,
    pub space: &'a EntitySpace,
    pub typing: &'a EdgeTyping,
    pub dsa_mode: DsaMode,
    pub threshold: f64,
}

fn patient_outcomes(
    params: &ModelParameters,
    ctx: &EvalContext,
    patient: &PatientHistory,
) -> Result<Vec<VisitOutcome>> {
    let artifacts = RecommendArtifacts {
        graph: ctx.graph,
        space: ctx.space,
        typing: ctx.typing,
        dsa_mode: ctx.dsa_mode,
    };
    let options = RecommendOptions { threshold: ctx.threshold, autoregressive: false };
    let predictions = recommend(params, &artifacts, patient, &options)?;
    Ok(patient
        .visits
        .iter()
        .zip(predictions)
        .map(|(visit, VisitPrediction { scores, selected })| VisitOutcome {
            scores,
            selected,
            actual: visit.medications.clone(),
        })
        .collect())
}

/// Metrics over every visit of a cohort in one pass (no resampling).
pub fn evaluate_plain(
    params: &ModelParameters,
    ctx: &EvalContext,
    cohort: &PatientCohort,
) -> Result<RoundMetrics> {
    let mut outcomes = Vec::new();
    for patient in &cohort.patients {
        outcomes.extend(patient_outcomes(params, ctx, patient)?);
    }
    Ok(outcome_metrics(&outcomes, &cohort.ddi))
}

/// Bootstrap evaluation: `rounds` patient-level resamples of 80% size,
/// metrics per round, mean and sample standard deviation across rounds.
pub fn evaluate(
    params: &ModelParameters,
    ctx: &EvalContext,
    cohort: &PatientCohort,
    rounds: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if rounds == 0 {
        return Err(Error::Usage("evaluation needs at least one round".into()));
    }
    let samples = bootstrap_sample(cohort, rounds, 0.8, seed)?;
    let mut cache: Vec<Option<Vec<VisitOutcome>>> = vec![None; cohort.patients.len()];
    let mut per_round = Vec::with_capacity(rounds);
    for round in &samples {
        let mut outcomes = Vec::new();
        for &idx in round {
            if cache[idx].is_none() {
                cache[idx] = Some(patient_outcomes(params, ctx, &cohort.patients[idx])?);
            }
            outcomes.extend(cache[idx].as_ref().unwrap().iter().cloned());
        }
        per_round.push(outcome_metrics(&outcomes, &cohort.ddi));
    }
    let field = |f: fn(&RoundMetrics) -> f64| -> (f64, f64) {
        let values: Vec<f64> = per_round.iter().map(f).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (values.len() - 1) as f64)
                .sqrt()
        };
        (mean, std)
    };
    let (jm, js) = field(|r| r.jaccard);
    let (dm, ds) = field(|r| r.ddi_rate);
    let (fm, fs) = field(|r| r.f1);
    let (pm, ps) = field(|r| r.prauc);
    let (am, asd) = field(|r| r.avg_med);
    Ok(MetricsReport {
        rounds: per_round,
        mean: RoundMetrics { jaccard: jm, ddi_rate: dm, f1: fm, prauc: pm, avg_med: am },
        std: RoundMetrics { jaccard: js, ddi_rate: ds, f1: fs, prauc: ps, avg_med: asd },
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_bce: f64,
    pub loss_multi: f64,
    pub loss_ddi: f64,
    pub alpha: f64,
    pub val: RoundMetrics,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(
        "epoch,loss_bce,loss_multi,loss_ddi,alpha,val_jaccard,val_ddi_rate,val_f1,val_prauc,val_avg_med\n",
    );
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.epoch,
            row.loss_bce,
            row.loss_multi,
            row.loss_ddi,
            row.alpha,
            row.val.jaccard,
            row.val.ddi_rate,
            row.val.f1,
            row.val.prauc,
            row.val.avg_med
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best validation overlap.
    pub params: ModelParameters,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Trains from a fresh seed-derived initialization.
pub fn train(
    splits: &CohortSplits,
    artifacts: &ModelArtifacts,
    dims: &ModelDims,
    config: &LossConfig,
    mode: Mode,
) -> Result<TrainOutcome> {
    let params = ModelParameters::init(dims, config.seed)?;
    train_with_init(params, splits, artifacts, config, mode)
}

/// One queued visit awaiting its batch's pooled mixing weight.
struct PendingVisit {
    tape: Tape,
    leaf_ids: Vec<NodeId>,
    bce: NodeId,
    multi: NodeId,
    ddi: NodeId,
    selected: BTreeSet<usize>,
}

/// Trains from explicit initial parameters. Per epoch, patients are
/// visited in a seed-shuffled order; each visit is a fresh tape with the
/// recurrent state detached at the boundary; every `batch_visits` visits
/// the pooled interaction rate fixes the loss mix, gradients are averaged,
/// and one optimizer step is taken. After each epoch the validation split
/// is scored and the best-overlap checkpoint retained.
pub fn train_with_init(
    mut params: ModelParameters,
    splits: &CohortSplits,
    artifacts: &ModelArtifacts,
    config: &LossConfig,
    mode: Mode,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = params.dims.clone();
    dims.validate()?;
    let space = splits.train.space();
    if space.n_diseases != dims.n_diseases
        || space.n_procedures != dims.n_procedures
        || space.n_medications != dims.n_medications
    {
        return Err(Error::Usage("model dimensions disagree with the cohort vocabularies".into()));
    }
    let typing = mode.edge_typing(artifacts);
    let dsa_mode = mode.dsa_mode();
    let ddi_dense = splits.train.ddi.dense();

    let mut optimizer = AdamW::new(&params, config.learning_rate, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ModelParameters, usize)> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..splits.train.patients.len()).collect();
        order.shuffle(&mut stream(config.seed, &format!("train/order/{epoch}")));
        let mut dropout_rng = stream(config.seed, &format!("train/dropout/{epoch}"));

        let mut pending: Vec<PendingVisit> = Vec::new();
        let mut grad_acc: Vec<Vec<f64>> =
            params.tensors().iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        let mut sums = (0.0, 0.0, 0.0, 0.0); // bce, multi, ddi, alpha
        let mut visit_count = 0usize;

        macro_rules! flush {
            () => {
                if !pending.is_empty() {
                    let selections: Vec<BTreeSet<usize>> =
                        pending.iter().map(|p| p.selected.clone()).collect();
                    let a = pooled_alpha(&selections, &splits.train.ddi, config);
                    for item in pending.iter_mut() {
                        let combined = combine_on_tape(
                            &mut item.tape,
                            item.bce,
                            item.multi,
                            item.ddi,
                            a,
                            config.beta,
                        );
                        let value = item.tape.scalar(combined);
                        if !value.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite loss {value} at epoch {epoch} after {visit_count} visits"
                            )));
                        }
                        sums.0 += item.tape.scalar(item.bce);
                        sums.1 += item.tape.scalar(item.multi);
                        sums.2 += item.tape.scalar(item.ddi);
                        sums.3 += a;
                        item.tape.backward(combined);
                        for (block, &id) in grad_acc.iter_mut().zip(&item.leaf_ids) {
                            for (slot, g) in block.iter_mut().zip(item.tape.grad(id)) {
                                *slot += *g;
                            }
                        }
                    }
                    let scale = 1.0 / pending.len() as f64;
                    for block in grad_acc.iter_mut() {
                        block.iter_mut().for_each(|g| *g *= scale);
                    }
                    optimizer.step(&mut params, &grad_acc)?;
                    for block in grad_acc.iter_mut() {
                        block.iter_mut().for_each(|g| *g = 0.0);
                    }
                    pending.clear();
                }
            };
        }

        for &pi in &order {
            let patient = &splits.train.patients[pi];
            let mut state_value = vec![0.0; dims.dim_h];
            let mut prev: BTreeSet<usize> = BTreeSet::new();
            for visit in &patient.visits {
                let mask: Vec<f64> = (0..3 * dims.dim)
                    .map(|_| {
                        if dropout_rng.gen::<f64>() < config.dropout {
                            0.0
                        } else {
                            1.0 / (1.0 - config.dropout)
                        }
                    })
                    .collect();
                let mut tape = Tape::new();
                let leaves = ParameterLeaves::load(&mut tape, &params);
                let state = tape.leaf_vec(state_value.clone());
                let (scores, next_state) = visit_forward(
                    &mut tape,
                    &leaves,
                    &dims,
                    &artifacts.graph,
                    &space,
                    &typing,
                    dsa_mode,
                    visit,
                    &prev,
                    state,
                    Some(&mask),
                )?;
                let hot = encode_visit(visit, &space);
                let targets: Vec<f64> = hot.medications.iter().map(|&b| b as f64).collect();
                let bce = tape.bce_loss(scores, &targets);
                let multi = tape.margin_loss(scores, &targets);
                let pen = tape.ddi_loss(scores, &ddi_dense);
                let selected = threshold_select(tape.value(scores), config.threshold);
                state_value = tape.value(next_state).to_vec();
                prev = visit.medications.clone();
                pending.push(PendingVisit {
                    leaf_ids: leaves.ids(),
                    tape,
                    bce,
                    multi,
                    ddi: pen,
                    selected,
                });
                visit_count += 1;
                if pending.len() == config.batch_visits {
                    flush!();
                }
            }
        }
        flush!();

        let denominator = visit_count.max(1) as f64;
        let ctx = EvalContext {
            graph: &artifacts.graph,
            space: &space,
            typing: &typing,
            dsa_mode,
            threshold: config.threshold,
        };
        let val = evaluate_plain(&params, &ctx, &splits.validation)?;
        log.push(EpochLog {
            epoch,
            loss_bce: sums.0 / denominator,
            loss_multi: sums.1 / denominator,
            loss_ddi: sums.2 / denominator,
            alpha: sums.3 / denominator,
            val,
        });
        let improved = best.as_ref().map(|(j, _, _)| val.jaccard > *j).unwrap_or(true);
        if improved {
            best = Some((val.jaccard, params.clone(), epoch));
        }
    }
    let (_, best_params, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, log, best_epoch })
}

/// Expected overlap between the recorded set and a random selector that
/// picks each medication independently with the given probability, by
/// exact enumeration over all selections. Guarded to small vocabularies.
pub fn expected_random_jaccard(rates: &[f64], actual: &BTreeSet<usize>) -> Result<f64> {
    let n = rates.len();
    if n > 16 {
        return Err(Error::Capability(format!(
            "exact enumeration over {n} medications (limit 16)"
        )));
    }
    let truth_mask: u32 = actual.iter().fold(0, |m, &i| m | (1 << i));
    let mut expectation = 0.0;
    for mask in 0u32..(1 << n) {
        let mut p = 1.0;
        for (i, &q) in rates.iter().enumerate() {
            p *= if mask & (1 << i) != 0 { q } else { 1.0 - q };
        }
        if p == 0.0 {
            continue;
        }
        let intersection = (mask & truth_mask).count_ones();
        let union = (mask | truth_mask).count_ones();
        let j = if union == 0 { 1.0 } else { intersection as f64 / union as f64 };
        expectation += p * j;
    }
    Ok(expectation)
}

/// Per-medication prescription frequency over all visits of a cohort.
pub fn prescription_rates(cohort: &PatientCohort) -> Vec<f64> {
    let n_meds = cohort.medications.len();
    let mut counts = vec![0u64; n_meds];
    let mut visits = 0u64;
    for patient in &cohort.patients {
        for visit in &patient.visits {
            visits += 1;
            for &m in &visit.medications {
                counts[m] += 1;
            }
        }
    }
    counts.iter().map(|&c| if visits == 0 { 0.0 } else { c as f64 / visits as f64 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{assert_grads_match, Block};
    use crate::ehr::{EntityKind, EntityVocab, SplitRatios};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_scores_cost_vocab_times_ln2() {
        let loss = loss_bce(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(loss, 4.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn single_positive_at_inverse_e_costs_one() {
        let loss = loss_bce(&[std::f64::consts::E.recip()], &[1.0]);
        assert_abs_diff_eq!(loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn near_perfect_scores_cost_almost_nothing() {
        let loss = loss_bce(&[1.0 - 1e-7, 1e-7, 1.0], &[1.0, 0.0, 1.0]);
        assert!(loss > 0.0 && loss < 1e-5, "{loss}");
    }

    #[test]
    fn margin_examples_match_hand_arithmetic() {
        assert_abs_diff_eq!(loss_multi(&[0.5, 0.5], &[1.0, 0.0]), 0.5, epsilon = 1e-15);
        assert_eq!(loss_multi(&[0.3, 0.9], &[0.0, 0.0]), 0.0);
        assert_eq!(loss_multi(&[0.3, 0.9], &[1.0, 1.0]), 0.0);
    }

    proptest! {
        #[test]
        fn margin_is_positive_whenever_both_classes_appear(
            scores in proptest::collection::vec(0.001f64..0.999, 2..10),
            pos in 0usize..10,
        ) {
            let n = scores.len();
            let mut targets = vec![0.0; n];
            targets[pos % n] = 1.0;
            prop_assert!(loss_multi(&scores, &targets) > 0.0);
        }
    }

    fn pair_ddi(n: usize, a: usize, b: usize) -> DdiMatrix {
        DdiMatrix::from_pairs(n, &[(a, b)]).unwrap()
    }

    #[test]
    fn interaction_penalty_counts_both_orderings() {
        let ddi = pair_ddi(3, 0, 2);
        assert_eq!(loss_ddi(&[1.0, 1.0, 1.0], &ddi), 2.0);
        assert_abs_diff_eq!(loss_ddi(&[0.5, 0.9, 0.5], &ddi), 0.5, epsilon = 1e-15);
        assert_eq!(loss_ddi(&[0.9, 0.9, 0.9], &DdiMatrix::zeros(3)), 0.0);
    }

    #[test]
    fn plain_losses_agree_with_tape_ops() {
        let scores = vec![0.12, 0.88, 0.5, 0.731, 0.02];
        let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        let ddi = pair_ddi(5, 1, 3);
        let mut tape = Tape::new();
        let s = tape.leaf_vec(scores.clone());
        let b = tape.bce_loss(s, &targets);
        let m = tape.margin_loss(s, &targets);
        let d = tape.ddi_loss(s, &ddi.dense());
        assert_abs_diff_eq!(tape.scalar(b), loss_bce(&scores, &targets), epsilon = 1e-12);
        assert_abs_diff_eq!(tape.scalar(m), loss_multi(&scores, &targets), epsilon = 1e-12);
        assert_abs_diff_eq!(tape.scalar(d), loss_ddi(&scores, &ddi), epsilon = 1e-12);
    }

    #[test]
    fn mixing_weight_hits_the_pinned_schedule_points() {
        let config = LossConfig::default();
        assert_eq!(alpha(0.06, &config), 1.0);
        assert_eq!(alpha(0.0, &config), 1.0);
        assert_eq!(alpha(0.11, &config), 0.0);
        assert_eq!(alpha(0.2, &config), 0.0);
        assert_abs_diff_eq!(alpha(0.085, &config), 0.5, epsilon = 1e-9);
        for rate in [0.0, 0.05, 0.0601, 0.07, 0.0999, 0.11, 0.5, 1.0] {
            let a = alpha(rate, &config);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn acceptable_rate_leaves_only_the_task_terms() {
        let config = LossConfig::default();
        let low = combine_loss(2.0, 3.0, 7.0, 0.05, &config);
        assert_abs_diff_eq!(low, 0.95 * 2.0 + 0.05 * 3.0, epsilon = 1e-12);
        let high = combine_loss(2.0, 3.0, 7.0, 0.11, &config);
        assert_eq!(high, 7.0);
    }

    proptest! {
        #[test]
        fn balanced_penalty_makes_the_mix_independent_of_the_rate(
            bce in 0.0f64..10.0,
            multi in 0.0f64..10.0,
            rate_a in 0.0f64..1.0,
            rate_b in 0.0f64..1.0,
        ) {
            let config = LossConfig::default();
            let ddi = config.beta * bce + (1.0 - config.beta) * multi;
            let a = combine_loss(bce, multi, ddi, rate_a, &config);
            let b = combine_loss(bce, multi, ddi, rate_b, &config);
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn overlap_metric_pinned_cases() {
        assert_eq!(metric_jaccard(&set(&[1, 2]), &set(&[1, 2])), 1.0);
        assert_eq!(metric_jaccard(&set(&[1]), &set(&[2])), 0.0);
        assert_eq!(metric_jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])), 0.5);
        assert_eq!(metric_jaccard(&set(&[]), &set(&[])), 1.0);
    }

    #[test]
    fn f1_metric_pinned_cases() {
        assert_eq!(metric_f1(&set(&[3, 4]), &set(&[3, 4])), 1.0);
        assert_eq!(metric_f1(&set(&[]), &set(&[1])), 0.0);
        assert_eq!(metric_f1(&set(&[1]), &set(&[2])), 0.0);
        assert_abs_diff_eq!(metric_f1(&set(&[1]), &set(&[1, 2])), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(metric_f1(&set(&[]), &set(&[])), 1.0);
    }

    #[test]
    fn interaction_rate_pools_pairs_across_visits() {
        let ddi = pair_ddi(4, 0, 1);
        let one = metric_ddi_rate(&[set(&[0, 1, 2])], &ddi);
        assert_abs_diff_eq!(one, 1.0 / 3.0, epsilon = 1e-15);
        let pooled = metric_ddi_rate(&[set(&[0, 1, 2]), set(&[2, 3])], &ddi);
        assert_abs_diff_eq!(pooled, 0.25, epsilon = 1e-15);
        assert_eq!(metric_ddi_rate(&[set(&[0]), set(&[3])], &ddi), 0.0);
        assert_eq!(metric_ddi_rate(&[], &ddi), 0.0);
    }

    #[test]
    fn average_precision_pinned_cases() {
        let ap = metric_prauc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert_abs_diff_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_eq!(metric_prauc(&[0.9, 0.8, 0.2], &[1, 1, 0]).unwrap(), 1.0);
        let last = metric_prauc(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap();
        assert_abs_diff_eq!(last, 0.25, epsilon = 1e-15);
        assert_eq!(metric_prauc(&[0.9, 0.1], &[0, 0]), None);
        // Ties broken by ordinal: equal scores rank index 0 first.
        let tied = metric_prauc(&[0.5, 0.5], &[0, 1]).unwrap();
        assert_abs_diff_eq!(tied, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn average_set_size_pinned_cases() {
        assert_eq!(metric_avg_med(&[set(&[1, 2]), set(&[0, 1, 2, 3])]), 3.0);
        assert_eq!(metric_avg_med(&[set(&[]), set(&[])]), 0.0);
        assert_eq!(metric_avg_med(&[]), 0.0);
    }

    #[test]
    fn mode_names_round_trip_and_resolve() {
        for mode in Mode::ALL {
            assert_eq!(mode.name().parse::<Mode>().unwrap(), mode);
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(serde_json::from_str::<Mode>(&json).unwrap(), mode);
        }
        assert!("unified".parse::<Mode>().unwrap_err().is_config());
        assert_eq!(Mode::Full.dsa_mode(), DsaMode::Learned);
        assert_eq!(Mode::WoT.dsa_mode(), DsaMode::Learned);
        assert_eq!(Mode::WoP.dsa_mode(), DsaMode::ForcedOne);
        assert_eq!(Mode::WoTP.dsa_mode(), DsaMode::ForcedOne);
        assert_eq!(Mode::Cooccurrence.dsa_mode(), DsaMode::Removed);

        let artifacts = ModelArtifacts {
            graph: CausalGraph::empty(3),
            effect_bins: EdgeTypeMap {
                boundaries: vec![0.1],
                dm: vec![vec![1, 0]],
                pm: vec![],
            },
            coocc_rates: EffectMatrix { dm: vec![vec![0.7, 0.0]], pm: vec![] },
            coocc_bins: EdgeTypeMap {
                boundaries: vec![0.4],
                dm: vec![vec![1, 0]],
                pm: vec![],
            },
        };
        let full = Mode::Full.edge_typing(&artifacts);
        assert_eq!(full.dm, vec![vec![Some(1), Some(0)]]);
        assert_eq!(Mode::WoP.edge_typing(&artifacts), full);
        let wot = Mode::WoT.edge_typing(&artifacts);
        assert_eq!(wot.dm, vec![vec![Some(0), None]]);
        assert_eq!(Mode::WoTP.edge_typing(&artifacts), wot);
        let coocc = Mode::Cooccurrence.edge_typing(&artifacts);
        assert_eq!(coocc.dm, vec![vec![Some(1), Some(0)]]);
    }

    #[test]
    fn decay_shrinks_parameters_when_gradients_vanish() {
        let space = EntitySpace { n_diseases: 1, n_procedures: 1, n_medications: 1 };
        let mut dims = ModelDims::new(&space);
        dims.dim = 1;
        dims.dim_h = 1;
        dims.head_hidden = 1;
        dims.rgcn_layers = 1;
        dims.n_relations = 1;
        let mut params = ModelParameters::init(&dims, 0).unwrap();
        for (_, t) in params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut opt = AdamW::new(&params, 0.1, 0.5);
        let grads: Vec<Vec<f64>> =
            params.tensors().iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        opt.step(&mut params, &grads).unwrap();
        for (_, t) in params.tensors() {
            for &v in &t.data {
                assert_eq!(v, 0.95);
            }
        }
        let short = vec![vec![0.0]];
        assert!(opt.step(&mut params, &short).is_err());
    }

    #[test]
    fn optimizer_walks_downhill_on_a_quadratic() {
        // Reuse a 1-entry tensor as the lone coordinate: minimize (p-3)^2.
        let space = EntitySpace { n_diseases: 1, n_procedures: 1, n_medications: 1 };
        let mut dims = ModelDims::new(&space);
        dims.dim = 1;
        dims.dim_h = 1;
        dims.head_hidden = 1;
        dims.rgcn_layers = 1;
        dims.n_relations = 1;
        let mut params = ModelParameters::init(&dims, 0).unwrap();
        let n_tensors = params.tensors().len();
        let mut opt = AdamW::new(&params, 0.05, 0.0);
        for _ in 0..600 {
            let p = params.tensors()[0].1.data[0];
            let mut grads = vec![vec![]; n_tensors];
            for (i, (_, t)) in params.tensors().iter().enumerate() {
                grads[i] = vec![0.0; t.data.len()];
            }
            grads[0][0] = 2.0 * (p - 3.0);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!((params.tensors()[0].1.data[0] - 3.0).abs() < 0.05);
    }

    fn tiny_world() -> (PatientCohort, ModelArtifacts, ModelDims) {
        let diseases = EntityVocab::new(EntityKind::Disease, &["d0", "d1", "d2"]).unwrap();
        let procedures = EntityVocab::new(EntityKind::Procedure, &["p0", "p1"]).unwrap();
        let medications =
            EntityVocab::new(EntityKind::Medication, &["m0", "m1", "m2", "m3", "m4"]).unwrap();
        let ddi = DdiMatrix::from_pairs(5, &[(0, 3)]).unwrap();
        // d0 strongly indicates m0; d1 indicates m1; d2 indicates m2 and m4.
        let mut patients = Vec::new();
        for i in 0..12 {
            let (d, meds): (usize, Vec<usize>) = match i % 3 {
                0 => (0, vec![0]),
                1 => (1, vec![1]),
                _ => (2, vec![2, 4]),
            };
            let v1 = Visit {
                diseases: [d].into_iter().collect(),
                procedures: [i % 2].into_iter().collect(),
                medications: meds.iter().copied().collect(),
            };
            let v2 = Visit {
                diseases: [d, (d + 1) % 3].into_iter().collect(),
                procedures: BTreeSet::new(),
                medications: meds.iter().copied().collect(),
            };
            let visits = if i % 2 == 0 { vec![v1] } else { vec![v1, v2] };
            patients.push(PatientHistory { id: format!("pt{i}"), visits });
        }
        let cohort =
            PatientCohort::new(diseases, procedures, medications, ddi, patients).unwrap();
        let space = cohort.space();

        let mut graph = CausalGraph::empty(space.total());
        graph.add_edge(0, 1).unwrap();
        graph.add_edge(space.disease_var(0), space.medication_var(0)).unwrap();
        let effect_bins = EdgeTypeMap {
            boundaries: vec![0.2],
            dm: vec![vec![1, 0, 0, 0, 0], vec![0, 1, 0, 0, 0], vec![0, 0, 1, 0, 1]],
            pm: vec![vec![0; 5], vec![0; 5]],
        };
        let coocc_rates = EffectMatrix {
            dm: vec![
                vec![0.9, 0.0, 0.1, 0.0, 0.1],
                vec![0.0, 0.9, 0.1, 0.0, 0.1],
                vec![0.1, 0.1, 0.9, 0.0, 0.9],
            ],
            pm: vec![vec![0.3, 0.3, 0.3, 0.0, 0.3], vec![0.3, 0.3, 0.3, 0.0, 0.3]],
        };
        let coocc_bins = EdgeTypeMap {
            boundaries: vec![0.2],
            dm: vec![vec![1, 0, 0, 0, 0], vec![0, 1, 0, 0, 0], vec![0, 0, 1, 0, 1]],
            pm: vec![vec![1, 1, 1, 0, 1], vec![1, 1, 1, 0, 1]],
        };
        let mut dims = ModelDims::new(&space);
        dims.dim = 4;
        dims.dim_h = 4;
        dims.head_hidden = 4;
        dims.rgcn_layers = 1;
        dims.n_relations = 2;
        let artifacts = ModelArtifacts { graph, effect_bins, coocc_rates, coocc_bins };
        (cohort, artifacts, dims)
    }

    #[test]
    fn combined_objective_gradients_match_finite_differences() {
        let (cohort, artifacts, dims) = tiny_world();
        let space = cohort.space();
        let params = ModelParameters::init(&dims, 13).unwrap();
        // Patient 3's second visit carries both linked diseases, so the
        // role groups split and the attention weights get real gradients.
        let patient = &cohort.patients[3];
        assert_eq!(patient.visits.len(), 2);
        let typing = Mode::Full.edge_typing(&artifacts);
        let blocks: Vec<Block> = params
            .tensors()
            .iter()
            .map(|(_, t)| Block::matrix(t.rows, t.cols, &t.data))
            .collect();
        assert_grads_match(&blocks, |tape, ids| {
            let leaves = ParameterLeaves::from_ordered_ids(&dims, ids);
            sequence_loss(
                tape,
                &leaves,
                &dims,
                patient,
                &artifacts.graph,
                &space,
                &typing,
                DsaMode::Learned,
                &cohort.ddi,
                0.95,
                0.5,
            )
            .unwrap()
        });
    }

    #[test]
    fn forcing_unit_weights_only_matters_when_groups_split() {
        let (cohort, artifacts, dims) = tiny_world();
        let space = cohort.space();
        let params = ModelParameters::init(&dims, 5).unwrap();
        let typing = Mode::Full.edge_typing(&artifacts);
        let loss_of = |graph: &CausalGraph, dsa: DsaMode, patient: &PatientHistory| -> f64 {
            let mut tape = Tape::new();
            let leaves = ParameterLeaves::load(&mut tape, &params);
            let root = sequence_loss(
                &mut tape, &leaves, &dims, patient, graph, &space, &typing, dsa,
                &cohort.ddi, 0.95, 0.5,
            )
            .unwrap();
            tape.scalar(root)
        };
        // Without within-kind edges every kind has a single role group, so
        // the learned weight is exactly 1 and forcing changes nothing.
        let bare = CausalGraph::empty(space.total());
        let patient = &cohort.patients[3];
        let learned = loss_of(&bare, DsaMode::Learned, patient);
        let forced = loss_of(&bare, DsaMode::ForcedOne, patient);
        assert_eq!(learned.to_bits(), forced.to_bits());
        // The fixture graph splits disease roles on the two-disease visit,
        // so the switch becomes observable.
        let learned_split = loss_of(&artifacts.graph, DsaMode::Learned, patient);
        let forced_split = loss_of(&artifacts.graph, DsaMode::ForcedOne, patient);
        assert_ne!(learned_split.to_bits(), forced_split.to_bits());
    }

    fn quick_config(epochs: usize) -> LossConfig {
        LossConfig { epochs, seed: 4, ..LossConfig::default() }
    }

    #[test]
    fn same_seed_reproduces_the_training_log_byte_for_byte() {
        let (cohort, artifacts, dims) = tiny_world();
        let splits = crate::ehr::split_cohort(&cohort, SplitRatios::default(), 2).unwrap();
        let config = quick_config(2);
        let a = train(&splits, &artifacts, &dims, &config, Mode::Full).unwrap();
        let b = train(&splits, &artifacts, &dims, &config, Mode::Full).unwrap();
        assert_eq!(training_log_csv(&a.log), training_log_csv(&b.log));
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.log.len(), 2);
        a.params.assert_finite().unwrap();
        let csv = training_log_csv(&a.log);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss_bce,loss_multi,loss_ddi,alpha,val_jaccard,val_ddi_rate,val_f1,val_prauc,val_avg_med"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn training_reduces_the_task_loss_on_a_learnable_pattern() {
        let (cohort, artifacts, dims) = tiny_world();
        let splits = crate::ehr::split_cohort(&cohort, SplitRatios::default(), 2).unwrap();
        let mut config = quick_config(5);
        config.learning_rate = 0.01;
        let out = train(&splits, &artifacts, &dims, &config, Mode::Full).unwrap();
        assert!(
            out.log[4].loss_bce < out.log[0].loss_bce,
            "epoch 5 {} vs epoch 1 {}",
            out.log[4].loss_bce,
            out.log[0].loss_bce
        );
    }

    #[test]
    fn batched_steps_pool_the_interaction_rate() {
        let config = LossConfig::default();
        let ddi = pair_ddi(4, 0, 1);
        // Separate visits: rates 1 and 0; pooled over both: 1/4 -> ramp.
        assert_eq!(pooled_alpha(&[set(&[0, 1])], &ddi, &config), 0.0);
        assert_eq!(pooled_alpha(&[set(&[2, 3])], &ddi, &config), 1.0);
        let pooled = pooled_alpha(&[set(&[0, 1]), set(&[2, 3, 0])], &ddi, &config);
        assert_eq!(pooled, alpha(0.25, &config));
        let (cohort, artifacts, dims) = tiny_world();
        let splits = crate::ehr::split_cohort(&cohort, SplitRatios::default(), 2).unwrap();
        let mut config = quick_config(1);
        config.batch_visits = 4;
        let out = train(&splits, &artifacts, &dims, &config, Mode::Full).unwrap();
        assert_eq!(out.log.len(), 1);
        out.params.assert_finite().unwrap();
    }

    #[test]
    fn poisoned_parameters_abort_with_a_numeric_diagnostic() {
        let (cohort, artifacts, dims) = tiny_world();
        let splits = crate::ehr::split_cohort(&cohort, SplitRatios::default(), 2).unwrap();
        let mut params = ModelParameters::init(&dims, 0).unwrap();
        params.tensors_mut()[0].1.data[0] = f64::NAN;
        let err = train_with_init(params, &splits, &artifacts, &quick_config(1), Mode::Full)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(err.to_string().contains("epoch 1"), "{err}");
    }

    #[test]
    fn ground_truth_replay_scores_perfect_overlap() {
        let (cohort, _, _) = tiny_world();
        let outcomes: Vec<VisitOutcome> = cohort
            .patients
            .iter()
            .flat_map(|p| &p.visits)
            .map(|v| {
                let mut scores = vec![0.01; 5];
                for &m in &v.medications {
                    scores[m] = 0.99;
                }
                VisitOutcome {
                    scores,
                    selected: v.medications.clone(),
                    actual: v.medications.clone(),
                }
            })
            .collect();
        let metrics = outcome_metrics(&outcomes, &cohort.ddi);
        assert_eq!(metrics.jaccard, 1.0);
        assert_eq!(metrics.f1, 1.0);
        assert_eq!(metrics.prauc, 1.0);

        // Pooled interaction rate of the recorded prescriptions matches a
        // direct pair count.
        let sets: Vec<BTreeSet<usize>> =
            cohort.patients.iter().flat_map(|p| &p.visits).map(|v| v.medications.clone()).collect();
        let mut pairs = 0u64;
        let mut bad = 0u64;
        for s in &sets {
            let v: Vec<usize> = s.iter().copied().collect();
            for i in 0..v.len() {
                for j in i + 1..v.len() {
                    pairs += 1;
                    if cohort.ddi.interacts(v[i], v[j]) {
                        bad += 1;
                    }
                }
            }
        }
        let expect = if pairs == 0 { 0.0 } else { bad as f64 / pairs as f64 };
        assert_eq!(metrics.ddi_rate, expect);
    }

    #[test]
    fn bootstrap_report_has_one_row_per_round_and_is_deterministic() {
        let (cohort, artifacts, dims) = tiny_world();
        let params = ModelParameters::init(&dims, 8).unwrap();
        let typing = Mode::Full.edge_typing(&artifacts);
        let ctx = EvalContext {
            graph: &artifacts.graph,
            space: &cohort.space(),
            typing: &typing,
            dsa_mode: DsaMode::Learned,
            threshold: 0.5,
        };
        let report = evaluate(&params, &ctx, &cohort, 10, 3).unwrap();
        assert_eq!(report.rounds.len(), 10);
        for r in &report.rounds {
            assert!((0.0..=1.0).contains(&r.jaccard));
            assert!((0.0..=1.0).contains(&r.f1));
            assert!((0.0..=1.0).contains(&r.prauc));
            assert!((0.0..=1.0).contains(&r.ddi_rate));
            assert!(r.avg_med >= 0.0);
        }
        let again = evaluate(&params, &ctx, &cohort, 10, 3).unwrap();
        assert_eq!(metrics_to_json(&report).unwrap(), metrics_to_json(&again).unwrap());
        let parsed = metrics_from_json(&metrics_to_json(&report).unwrap()).unwrap();
        assert_eq!(parsed, report);
        assert!(evaluate(&params, &ctx, &cohort, 0, 3).is_err());
    }

    #[test]
    fn random_selector_baseline_matches_hand_enumeration() {
        assert_eq!(expected_random_jaccard(&[1.0, 0.0], &set(&[0])).unwrap(), 1.0);
        let e = expected_random_jaccard(&[0.5, 0.5], &set(&[0])).unwrap();
        assert_abs_diff_eq!(e, 0.375, epsilon = 1e-15);
        let empty = expected_random_jaccard(&[0.5], &set(&[])).unwrap();
        assert_abs_diff_eq!(empty, 0.5, epsilon = 1e-15);
        assert!(matches!(
            expected_random_jaccard(&[0.5; 17], &set(&[])),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn random_selector_baseline_matches_monte_carlo() {
        use rand::Rng;
        let rates = [0.8, 0.1, 0.4, 0.0, 0.65];
        let truth = set(&[0, 2]);
        let exact = expected_random_jaccard(&rates, &truth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 200_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let picked: BTreeSet<usize> = rates
                .iter()
                .enumerate()
                .filter(|(_, &q)| rng.gen::<f64>() < q)
                .map(|(i, _)| i)
                .collect();
            total += metric_jaccard(&picked, &truth);
        }
        assert_abs_diff_eq!(exact, total / draws as f64, epsilon = 5e-3);
    }

    #[test]
    fn prescription_rates_count_visit_fractions() {
        let (cohort, _, _) = tiny_world();
        let rates = prescription_rates(&cohort);
        // 18 visits; m0 in the 4 patients with d=0 (6 visits), m3 never.
        assert_eq!(rates.len(), 5);
        assert_abs_diff_eq!(rates[0], 6.0 / 18.0, epsilon = 1e-15);
        assert_eq!(rates[3], 0.0);
        assert!(rates.iter().all(|&q| (0.0..=1.0).contains(&q)));
    }

    #[test]
    fn config_validation_rejects_out_of_range_values() {
        let good = LossConfig::default();
        good.validate().unwrap();
        for patch in [
            |c: &mut LossConfig| c.beta = 0.0,
            |c: &mut LossConfig| c.gamma = 1.0,
            |c: &mut LossConfig| c.kp = -0.1,
            |c: &mut LossConfig| c.threshold = 1.5,
            |c: &mut LossConfig| c.dropout = 1.0,
            |c: &mut LossConfig| c.learning_rate = 0.0,
            |c: &mut LossConfig| c.epochs = 0,
            |c: &mut LossConfig| c.batch_visits = 0,
        ] {
            let mut bad = good.clone();
            patch(&mut bad);
            assert!(bad.validate().unwrap_err().is_config());
        }
        let parsed: LossConfig = serde_json::from_str("{\"beta\": 0.9}").unwrap();
        assert_eq!(parsed.beta, 0.9);
        assert_eq!(parsed.epochs, LossConfig::default().epochs);
    }
}
