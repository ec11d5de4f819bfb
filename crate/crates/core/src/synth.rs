//! Seeded synthetic cohorts from a layered structural causal model, plus an
//! exact interventional-effect oracle.
//!
//! Every variable is Bernoulli with success probability
//! `sigmoid(base + intercept + sum(weight * parent))`, sampled in
//! topological order. Layering: disease variables may only be caused by
//! diseases; procedures by diseases or procedures; medications by diseases
//! or procedures (and by other medications when `allow_med_med` is set).
//!
//! Visits are independent within a patient unless `patient_intercept_sd`
//! is positive, in which case a per-patient gaussian intercept shifts every
//! base log-odds and induces longitudinal correlation.
//!
//! Visits where no disease and no procedure fired would be invalid cohort
//! records, so the generator resamples them. Keep at least one variable
//! with a strongly positive base in hand-written specs and the conditioning
//! bias is negligible against the oracle below.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::ehr::{
    DdiMatrix, EntityKind, EntitySpace, EntityVocab, PatientCohort, PatientHistory, Visit,
};
use crate::rng::{standard_normal, stream};
use crate::{Error, Result};

/// Weighted directed edge between unified variable indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScmEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct ScmSpec {
    pub n_diseases: usize,
    pub n_procedures: usize,
    pub n_medications: usize,
    pub edges: Vec<ScmEdge>,
    /// Base log-odds per variable, unified indexing; length = total vars.
    pub base_logits: Vec<f64>,
    pub patients: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub seed: u64,
    pub allow_med_med: bool,
    pub patient_intercept_sd: f64,
    /// Interacting medication pairs (within-kind ordinals) to stamp into
    /// the generated cohort's interaction table.
    pub ddi_pairs: Vec<(usize, usize)>,
}

impl ScmSpec {
    pub fn space(&self) -> EntitySpace {
        EntitySpace {
            n_diseases: self.n_diseases,
            n_procedures: self.n_procedures,
            n_medications: self.n_medications,
        }
    }

    /// Canonical code for a unified variable index: d0..., p0..., m0...
    pub fn var_code(&self, var: usize) -> String {
        let (kind, ord) = self.space().kind_of(var);
        match kind {
            EntityKind::Disease => format!("d{ord}"),
            EntityKind::Procedure => format!("p{ord}"),
            EntityKind::Medication => format!("m{ord}"),
        }
    }

    pub fn var_from_code(&self, code: &str) -> Result<usize> {
        let space = self.space();
        let bad =
            || Error::Validation(format!("unknown variable code {code:?} in model spec"));
        let (head, tail) = code.split_at(1.min(code.len()));
        let ord: usize = tail.parse().map_err(|_| bad())?;
        let var = match head {
            "d" if ord < space.n_diseases => space.disease_var(ord),
            "p" if ord < space.n_procedures => space.procedure_var(ord),
            "m" if ord < space.n_medications => space.medication_var(ord),
            _ => return Err(bad()),
        };
        Ok(var)
    }

    pub fn validate(&self) -> Result<()> {
        let space = self.space();
        let total = space.total();
        if total == 0 {
            return Err(Error::Validation("model spec has no variables".into()));
        }
        if self.base_logits.len() != total {
            return Err(Error::Validation(format!(
                "base_logits has {} entries, expected {total}",
                self.base_logits.len()
            )));
        }
        if self.base_logits.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation("non-finite base log-odds".into()));
        }
        if self.visits_min == 0 || self.visits_min > self.visits_max {
            return Err(Error::Validation(format!(
                "visit range [{}, {}] is invalid",
                self.visits_min, self.visits_max
            )));
        }
        if self.patient_intercept_sd < 0.0 {
            return Err(Error::Validation("patient intercept sd must be >= 0".into()));
        }
        for e in &self.edges {
            if e.from >= total || e.to >= total {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) out of range",
                    e.from, e.to
                )));
            }
            if !e.weight.is_finite() {
                return Err(Error::Validation("non-finite edge weight".into()));
            }
            let from_kind = space.kind_of(e.from).0;
            let to_kind = space.kind_of(e.to).0;
            let ok = match to_kind {
                EntityKind::Disease => from_kind == EntityKind::Disease,
                EntityKind::Procedure => from_kind != EntityKind::Medication,
                EntityKind::Medication => {
                    from_kind != EntityKind::Medication || self.allow_med_med
                }
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "edge {} -> {} violates layering ({} into {})",
                    self.var_code(e.from),
                    self.var_code(e.to),
                    from_kind.label(),
                    to_kind.label()
                )));
            }
        }
        for &(a, b) in &self.ddi_pairs {
            if a >= space.n_medications || b >= space.n_medications || a == b {
                return Err(Error::Validation(format!("bad interaction pair ({a}, {b})")));
            }
        }
        self.topological_order()?;
        Ok(())
    }

    /// Parents with weights, indexed by child.
    pub fn parents(&self) -> Vec<Vec<(usize, f64)>> {
        let mut parents = vec![Vec::new(); self.space().total()];
        for e in &self.edges {
            parents[e.to].push((e.from, e.weight));
        }
        parents
    }

    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let total = self.space().total();
        let mut indegree = vec![0usize; total];
        let mut children = vec![Vec::new(); total];
        for e in &self.edges {
            indegree[e.to] += 1;
            children[e.from].push(e.to);
        }
        let mut queue: Vec<usize> = (0..total).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(total);
        let mut head = 0;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if order.len() != total {
            return Err(Error::Validation("model spec graph has a cycle".into()));
        }
        Ok(order)
    }
}

// --- JSON file format ---------------------------------------------------
//
// Human-editable variant of ScmSpec: edges and base log-odds refer to
// variables by code (d0, p3, m1), bases default to 0 when omitted.

#[derive(Serialize, Deserialize)]
struct ScmSpecFile {
    diseases: usize,
    procedures: usize,
    medications: usize,
    #[serde(default)]
    edges: Vec<ScmEdgeFile>,
    #[serde(default)]
    base_logits: std::collections::BTreeMap<String, f64>,
    patients: usize,
    visits: [usize; 2],
    seed: u64,
    #[serde(default)]
    allow_med_med: bool,
    #[serde(default)]
    patient_intercept_sd: f64,
    #[serde(default)]
    ddi_pairs: Vec<[String; 2]>,
}

#[derive(Serialize, Deserialize)]
struct ScmEdgeFile {
    from: String,
    to: String,
    weight: f64,
}

impl ScmSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScmSpecFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad model spec: {e}")))?;
        let mut spec = ScmSpec {
            n_diseases: file.diseases,
            n_procedures: file.procedures,
            n_medications: file.medications,
            edges: Vec::with_capacity(file.edges.len()),
            base_logits: vec![0.0; file.diseases + file.procedures + file.medications],
            patients: file.patients,
            visits_min: file.visits[0],
            visits_max: file.visits[1],
            seed: file.seed,
            allow_med_med: file.allow_med_med,
            patient_intercept_sd: file.patient_intercept_sd,
            ddi_pairs: Vec::with_capacity(file.ddi_pairs.len()),
        };
        for e in &file.edges {
            spec.edges.push(ScmEdge {
                from: spec.var_from_code(&e.from)?,
                to: spec.var_from_code(&e.to)?,
                weight: e.weight,
            });
        }
        for (code, base) in &file.base_logits {
            let var = spec.var_from_code(code)?;
            spec.base_logits[var] = *base;
        }
        let space = spec.space();
        for [a, b] in &file.ddi_pairs {
            let a = spec.var_from_code(a)?;
            let b = spec.var_from_code(b)?;
            let (ka, a) = space.kind_of(a);
            let (kb, b) = space.kind_of(b);
            if ka != EntityKind::Medication || kb != EntityKind::Medication {
                return Err(Error::Validation(
                    "interaction pairs must both be medications".into(),
                ));
            }
            spec.ddi_pairs.push((a, b));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot open model spec {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }
}

/// Benchmark model specs shipped with the crate, ready for
/// [`ScmSpec::from_json`].
pub mod bundled {
    /// 8 variables (4 diseases, 1 procedure, 3 medications), every edge
    /// |weight| >= 3, 5,000 single-visit patients. Sized for structure
    /// recovery checks. Two design constraints: d3 is an always-on anchor
    /// (without one, resampling empty visits induces spurious dependence
    /// between otherwise independent variables, visible to the score at
    /// this sample size), and every node has in-degree <= 1 so no
    /// projection contains a collider, which single-move search with a
    /// smoothed score can misorient into a local optimum.
    pub const STRUCTURE8: &str = include_str!("../assets/scm_structure8.json");

    /// Confounded triple: d1 drives both the treatment d2 and the outcome
    /// m0 with weight 4, 20,000 patients. Sized for effect estimation
    /// checks; d0 is an always-on anchor so visit resampling is negligible.
    pub const CONFOUNDED_TRIPLE: &str = include_str!("../assets/scm_triple.json");

    /// 14 diseases, 3 procedures, 12 medications, 480 longitudinal
    /// patients. The end-to-end training benchmark: each signal disease
    /// indicates three medications (the top effect-bin is then mostly
    /// true pairs), two diseases contraindicate medications (sign
    /// information a single presence relation has to average away),
    /// disease chains create mediated effects and role splits, and the
    /// severity intercept makes medication history informative beyond
    /// the current visit while inflating raw co-occurrence everywhere.
    pub const BENCHMARK: &str = include_str!("../assets/scm_benchmark.json");
}

// --- Generation ----------------------------------------------------------

/// Exact interventional effects for every disease/procedure on every
/// medication, plus the true edge list.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub edges: Vec<ScmEdge>,
    /// `ate_dm[d][m]`: effect of disease d on medication m.
    pub ate_dm: Vec<Vec<f64>>,
    /// `ate_pm[p][m]`: effect of procedure p on medication m.
    pub ate_pm: Vec<Vec<f64>>,
}

const RESAMPLE_CAP: usize = 10_000;

pub fn generate(spec: &ScmSpec) -> Result<(PatientCohort, GroundTruth)> {
    spec.validate()?;
    let space = spec.space();
    let order = spec.topological_order()?;
    let parents = spec.parents();

    let code_list = |kind: EntityKind, n: usize| -> Vec<String> {
        let prefix = match kind {
            EntityKind::Disease => 'd',
            EntityKind::Procedure => 'p',
            EntityKind::Medication => 'm',
        };
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    };
    let diseases = EntityVocab::new(EntityKind::Disease, &code_list(EntityKind::Disease, space.n_diseases))?;
    let procedures = EntityVocab::new(EntityKind::Procedure, &code_list(EntityKind::Procedure, space.n_procedures))?;
    let medications = EntityVocab::new(EntityKind::Medication, &code_list(EntityKind::Medication, space.n_medications))?;
    let ddi = DdiMatrix::from_pairs(space.n_medications, &spec.ddi_pairs)?;

    let mut patients = Vec::with_capacity(spec.patients);
    let mut values = vec![false; space.total()];
    for patient in 0..spec.patients {
        let mut rng = stream(spec.seed, &format!("patient/{patient}"));
        let intercept = if spec.patient_intercept_sd > 0.0 {
            spec.patient_intercept_sd * standard_normal(&mut rng)
        } else {
            0.0
        };
        let n_visits = rng.gen_range(spec.visits_min..=spec.visits_max);
        let mut visits = Vec::with_capacity(n_visits);
        for visit_idx in 0..n_visits {
            let mut attempts = 0;
            let visit = loop {
                attempts += 1;
                if attempts > RESAMPLE_CAP {
                    return Err(Error::Numeric(format!(
                        "patient {patient} visit {visit_idx}: no disease or procedure fired \
                         in {RESAMPLE_CAP} samples; raise a base log-odds"
                    )));
                }
                for &v in &order {
                    let mut logit = spec.base_logits[v] + intercept;
                    for &(p, w) in &parents[v] {
                        if values[p] {
                            logit += w;
                        }
                    }
                    values[v] = rng.gen_bool(sigmoid(logit));
                }
                let visit = Visit {
                    diseases: active(&values[..space.n_diseases]),
                    procedures: active(
                        &values[space.n_diseases..space.n_diseases + space.n_procedures],
                    ),
                    medications: active(&values[space.n_diseases + space.n_procedures..]),
                };
                if !(visit.diseases.is_empty() && visit.procedures.is_empty()) {
                    break visit;
                }
            };
            visits.push(visit);
        }
        patients.push(PatientHistory { id: format!("synth-{patient}"), visits });
    }

    let truth = ground_truth(spec)?;
    let cohort = PatientCohort::new(diseases, procedures, medications, ddi, patients)?;
    Ok((cohort, truth))
}

fn active(slice: &[bool]) -> std::collections::BTreeSet<usize> {
    slice.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
}

pub fn ground_truth(spec: &ScmSpec) -> Result<GroundTruth> {
    let space = spec.space();
    let mut ate_dm = vec![vec![0.0; space.n_medications]; space.n_diseases];
    let mut ate_pm = vec![vec![0.0; space.n_medications]; space.n_procedures];
    for m in 0..space.n_medications {
        let outcome = space.medication_var(m);
        for d in 0..space.n_diseases {
            ate_dm[d][m] = exact_ate(spec, space.disease_var(d), outcome)?;
        }
        for p in 0..space.n_procedures {
            ate_pm[p][m] = exact_ate(spec, space.procedure_var(p), outcome)?;
        }
    }
    Ok(GroundTruth { edges: spec.edges.clone(), ate_dm, ate_pm })
}

/// Exact average treatment effect
/// `P(outcome = 1 | do(treatment = 1)) - P(outcome = 1 | do(treatment = 0))`
/// by exhaustive enumeration over the outcome's ancestors in the mutilated
/// graph. When the spec carries a patient intercept, the effect is
/// integrated over its gaussian distribution by Simpson quadrature.
pub fn exact_ate(spec: &ScmSpec, treatment: usize, outcome: usize) -> Result<f64> {
    let total = spec.space().total();
    if treatment >= total || outcome >= total || treatment == outcome {
        return Err(Error::Usage(format!(
            "bad treatment/outcome pair ({treatment}, {outcome})"
        )));
    }
    let parents = spec.parents();

    // Ancestors of the outcome with edges into the treatment removed.
    let mut stack = vec![outcome];
    let mut ancestral = vec![false; total];
    ancestral[outcome] = true;
    while let Some(v) = stack.pop() {
        if v == treatment {
            continue; // do() severs incoming edges
        }
        for &(p, _) in &parents[v] {
            if !ancestral[p] {
                ancestral[p] = true;
                stack.push(p);
            }
        }
    }
    if !ancestral[treatment] {
        return Ok(0.0); // no directed path: intervening cannot move the outcome
    }

    // Enumerate assignments of the remaining ancestral variables in
    // topological order.
    let order: Vec<usize> = spec
        .topological_order()?
        .into_iter()
        .filter(|&v| ancestral[v] && v != treatment && v != outcome)
        .collect();
    if order.len() > 20 {
        return Err(Error::Capability(format!(
            "exact effect needs enumeration over {} variables (limit 20)",
            order.len()
        )));
    }

    if spec.patient_intercept_sd > 0.0 {
        let sd = spec.patient_intercept_sd;
        // Simpson quadrature of the effect against the intercept density.
        let steps = 400usize; // even
        let (lo, hi) = (-8.0 * sd, 8.0 * sd);
        let h = (hi - lo) / steps as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..=steps {
            let c = lo + h * i as f64;
            let w = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let pdf = (-0.5 * (c / sd) * (c / sd)).exp();
            let effect = enumerate_effect(spec, &parents, &order, treatment, outcome, c);
            num += w * pdf * effect;
            den += w * pdf;
        }
        Ok(num / den)
    } else {
        Ok(enumerate_effect(spec, &parents, &order, treatment, outcome, 0.0))
    }
}

fn enumerate_effect(
    spec: &ScmSpec,
    parents: &[Vec<(usize, f64)>],
    order: &[usize],
    treatment: usize,
    outcome: usize,
    intercept: f64,
) -> f64 {
    let mut interventional = [0.0; 2];
    let total = spec.space().total();
    let mut values = vec![false; total];
    for (t_idx, slot) in interventional.iter_mut().enumerate() {
        values[treatment] = t_idx == 1;
        let mut p_outcome = 0.0;
        for mask in 0u64..(1u64 << order.len()) {
            for (bit, &v) in order.iter().enumerate() {
                values[v] = mask >> bit & 1 == 1;
            }
            let mut p_assignment = 1.0;
            for (bit, &v) in order.iter().enumerate() {
                let p_v = bernoulli_p(spec, parents, &values, v, intercept);
                p_assignment *= if mask >> bit & 1 == 1 { p_v } else { 1.0 - p_v };
            }
            p_outcome += p_assignment * bernoulli_p(spec, parents, &values, outcome, intercept);
        }
        *slot = p_outcome;
    }
    interventional[1] - interventional[0]
}

fn bernoulli_p(
    spec: &ScmSpec,
    parents: &[Vec<(usize, f64)>],
    values: &[bool],
    var: usize,
    intercept: f64,
) -> f64 {
    let mut logit = spec.base_logits[var] + intercept;
    for &(p, w) in &parents[var] {
        if values[p] {
            logit += w;
        }
    }
    sigmoid(logit)
}

/// Writes the true edge list and dense effect tables as JSON.
pub fn save_ground_truth(
    truth: &GroundTruth,
    spec: &ScmSpec,
    path: impl AsRef<Path>,
) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        edges: Vec<ScmEdgeFile>,
        ate_dm: &'a [Vec<f64>],
        ate_pm: &'a [Vec<f64>],
    }
    let out = Out {
        edges: truth
            .edges
            .iter()
            .map(|e| ScmEdgeFile {
                from: spec.var_code(e.from),
                to: spec.var_code(e.to),
                weight: e.weight,
            })
            .collect(),
        ate_dm: &truth.ate_dm,
        ate_pm: &truth.ate_pm,
    };
    let mut text = serde_json::to_string_pretty(&out).expect("ground truth serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
