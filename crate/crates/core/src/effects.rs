//! Quantified treatment -> medication effects.
//!
//! For every (disease, medication) and (procedure, medication) pair the
//! average treatment effect is estimated by standardization: stratify on a
//! backdoor adjustment set, take the smoothed risk difference within each
//! stratum, and average the differences weighted by stratum frequency.
//! With at most 3 binary adjusters the stratification is exact, so no
//! parametric outcome model is needed. The resulting effect matrices are
//! then quantile-binned into a small number of relation types.

use serde::{Deserialize, Serialize};

use crate::discovery::{BinaryDataset, CausalGraph};
use crate::ehr::{EntityKind, EntitySpace, EntityVocab};
use crate::{Error, Result};

/// Adjustment sets larger than this are truncated to the members most
/// associated with the outcome, bounding stratum count at 8.
pub const MAX_ADJUSTERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMatrix {
    /// Disease-by-medication effects.
    pub dm: Vec<Vec<f64>>,
    /// Procedure-by-medication effects.
    pub pm: Vec<Vec<f64>>,
}

/// Effect magnitudes grouped into discrete relation types for the graph
/// convolution. `boundaries` are strictly ascending; a value's type is the
/// number of boundaries strictly below it, so boundary values land in the
/// lower bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTypeMap {
    pub boundaries: Vec<f64>,
    pub dm: Vec<Vec<u8>>,
    pub pm: Vec<Vec<u8>>,
}

impl EdgeTypeMap {
    pub fn bin_of(&self, value: f64) -> u8 {
        self.boundaries.iter().take_while(|&&b| b < value).count() as u8
    }
}

/// Parents of the treatment in the learned graph, which block every
/// backdoor path in a DAG. The outcome itself is excluded even when the
/// graph lists it as a parent. When more than [`MAX_ADJUSTERS`] remain,
/// keeps those with the strongest marginal association (|PMI|) with the
/// outcome, breaking ties toward lower ordinals.
pub fn backdoor_set(
    graph: &CausalGraph,
    data: &BinaryDataset,
    space: &EntitySpace,
    treatment: usize,
    outcome: usize,
) -> Result<Vec<usize>> {
    let (t_kind, _) = space.kind_of(treatment);
    if t_kind == EntityKind::Medication {
        return Err(Error::Usage(format!(
            "treatment variable {treatment} is a medication; expected disease or procedure"
        )));
    }
    let (o_kind, _) = space.kind_of(outcome);
    if o_kind != EntityKind::Medication {
        return Err(Error::Usage(format!(
            "outcome variable {outcome} is a {}; expected medication",
            o_kind.label()
        )));
    }
    let mut parents: Vec<usize> = graph.parents_of(treatment).iter().copied().collect();
    // A learned graph may orient medication -> disease, making the outcome a
    // parent of the treatment. Conditioning on the outcome is never valid, so
    // it is dropped before truncation.
    parents.retain(|&p| p != outcome);
    if parents.len() > MAX_ADJUSTERS {
        let mut ranked: Vec<(f64, usize)> =
            parents.iter().map(|&p| (data.pmi(p, outcome).abs(), p)).collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        parents = ranked.into_iter().take(MAX_ADJUSTERS).map(|(_, p)| p).collect();
        parents.sort_unstable();
    }
    Ok(parents)
}

/// Standardization estimate of the effect of `treatment` on `outcome`:
///
///   sum_z [P(Y=1 | T=1, Z=z) - P(Y=1 | T=0, Z=z)] * P(Z=z)
///
/// with add-one smoothed conditionals, so strata lacking treated or
/// untreated rows still contribute a finite (shrunk toward 0) difference.
/// Pairs that never co-occur in any visit are defined to have no effect.
pub fn estimate_ate(
    data: &BinaryDataset,
    treatment: usize,
    outcome: usize,
    adjustment: &[usize],
) -> f64 {
    debug_assert!(!adjustment.contains(&treatment) && !adjustment.contains(&outcome));
    debug_assert!(adjustment.len() <= 16, "stratification over {} vars", adjustment.len());
    let n = data.n_rows() as f64;
    if n == 0.0 {
        return 0.0;
    }
    if data.pair_counts(treatment, outcome).0 == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for config in 0..1usize << adjustment.len() {
        let mut ones = Vec::with_capacity(adjustment.len() + 2);
        let mut zeros = Vec::with_capacity(adjustment.len() + 1);
        for (bit, &z) in adjustment.iter().enumerate() {
            if config >> bit & 1 == 1 {
                ones.push(z);
            } else {
                zeros.push(z);
            }
        }
        let n_z = data.count_where(&ones, &zeros);
        if n_z == 0 {
            continue;
        }
        ones.push(treatment);
        let n_t1 = data.count_where(&ones, &zeros);
        ones.push(outcome);
        let n_t1_y1 = data.count_where(&ones, &zeros);
        ones.truncate(ones.len() - 2);
        zeros.push(treatment);
        ones.push(outcome);
        let n_t0_y1 = data.count_where(&ones, &zeros);
        let n_t0 = n_z - n_t1;
        let p1 = (n_t1_y1 as f64 + 1.0) / (n_t1 as f64 + 2.0);
        let p0 = (n_t0_y1 as f64 + 1.0) / (n_t0 as f64 + 2.0);
        total += (p1 - p0) * n_z as f64 / n;
    }
    total.clamp(-1.0, 1.0)
}

/// Effect of every disease and procedure on every medication, each
/// adjusted for its own backdoor set.
pub fn build_effect_matrices(
    graph: &CausalGraph,
    data: &BinaryDataset,
    space: &EntitySpace,
) -> Result<EffectMatrix> {
    let cell = |treatment: usize, outcome: usize| -> Result<f64> {
        let adjustment = backdoor_set(graph, data, space, treatment, outcome)?;
        Ok(estimate_ate(data, treatment, outcome, &adjustment))
    };
    let mut dm = vec![vec![0.0; space.n_medications]; space.n_diseases];
    for (d, row) in dm.iter_mut().enumerate() {
        for (m, entry) in row.iter_mut().enumerate() {
            *entry = cell(space.disease_var(d), space.medication_var(m))?;
        }
    }
    let mut pm = vec![vec![0.0; space.n_medications]; space.n_procedures];
    for (p, row) in pm.iter_mut().enumerate() {
        for (m, entry) in row.iter_mut().enumerate() {
            *entry = cell(space.procedure_var(p), space.medication_var(m))?;
        }
    }
    Ok(EffectMatrix { dm, pm })
}

/// Baseline association matrices for the non-causal comparison mode:
/// entry (t, m) is the conditional visit-level co-occurrence rate, the
/// fraction of visits containing t that also prescribe m. Shares the
/// [`EffectMatrix`] container (entries lie in [0, 1]; never-co-occurring
/// pairs are exactly 0).
pub fn cooccurrence_rates(data: &BinaryDataset, space: &EntitySpace) -> EffectMatrix {
    let rate = |treatment: usize, outcome: usize| -> f64 {
        let (n11, n10, _, _) = data.pair_counts(treatment, outcome);
        if n11 + n10 == 0 {
            0.0
        } else {
            n11 as f64 / (n11 + n10) as f64
        }
    };
    let dm = (0..space.n_diseases)
        .map(|d| {
            (0..space.n_medications)
                .map(|m| rate(space.disease_var(d), space.medication_var(m)))
                .collect()
        })
        .collect();
    let pm = (0..space.n_procedures)
        .map(|p| {
            (0..space.n_medications)
                .map(|m| rate(space.procedure_var(p), space.medication_var(m)))
                .collect()
        })
        .collect();
    EffectMatrix { dm, pm }
}

/// Equal-frequency binning of all pooled dm and pm entries into `r` types.
/// Boundary i (1-based, of r-1) sits at the value with sorted index
/// `i*n/r - 1`; duplicate boundaries collapse, so fewer than r types
/// emerge when the pool has few distinct values.
pub fn bin_effects(matrix: &EffectMatrix, r: usize) -> Result<EdgeTypeMap> {
    if r < 2 {
        return Err(Error::Config(format!("need at least 2 edge types, got {r}")));
    }
    let mut pool: Vec<f64> = matrix
        .dm
        .iter()
        .chain(matrix.pm.iter())
        .flat_map(|row| row.iter().copied())
        .collect();
    if pool.is_empty() {
        return Err(Error::Usage("cannot bin an empty effect matrix".into()));
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = pool.len();
    let mut boundaries = Vec::with_capacity(r - 1);
    for i in 1..r {
        let rank = i * n / r;
        if rank == 0 {
            continue;
        }
        let value = pool[rank - 1];
        if boundaries.last().is_none_or(|&last| value > last) {
            boundaries.push(value);
        }
    }
    let map = EdgeTypeMap { boundaries, dm: Vec::new(), pm: Vec::new() };
    let typed = |rows: &[Vec<f64>]| -> Vec<Vec<u8>> {
        rows.iter().map(|row| row.iter().map(|&v| map.bin_of(v)).collect()).collect()
    };
    let dm = typed(&matrix.dm);
    let pm = typed(&matrix.pm);
    Ok(EdgeTypeMap { dm, pm, ..map })
}

/// Dense CSV: header row of medication codes behind an empty corner cell,
/// then one row per treatment code. Float formatting is shortest
/// round-trip, so import reproduces values exactly.
pub fn matrix_to_csv(rows: &[Vec<f64>], row_vocab: &EntityVocab, col_vocab: &EntityVocab) -> String {
    render_csv(rows, row_vocab, col_vocab, |v| format!("{v}"))
}

pub fn types_to_csv(rows: &[Vec<u8>], row_vocab: &EntityVocab, col_vocab: &EntityVocab) -> String {
    render_csv(rows, row_vocab, col_vocab, |v| format!("{v}"))
}

fn render_csv<T: Copy>(
    rows: &[Vec<T>],
    row_vocab: &EntityVocab,
    col_vocab: &EntityVocab,
    fmt: impl Fn(T) -> String,
) -> String {
    debug_assert_eq!(rows.len(), row_vocab.len());
    let mut out = String::new();
    for code in col_vocab.codes() {
        out.push(',');
        out.push_str(code);
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        debug_assert_eq!(row.len(), col_vocab.len());
        out.push_str(row_vocab.code(i));
        for &v in row {
            out.push(',');
            out.push_str(&fmt(v));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(
    csv: &str,
    row_vocab: &EntityVocab,
    col_vocab: &EntityVocab,
) -> Result<Vec<Vec<f64>>> {
    parse_csv(csv, row_vocab, col_vocab, |cell, line| {
        cell.parse::<f64>().map_err(|_| Error::parse(line, format!("bad number {cell:?}")))
    })
}

pub fn types_from_csv(
    csv: &str,
    row_vocab: &EntityVocab,
    col_vocab: &EntityVocab,
) -> Result<Vec<Vec<u8>>> {
    parse_csv(csv, row_vocab, col_vocab, |cell, line| {
        cell.parse::<u8>().map_err(|_| Error::parse(line, format!("bad edge type {cell:?}")))
    })
}

fn parse_csv<T>(
    csv: &str,
    row_vocab: &EntityVocab,
    col_vocab: &EntityVocab,
    parse: impl Fn(&str, usize) -> Result<T>,
) -> Result<Vec<Vec<T>>> {
    let mut lines = csv.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "missing header row".to_string()))?;
    let cols: Vec<&str> = header.split(',').skip(1).collect();
    if cols != col_vocab.codes().iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::parse(1, "column codes do not match the medication vocabulary"));
    }
    let mut rows = Vec::with_capacity(row_vocab.len());
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let mut cells = line.split(',');
        let code = cells.next().unwrap_or("");
        if rows.len() >= row_vocab.len() || code != row_vocab.code(rows.len()) {
            return Err(Error::parse(
                line_no,
                format!("unexpected row code {code:?} for {}", row_vocab.kind().label()),
            ));
        }
        let row = cells.map(|c| parse(c, line_no)).collect::<Result<Vec<T>>>()?;
        if row.len() != col_vocab.len() {
            return Err(Error::parse(
                line_no,
                format!("expected {} values, got {}", col_vocab.len(), row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != row_vocab.len() {
        return Err(Error::Validation(format!(
            "expected {} rows, got {}",
            row_vocab.len(),
            rows.len()
        )));
    }
    Ok(rows)
}
