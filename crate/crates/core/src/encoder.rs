//! Per-visit state encoding: entity embeddings, attention over causal
//! roles, relational graph convolution over effect-typed bipartite graphs,
//! and residual aggregation into one concatenated visit vector.

use std::collections::BTreeSet;

use crate::autodiff::{NodeId, Tape};
use crate::discovery::{RoleGraph, VisitGraphs};
use crate::effects::{EdgeTypeMap, EffectMatrix};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ParameterLeaves};

/// Causal role of an entity inside one visit, read off the induced
/// homogeneous graph: sources initiate, sinks are influenced, interior
/// nodes do both, isolated nodes neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Causal = 0,
    Effect = 1,
    Middle = 2,
    Independent = 3,
}

pub const N_ROLES: usize = 4;

pub fn dsa_classify(ordinal: usize, graph: &RoleGraph) -> Result<Role> {
    let (ins, outs) = match (graph.in_degree(ordinal), graph.out_degree(ordinal)) {
        (Some(i), Some(o)) => (i, o),
        _ => {
            return Err(Error::Usage(format!(
                "entity {ordinal} is not a node of the visit graph"
            )))
        }
    };
    Ok(match (ins > 0, outs > 0) {
        (false, true) => Role::Causal,
        (true, false) => Role::Effect,
        (true, true) => Role::Middle,
        (false, false) => Role::Independent,
    })
}

/// Embedding lookup: row `ordinal` of a leaf table.
pub fn embed(tape: &mut Tape, table: NodeId, ordinal: usize) -> Result<NodeId> {
    if ordinal >= tape.rows(table) {
        return Err(Error::Usage(format!(
            "embedding ordinal {ordinal} out of range ({} rows)",
            tape.rows(table)
        )));
    }
    Ok(tape.row(table, ordinal))
}

/// Attention weights over role groups: a logit w·g + b per non-empty
/// group, softmax across those, nothing for empty groups. Sums to 1 by
/// construction; a lone group gets weight exactly 1.
pub fn dsa_weights(
    tape: &mut Tape,
    groups: &[Option<NodeId>; N_ROLES],
    w: NodeId,
    b: NodeId,
) -> Result<[Option<NodeId>; N_ROLES]> {
    let present: Vec<usize> = (0..N_ROLES).filter(|&r| groups[r].is_some()).collect();
    if present.is_empty() {
        return Err(Error::Usage("attention over four empty role groups".into()));
    }
    let logits: Vec<NodeId> = present
        .iter()
        .map(|&r| {
            let projected = tape.dot(w, groups[r].unwrap());
            tape.add(projected, b)
        })
        .collect();
    let stacked = tape.stack_scalars(&logits);
    let soft = tape.softmax(stacked);
    let mut out = [None; N_ROLES];
    for (k, &r) in present.iter().enumerate() {
        out[r] = Some(tape.index(soft, k));
    }
    Ok(out)
}

/// Undirected graph with a relation type per edge; nodes are dense indices
/// into the caller's embedding list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypedGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize, u8)>,
}

/// Typed message passing: per layer, h_i <- relu(W0 h_i + sum over
/// relations r of (I + Theta_r) · mean of h_j over r-neighbors j). Relation
/// terms with no neighbors are skipped, so an isolated node reduces to
/// relu(W0 h).
pub fn rgcn_forward(
    tape: &mut Tape,
    inputs: &[NodeId],
    graph: &TypedGraph,
    self_weights: &[NodeId],
    relation_weights: &[Vec<NodeId>],
    n_relations: usize,
) -> Result<Vec<NodeId>> {
    if inputs.len() != graph.n_nodes {
        return Err(Error::Usage(format!(
            "{} embeddings for {} graph nodes",
            inputs.len(),
            graph.n_nodes
        )));
    }
    let mut neighbors: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n_relations]; graph.n_nodes];
    for &(a, b, t) in &graph.edges {
        if a >= graph.n_nodes || b >= graph.n_nodes {
            return Err(Error::Usage(format!(
                "edge ({a}, {b}) outside the {}-node graph",
                graph.n_nodes
            )));
        }
        if usize::from(t) >= n_relations {
            return Err(Error::Usage(format!(
                "edge type {t} outside the {n_relations} relations"
            )));
        }
        neighbors[a][usize::from(t)].push(b);
        neighbors[b][usize::from(t)].push(a);
    }
    let mut current = inputs.to_vec();
    for (w0, relations) in self_weights.iter().zip(relation_weights) {
        let mut next = Vec::with_capacity(current.len());
        for (i, buckets) in neighbors.iter().enumerate() {
            let mut terms = vec![tape.matvec(*w0, current[i])];
            for (theta, bucket) in relations.iter().zip(buckets) {
                if bucket.is_empty() {
                    continue;
                }
                let stacked: Vec<NodeId> = bucket.iter().map(|&j| current[j]).collect();
                let total = tape.sum_list(&stacked);
                let mean = tape.scale_const(total, 1.0 / bucket.len() as f64);
                let updated = tape.matvec(*theta, mean);
                terms.push(tape.add(mean, updated));
            }
            let summed = tape.sum_list(&terms);
            next.push(tape.relu(summed));
        }
        current = next;
    }
    Ok(current)
}

/// Relation type per (treatment, medication) pair, `None` meaning no edge.
/// Built either from binned effect magnitudes (every pair typed) or from
/// bare co-occurrence presence (one type, absent pairs unlinked).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeTyping {
    pub dm: Vec<Vec<Option<u8>>>,
    pub pm: Vec<Vec<Option<u8>>>,
}

impl EdgeTyping {
    pub fn from_bins(map: &EdgeTypeMap) -> EdgeTyping {
        let lift = |m: &Vec<Vec<u8>>| m.iter().map(|r| r.iter().map(|&t| Some(t)).collect()).collect();
        EdgeTyping { dm: lift(&map.dm), pm: lift(&map.pm) }
    }

    pub fn presence(rates: &EffectMatrix) -> EdgeTyping {
        let lift = |m: &Vec<Vec<f64>>| {
            m.iter()
                .map(|r| r.iter().map(|&v| if v > 0.0 { Some(0) } else { None }).collect())
                .collect()
        };
        EdgeTyping { dm: lift(&rates.dm), pm: lift(&rates.pm) }
    }
}

/// How the role-attention branch contributes to an entity's representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsaMode {
    /// Softmax-weighted: contribution h + w_role·h + conv.
    Learned,
    /// Every weight forced to 1: contribution h + h + conv.
    ForcedOne,
    /// Branch dropped: contribution h + conv.
    Removed,
}

/// Forward-pass record for diffing ablations: which typed edges fed the
/// convolution and which attention weight each role group received
/// (kind-major: diseases, procedures, medications).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisitTrace {
    pub weights: [[f64; N_ROLES]; 3],
    pub edges: Vec<(usize, usize, u8)>,
    pub roles: Vec<(usize, usize, Role)>,
}

/// One visit's encoded state: per-kind set vectors and their
/// concatenation.
#[derive(Debug, Clone, Copy)]
pub struct VisitEncoding {
    pub h_d: NodeId,
    pub h_p: NodeId,
    pub h_m: NodeId,
    pub h_v: NodeId,
}

pub struct EncodeContext<'a> {
    pub diseases: &'a BTreeSet<usize>,
    pub procedures: &'a BTreeSet<usize>,
    pub prev_medications: &'a BTreeSet<usize>,
    pub graphs: &'a VisitGraphs,
    pub typing: &'a EdgeTyping,
    pub dsa_mode: DsaMode,
    /// Inverted-dropout multipliers for h_v, training only; length 3·dim.
    pub dropout: Option<&'a [f64]>,
}

/// Encodes one visit. Per entity the contribution is base embedding plus
/// the role-weighted branch (per `dsa_mode`) plus the graph-convolution
/// output; each kind's vector is the sum over its entities, zero when the
/// kind is absent; h_v is the three-segment concatenation.
pub fn encode_visit_state(
    tape: &mut Tape,
    leaves: &ParameterLeaves,
    dims: &ModelDims,
    ctx: &EncodeContext,
    mut trace: Option<&mut VisitTrace>,
) -> Result<VisitEncoding> {
    check_typing_shape(ctx.typing, dims)?;
    let d_list: Vec<usize> = ctx.diseases.iter().copied().collect();
    let p_list: Vec<usize> = ctx.procedures.iter().copied().collect();
    let m_list: Vec<usize> = ctx.prev_medications.iter().copied().collect();

    let mut base = Vec::with_capacity(d_list.len() + p_list.len() + m_list.len());
    for &d in &d_list {
        base.push(embed(tape, leaves.embed_d, d)?);
    }
    for &p in &p_list {
        base.push(embed(tape, leaves.embed_p, p)?);
    }
    for &m in &m_list {
        base.push(embed(tape, leaves.embed_m, m)?);
    }

    let med_offset = d_list.len() + p_list.len();
    let mut edges = Vec::new();
    for (i, &d) in d_list.iter().enumerate() {
        for (k, &m) in m_list.iter().enumerate() {
            if let Some(t) = ctx.typing.dm[d][m] {
                edges.push((i, med_offset + k, t));
            }
        }
    }
    for (j, &p) in p_list.iter().enumerate() {
        for (k, &m) in m_list.iter().enumerate() {
            if let Some(t) = ctx.typing.pm[p][m] {
                edges.push((d_list.len() + j, med_offset + k, t));
            }
        }
    }
    let graph = TypedGraph { n_nodes: base.len(), edges: edges.clone() };
    let conv = rgcn_forward(
        tape,
        &base,
        &graph,
        &leaves.rgcn_self,
        &leaves.rgcn_rel,
        dims.n_relations,
    )?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.edges = edges;
    }

    let kinds = [
        (&d_list, &ctx.graphs.diseases, 0usize),
        (&p_list, &ctx.graphs.procedures, 1),
        (&m_list, &ctx.graphs.medications, 2),
    ];
    let mut segments = Vec::with_capacity(3);
    let mut offset = 0;
    for (list, role_graph, kind) in kinds {
        let segment = kind_segment(
            tape,
            dims.dim,
            list,
            &base[offset..offset + list.len()],
            &conv[offset..offset + list.len()],
            role_graph,
            leaves.dsa[kind],
            ctx.dsa_mode,
            kind,
            &mut trace,
        )?;
        segments.push(segment);
        offset += list.len();
    }
    let (h_d, h_p, h_m) = (segments[0], segments[1], segments[2]);
    let mut h_v = tape.concat(&segments);
    if let Some(mask) = ctx.dropout {
        if mask.len() != 3 * dims.dim {
            return Err(Error::Usage(format!(
                "dropout mask length {} for a {}-wide visit vector",
                mask.len(),
                3 * dims.dim
            )));
        }
        h_v = tape.mul_mask(h_v, mask.to_vec());
    }
    Ok(VisitEncoding { h_d, h_p, h_m, h_v })
}

fn check_typing_shape(typing: &EdgeTyping, dims: &ModelDims) -> Result<()> {
    let ok = typing.dm.len() == dims.n_diseases
        && typing.pm.len() == dims.n_procedures
        && typing.dm.iter().all(|r| r.len() == dims.n_medications)
        && typing.pm.iter().all(|r| r.len() == dims.n_medications);
    if ok {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "edge typing shaped {}x / {}x does not match {} diseases, {} procedures, {} medications",
            typing.dm.len(),
            typing.pm.len(),
            dims.n_diseases,
            dims.n_procedures,
            dims.n_medications
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn kind_segment(
    tape: &mut Tape,
    dim: usize,
    list: &[usize],
    base: &[NodeId],
    conv: &[NodeId],
    role_graph: &RoleGraph,
    dsa: (NodeId, NodeId),
    mode: DsaMode,
    kind: usize,
    trace: &mut Option<&mut VisitTrace>,
) -> Result<NodeId> {
    if list.is_empty() {
        return Ok(tape.zeros(dim));
    }
    let roles: Option<Vec<Role>> = match mode {
        DsaMode::Removed => None,
        _ => Some(
            list.iter().map(|&e| dsa_classify(e, role_graph)).collect::<Result<Vec<Role>>>()?,
        ),
    };
    let weights: Option<[Option<NodeId>; N_ROLES]> = match (mode, &roles) {
        (DsaMode::Learned, Some(roles)) => {
            let mut members: [Vec<NodeId>; N_ROLES] = Default::default();
            for (i, &role) in roles.iter().enumerate() {
                members[role as usize].push(base[i]);
            }
            let groups: [Option<NodeId>; N_ROLES] = std::array::from_fn(|r| {
                if members[r].is_empty() {
                    None
                } else {
                    Some(tape.sum_list(&members[r]))
                }
            });
            Some(dsa_weights(tape, &groups, dsa.0, dsa.1)?)
        }
        _ => None,
    };
    if let Some(tr) = trace.as_deref_mut() {
        if let Some(roles) = &roles {
            for (i, &role) in roles.iter().enumerate() {
                tr.roles.push((kind, list[i], role));
            }
            for r in 0..N_ROLES {
                tr.weights[kind][r] = match (&weights, mode) {
                    (Some(w), _) => w[r].map(|id| tape.scalar(id)).unwrap_or(0.0),
                    (None, DsaMode::ForcedOne) => {
                        if roles.iter().any(|&x| x as usize == r) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0,
                };
            }
        }
    }
    let contributions: Vec<NodeId> = (0..list.len())
        .map(|i| {
            let mut terms = vec![base[i], conv[i]];
            match (mode, &roles, &weights) {
                (DsaMode::Learned, Some(roles), Some(weights)) => {
                    let w = weights[roles[i] as usize].expect("member of an empty role group");
                    terms.push(tape.scale(base[i], w));
                }
                (DsaMode::ForcedOne, _, _) => terms.push(base[i]),
                _ => {}
            }
            tape.sum_list(&terms)
        })
        .collect();
    Ok(tape.sum_list(&contributions))
}
