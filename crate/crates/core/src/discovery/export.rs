//! Graph persistence: a line-per-edge text form for inspection and a JSON
//! form carrying the config hash for cache validation. Both name entities
//! as `kind:code` so codes may repeat across vocabularies.

use serde::{Deserialize, Serialize};

use super::CausalGraph;
use crate::ehr::{EntityKind, PatientCohort};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct GraphJson {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub edges: Vec<GraphJsonEdge>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GraphJsonEdge {
    pub from: String,
    pub to: String,
}

pub const GRAPH_FORMAT_VERSION: u32 = 1;

fn token(cohort: &PatientCohort, var: usize) -> Result<String> {
    let space = cohort.space();
    let (kind, ordinal) = space.kind_of(var);
    let code = match kind {
        EntityKind::Disease => cohort.diseases.code(ordinal),
        EntityKind::Procedure => cohort.procedures.code(ordinal),
        EntityKind::Medication => cohort.medications.code(ordinal),
    };
    Ok(format!("{}:{}", kind.label(), code))
}

fn parse_token(cohort: &PatientCohort, token: &str) -> Result<usize> {
    let space = cohort.space();
    let (kind, code) = token
        .split_once(':')
        .ok_or_else(|| Error::Validation(format!("malformed entity token {token:?}, expected kind:code")))?;
    match kind {
        "disease" => Ok(space.disease_var(cohort.diseases.require(code)?)),
        "procedure" => Ok(space.procedure_var(cohort.procedures.require(code)?)),
        "medication" => Ok(space.medication_var(cohort.medications.require(code)?)),
        other => Err(Error::Validation(format!("unknown entity kind {other:?} in token {token:?}"))),
    }
}

/// One `parent -> child` line per edge, sorted by (parent, child) ordinal.
pub fn graph_to_text(graph: &CausalGraph, cohort: &PatientCohort) -> Result<String> {
    let mut out = String::new();
    for (from, to) in graph.edges() {
        out.push_str(&token(cohort, from)?);
        out.push_str(" -> ");
        out.push_str(&token(cohort, to)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn graph_from_text(text: &str, cohort: &PatientCohort) -> Result<CausalGraph> {
    let mut graph = CausalGraph::empty(cohort.space().total());
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (from, to) = line.split_once(" -> ").ok_or_else(|| {
            Error::parse(idx + 1, format!("expected \"parent -> child\", got {line:?}"))
        })?;
        let from = parse_token(cohort, from.trim()).map_err(|e| at_line(idx + 1, e))?;
        let to = parse_token(cohort, to.trim()).map_err(|e| at_line(idx + 1, e))?;
        graph.add_edge(from, to).map_err(|e| at_line(idx + 1, e))?;
    }
    Ok(graph)
}

fn at_line(line: usize, err: Error) -> Error {
    Error::parse(line, err.to_string())
}

pub fn graph_to_json(
    graph: &CausalGraph,
    cohort: &PatientCohort,
    config_hash: Option<&str>,
) -> Result<String> {
    let edges = graph
        .edges()
        .into_iter()
        .map(|(from, to)| {
            Ok(GraphJsonEdge { from: token(cohort, from)?, to: token(cohort, to)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = GraphJson {
        version: GRAPH_FORMAT_VERSION,
        config_hash: config_hash.map(str::to_owned),
        edges,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Validation(e.to_string()))
}

/// Returns the graph and the embedded config hash, if any.
pub fn graph_from_json(json: &str, cohort: &PatientCohort) -> Result<(CausalGraph, Option<String>)> {
    let doc: GraphJson =
        serde_json::from_str(json).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    if doc.version != GRAPH_FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported graph format version {} (expected {GRAPH_FORMAT_VERSION})",
            doc.version
        )));
    }
    let mut graph = CausalGraph::empty(cohort.space().total());
    for edge in &doc.edges {
        graph.add_edge(parse_token(cohort, &edge.from)?, parse_token(cohort, &edge.to)?)?;
    }
    Ok((graph, doc.config_hash))
}
