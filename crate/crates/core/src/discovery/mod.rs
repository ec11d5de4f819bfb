//! Score-based causal structure discovery over visit-level binary data.
//!
//! The search is greedy in DAG space: a forward phase repeatedly applies
//! the best single-edge insertion while the decomposable score improves, a
//! backward phase does the same with deletions, the two alternate to a
//! fixed point, and a final pass accepts strictly improving single-edge
//! reversals. Candidate edges are prescreened by pointwise mutual
//! information so the quadratic proposal space stays tractable on larger
//! vocabularies.

mod cpdag;
mod dataset;
mod export;
mod graph;
mod score;
mod search;

pub use cpdag::{cpdag_from_dag, shd, Cpdag, EdgeMark};
pub use dataset::{build_dataset, BinaryDataset};
pub use export::{graph_from_json, graph_from_text, graph_to_json, graph_to_text, GraphJson};
pub use graph::{induce_visit_graphs, CausalGraph, RoleGraph, VisitGraphs};
pub use score::Scorer;
pub use search::{
    candidate_prescreen, greedy_search, AdmissiblePairs, MoveKind, MoveRecord, SearchConfig,
    SearchResult,
};
