use std::collections::{BTreeMap, BTreeSet};

use crate::ehr::EntitySpace;
use crate::{Error, Result};

/// Directed acyclic graph over the unified variable space. Acyclicity is
/// an invariant: every mutation that could close a cycle is rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalGraph {
    n: usize,
    parents: Vec<BTreeSet<usize>>,
    children: Vec<BTreeSet<usize>>,
}

impl CausalGraph {
    pub fn empty(n: usize) -> Self {
        CausalGraph { n, parents: vec![BTreeSet::new(); n], children: vec![BTreeSet::new(); n] }
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.children[from].contains(&to)
    }

    pub fn parents_of(&self, var: usize) -> &BTreeSet<usize> {
        &self.parents[var]
    }

    pub fn children_of(&self, var: usize) -> &BTreeSet<usize> {
        &self.children[var]
    }

    /// Edges as (parent, child), lexicographically sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for from in 0..self.n {
            for &to in &self.children[from] {
                out.push((from, to));
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(|c| c.len()).sum()
    }

    fn check_pair(&self, from: usize, to: usize) -> Result<()> {
        if from >= self.n || to >= self.n {
            return Err(Error::Usage(format!("edge ({from}, {to}) out of range")));
        }
        if from == to {
            return Err(Error::Usage(format!("self-loop on variable {from}")));
        }
        Ok(())
    }

    /// Would adding `from -> to` close a cycle? True iff `to` already
    /// reaches `from` through directed edges.
    pub fn creates_cycle(&self, from: usize, to: usize) -> bool {
        if from == to {
            return true;
        }
        let mut stack = vec![to];
        let mut seen = vec![false; self.n];
        seen[to] = true;
        while let Some(v) = stack.pop() {
            if v == from {
                return true;
            }
            for &c in &self.children[v] {
                if !seen[c] {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        false
    }

    pub fn add_edge(&mut self, from: usize, to: usize) -> Result<()> {
        self.check_pair(from, to)?;
        if self.has_edge(from, to) {
            return Err(Error::Usage(format!("edge ({from}, {to}) already present")));
        }
        if self.creates_cycle(from, to) {
            return Err(Error::Usage(format!("edge ({from}, {to}) would create a cycle")));
        }
        self.children[from].insert(to);
        self.parents[to].insert(from);
        Ok(())
    }

    pub fn remove_edge(&mut self, from: usize, to: usize) -> Result<()> {
        self.check_pair(from, to)?;
        if !self.has_edge(from, to) {
            return Err(Error::Usage(format!("edge ({from}, {to}) not present")));
        }
        self.children[from].remove(&to);
        self.parents[to].remove(&from);
        Ok(())
    }

    pub fn reverse_edge(&mut self, from: usize, to: usize) -> Result<()> {
        self.remove_edge(from, to)?;
        if let Err(e) = self.add_edge(to, from) {
            // restore before reporting
            self.children[from].insert(to);
            self.parents[to].insert(from);
            return Err(e);
        }
        Ok(())
    }

    /// A topological order; always succeeds because acyclicity is
    /// maintained by construction.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut indegree: Vec<usize> = (0..self.n).map(|v| self.parents[v].len()).collect();
        let mut queue: Vec<usize> = (0..self.n).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(self.n);
        let mut head = 0;
        while head < queue.len() {
            let v = queue[head];
            head += 1;
            order.push(v);
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push(c);
                }
            }
        }
        debug_assert_eq!(order.len(), self.n, "graph invariant violated: cycle");
        order
    }
}

/// A homogeneous directed graph over the entities of one kind present in a
/// visit, used to classify each entity's causal role by its degrees.
/// Nodes are within-kind ordinals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoleGraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    in_deg: BTreeMap<usize, usize>,
    out_deg: BTreeMap<usize, usize>,
}

impl RoleGraph {
    pub fn new(nodes: &BTreeSet<usize>, edges: Vec<(usize, usize)>) -> Self {
        let mut in_deg: BTreeMap<usize, usize> = nodes.iter().map(|&v| (v, 0)).collect();
        let mut out_deg = in_deg.clone();
        for &(from, to) in &edges {
            debug_assert!(nodes.contains(&from) && nodes.contains(&to));
            *out_deg.get_mut(&from).unwrap() += 1;
            *in_deg.get_mut(&to).unwrap() += 1;
        }
        RoleGraph { nodes: nodes.iter().copied().collect(), edges, in_deg, out_deg }
    }

    pub fn contains(&self, ordinal: usize) -> bool {
        self.in_deg.contains_key(&ordinal)
    }

    pub fn in_degree(&self, ordinal: usize) -> Option<usize> {
        self.in_deg.get(&ordinal).copied()
    }

    pub fn out_degree(&self, ordinal: usize) -> Option<usize> {
        self.out_deg.get(&ordinal).copied()
    }
}

/// Homogeneous subgraphs for one visit: diseases and procedures of the
/// current visit, medications of the previous one. Cross-kind edges of the
/// global graph are not part of these views; they are consumed by effect
/// estimation instead.
#[derive(Debug, Clone)]
pub struct VisitGraphs {
    pub diseases: RoleGraph,
    pub procedures: RoleGraph,
    pub medications: RoleGraph,
}

pub fn induce_visit_graphs(
    graph: &CausalGraph,
    space: &EntitySpace,
    diseases: &BTreeSet<usize>,
    procedures: &BTreeSet<usize>,
    prev_medications: &BTreeSet<usize>,
) -> VisitGraphs {
    let induce = |nodes: &BTreeSet<usize>, to_var: &dyn Fn(usize) -> usize| -> RoleGraph {
        let mut edges = Vec::new();
        for &a in nodes {
            for &b in nodes {
                if a != b && graph.has_edge(to_var(a), to_var(b)) {
                    edges.push((a, b));
                }
            }
        }
        RoleGraph::new(nodes, edges)
    };
    VisitGraphs {
        diseases: induce(diseases, &|d| space.disease_var(d)),
        procedures: induce(procedures, &|p| space.procedure_var(p)),
        medications: induce(prev_medications, &|m| space.medication_var(m)),
    }
}
