//! Equivalence-class representation of a learned DAG.
//!
//! Two DAGs over binary observational data are indistinguishable when they
//! share a skeleton and collider set, so graphs are compared by their
//! completed partially directed form: v-structure arrows are kept and every
//! orientation they force (Meek rules R1-R3) is added; the rest of the
//! skeleton stays undirected. R4 only fires under external orientation
//! constraints, which never occur here.

use std::collections::BTreeSet;

use super::CausalGraph;

/// Edge state for an ordered variable pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMark {
    None,
    Undirected,
    /// Arrow from the first queried variable to the second.
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cpdag {
    n: usize,
    directed: BTreeSet<(usize, usize)>,
    /// Stored with the lower ordinal first.
    undirected: BTreeSet<(usize, usize)>,
}

impl Cpdag {
    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn mark(&self, a: usize, b: usize) -> EdgeMark {
        if self.directed.contains(&(a, b)) {
            EdgeMark::Forward
        } else if self.directed.contains(&(b, a)) {
            EdgeMark::Backward
        } else if self.undirected.contains(&(a.min(b), a.max(b))) {
            EdgeMark::Undirected
        } else {
            EdgeMark::None
        }
    }

    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.directed.iter().copied()
    }

    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.undirected.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.directed.len() + self.undirected.len()
    }
}

/// Working partially directed graph for the orientation closure.
struct Pdag {
    out: Vec<BTreeSet<usize>>,
    inc: Vec<BTreeSet<usize>>,
    und: Vec<BTreeSet<usize>>,
}

impl Pdag {
    fn new(n: usize) -> Self {
        Pdag { out: vec![BTreeSet::new(); n], inc: vec![BTreeSet::new(); n], und: vec![BTreeSet::new(); n] }
    }

    fn n(&self) -> usize {
        self.out.len()
    }

    fn adjacent(&self, a: usize, b: usize) -> bool {
        self.out[a].contains(&b) || self.inc[a].contains(&b) || self.und[a].contains(&b)
    }

    fn orient(&mut self, from: usize, to: usize) {
        self.und[from].remove(&to);
        self.und[to].remove(&from);
        self.out[from].insert(to);
        self.inc[to].insert(from);
    }
}

pub fn cpdag_from_dag(dag: &CausalGraph) -> Cpdag {
    let n = dag.n_vars();
    let mut pdag = Pdag::new(n);
    for (a, b) in dag.edges() {
        pdag.und[a].insert(b);
        pdag.und[b].insert(a);
    }

    // Colliders a -> c <- b with a, b non-adjacent keep their arrows.
    for c in 0..n {
        let parents: Vec<usize> = dag.parents_of(c).iter().copied().collect();
        for (i, &a) in parents.iter().enumerate() {
            for &b in &parents[i + 1..] {
                if !dag.has_edge(a, b) && !dag.has_edge(b, a) {
                    pdag.orient(a, c);
                    pdag.orient(b, c);
                }
            }
        }
    }

    meek_closure(&mut pdag);

    let mut directed = BTreeSet::new();
    let mut undirected = BTreeSet::new();
    for a in 0..n {
        for &b in &pdag.out[a] {
            directed.insert((a, b));
        }
        for &b in &pdag.und[a] {
            undirected.insert((a.min(b), a.max(b)));
        }
    }
    Cpdag { n, directed, undirected }
}

fn meek_closure(pdag: &mut Pdag) {
    let n = pdag.n();
    loop {
        let mut orientations: Vec<(usize, usize)> = Vec::new();

        for b in 0..n {
            for &c in &pdag.und[b] {
                // R1: a -> b, b - c, a and c non-adjacent  =>  b -> c.
                if pdag.inc[b].iter().any(|&a| a != c && !pdag.adjacent(a, c)) {
                    orientations.push((b, c));
                    continue;
                }
                // R2: b -> x -> c with b - c  =>  b -> c.
                if pdag.out[b].iter().any(|&x| pdag.out[x].contains(&c)) {
                    orientations.push((b, c));
                    continue;
                }
                // R3: b - c, b - d1, b - d2, d1 -> c, d2 -> c,
                // d1 and d2 non-adjacent  =>  b -> c.
                let spokes: Vec<usize> =
                    pdag.und[b].iter().copied().filter(|&d| d != c && pdag.out[d].contains(&c)).collect();
                let r3 = spokes
                    .iter()
                    .enumerate()
                    .any(|(i, &d1)| spokes[i + 1..].iter().any(|&d2| !pdag.adjacent(d1, d2)));
                if r3 {
                    orientations.push((b, c));
                }
            }
        }

        if orientations.is_empty() {
            return;
        }
        for (from, to) in orientations {
            // An earlier orientation this sweep may have consumed the edge.
            if pdag.und[from].contains(&to) {
                pdag.orient(from, to);
            }
        }
    }
}

/// Structural difference between two equivalence classes: the number of
/// unordered variable pairs whose edge mark (absent, undirected, or either
/// arrow) disagrees.
pub fn shd(a: &Cpdag, b: &Cpdag) -> usize {
    assert_eq!(a.n_vars(), b.n_vars(), "graphs must share a variable space");
    let n = a.n_vars();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if a.mark(i, j) != b.mark(i, j) {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dag(n: usize, edges: &[(usize, usize)]) -> CausalGraph {
        let mut g = CausalGraph::empty(n);
        for &(a, b) in edges {
            g.add_edge(a, b).unwrap();
        }
        g
    }

    /// V-structures (a, b, c) with a -> c <- b, a < b, a and b non-adjacent.
    fn v_structures(g: &CausalGraph) -> BTreeSet<(usize, usize, usize)> {
        let mut out = BTreeSet::new();
        for c in 0..g.n_vars() {
            let parents: Vec<usize> = g.parents_of(c).iter().copied().collect();
            for (i, &a) in parents.iter().enumerate() {
                for &b in &parents[i + 1..] {
                    if !g.has_edge(a, b) && !g.has_edge(b, a) {
                        out.insert((a.min(b), a.max(b), c));
                    }
                }
            }
        }
        out
    }

    /// Definition-level equivalence class: orient the skeleton every way
    /// that yields a DAG with identical v-structures; an edge is directed
    /// in the class representation iff all members orient it the same way.
    fn brute_force_cpdag(g: &CausalGraph) -> Cpdag {
        let skeleton: Vec<(usize, usize)> =
            g.edges().into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        let target = v_structures(g);
        let mut agree: Vec<Option<(usize, usize)>> = vec![None; skeleton.len()];
        let mut contested = vec![false; skeleton.len()];
        'mask: for mask in 0u32..1 << skeleton.len() {
            let mut member = CausalGraph::empty(g.n_vars());
            for (i, &(a, b)) in skeleton.iter().enumerate() {
                let (from, to) = if mask >> i & 1 == 0 { (a, b) } else { (b, a) };
                if member.add_edge(from, to).is_err() {
                    continue 'mask;
                }
            }
            if v_structures(&member) != target {
                continue;
            }
            for (i, &(a, b)) in skeleton.iter().enumerate() {
                let oriented = if mask >> i & 1 == 0 { (a, b) } else { (b, a) };
                match agree[i] {
                    None => agree[i] = Some(oriented),
                    Some(prev) if prev != oriented => contested[i] = true,
                    Some(_) => {}
                }
            }
        }
        let mut directed = BTreeSet::new();
        let mut undirected = BTreeSet::new();
        for (i, &(a, b)) in skeleton.iter().enumerate() {
            if contested[i] {
                undirected.insert((a, b));
            } else {
                directed.insert(agree[i].unwrap());
            }
        }
        Cpdag { n: g.n_vars(), directed, undirected }
    }

    #[test]
    fn single_edge_loses_its_orientation() {
        let c = cpdag_from_dag(&dag(2, &[(0, 1)]));
        assert_eq!(c.mark(0, 1), EdgeMark::Undirected);
    }

    #[test]
    fn collider_arrows_survive() {
        let c = cpdag_from_dag(&dag(3, &[(0, 2), (1, 2)]));
        assert_eq!(c.mark(0, 2), EdgeMark::Forward);
        assert_eq!(c.mark(2, 1), EdgeMark::Backward);
        assert_eq!(c.mark(0, 1), EdgeMark::None);
    }

    #[test]
    fn chain_and_fork_share_a_class() {
        let chain = cpdag_from_dag(&dag(3, &[(0, 1), (1, 2)]));
        let fork = cpdag_from_dag(&dag(3, &[(1, 0), (1, 2)]));
        assert_eq!(chain, fork);
        assert_eq!(chain.mark(0, 1), EdgeMark::Undirected);
        assert_eq!(chain.mark(1, 2), EdgeMark::Undirected);
    }

    #[test]
    fn meek_propagation_orients_the_tail_of_a_collider() {
        // 0 -> 2 <- 1 plus 2 -> 3: the collider stays, and 2 -> 3 must stay
        // directed or it would create a new collider at 2.
        let c = cpdag_from_dag(&dag(4, &[(0, 2), (1, 2), (2, 3)]));
        assert_eq!(c.mark(2, 3), EdgeMark::Forward);
    }

    #[test]
    fn matches_brute_force_on_every_three_node_dag() {
        let pairs = [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)];
        'mask: for mask in 0u32..1 << pairs.len() {
            let mut g = CausalGraph::empty(3);
            for (i, &(a, b)) in pairs.iter().enumerate() {
                if mask >> i & 1 == 1 && g.add_edge(a, b).is_err() {
                    continue 'mask;
                }
            }
            assert_eq!(cpdag_from_dag(&g), brute_force_cpdag(&g), "edges {:?}", g.edges());
        }
    }

    #[test]
    fn matches_brute_force_on_random_five_node_dags() {
        let mut rng = crate::rng::seeded(2024);
        for _ in 0..200 {
            let mut g = CausalGraph::empty(5);
            let mut order: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for i in 0..5 {
                for j in i + 1..5 {
                    if rng.gen_bool(0.45) {
                        g.add_edge(order[i], order[j]).unwrap();
                    }
                }
            }
            assert_eq!(cpdag_from_dag(&g), brute_force_cpdag(&g), "edges {:?}", g.edges());
        }
    }

    #[test]
    fn shd_counts_mark_disagreements() {
        let a = cpdag_from_dag(&dag(3, &[(0, 2), (1, 2)]));
        assert_eq!(shd(&a, &a), 0);
        // Chain class: 0-1 differs (absent vs undirected), 0-2 differs
        // (arrow vs absent), 1-2 differs (arrow vs undirected).
        let b = cpdag_from_dag(&dag(3, &[(0, 1), (1, 2)]));
        assert_eq!(shd(&a, &b), 3);
        let empty = cpdag_from_dag(&dag(3, &[]));
        assert_eq!(shd(&a, &empty), 2);
        assert_eq!(shd(&a, &b), shd(&b, &a));
    }
}
