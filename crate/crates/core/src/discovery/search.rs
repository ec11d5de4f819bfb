use super::{BinaryDataset, CausalGraph, Scorer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SearchConfig {
    pub max_parents: usize,
    /// Candidate edges are restricted to each variable's top-k PMI
    /// neighbours; `None` admits every pair.
    pub prescreen_k: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { max_parents: 3, prescreen_k: Some(10) }
    }
}

/// Symmetric admissibility bitmask over variable pairs.
#[derive(Debug, Clone)]
pub struct AdmissiblePairs {
    n: usize,
    bits: Vec<u64>,
}

impl AdmissiblePairs {
    fn all(n: usize) -> Self {
        let words = n.div_ceil(64);
        let mut pairs = AdmissiblePairs { n, bits: vec![u64::MAX; n * words] };
        for a in 0..n {
            pairs.clear(a, a);
        }
        pairs
    }

    fn none(n: usize) -> Self {
        let words = n.div_ceil(64);
        AdmissiblePairs { n, bits: vec![0; n * words] }
    }

    fn words(&self) -> usize {
        self.n.div_ceil(64)
    }

    fn mark(&mut self, a: usize, b: usize) {
        let w = self.words();
        self.bits[a * w + b / 64] |= 1 << (b % 64);
        self.bits[b * w + a / 64] |= 1 << (a % 64);
    }

    fn clear(&mut self, a: usize, b: usize) {
        let w = self.words();
        self.bits[a * w + b / 64] &= !(1 << (b % 64));
        self.bits[b * w + a / 64] &= !(1 << (a % 64));
    }

    pub fn admissible(&self, a: usize, b: usize) -> bool {
        self.bits[a * self.words() + b / 64] >> (b % 64) & 1 == 1
    }
}

/// Union of every variable's top-k PMI neighbourhood. The relation is
/// symmetric: a pair is admissible when either endpoint ranks the other.
pub fn candidate_prescreen(data: &BinaryDataset, k: usize) -> AdmissiblePairs {
    let mut pairs = AdmissiblePairs::none(data.n_vars());
    for var in 0..data.n_vars() {
        for other in data.top_pmi(var, k) {
            pairs.mark(var, other);
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Insert,
    Delete,
    Reverse,
}

/// One accepted search move; `parent`/`child` describe the edge before a
/// reversal flips it.
#[derive(Debug, Clone, Copy)]
pub struct MoveRecord {
    pub kind: MoveKind,
    pub parent: usize,
    pub child: usize,
    pub delta: f64,
    pub score_after: f64,
}

#[derive(Debug)]
pub struct SearchResult {
    pub graph: CausalGraph,
    pub moves: Vec<MoveRecord>,
    pub score: f64,
}

/// Greedy score-based structure search.
///
/// Determinism: candidates are scanned in (child, parent) order and a
/// candidate replaces the incumbent only on a strictly larger score delta,
/// so ties resolve toward the lowest child ordinal, then the lowest parent
/// ordinal. Every accepted move strictly improves the total score, which
/// both bounds the loop and makes the move log monotone.
pub fn greedy_search(data: &BinaryDataset, config: &SearchConfig) -> Result<SearchResult> {
    let n = data.n_vars();
    if n < 2 {
        return Err(Error::Usage(format!("search needs at least 2 variables, got {n}")));
    }
    if data.n_rows() == 0 {
        return Err(Error::Usage("search needs at least 1 row".into()));
    }
    if config.max_parents == 0 {
        return Err(Error::Config("max_parents must be at least 1".into()));
    }

    let admissible = match config.prescreen_k {
        Some(k) => candidate_prescreen(data, k),
        None => AdmissiblePairs::all(n),
    };

    let mut scorer = Scorer::new(data, config.max_parents);
    let mut graph = CausalGraph::empty(n);
    let mut locals = Vec::with_capacity(n);
    for var in 0..n {
        locals.push(scorer.local_score(var, &[])?);
    }
    let mut moves = Vec::new();

    loop {
        let inserted = exhaust(&mut graph, &mut scorer, &mut locals, &mut moves, &admissible, MoveKind::Insert)?;
        let deleted = exhaust(&mut graph, &mut scorer, &mut locals, &mut moves, &admissible, MoveKind::Delete)?;
        if !inserted && !deleted {
            break;
        }
    }
    exhaust(&mut graph, &mut scorer, &mut locals, &mut moves, &admissible, MoveKind::Reverse)?;

    Ok(SearchResult { graph, moves, score: locals.iter().sum() })
}

/// Applies the best move of one kind until none improves the score.
/// Returns whether any move was applied.
fn exhaust(
    graph: &mut CausalGraph,
    scorer: &mut Scorer,
    locals: &mut [f64],
    moves: &mut Vec<MoveRecord>,
    admissible: &AdmissiblePairs,
    kind: MoveKind,
) -> Result<bool> {
    let mut any = false;
    while let Some(record) = best_move(graph, scorer, locals, admissible, kind)? {
        apply_move(graph, scorer, locals, &record)?;
        moves.push(MoveRecord { score_after: locals.iter().sum(), ..record });
        any = true;
    }
    Ok(any)
}

fn best_move(
    graph: &CausalGraph,
    scorer: &mut Scorer,
    locals: &[f64],
    admissible: &AdmissiblePairs,
    kind: MoveKind,
) -> Result<Option<MoveRecord>> {
    let n = graph.n_vars();
    let mut best: Option<MoveRecord> = None;
    let mut consider = |record: MoveRecord| {
        if record.delta > 0.0 && best.as_ref().is_none_or(|b| record.delta > b.delta) {
            best = Some(record);
        }
    };

    for child in 0..n {
        let parents: Vec<usize> = graph.parents_of(child).iter().copied().collect();
        match kind {
            MoveKind::Insert => {
                if parents.len() >= scorer.max_parents() {
                    continue;
                }
                for parent in 0..n {
                    if parent == child
                        || graph.has_edge(parent, child)
                        || graph.has_edge(child, parent)
                        || !admissible.admissible(parent, child)
                        || graph.creates_cycle(parent, child)
                    {
                        continue;
                    }
                    let mut extended = parents.clone();
                    extended.push(parent);
                    let delta = scorer.local_score(child, &extended)? - locals[child];
                    consider(MoveRecord { kind, parent, child, delta, score_after: 0.0 });
                }
            }
            MoveKind::Delete => {
                for &parent in &parents {
                    let reduced: Vec<usize> =
                        parents.iter().copied().filter(|&p| p != parent).collect();
                    let delta = scorer.local_score(child, &reduced)? - locals[child];
                    consider(MoveRecord { kind, parent, child, delta, score_after: 0.0 });
                }
            }
            MoveKind::Reverse => {
                // Candidate: existing parent -> child becomes child -> parent.
                for &parent in &parents {
                    if graph.parents_of(parent).len() >= scorer.max_parents() {
                        continue;
                    }
                    // Reversal adds child -> parent, so it cycles iff some
                    // other directed path parent ~> child remains once the
                    // direct edge is removed.
                    if path_avoiding_edge(graph, parent, child, (parent, child)) {
                        continue;
                    }
                    let reduced: Vec<usize> =
                        parents.iter().copied().filter(|&p| p != parent).collect();
                    let mut gained: Vec<usize> =
                        graph.parents_of(parent).iter().copied().collect();
                    gained.push(child);
                    let delta = scorer.local_score(child, &reduced)?
                        + scorer.local_score(parent, &gained)?
                        - locals[child]
                        - locals[parent];
                    consider(MoveRecord { kind, parent, child, delta, score_after: 0.0 });
                }
            }
        }
    }
    Ok(best)
}

/// Is there a directed path `from ~> to` that never traverses `skip`?
fn path_avoiding_edge(
    graph: &CausalGraph,
    from: usize,
    to: usize,
    skip: (usize, usize),
) -> bool {
    let mut stack = vec![from];
    let mut seen = vec![false; graph.n_vars()];
    seen[from] = true;
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        for &c in graph.children_of(v) {
            if (v, c) == skip || seen[c] {
                continue;
            }
            seen[c] = true;
            stack.push(c);
        }
    }
    false
}

fn apply_move(
    graph: &mut CausalGraph,
    scorer: &mut Scorer,
    locals: &mut [f64],
    record: &MoveRecord,
) -> Result<()> {
    match record.kind {
        MoveKind::Insert => graph.add_edge(record.parent, record.child)?,
        MoveKind::Delete => graph.remove_edge(record.parent, record.child)?,
        MoveKind::Reverse => graph.reverse_edge(record.parent, record.child)?,
    }
    let refresh = |scorer: &mut Scorer, graph: &CausalGraph, var: usize| -> Result<f64> {
        let parents: Vec<usize> = graph.parents_of(var).iter().copied().collect();
        scorer.local_score(var, &parents)
    };
    locals[record.child] = refresh(scorer, graph, record.child)?;
    if record.kind == MoveKind::Reverse {
        locals[record.parent] = refresh(scorer, graph, record.parent)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::build_dataset;
    use crate::synth::{generate, ScmEdge, ScmSpec};

    fn dataset(rows: &[Vec<bool>]) -> BinaryDataset {
        BinaryDataset::from_rows(rows[0].len(), rows)
    }

    /// All DAGs over `n` labelled nodes (tiny n), by orientation subsets.
    fn all_dags(n: usize) -> Vec<CausalGraph> {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        let mut out = Vec::new();
        'mask: for mask in 0u32..1 << pairs.len() {
            let mut g = CausalGraph::empty(n);
            for (i, &(a, b)) in pairs.iter().enumerate() {
                if mask >> i & 1 == 1 && g.add_edge(a, b).is_err() {
                    continue 'mask;
                }
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn there_are_25_dags_on_three_nodes() {
        let mut seen = std::collections::BTreeSet::new();
        for g in all_dags(3) {
            seen.insert(g.edges());
        }
        assert_eq!(seen.len(), 25);
    }

    fn exhaustive_optimum(data: &BinaryDataset, max_parents: usize) -> f64 {
        let mut scorer = Scorer::new(data, max_parents);
        let mut seen = std::collections::BTreeSet::new();
        let mut best = f64::NEG_INFINITY;
        for g in all_dags(data.n_vars()) {
            if !seen.insert(g.edges()) {
                continue;
            }
            if (0..g.n_vars()).any(|v| g.parents_of(v).len() > max_parents) {
                continue;
            }
            best = best.max(scorer.score_graph(&g).unwrap());
        }
        best
    }

    #[test]
    fn strong_pairwise_dependence_is_recovered_as_an_adjacency() {
        let rows: Vec<Vec<bool>> = (0..400)
            .map(|i| {
                let x = i % 2 == 0;
                vec![x, x ^ (i % 10 == 0)] // y = x with 10% flips
            })
            .collect();
        let result = greedy_search(&dataset(&rows), &SearchConfig::default()).unwrap();
        assert_eq!(result.graph.edge_count(), 1);
        let (a, b) = result.graph.edges()[0];
        assert!(matches!((a, b), (0, 1) | (1, 0)));
    }

    #[test]
    fn independent_variables_stay_unconnected() {
        // Distinct bits of a full 512-cycle counter are exactly independent.
        let rows: Vec<Vec<bool>> =
            (0..512).map(|i| vec![i & 1 == 1, i >> 3 & 1 == 1, i >> 6 & 1 == 1]).collect();
        let result = greedy_search(&dataset(&rows), &SearchConfig::default()).unwrap();
        assert_eq!(result.graph.edge_count(), 0, "edges: {:?}", result.graph.edges());
    }

    #[test]
    fn move_log_is_monotone_and_matches_final_score() {
        let spec = chain_spec(900);
        let (cohort, _) = generate(&spec).unwrap();
        let data = build_dataset(&cohort);
        let result = greedy_search(&data, &SearchConfig::default()).unwrap();
        assert!(!result.moves.is_empty());
        let mut last = f64::NEG_INFINITY;
        for m in &result.moves {
            assert!(m.delta > 0.0, "non-improving move accepted: {m:?}");
            assert!(m.score_after > last);
            last = m.score_after;
        }
        assert_eq!(last, result.score);
        let mut scorer = Scorer::new(&data, 3);
        let recomputed = scorer.score_graph(&result.graph).unwrap();
        assert!((recomputed - result.score).abs() < 1e-9);
    }

    #[test]
    fn search_is_deterministic() {
        let spec = chain_spec(500);
        let (cohort, _) = generate(&spec).unwrap();
        let data = build_dataset(&cohort);
        let a = greedy_search(&data, &SearchConfig::default()).unwrap();
        let b = greedy_search(&data, &SearchConfig::default()).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.moves.len(), b.moves.len());
        for (x, y) in a.moves.iter().zip(&b.moves) {
            assert_eq!((x.kind, x.parent, x.child), (y.kind, y.parent, y.child));
            assert_eq!(x.delta.to_bits(), y.delta.to_bits());
        }
    }

    /// d0 anchor; chain d1 -> d2 -> m0, plus d1 -> m1.
    fn chain_spec(patients: usize) -> ScmSpec {
        let mut spec = ScmSpec {
            n_diseases: 3,
            n_procedures: 0,
            n_medications: 2,
            edges: vec![
                ScmEdge { from: 1, to: 2, weight: 3.0 },
                ScmEdge { from: 2, to: 3, weight: 4.0 },
                ScmEdge { from: 1, to: 4, weight: 4.0 },
            ],
            base_logits: vec![14.0, 0.0, -1.5, -2.0, -2.0],
            patients,
            visits_min: 1,
            visits_max: 1,
            seed: 31,
            allow_med_med: false,
            patient_intercept_sd: 0.0,
            ddi_pairs: vec![],
        };
        spec.base_logits[0] = 14.0;
        spec
    }

    #[test]
    fn recovers_planted_chain_skeleton() {
        let (cohort, _) = generate(&chain_spec(1500)).unwrap();
        let data = build_dataset(&cohort);
        let result = greedy_search(&data, &SearchConfig::default()).unwrap();
        let mut skeleton: Vec<(usize, usize)> = result
            .graph
            .edges()
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        skeleton.sort_unstable();
        assert_eq!(skeleton, vec![(1, 2), (1, 4), (2, 3)]);
    }

    #[test]
    fn respects_the_parent_cap() {
        // Five strong causes of one effect; cap at 3 parents.
        let mut rng_rows = Vec::new();
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        for _ in 0..3000 {
            let causes: Vec<bool> = (0..5).map(|_| next() % 2 == 0).collect();
            let sum = causes.iter().filter(|&&c| c).count();
            let effect = (next() % 100) < (5 + 90 * sum / 5) as u64;
            let mut row = causes;
            row.push(effect);
            rng_rows.push(row);
        }
        let result = greedy_search(
            &dataset(&rng_rows),
            &SearchConfig { max_parents: 3, prescreen_k: None },
        )
        .unwrap();
        for v in 0..result.graph.n_vars() {
            assert!(result.graph.parents_of(v).len() <= 3);
        }
    }

    #[test]
    fn prescreen_blocks_inadmissible_pairs() {
        // Perfect copies (0,1) and (2,3); k = 1 keeps only those pairings.
        let rows: Vec<Vec<bool>> = (0..200)
            .map(|i| {
                let a = i % 2 == 0;
                let b = (i / 2) % 2 == 0;
                vec![a, a, b, b]
            })
            .collect();
        let data = dataset(&rows);
        let pairs = candidate_prescreen(&data, 1);
        assert!(pairs.admissible(0, 1) && pairs.admissible(2, 3));
        assert!(!pairs.admissible(0, 2) && !pairs.admissible(1, 3));
        let result =
            greedy_search(&data, &SearchConfig { max_parents: 3, prescreen_k: Some(1) })
                .unwrap();
        for (a, b) in result.graph.edges() {
            assert!(pairs.admissible(a, b));
        }
    }

    #[test]
    fn greedy_matches_exhaustive_optimum_on_three_variable_instances() {
        // A batch of seeded 3-variable generators with varied structure.
        for seed in 0..12u64 {
            let spec = ScmSpec {
                n_diseases: 2,
                n_procedures: 0,
                n_medications: 1,
                edges: match seed % 4 {
                    0 => vec![ScmEdge { from: 0, to: 2, weight: 3.5 }],
                    1 => vec![
                        ScmEdge { from: 0, to: 1, weight: 2.5 },
                        ScmEdge { from: 1, to: 2, weight: 3.0 },
                    ],
                    2 => vec![
                        ScmEdge { from: 0, to: 2, weight: 3.0 },
                        ScmEdge { from: 1, to: 2, weight: -3.0 },
                    ],
                    _ => vec![],
                },
                base_logits: vec![1.0, -0.5, -1.0],
                patients: 700,
                visits_min: 1,
                visits_max: 1,
                seed,
                allow_med_med: false,
                patient_intercept_sd: 0.0,
                ddi_pairs: vec![],
            };
            let (cohort, _) = generate(&spec).unwrap();
            let data = build_dataset(&cohort);
            let config = SearchConfig { max_parents: 3, prescreen_k: None };
            let result = greedy_search(&data, &config).unwrap();
            let optimum = exhaustive_optimum(&data, 3);
            assert!(
                (result.score - optimum).abs() < 1e-9,
                "seed {seed}: greedy {} vs optimum {optimum}",
                result.score
            );
        }
    }

    #[test]
    fn degenerate_inputs_are_usage_errors() {
        let one_var = BinaryDataset::from_rows(1, &[vec![true]]);
        assert!(greedy_search(&one_var, &SearchConfig::default()).is_err());
        let no_rows = BinaryDataset::from_rows(2, &[]);
        assert!(greedy_search(&no_rows, &SearchConfig::default()).is_err());
    }
}
