use std::collections::HashMap;

use super::{BinaryDataset, CausalGraph};
use crate::{Error, Result};

/// Bayesian-information-criterion score for Bernoulli variables with
/// add-one smoothed conditionals, cached per (variable, parent set).
///
/// The graph score decomposes over families:
/// `score(G) = sum_i local(X_i, parents_i)` where
///
/// ```text
/// local(X, Pa) = sum_config [ n0 * ln((n0+1)/(n+2)) + n1 * ln((n1+1)/(n+2)) ]
///                - 2^|Pa| * 0.5 * ln(rows)
/// ```
///
/// Every parent configuration carries one free parameter, so the penalty
/// counts all `2^|Pa|` configurations whether observed or not.
pub struct Scorer<'a> {
    data: &'a BinaryDataset,
    max_parents: usize,
    cache: HashMap<(usize, Vec<usize>), f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(data: &'a BinaryDataset, max_parents: usize) -> Self {
        Scorer { data, max_parents, cache: HashMap::new() }
    }

    pub fn max_parents(&self) -> usize {
        self.max_parents
    }

    pub fn local_score(&mut self, var: usize, parents: &[usize]) -> Result<f64> {
        if self.data.n_rows() == 0 {
            return Err(Error::Usage("cannot score an empty dataset".into()));
        }
        if var >= self.data.n_vars() {
            return Err(Error::Usage(format!("variable {var} out of range")));
        }
        if parents.len() > self.max_parents {
            return Err(Error::Usage(format!(
                "parent set of size {} exceeds the cap of {}",
                parents.len(),
                self.max_parents
            )));
        }
        let mut key_parents = parents.to_vec();
        key_parents.sort_unstable();
        for pair in key_parents.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::Usage(format!("duplicate parent {}", pair[0])));
            }
        }
        if key_parents.iter().any(|&p| p == var || p >= self.data.n_vars()) {
            return Err(Error::Usage("invalid parent set".into()));
        }

        let key = (var, key_parents);
        if let Some(&hit) = self.cache.get(&key) {
            return Ok(hit);
        }

        let counts = self.data.config_counts(var, &key.1);
        let mut log_lik = 0.0;
        for (n0, n1) in &counts {
            let denom = (*n0 + *n1) as f64 + 2.0;
            if *n0 > 0 {
                log_lik += *n0 as f64 * ((*n0 as f64 + 1.0) / denom).ln();
            }
            if *n1 > 0 {
                log_lik += *n1 as f64 * ((*n1 as f64 + 1.0) / denom).ln();
            }
        }
        let penalty = counts.len() as f64 * 0.5 * (self.data.n_rows() as f64).ln();
        let score = log_lik - penalty;
        self.cache.insert(key, score);
        Ok(score)
    }

    pub fn score_graph(&mut self, graph: &CausalGraph) -> Result<f64> {
        let mut total = 0.0;
        for var in 0..graph.n_vars() {
            let parents: Vec<usize> = graph.parents_of(var).iter().copied().collect();
            total += self.local_score(var, &parents)?;
        }
        Ok(total)
    }
}
