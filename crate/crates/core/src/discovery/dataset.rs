use crate::ehr::PatientCohort;
use crate::{Error, Result};

/// Visit-level binary data in column-major bit-packed form: one row per
/// visit, one column per variable (diseases, then procedures, then
/// medications of the same visit). Bit packing makes the contingency
/// counting behind scoring and effect estimation a handful of word ops
/// per 64 rows.
#[derive(Debug, Clone)]
pub struct BinaryDataset {
    n_vars: usize,
    n_rows: usize,
    blocks: usize,
    cols: Vec<Vec<u64>>,
    /// Mask with the low `n_rows` bits set across blocks; keeps tail bits
    /// of the final block out of popcounts.
    valid: Vec<u64>,
}

impl BinaryDataset {
    pub fn from_rows(n_vars: usize, rows: &[Vec<bool>]) -> Self {
        let n_rows = rows.len();
        let blocks = n_rows.div_ceil(64);
        let mut cols = vec![vec![0u64; blocks]; n_vars];
        for (r, row) in rows.iter().enumerate() {
            debug_assert_eq!(row.len(), n_vars);
            for (v, &bit) in row.iter().enumerate() {
                if bit {
                    cols[v][r / 64] |= 1u64 << (r % 64);
                }
            }
        }
        let mut valid = vec![u64::MAX; blocks];
        if n_rows % 64 != 0 {
            if let Some(last) = valid.last_mut() {
                *last = (1u64 << (n_rows % 64)) - 1;
            }
        }
        BinaryDataset { n_vars, n_rows, blocks, cols, valid }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn get(&self, row: usize, var: usize) -> bool {
        self.cols[var][row / 64] >> (row % 64) & 1 == 1
    }

    pub fn count_ones(&self, var: usize) -> u64 {
        self.cols[var].iter().map(|b| b.count_ones() as u64).sum()
    }

    /// 2x2 table for a pair: (n11, n10, n01, n00).
    pub fn pair_counts(&self, a: usize, b: usize) -> (u64, u64, u64, u64) {
        let (mut n11, mut n1x, mut nx1) = (0u64, 0u64, 0u64);
        for i in 0..self.blocks {
            let (ca, cb) = (self.cols[a][i], self.cols[b][i]);
            n11 += (ca & cb).count_ones() as u64;
            n1x += ca.count_ones() as u64;
            nx1 += cb.count_ones() as u64;
        }
        let n = self.n_rows as u64;
        (n11, n1x - n11, nx1 - n11, n + n11 - n1x - nx1)
    }

    /// For each of the `2^parents.len()` parent configurations (bit i of the
    /// configuration index = value of `parents[i]`), the number of rows
    /// where `child` is 0 and where it is 1.
    pub fn config_counts(&self, child: usize, parents: &[usize]) -> Vec<(u64, u64)> {
        let n_configs = 1usize << parents.len();
        let mut out = Vec::with_capacity(n_configs);
        for config in 0..n_configs {
            let (mut rows, mut ones) = (0u64, 0u64);
            for i in 0..self.blocks {
                let mut mask = self.valid[i];
                for (bit, &p) in parents.iter().enumerate() {
                    let col = self.cols[p][i];
                    mask &= if config >> bit & 1 == 1 { col } else { !col };
                }
                rows += mask.count_ones() as u64;
                ones += (mask & self.cols[child][i]).count_ones() as u64;
            }
            out.push((rows - ones, ones));
        }
        out
    }

    /// Rows where every `ones` variable is 1 and every `zeros` variable
    /// is 0.
    pub fn count_where(&self, ones: &[usize], zeros: &[usize]) -> u64 {
        let mut total = 0u64;
        for i in 0..self.blocks {
            let mut mask = self.valid[i];
            for &v in ones {
                mask &= self.cols[v][i];
            }
            for &v in zeros {
                mask &= !self.cols[v][i];
            }
            total += mask.count_ones() as u64;
        }
        total
    }

    /// Restriction to a subset of columns (row set unchanged). `vars[i]`
    /// becomes variable `i` of the projection.
    pub fn project(&self, vars: &[usize]) -> Result<BinaryDataset> {
        for &v in vars {
            if v >= self.n_vars {
                return Err(Error::Usage(format!("projection variable {v} out of range")));
            }
        }
        Ok(BinaryDataset {
            n_vars: vars.len(),
            n_rows: self.n_rows,
            blocks: self.blocks,
            cols: vars.iter().map(|&v| self.cols[v].clone()).collect(),
            valid: self.valid.clone(),
        })
    }

    /// Add-one smoothed pointwise mutual information of the events
    /// "a = 1" and "b = 1". Smoothing keeps sparse pairs finite.
    pub fn pmi(&self, a: usize, b: usize) -> f64 {
        let (n11, n10, n01, _) = self.pair_counts(a, b);
        let n = self.n_rows as f64 + 4.0;
        let p11 = (n11 as f64 + 1.0) / n;
        let pa = (n11 as f64 + n10 as f64 + 2.0) / n;
        let pb = (n11 as f64 + n01 as f64 + 2.0) / n;
        (p11 / (pa * pb)).ln()
    }

    /// The `k` other variables with the highest PMI against `var`,
    /// ties broken toward lower ordinals.
    pub fn top_pmi(&self, var: usize, k: usize) -> Vec<usize> {
        let mut ranked: Vec<(f64, usize)> = (0..self.n_vars)
            .filter(|&v| v != var)
            .map(|v| (self.pmi(var, v), v))
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        ranked.truncate(k);
        ranked.into_iter().map(|(_, v)| v).collect()
    }
}

/// One row per visit over the unified variable space; medication columns
/// reflect the visit's own prescriptions.
pub fn build_dataset(cohort: &PatientCohort) -> BinaryDataset {
    let space = cohort.space();
    let mut rows = Vec::with_capacity(cohort.n_visits());
    for visit in cohort.visits() {
        let mut row = vec![false; space.total()];
        for &d in &visit.diseases {
            row[space.disease_var(d)] = true;
        }
        for &p in &visit.procedures {
            row[space.procedure_var(p)] = true;
        }
        for &m in &visit.medications {
            row[space.medication_var(m)] = true;
        }
        rows.push(row);
    }
    BinaryDataset::from_rows(space.total(), rows.as_slice())
}
