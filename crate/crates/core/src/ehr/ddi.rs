use crate::{Error, Result};

/// Symmetric 0/1 drug-drug interaction table over the medication
/// vocabulary. The diagonal is always zero; pairs not listed in the source
/// file do not interact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DdiMatrix {
    n: usize,
    cells: Vec<u8>,
}

impl DdiMatrix {
    pub fn zeros(n: usize) -> Self {
        DdiMatrix { n, cells: vec![0; n * n] }
    }

    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut m = DdiMatrix::zeros(n);
        for &(a, b) in pairs {
            m.mark(a, b)?;
        }
        Ok(m)
    }

    pub fn mark(&mut self, a: usize, b: usize) -> Result<()> {
        if a >= self.n || b >= self.n {
            return Err(Error::Validation(format!(
                "interaction pair ({a}, {b}) out of range for {} medications",
                self.n
            )));
        }
        if a == b {
            return Err(Error::Validation(format!(
                "interaction pair ({a}, {a}) relates a medication to itself"
            )));
        }
        self.cells[a * self.n + b] = 1;
        self.cells[b * self.n + a] = 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn interacts(&self, a: usize, b: usize) -> bool {
        self.cells[a * self.n + b] != 0
    }

    /// Unordered interacting pairs (a < b), in lexicographic order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                if self.interacts(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Dense row-major copy as f64, for the interaction loss term.
    pub fn dense(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_with_zero_diagonal() {
        let m = DdiMatrix::from_pairs(4, &[(2, 0), (1, 3)]).unwrap();
        for a in 0..4 {
            assert!(!m.interacts(a, a));
            for b in 0..4 {
                assert_eq!(m.interacts(a, b), m.interacts(b, a));
            }
        }
        assert!(m.interacts(0, 2));
        assert_eq!(m.pairs(), vec![(0, 2), (1, 3)]);
    }

    #[test]
    fn rejects_self_pairs_and_out_of_range() {
        assert!(DdiMatrix::from_pairs(3, &[(1, 1)]).is_err());
        assert!(DdiMatrix::from_pairs(3, &[(0, 3)]).is_err());
    }
}
