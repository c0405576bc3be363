//! Random k-fold assignment for cross-fitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    /// Validates an explicit assignment against `ds`.
    pub fn from_vec(ds: &Dataset, fold_of: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("k = {k}, need k >= 2")));
        }
        if fold_of.len() != ds.n() {
            return Err(Error::LengthMismatch {
                expected: ds.n(),
                found: fold_of.len(),
            });
        }
        let fa = FoldAssignment { fold_of, k };
        if fa.fold_of.iter().any(|&f| f >= k) || !fa.both_arms_everywhere(ds) {
            return Err(Error::DegenerateFold { attempts: 1 });
        }
        Ok(fa)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    /// Unit indices in fold `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == j).collect()
    }

    /// Unit indices outside fold `j`, ascending.
    pub fn complement(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != j).collect()
    }

    fn both_arms_everywhere(&self, ds: &Dataset) -> bool {
        let mut seen = vec![[false; 2]; self.k];
        for (i, &f) in self.fold_of.iter().enumerate() {
            seen[f][ds.t()[i] as usize] = true;
        }
        seen.iter().all(|s| s[0] && s[1])
    }
}

/// Shuffles unit indices and deals them round-robin into `k` folds, re-drawing
/// (up to [`MAX_REDRAWS`] times) until every fold holds both treatment arms.
pub fn kfold_split(ds: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k = {k}, need k >= 2")));
    }
    let n = ds.n();
    if n < 2 * k {
        return Err(Error::TooFewUnits { needed: 2 * k, have: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..MAX_REDRAWS {
        order.shuffle(&mut rng);
        let mut fold_of = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            fold_of[i] = pos % k;
        }
        let fa = FoldAssignment { fold_of, k };
        if fa.both_arms_everywhere(ds) {
            return Ok(fa);
        }
    }
    Err(Error::DegenerateFold {
        attempts: MAX_REDRAWS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn alternating(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let t = (0..n).map(|i| (i % 2) as u8).collect();
        Dataset::new(x, t, vec![0.0; n]).unwrap()
    }

    fn sizes(fa: &FoldAssignment) -> Vec<usize> {
        let mut s: Vec<usize> = (0..fa.k()).map(|j| fa.members(j).len()).collect();
        s.sort_unstable();
        s
    }

    #[test]
    fn exact_division() {
        let ds = alternating(10);
        let fa = kfold_split(&ds, 5, 3).unwrap();
        assert_eq!(sizes(&fa), vec![2; 5]);
    }

    #[test]
    fn remainder_distribution() {
        let ds = alternating(11);
        let fa = kfold_split(&ds, 5, 3).unwrap();
        assert_eq!(sizes(&fa), vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = alternating(40);
        assert_eq!(kfold_split(&ds, 4, 11).unwrap(), kfold_split(&ds, 4, 11).unwrap());
    }

    #[test]
    fn too_few_units_and_degenerate_folds() {
        let ds = alternating(7);
        assert!(matches!(kfold_split(&ds, 4, 0), Err(Error::TooFewUnits { .. })));
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64);
        let mut t = vec![0u8; 20];
        t[0] = 1;
        let ds = Dataset::new(x, t, vec![0.0; 20]).unwrap();
        assert!(matches!(
            kfold_split(&ds, 2, 0),
            Err(Error::DegenerateFold { attempts: MAX_REDRAWS })
        ));
    }
}
