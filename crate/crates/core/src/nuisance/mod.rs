//! Nuisance functions: the propensity p_hat(x) and the outcome model mu_hat(x, t),
//! fitted with cross-fitting.

pub mod basis;
pub mod outcome;
pub mod propensity;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::folds::FoldAssignment;

pub use basis::{BasisExpansion, BasisKind};
pub use outcome::{fit_outcome, OutcomeConfig, OutcomeLearner, OutcomeMode, OutcomeModel};
pub use propensity::{fit_propensity, PropensityConfig, PropensityModel};

/// Cholesky solve with a small diagonal jitter as fallback.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(&b));
    }
    let scale = a.diagonal().amax().max(1.0);
    let mut jittered = a;
    for j in 0..jittered.nrows() {
        jittered[(j, j)] += 1e-10 * scale;
    }
    jittered.cholesky().map(|c| c.solve(&b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NuisanceConfig {
    pub propensity: PropensityConfig,
    pub outcome: OutcomeConfig,
    /// Fit each fold's models on the fold itself instead of its complement.
    pub within_fold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisancePair {
    pub propensity: PropensityModel,
    pub outcome: OutcomeModel,
    pub fitted_on: Vec<usize>,
}

impl NuisancePair {
    pub fn fit(ds: &Dataset, idx: &[usize], cfg: &NuisanceConfig) -> Result<NuisancePair> {
        Ok(NuisancePair {
            propensity: fit_propensity(ds, idx, &cfg.propensity)?,
            outcome: fit_outcome(ds, idx, &cfg.outcome)?,
            fitted_on: idx.to_vec(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<NuisancePair> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NuisancePair> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Per-unit nuisance evaluations: p_hat(x_i), mu_hat(x_i, 0), mu_hat(x_i, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceValues {
    pub p_hat: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    /// Whether each p_hat sits on a clip bound.
    pub clipped: Vec<bool>,
}

impl NuisanceValues {
    pub fn new(p_hat: Vec<f64>, mu0: Vec<f64>, mu1: Vec<f64>) -> Result<Self> {
        let n = p_hat.len();
        for len in [mu0.len(), mu1.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, found: len });
            }
        }
        if let Some(i) = p_hat.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::DomainError(format!("p_hat[{i}] = {} outside (0, 1)", p_hat[i])));
        }
        if mu0.iter().chain(&mu1).any(|v| !v.is_finite()) {
            return Err(Error::DomainError("non-finite outcome prediction".into()));
        }
        Ok(NuisanceValues {
            clipped: vec![false; n],
            p_hat,
            mu0,
            mu1,
        })
    }

    /// Oracle nuisances taken from the ground truth (no clipping).
    pub fn from_truth(truth: &GroundTruth) -> Result<Self> {
        let p = truth.p_true.clone().ok_or(Error::NoGroundTruth)?;
        Self::new(p, truth.mu0.clone(), truth.mu1.clone())
    }

    /// Evaluates one fitted pair on every unit of `ds`.
    pub fn predict(pair: &NuisancePair, ds: &Dataset) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..ds.n()).map(|i| ds.row(i)).collect();
        let mut values = Self::new(
            rows.iter().map(|r| pair.propensity.predict(r)).collect(),
            rows.iter().map(|r| pair.outcome.predict(r, 0)).collect(),
            rows.iter().map(|r| pair.outcome.predict(r, 1)).collect(),
        )?;
        values.clipped = rows.iter().map(|r| pair.propensity.is_clipped(r)).collect();
        Ok(values)
    }

    pub fn len(&self) -> usize {
        self.p_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_hat.is_empty()
    }

    pub fn clip_fraction(&self) -> f64 {
        if self.clipped.is_empty() {
            return 0.0;
        }
        self.clipped.iter().filter(|&&c| c).count() as f64 / self.clipped.len() as f64
    }

    pub fn subset(&self, idx: &[usize]) -> NuisanceValues {
        NuisanceValues {
            p_hat: idx.iter().map(|&i| self.p_hat[i]).collect(),
            mu0: idx.iter().map(|&i| self.mu0[i]).collect(),
            mu1: idx.iter().map(|&i| self.mu1[i]).collect(),
            clipped: idx.iter().map(|&i| self.clipped[i]).collect(),
        }
    }
}

/// One fitted pair per fold. Unit i is always scored by the pair of its own fold.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFit {
    pub pairs: Vec<NuisancePair>,
    pub folds: FoldAssignment,
}

impl CrossFit {
    pub fn values(&self, ds: &Dataset) -> Result<NuisanceValues> {
        let n = ds.n();
        let mut p_hat = vec![0.0; n];
        let mut mu0 = vec![0.0; n];
        let mut mu1 = vec![0.0; n];
        let mut clipped = vec![false; n];
        for i in 0..n {
            let pair = &self.pairs[self.folds.fold_of()[i]];
            let row = ds.row(i);
            p_hat[i] = pair.propensity.predict(&row);
            clipped[i] = pair.propensity.is_clipped(&row);
            mu0[i] = pair.outcome.predict(&row, 0);
            mu1[i] = pair.outcome.predict(&row, 1);
        }
        let mut values = NuisanceValues::new(p_hat, mu0, mu1)?;
        values.clipped = clipped;
        Ok(values)
    }
}

/// Fits one [`NuisancePair`] per fold: on the complement of the fold by default,
/// on the fold itself when `cfg.within_fold` is set. Folds are fitted in parallel.
pub fn cross_fit(ds: &Dataset, folds: &FoldAssignment, cfg: &NuisanceConfig) -> Result<CrossFit> {
    let pairs = (0..folds.k())
        .into_par_iter()
        .map(|j| {
            let idx = if cfg.within_fold {
                folds.members(j)
            } else {
                folds.complement(j)
            };
            let mut fold_cfg = cfg.clone();
            fold_cfg.propensity.seed = cfg.propensity.seed.wrapping_add(j as u64);
            NuisancePair::fit(ds, &idx, &fold_cfg).map_err(|e| e.in_fold(j))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossFit {
        pairs,
        folds: folds.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folds::kfold_split;
    use crate::synthetic::{make_synthetic, DgpSpec};

    #[test]
    fn complement_fitting() {
        let (ds, _) = make_synthetic(&DgpSpec::nonlinear_default(), 100, 4).unwrap();
        let folds = kfold_split(&ds, 2, 4).unwrap();
        let cf = cross_fit(&ds, &folds, &NuisanceConfig::default()).unwrap();
        assert_eq!(cf.pairs.len(), 2);
        for pair in &cf.pairs {
            assert_eq!(pair.fitted_on.len(), 50);
        }
        for i in 0..ds.n() {
            assert!(!cf.pairs[folds.fold_of()[i]].fitted_on.contains(&i));
        }
    }

    #[test]
    fn within_fold_mode() {
        let (ds, _) = make_synthetic(&DgpSpec::nonlinear_default(), 120, 5).unwrap();
        let folds = kfold_split(&ds, 3, 5).unwrap();
        let cfg = NuisanceConfig {
            within_fold: true,
            ..Default::default()
        };
        let cf = cross_fit(&ds, &folds, &cfg).unwrap();
        for j in 0..3 {
            assert_eq!(cf.pairs[j].fitted_on, folds.members(j));
        }
    }

    #[test]
    fn fit_errors_carry_fold_index() {
        let (ds, _) = make_synthetic(&DgpSpec::nonlinear_default(), 60, 6).unwrap();
        let folds = kfold_split(&ds, 2, 6).unwrap();
        let mut cfg = NuisanceConfig::default();
        cfg.propensity.clip = (0.6, 0.4);
        match cross_fit(&ds, &folds, &cfg) {
            Err(Error::Fold { fold: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let (ds, _) = make_synthetic(&DgpSpec::nonlinear_default(), 200, 7).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let mut cfg = NuisanceConfig::default();
        cfg.propensity.basis = BasisKind::Polynomial2PlusRbf;
        let pair = NuisancePair::fit(&ds, &idx, &cfg).unwrap();
        let back = NuisancePair::from_json(&pair.to_json().unwrap()).unwrap();
        for i in 0..ds.n() {
            let r = ds.row(i);
            assert_eq!(pair.propensity.predict(&r), back.propensity.predict(&r));
            assert_eq!(pair.outcome.predict(&r, 1), back.outcome.predict(&r, 1));
        }
    }
}
