//! Stochastic intervention effect estimation.
//!
//! A stochastic intervention of degree `delta` multiplies every unit's odds of
//! treatment by `delta`, giving the shifted propensity
//!
//! ```text
//! q(x, delta) = delta * p(x) / (delta * p(x) + 1 - p(x))
//! ```
//!
//! The counterfactual mean outcome under that intervention is estimated by the
//! sample mean of the per-unit influence values
//!
//! ```text
//! phi = q * m1 + (1 - q) * m0
//! m1  = 1{t = 1} (y - mu(x, 1)) / p + mu(x, 1)
//! m0  = 1{t = 0} (y - mu(x, 0)) / (1 - p) + mu(x, 0)
//! ```
//!
//! with nuisances `p` and `mu` fitted out-of-fold.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::folds::kfold_split;
use crate::nuisance::{cross_fit, NuisanceConfig, NuisanceValues};
use crate::stats::{self, logit, sigmoid};

/// Multiplicative odds shift, stored as `ln(delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StochasticDegree {
    lambda: f64,
}

impl StochasticDegree {
    pub const NONE: StochasticDegree = StochasticDegree { lambda: 0.0 };

    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::DomainError(format!("stochastic degree {delta} must be positive and finite")));
        }
        Ok(StochasticDegree { lambda: delta.ln() })
    }

    pub fn from_log(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::DomainError(format!("log-degree {lambda} must be finite")));
        }
        Ok(StochasticDegree { lambda })
    }

    pub fn delta(self) -> f64 {
        self.lambda.exp()
    }

    pub fn log_delta(self) -> f64 {
        self.lambda
    }
}

/// q for a validated `p_hat` and log-degree. Works in log-odds so extreme degrees
/// saturate instead of overflowing; `lambda == 0` returns `p_hat` unchanged.
pub(crate) fn shifted_propensity(p_hat: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        p_hat
    } else {
        sigmoid(logit(p_hat) + lambda)
    }
}

/// `delta * p / (delta * p + 1 - p)`.
pub fn stochastic_propensity(p_hat: f64, delta: StochasticDegree) -> Result<f64> {
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(Error::DomainError(format!("propensity {p_hat} outside (0, 1)")));
    }
    Ok(shifted_propensity(p_hat, delta.lambda))
}

/// Doubly-robust arm values `(m0, m1)` for one unit.
pub fn m_values(t: u8, y: f64, p_hat: f64, mu0: f64, mu1: f64) -> (f64, f64) {
    let m1 = if t == 1 { (y - mu1) / p_hat + mu1 } else { mu1 };
    let m0 = if t == 0 { (y - mu0) / (1.0 - p_hat) + mu0 } else { mu0 };
    (m0, m1)
}

/// What one unit contributes: its observation and its nuisance evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitInputs {
    pub t: u8,
    pub y: f64,
    pub p_hat: f64,
    pub mu0: f64,
    pub mu1: f64,
}

impl UnitInputs {
    pub fn of(ds: &Dataset, values: &NuisanceValues, i: usize) -> UnitInputs {
        UnitInputs {
            t: ds.t()[i],
            y: ds.y()[i],
            p_hat: values.p_hat[i],
            mu0: values.mu0[i],
            mu1: values.mu1[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub unit: usize,
    pub q: f64,
    pub m0: f64,
    pub m1: f64,
    pub phi: f64,
}

pub fn influence(unit: usize, inputs: UnitInputs, delta: StochasticDegree) -> Result<InfluenceRecord> {
    let q = stochastic_propensity(inputs.p_hat, delta)?;
    let (m0, m1) = m_values(inputs.t, inputs.y, inputs.p_hat, inputs.mu0, inputs.mu1);
    // Equal arms give phi = m0 for every q, without rounding noise from q.
    let phi = if m1 == m0 { m0 } else { q * m1 + (1.0 - q) * m0 };
    Ok(InfluenceRecord { unit, q, m0, m1, phi })
}

/// Influence records for every unit under a common degree.
pub fn influence_records(
    ds: &Dataset,
    values: &NuisanceValues,
    delta: StochasticDegree,
) -> Result<Vec<InfluenceRecord>> {
    check_lengths(ds, values)?;
    (0..ds.n())
        .map(|i| influence(i, UnitInputs::of(ds, values, i), delta))
        .collect()
}

pub(crate) fn check_lengths(ds: &Dataset, values: &NuisanceValues) -> Result<()> {
    if values.len() != ds.n() {
        return Err(Error::LengthMismatch {
            expected: ds.n(),
            found: values.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieConfig {
    pub delta: f64,
    pub k: usize,
    pub nuisance: NuisanceConfig,
    pub seed: u64,
    /// Replace fitted nuisances by the ground truth (`p_true`, `mu0`, `mu1`).
    pub oracle_nuisance: bool,
}

impl Default for SieConfig {
    fn default() -> Self {
        SieConfig {
            delta: 1.0,
            k: 2,
            nuisance: NuisanceConfig::default(),
            seed: 0,
            oracle_nuisance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_fit: usize,
    pub n_eval: usize,
    pub psi_hat: f64,
    pub clip_fraction: f64,
    pub propensity_converged: bool,
    pub propensity_iterations: usize,
    pub propensity_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieReport {
    pub psi_hat: f64,
    pub tau_sie: f64,
    /// mean(mu_hat(x, 1) - mu_hat(x, 0)), treated minus control.
    pub tau_ate_plugin: f64,
    /// mean(p_hat mu_hat(x, 1) + (1 - p_hat) mu_hat(x, 0)).
    pub tau_alg1: f64,
    pub delta: f64,
    pub k: usize,
    pub seed: u64,
    pub n: usize,
    pub positivity_clip_fraction: f64,
    pub per_fold: Vec<FoldDiagnostics>,
}

impl SieReport {
    /// More than 5% of the propensities sit on a clip bound.
    pub fn positivity_warning(&self) -> bool {
        self.positivity_clip_fraction > 0.05
    }
}

/// Nuisances evaluated once; reports at any degree reuse them.
#[derive(Debug, Clone)]
pub struct SieFit {
    pub values: NuisanceValues,
    /// Fold of each unit; `None` in oracle mode.
    pub fold_of: Option<Vec<usize>>,
    fold_meta: Vec<FoldDiagnostics>,
    k: usize,
    seed: u64,
}

pub fn fit_sie(ds: &Dataset, truth: Option<&GroundTruth>, cfg: &SieConfig) -> Result<SieFit> {
    if cfg.k < 2 {
        return Err(Error::InvalidConfig(format!("k = {}, need k >= 2", cfg.k)));
    }
    if cfg.oracle_nuisance {
        let truth = truth.ok_or(Error::NoGroundTruth)?;
        truth.check_matches(ds)?;
        return Ok(SieFit {
            values: NuisanceValues::from_truth(truth)?,
            fold_of: None,
            fold_meta: Vec::new(),
            k: cfg.k,
            seed: cfg.seed,
        });
    }
    let folds = kfold_split(ds, cfg.k, cfg.seed)?;
    let mut ncfg = cfg.nuisance.clone();
    ncfg.propensity.seed = cfg.seed;
    let cf = cross_fit(ds, &folds, &ncfg)?;
    let values = cf.values(ds)?;
    let fold_meta = cf
        .pairs
        .iter()
        .enumerate()
        .map(|(j, pair)| {
            let members = folds.members(j);
            let clipped = members.iter().filter(|&&i| values.clipped[i]).count();
            let diag = &pair.propensity.diagnostics;
            FoldDiagnostics {
                fold: j,
                n_fit: pair.fitted_on.len(),
                n_eval: members.len(),
                psi_hat: f64::NAN,
                clip_fraction: clipped as f64 / members.len() as f64,
                propensity_converged: diag.converged,
                propensity_iterations: diag.iterations,
                propensity_grad_norm: diag.grad_norm,
            }
        })
        .collect();
    Ok(SieFit {
        values,
        fold_of: Some(folds.fold_of().to_vec()),
        fold_meta,
        k: cfg.k,
        seed: cfg.seed,
    })
}

impl SieFit {
    pub fn report(&self, ds: &Dataset, delta: StochasticDegree) -> Result<SieReport> {
        let records = influence_records(ds, &self.values, delta)?;
        let phi: Vec<f64> = records.iter().map(|r| r.phi).collect();
        let psi_hat = stats::mean(&phi);
        let v = &self.values;
        let plugin: Vec<f64> = v.mu1.iter().zip(&v.mu0).map(|(a, b)| a - b).collect();
        let alg1: Vec<f64> = (0..ds.n())
            .map(|i| v.p_hat[i] * v.mu1[i] + (1.0 - v.p_hat[i]) * v.mu0[i])
            .collect();
        let per_fold = self
            .fold_meta
            .iter()
            .map(|meta| {
                let fold_of = self.fold_of.as_ref().expect("fold metadata implies folds");
                let fold_phi: Vec<f64> = (0..ds.n())
                    .filter(|&i| fold_of[i] == meta.fold)
                    .map(|i| phi[i])
                    .collect();
                FoldDiagnostics {
                    psi_hat: stats::mean(&fold_phi),
                    ..meta.clone()
                }
            })
            .collect();
        Ok(SieReport {
            psi_hat,
            tau_sie: psi_hat - ds.mean_outcome(),
            tau_ate_plugin: stats::mean(&plugin),
            tau_alg1: stats::mean(&alg1),
            delta: delta.delta(),
            k: self.k,
            seed: self.seed,
            n: ds.n(),
            positivity_clip_fraction: v.clip_fraction(),
            per_fold,
        })
    }
}

/// Cross-fits the nuisances (or takes them from the ground truth) and reports
/// psi_hat, tau_SIE and both ATE readings at `cfg.delta`.
pub fn estimate_sie(ds: &Dataset, truth: Option<&GroundTruth>, cfg: &SieConfig) -> Result<SieReport> {
    let delta = StochasticDegree::new(cfg.delta)?;
    let report = fit_sie(ds, truth, cfg)?.report(ds, delta)?;
    if report.positivity_warning() {
        log::warn!(
            "{:.1}% of propensity estimates hit the clip bounds",
            100.0 * report.positivity_clip_fraction
        );
    }
    Ok(report)
}

/// `|tau_hat - mean(mu1 - mu0)|`.
pub fn ate_error(tau_hat: f64, truth: Option<&GroundTruth>) -> Result<f64> {
    let truth = truth.ok_or(Error::NoGroundTruth)?;
    Ok((tau_hat - truth.ate()).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn deg(d: f64) -> StochasticDegree {
        StochasticDegree::new(d).unwrap()
    }

    #[test]
    fn stochastic_propensity_examples() {
        assert_eq!(stochastic_propensity(0.5, deg(1.0)).unwrap(), 0.5);
        assert!((stochastic_propensity(0.5, deg(1.5)).unwrap() - 0.6).abs() < 1e-12);
        assert!(stochastic_propensity(0.2, deg(1e-300)).unwrap() < 1e-12);
        assert!(stochastic_propensity(0.0, deg(1.0)).is_err());
        assert!(stochastic_propensity(1.0, deg(1.0)).is_err());
        assert!(StochasticDegree::new(0.0).is_err());
        assert!(StochasticDegree::new(-2.0).is_err());
    }

    #[test]
    fn m_value_examples() {
        assert_eq!(m_values(1, 3.0, 0.37, 0.0, 3.0).1, 3.0);
        assert!((m_values(1, 4.0, 0.5, 0.0, 3.0).1 - 5.0).abs() < 1e-12);
        let (m0, m1) = m_values(0, 9.0, 0.5, 1.0, 2.5);
        assert_eq!(m1, 2.5);
        assert!((m0 - 17.0).abs() < 1e-12);
    }

    #[test]
    fn influence_mixture() {
        // Treated unit with p = 0.5, mu1 = 3, y = 4 gives m1 = 5; m0 = mu0 = 1.
        let inputs = UnitInputs {
            t: 1,
            y: 4.0,
            p_hat: 0.5,
            mu0: 1.0,
            mu1: 3.0,
        };
        let r = influence(0, inputs, deg(1.5)).unwrap();
        assert!((r.q - 0.6).abs() < 1e-12);
        assert!((r.phi - 3.4).abs() < 1e-12);
        assert_eq!(r.phi, r.q * r.m1 + (1.0 - r.q) * r.m0);

        let flat = UnitInputs {
            t: 1,
            y: 2.0,
            p_hat: 0.3,
            mu0: 2.0,
            mu1: 2.0,
        };
        for d in [1e-6, 0.3, 1.0, 7.0, 1e6] {
            assert!((influence(0, flat, deg(d)).unwrap().phi - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_outcome_gives_zero_effect() {
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let t = (0..n).map(|i| ((i * 5) % 3 == 0) as u8).collect();
        let ds = Dataset::new(x, t, vec![2.5; n]).unwrap();
        for d in [0.1, 1.0, 4.0] {
            let cfg = SieConfig {
                delta: d,
                ..Default::default()
            };
            let r = estimate_sie(&ds, None, &cfg).unwrap();
            assert!((r.psi_hat - 2.5).abs() < 1e-12);
            assert!(r.tau_sie.abs() < 1e-12);
        }
    }

    #[test]
    fn ate_error_requires_truth() {
        let gt = GroundTruth::new(vec![0.0, 1.0], vec![2.0, 3.0], None).unwrap();
        assert_eq!(ate_error(2.0, Some(&gt)).unwrap(), 0.0);
        assert!((ate_error(1.7, Some(&gt)).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(ate_error(1.0, None), Err(Error::NoGroundTruth)));
    }
}
