//! Comparison estimators (OLS plug-in, IPW, AIPW) and uplift baseline policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::folds::kfold_split;
use crate::nuisance::{
    cross_fit, fit_outcome, fit_propensity, NuisanceConfig, NuisanceValues, OutcomeConfig, OutcomeLearner,
    OutcomeModel,
};
use crate::sie::{check_lengths, m_values};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    OlsPlugin,
    Ipw,
    Aipw,
    Sma(OutcomeLearner),
    RandomPolicy,
}

impl BaselineKind {
    pub fn label(&self) -> String {
        match self {
            BaselineKind::OlsPlugin => "OLS".into(),
            BaselineKind::Ipw => "IPW".into(),
            BaselineKind::Aipw => "AIPW".into(),
            BaselineKind::Sma(OutcomeLearner::LeastSquaresLinear) => "SMA-linear".into(),
            BaselineKind::Sma(OutcomeLearner::BoostedStumps) => "SMA-gbstumps".into(),
            BaselineKind::Sma(OutcomeLearner::GlobalMean) => "SMA-mean".into(),
            BaselineKind::RandomPolicy => "random".into(),
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ols" | "ols_plugin" => Ok(BaselineKind::OlsPlugin),
            "ipw" => Ok(BaselineKind::Ipw),
            "aipw" => Ok(BaselineKind::Aipw),
            "random" | "random_policy" => Ok(BaselineKind::RandomPolicy),
            other => match other.strip_prefix("sma-").or_else(|| other.strip_prefix("sma_")) {
                Some(learner) => Ok(BaselineKind::Sma(learner.parse()?)),
                None => Err(Error::InvalidConfig(format!("unknown baseline `{s}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub k: usize,
    pub seed: u64,
    /// Nuisances for IPW (propensity only) and AIPW.
    pub nuisance: NuisanceConfig,
    /// Ridge strength of the per-arm OLS fits.
    pub ols_ridge: f64,
    /// Self-normalized (Hajek) weights for IPW.
    pub hajek: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            k: 2,
            seed: 0,
            nuisance: NuisanceConfig::default(),
            ols_ridge: 1e-3,
            hajek: false,
        }
    }
}

/// `mean(t y / p) - mean((1 - t) y / (1 - p))`, or its self-normalized form.
pub fn ipw_from_propensity(ds: &Dataset, p_hat: &[f64], hajek: bool) -> Result<f64> {
    if p_hat.len() != ds.n() {
        return Err(Error::LengthMismatch {
            expected: ds.n(),
            found: p_hat.len(),
        });
    }
    let mut treated = Vec::with_capacity(ds.n());
    let mut control = Vec::with_capacity(ds.n());
    let mut w1 = Vec::with_capacity(ds.n());
    let mut w0 = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let (t, y, p) = (f64::from(ds.t()[i]), ds.y()[i], p_hat[i]);
        treated.push(t * y / p);
        control.push((1.0 - t) * y / (1.0 - p));
        w1.push(t / p);
        w0.push((1.0 - t) / (1.0 - p));
    }
    if hajek {
        Ok(stats::pairwise_sum(&treated) / stats::pairwise_sum(&w1)
            - stats::pairwise_sum(&control) / stats::pairwise_sum(&w0))
    } else {
        Ok(stats::mean(&treated) - stats::mean(&control))
    }
}

/// `mean(m1 - m0)` from per-unit nuisance values.
pub fn aipw_from_values(ds: &Dataset, values: &NuisanceValues) -> Result<f64> {
    check_lengths(ds, values)?;
    let diff: Vec<f64> = (0..ds.n())
        .map(|i| {
            let (m0, m1) = m_values(ds.t()[i], ds.y()[i], values.p_hat[i], values.mu0[i], values.mu1[i]);
            m1 - m0
        })
        .collect();
    Ok(stats::mean(&diff))
}

/// Out-of-fold propensities only.
pub fn cross_fit_propensity(ds: &Dataset, cfg: &BaselineConfig) -> Result<Vec<f64>> {
    let folds = kfold_split(ds, cfg.k, cfg.seed)?;
    let mut p_hat = vec![0.0; ds.n()];
    for j in 0..folds.k() {
        let mut pcfg = cfg.nuisance.propensity.clone();
        pcfg.seed = cfg.seed.wrapping_add(j as u64);
        let idx = if cfg.nuisance.within_fold {
            folds.members(j)
        } else {
            folds.complement(j)
        };
        let model = fit_propensity(ds, &idx, &pcfg).map_err(|e| e.in_fold(j))?;
        for i in folds.members(j) {
            p_hat[i] = model.predict(&ds.row(i));
        }
    }
    Ok(p_hat)
}

fn ols_plugin(ds: &Dataset, ridge: f64) -> Result<f64> {
    let cfg = OutcomeConfig {
        ridge,
        ..OutcomeConfig::with_learner(OutcomeLearner::LeastSquaresLinear).per_arm()
    };
    let all: Vec<usize> = (0..ds.n()).collect();
    let model = fit_outcome(ds, &all, &cfg)?;
    let diff: Vec<f64> = (0..ds.n())
        .map(|i| {
            let r = ds.row(i);
            model.predict(&r, 1) - model.predict(&r, 0)
        })
        .collect();
    Ok(stats::mean(&diff))
}

/// ATE (treated minus control) from one of the comparison estimators.
pub fn estimate_ate_baseline(kind: BaselineKind, ds: &Dataset, cfg: &BaselineConfig) -> Result<f64> {
    match kind {
        BaselineKind::OlsPlugin => ols_plugin(ds, cfg.ols_ridge),
        BaselineKind::Ipw => {
            let p_hat = cross_fit_propensity(ds, cfg)?;
            ipw_from_propensity(ds, &p_hat, cfg.hajek)
        }
        BaselineKind::Aipw => {
            let folds = kfold_split(ds, cfg.k, cfg.seed)?;
            let mut ncfg = cfg.nuisance.clone();
            ncfg.propensity.seed = cfg.seed;
            let values = cross_fit(ds, &folds, &ncfg)?.values(ds)?;
            aipw_from_values(ds, &values)
        }
        BaselineKind::Sma(_) | BaselineKind::RandomPolicy => Err(Error::InvalidConfig(format!(
            "{} is a policy baseline, not an ATE estimator",
            kind.label()
        ))),
    }
}

/// Separate-model approach: one outcome model per arm, treat where the treated
/// prediction is strictly larger.
#[derive(Debug, Clone)]
pub struct SmaModel {
    outcome: OutcomeModel,
}

impl SmaModel {
    pub fn fit(ds: &Dataset, idx: &[usize], learner: OutcomeLearner) -> Result<SmaModel> {
        let cfg = OutcomeConfig::with_learner(learner).per_arm();
        Ok(SmaModel {
            outcome: fit_outcome(ds, idx, &cfg)?,
        })
    }

    pub fn decide(&self, x: &[f64]) -> u8 {
        u8::from(self.outcome.predict(x, 1) > self.outcome.predict(x, 0))
    }

    pub fn policy(&self, ds: &Dataset) -> Vec<u8> {
        (0..ds.n()).map(|i| self.decide(&ds.row(i))).collect()
    }
}

/// SMA fitted and applied on the same units. The in-repo learners are
/// deterministic, so no seed is involved.
pub fn sma_policy(ds: &Dataset, learner: OutcomeLearner) -> Result<Vec<u8>> {
    let all: Vec<usize> = (0..ds.n()).collect();
    Ok(SmaModel::fit(ds, &all, learner)?.policy(ds))
}

/// iid Bernoulli(p) treatment decisions.
pub fn random_policy(n: usize, p: f64, seed: u64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::DomainError(format!("treatment probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| u8::from(rng.random::<f64>() < p)).collect())
}
