//! Potential-outcome regression: ridge least squares or gradient-boosted stumps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::solve_spd;
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLearner {
    LeastSquaresLinear,
    BoostedStumps,
    /// Predicts the training mean everywhere; the deliberately misspecified outcome.
    GlobalMean,
}

impl std::str::FromStr for OutcomeLearner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "least_squares_linear" => Ok(OutcomeLearner::LeastSquaresLinear),
            "gbstumps" | "boosted_stumps" => Ok(OutcomeLearner::BoostedStumps),
            "mean" | "global_mean" => Ok(OutcomeLearner::GlobalMean),
            other => Err(Error::InvalidConfig(format!("unknown outcome learner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    /// One model on the covariates with `t` appended as a feature.
    Joint,
    /// Separate models for the control and treated arms.
    PerArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeConfig {
    pub learner: OutcomeLearner,
    pub mode: OutcomeMode,
    pub rounds: usize,
    pub learning_rate: f64,
    pub ridge: f64,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        OutcomeConfig {
            learner: OutcomeLearner::BoostedStumps,
            mode: OutcomeMode::Joint,
            rounds: 100,
            learning_rate: 0.1,
            ridge: 1e-3,
        }
    }
}

impl OutcomeConfig {
    pub fn with_learner(learner: OutcomeLearner) -> Self {
        OutcomeConfig {
            learner,
            ..Default::default()
        }
    }

    pub fn per_arm(mut self) -> Self {
        self.mode = OutcomeMode::PerArm;
        self
    }
}

/// A depth-one regression tree: `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

impl Stump {
    fn predict(&self, x: &[f64]) -> f64 {
        if x[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedStumps {
    pub base: f64,
    pub learning_rate: f64,
    pub stumps: Vec<Stump>,
    /// Training MSE before the first round and after each round.
    #[serde(skip)]
    pub train_loss: Vec<f64>,
}

impl BoostedStumps {
    /// Squared-loss gradient boosting. Stops early when no feature admits a split.
    pub fn fit(features: &[Vec<f64>], y: &[f64], rounds: usize, learning_rate: f64) -> BoostedStumps {
        let m = y.len();
        let p = features.first().map_or(0, Vec::len);
        let base = stats::mean(y);
        let mut pred = vec![base; m];
        let mut resid: Vec<f64> = y.iter().map(|v| v - base).collect();
        let mse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>() / m as f64;
        let mut train_loss = vec![mse(&resid)];

        let sorted: Vec<Vec<usize>> = (0..p)
            .map(|j| {
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| features[a][j].total_cmp(&features[b][j]));
                order
            })
            .collect();

        let mut stumps = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let total: f64 = resid.iter().sum();
            let mut best: Option<(f64, Stump)> = None;
            for (j, order) in sorted.iter().enumerate() {
                let mut left_sum = 0.0;
                for pos in 0..m.saturating_sub(1) {
                    left_sum += resid[order[pos]];
                    let lo = features[order[pos]][j];
                    let hi = features[order[pos + 1]][j];
                    if lo == hi {
                        continue;
                    }
                    let nl = (pos + 1) as f64;
                    let nr = (m - pos - 1) as f64;
                    let right_sum = total - left_sum;
                    let gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
                    if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                        let mid = lo + (hi - lo) / 2.0;
                        best = Some((
                            gain,
                            Stump {
                                feature: j,
                                threshold: if mid < hi { mid } else { lo },
                                left: left_sum / nl,
                                right: right_sum / nr,
                            },
                        ));
                    }
                }
            }
            let Some((_, stump)) = best else { break };
            for i in 0..m {
                let step = learning_rate * stump.predict(&features[i]);
                pred[i] += step;
                resid[i] = y[i] - pred[i];
            }
            train_loss.push(mse(&resid));
            stumps.push(stump);
        }
        BoostedStumps {
            base,
            learning_rate,
            stumps,
            train_loss,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let boost: f64 = self.stumps.iter().map(|s| s.predict(x)).sum();
        self.base + self.learning_rate * boost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "snake_case")]
pub enum Regressor {
    LeastSquaresLinear { intercept: f64, coef: Vec<f64> },
    BoostedStumps(BoostedStumps),
    GlobalMean { value: f64 },
}

impl Regressor {
    fn fit(cfg: &OutcomeConfig, features: &[Vec<f64>], y: &[f64]) -> Result<Regressor> {
        match cfg.learner {
            OutcomeLearner::GlobalMean => Ok(Regressor::GlobalMean { value: stats::mean(y) }),
            OutcomeLearner::BoostedStumps => Ok(Regressor::BoostedStumps(BoostedStumps::fit(
                features,
                y,
                cfg.rounds,
                cfg.learning_rate,
            ))),
            OutcomeLearner::LeastSquaresLinear => ridge_fit(features, y, cfg.ridge),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Regressor::LeastSquaresLinear { intercept, coef } => {
                intercept + coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
            }
            Regressor::BoostedStumps(b) => b.predict(x),
            Regressor::GlobalMean { value } => *value,
        }
    }
}

/// Minimizes mean squared error plus `ridge * |coef|^2`; the intercept is unpenalized.
fn ridge_fit(features: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<Regressor> {
    let m = y.len();
    let p = features.first().map_or(0, Vec::len);
    let design = DMatrix::from_fn(m, p + 1, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let target = DVector::from_column_slice(y);
    let mut gram = design.transpose() * &design / m as f64;
    for j in 1..=p {
        gram[(j, j)] += ridge;
    }
    let rhs = design.transpose() * target / m as f64;
    let beta = solve_spd(gram, rhs)
        .ok_or_else(|| Error::DegenerateDesign("least-squares normal equations are singular".into()))?;
    Ok(Regressor::LeastSquaresLinear {
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ArmModels {
    Joint { model: Regressor },
    PerArm { control: Regressor, treated: Regressor },
}

/// Fitted mu_hat(x, t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub standardizer: Standardizer,
    pub models: ArmModels,
}

impl OutcomeModel {
    pub fn predict(&self, x: &[f64], t: u8) -> f64 {
        let mut z: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.standardizer.means[j]) / self.standardizer.scales[j])
            .collect();
        match &self.models {
            ArmModels::Joint { model } => {
                z.push(f64::from(t));
                model.predict(&z)
            }
            ArmModels::PerArm { control, treated } => {
                if t == 1 {
                    treated.predict(&z)
                } else {
                    control.predict(&z)
                }
            }
        }
    }

    /// Training-loss history of boosted models (joint model, or control then treated).
    pub fn train_loss(&self) -> Vec<&[f64]> {
        let regs: Vec<&Regressor> = match &self.models {
            ArmModels::Joint { model } => vec![model],
            ArmModels::PerArm { control, treated } => vec![control, treated],
        };
        regs.into_iter()
            .filter_map(|r| match r {
                Regressor::BoostedStumps(b) => Some(b.train_loss.as_slice()),
                _ => None,
            })
            .collect()
    }
}

pub fn fit_outcome(ds: &Dataset, idx: &[usize], cfg: &OutcomeConfig) -> Result<OutcomeModel> {
    if idx.is_empty() {
        return Err(Error::InvalidDataset("outcome model needs at least one training unit".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "learning rate {} must lie in (0, 1]",
            cfg.learning_rate
        )));
    }
    let standardizer = Standardizer::fit(ds.x(), idx);
    let models = match cfg.mode {
        OutcomeMode::Joint => {
            let features: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    let mut z = standardizer.transform_row(ds.x(), i);
                    z.push(f64::from(ds.t()[i]));
                    z
                })
                .collect();
            let y: Vec<f64> = idx.iter().map(|&i| ds.y()[i]).collect();
            ArmModels::Joint {
                model: Regressor::fit(cfg, &features, &y)?,
            }
        }
        OutcomeMode::PerArm => {
            let arm = |a: u8| -> Result<Regressor> {
                let members: Vec<usize> = idx.iter().copied().filter(|&i| ds.t()[i] == a).collect();
                if members.is_empty() {
                    return Err(Error::EmptyArm { arm: a });
                }
                let features: Vec<Vec<f64>> =
                    members.iter().map(|&i| standardizer.transform_row(ds.x(), i)).collect();
                let y: Vec<f64> = members.iter().map(|&i| ds.y()[i]).collect();
                Regressor::fit(cfg, &features, &y)
            };
            let control = arm(0)?;
            let treated = arm(1)?;
            ArmModels::PerArm { control, treated }
        }
    };
    Ok(OutcomeModel { standardizer, models })
}
