//! Random-search optimization of per-unit stochastic interventions, and the
//! inverse-propensity policy value used to score the resulting decisions.
//!
//! The decision variable is a log-degree `lambda_i = ln(delta_i)` per unit. Each
//! step samples `m` Gaussian directions, evaluates the summed influence reward
//! at `lambda +/- nu * direction`, keeps the `b` directions with the largest
//! `max(reward+, reward-)`, and moves along
//! `(alpha / b) * sum (reward+ - reward-) * direction`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceValues;
use crate::sie::{check_lengths, influence, shifted_propensity, StochasticDegree, UnitInputs};
use crate::stats;

/// Bounds applied to raw degrees in [`Parameterization::RawDelta`] mode.
pub const RAW_DELTA_BOUNDS: (f64, f64) = (1e-3, 1e3);

/// Rounding slack for [`delta_to_policy`]; shifted propensities within this of
/// the threshold count as reaching it.
pub const POLICY_BOUNDARY_TOL: f64 = 1e-12;

/// Per-unit log-degrees; `delta_i = exp(lambda_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaParam {
    lambda: Vec<f64>,
}

impl DeltaParam {
    /// No intervention: every `delta_i = 1`.
    pub fn zeros(n: usize) -> Self {
        DeltaParam { lambda: vec![0.0; n] }
    }

    pub fn from_lambda(lambda: Vec<f64>) -> Result<Self> {
        if let Some(i) = lambda.iter().position(|v| !v.is_finite()) {
            return Err(Error::DomainError(format!("lambda[{i}] is not finite")));
        }
        Ok(DeltaParam { lambda })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Search over `ln(delta)`, starting at 0 (delta = 1).
    LogDelta,
    /// Search over raw `delta`, starting at 0, clamped to [`RAW_DELTA_BOUNDS`].
    RawDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    pub alpha: f64,
    pub nu: f64,
    pub steps: usize,
    pub directions: usize,
    pub top: usize,
    pub resample_directions: bool,
    pub normalize_rewards: bool,
    pub parameterization: Parameterization,
    pub seed: u64,
}

impl Default for RsConfig {
    fn default() -> Self {
        RsConfig {
            alpha: 0.02,
            nu: 0.05,
            steps: 100,
            directions: 32,
            top: 8,
            resample_directions: true,
            normalize_rewards: false,
            parameterization: Parameterization::LogDelta,
            seed: 0,
        }
    }
}

impl RsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("step size {} must be positive", self.alpha)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidConfig(format!("exploration noise {} must be positive", self.nu)));
        }
        if self.directions == 0 {
            return Err(Error::InvalidConfig("need at least one direction".into()));
        }
        if self.top == 0 || self.top > self.directions {
            return Err(Error::InvalidConfig(format!(
                "top directions b = {} must satisfy 1 <= b <= m = {}",
                self.top, self.directions
            )));
        }
        Ok(())
    }
}

/// A sampled perturbation and the rewards on either side of the current iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub delta_k: Vec<f64>,
    pub reward_plus: f64,
    pub reward_minus: f64,
}

impl Direction {
    fn score(&self) -> f64 {
        self.reward_plus.max(self.reward_minus)
    }
}

/// One JSON-lines record of the optimization log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub best_reward: f64,
    pub mean_reward: f64,
    pub update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub lambda: DeltaParam,
    pub trajectory: Vec<StepLog>,
    /// Reward at the starting point and after each accepted update.
    pub iterate_rewards: Vec<f64>,
}

impl OptimizeResult {
    pub fn initial_reward(&self) -> f64 {
        self.iterate_rewards[0]
    }

    pub fn final_reward(&self) -> f64 {
        *self.iterate_rewards.last().expect("at least the initial reward")
    }
}

/// Sum over units of phi(z_i, delta_i).
pub fn reward(ds: &Dataset, values: &NuisanceValues, lambda: &DeltaParam) -> Result<f64> {
    check_lengths(ds, values)?;
    if lambda.len() != ds.n() {
        return Err(Error::LengthMismatch {
            expected: ds.n(),
            found: lambda.len(),
        });
    }
    let phi = (0..ds.n())
        .map(|i| {
            let degree = StochasticDegree::from_log(lambda.lambda[i])?;
            Ok(influence(i, UnitInputs::of(ds, values, i), degree)?.phi)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::pairwise_sum(&phi))
}

fn to_lambda(theta: &[f64], param: Parameterization) -> Vec<f64> {
    match param {
        Parameterization::LogDelta => theta.to_vec(),
        Parameterization::RawDelta => theta
            .iter()
            .map(|d| d.clamp(RAW_DELTA_BOUNDS.0, RAW_DELTA_BOUNDS.1).ln())
            .collect(),
    }
}

fn sample_directions(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Reward of a point given in the search coordinates; non-finite lambdas map to NaN.
fn reward_at(ds: &Dataset, values: &NuisanceValues, theta: &[f64], param: Parameterization) -> f64 {
    match DeltaParam::from_lambda(to_lambda(theta, param)) {
        Ok(lambda) => reward(ds, values, &lambda).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

/// Runs the random search for `cfg.steps` steps from `lambda = 0`.
///
/// Directions are standard normal, drawn from `ChaCha8Rng::seed_from_u64(cfg.seed)`
/// direction by direction and unit by unit within a direction; with
/// `resample_directions` a fresh set is drawn at every step, otherwise once
/// before the loop. Ties in the ranking keep the lower direction index.
pub fn optimize(ds: &Dataset, values: &NuisanceValues, cfg: &RsConfig) -> Result<OptimizeResult> {
    cfg.validate()?;
    check_lengths(ds, values)?;
    let n = ds.n();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = vec![0.0; n];
    let mut iterate_rewards = vec![reward_at(ds, values, &theta, cfg.parameterization)];
    if !iterate_rewards[0].is_finite() {
        return Err(Error::NonFiniteReward { step: 0 });
    }
    let fixed = if cfg.resample_directions {
        None
    } else {
        Some(sample_directions(&mut rng, cfg.directions, n))
    };
    let mut trajectory = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let dirs = match &fixed {
            Some(d) => d.clone(),
            None => sample_directions(&mut rng, cfg.directions, n),
        };
        let evaluated: Vec<Direction> = dirs
            .into_par_iter()
            .map(|delta_k| {
                let plus: Vec<f64> = theta.iter().zip(&delta_k).map(|(t, d)| t + cfg.nu * d).collect();
                let minus: Vec<f64> = theta.iter().zip(&delta_k).map(|(t, d)| t - cfg.nu * d).collect();
                Direction {
                    reward_plus: reward_at(ds, values, &plus, cfg.parameterization),
                    reward_minus: reward_at(ds, values, &minus, cfg.parameterization),
                    delta_k,
                }
            })
            .collect();
        if evaluated
            .iter()
            .any(|d| !d.reward_plus.is_finite() || !d.reward_minus.is_finite())
        {
            return Err(Error::NonFiniteReward { step });
        }

        let mut order: Vec<usize> = (0..evaluated.len()).collect();
        order.sort_by(|&a, &b| evaluated[b].score().total_cmp(&evaluated[a].score()));
        let top = &order[..cfg.top];

        let scale = if cfg.normalize_rewards {
            let collected: Vec<f64> = top
                .iter()
                .flat_map(|&k| [evaluated[k].reward_plus, evaluated[k].reward_minus])
                .collect();
            let m = stats::mean(&collected);
            let var = collected.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / collected.len() as f64;
            let sd = var.sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        } else {
            1.0
        };

        let mut update = vec![0.0; n];
        for &k in top {
            let dir = &evaluated[k];
            let diff = dir.reward_plus - dir.reward_minus;
            for (u, d) in update.iter_mut().zip(&dir.delta_k) {
                *u += diff * d;
            }
        }
        let factor = cfg.alpha / (cfg.top as f64 * scale);
        for u in update.iter_mut() {
            *u *= factor;
        }
        for (t, u) in theta.iter_mut().zip(&update) {
            *t += u;
            if cfg.parameterization == Parameterization::RawDelta {
                *t = t.clamp(RAW_DELTA_BOUNDS.0, RAW_DELTA_BOUNDS.1);
            }
        }

        let all_rewards: Vec<f64> = evaluated
            .iter()
            .flat_map(|d| [d.reward_plus, d.reward_minus])
            .collect();
        trajectory.push(StepLog {
            step,
            best_reward: all_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_reward: stats::mean(&all_rewards),
            update_norm: update.iter().map(|u| u * u).sum::<f64>().sqrt(),
        });
        let r = reward_at(ds, values, &theta, cfg.parameterization);
        if !r.is_finite() {
            return Err(Error::NonFiniteReward { step });
        }
        iterate_rewards.push(r);
    }

    Ok(OptimizeResult {
        lambda: DeltaParam::from_lambda(to_lambda(&theta, cfg.parameterization))?,
        trajectory,
        iterate_rewards,
    })
}

/// Inverse-propensity value of a binary policy: `(1/n) sum y_i / rho_i` over
/// units whose realized treatment matches the policy, where `rho_i` is the
/// probability of the realized arm (`p_hat` if treated, `1 - p_hat` otherwise).
pub fn policy_value(ds: &Dataset, policy: &[u8], p_hat: &[f64]) -> Result<f64> {
    for len in [policy.len(), p_hat.len()] {
        if len != ds.n() {
            return Err(Error::LengthMismatch {
                expected: ds.n(),
                found: len,
            });
        }
    }
    let terms = (0..ds.n())
        .map(|i| {
            let t = ds.t()[i];
            if policy[i] != t {
                return Ok(0.0);
            }
            let p = p_hat[i];
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::DomainError(format!("p_hat[{i}] = {p} outside [0, 1]")));
            }
            let rho = if t == 1 { p } else { 1.0 - p };
            if rho <= 0.0 {
                return Err(Error::DomainError(format!(
                    "unit {i} matched the policy with zero probability of its arm"
                )));
            }
            Ok(ds.y()[i] / rho)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean(&terms))
}

/// Treat unit i iff its shifted propensity reaches `threshold`.
pub fn delta_to_policy(lambda: &DeltaParam, p_hat: &[f64], threshold: f64) -> Result<Vec<u8>> {
    if p_hat.len() != lambda.len() {
        return Err(Error::LengthMismatch {
            expected: lambda.len(),
            found: p_hat.len(),
        });
    }
    lambda
        .lambda
        .iter()
        .zip(p_hat)
        .map(|(&l, &p)| {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::DomainError(format!("propensity {p} outside (0, 1)")));
            }
            Ok(u8::from(shifted_propensity(p, l) >= threshold - POLICY_BOUNDARY_TOL))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn tiny(t: Vec<u8>, y: Vec<f64>) -> Dataset {
        let n = t.len();
        Dataset::new(DMatrix::from_fn(n, 1, |i, _| i as f64), t, y).unwrap()
    }

    #[test]
    fn reward_single_unit() {
        let ds = tiny(vec![1, 0], vec![4.0, 0.0]);
        let values = NuisanceValues::new(vec![0.5, 0.5], vec![1.0, 0.0], vec![3.0, 0.0]).unwrap();
        let lambda = DeltaParam::from_lambda(vec![1.5f64.ln(), 0.0]).unwrap();
        // First unit: phi = 0.6 * 5 + 0.4 * 1 = 3.4; second unit contributes 0.
        assert!((reward(&ds, &values, &lambda).unwrap() - 3.4).abs() < 1e-12);
    }

    #[test]
    fn reward_ignores_lambda_when_arms_agree() {
        let ds = tiny(vec![1, 0, 1], vec![2.0, 2.0, 2.0]);
        let values = NuisanceValues::new(vec![0.3, 0.6, 0.9], vec![2.0; 3], vec![2.0; 3]).unwrap();
        for l in [-3.0, 0.0, 0.7, 9.0] {
            let lambda = DeltaParam::from_lambda(vec![l, -l, 2.0 * l]).unwrap();
            assert_eq!(reward(&ds, &values, &lambda).unwrap(), 6.0);
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let ds = tiny(vec![1, 0, 1, 0], vec![1.0, 2.0, 3.0, 4.0]);
        let values = NuisanceValues::new(vec![0.4; 4], vec![1.0; 4], vec![2.0; 4]).unwrap();
        let cfg = RsConfig {
            steps: 0,
            ..Default::default()
        };
        let out = optimize(&ds, &values, &cfg).unwrap();
        assert_eq!(out.lambda, DeltaParam::zeros(4));
        assert!(out.trajectory.is_empty());
    }

    #[test]
    fn config_validation() {
        let bad = RsConfig {
            top: 9,
            directions: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(RsConfig::default().validate().is_ok());
    }

    #[test]
    fn policy_value_examples() {
        let ds = tiny(vec![1, 0], vec![2.0, 4.0]);
        assert!((policy_value(&ds, &[1, 1], &[0.5, 0.5]).unwrap() - 2.0).abs() < 1e-12);
        // Realized-arm probability of one for every unit.
        let v = policy_value(&ds, &[1, 0], &[1.0, 0.0]).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        assert_eq!(policy_value(&ds, &[0, 1], &[0.5, 0.5]).unwrap(), 0.0);
        assert!(matches!(
            policy_value(&ds, &[1], &[0.5, 0.5]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn delta_to_policy_examples() {
        let big = DeltaParam::from_lambda(vec![40.0; 3]).unwrap();
        assert_eq!(delta_to_policy(&big, &[0.01, 0.2, 0.6], 0.5).unwrap(), vec![1, 1, 1]);
        let zero = DeltaParam::zeros(2);
        assert_eq!(delta_to_policy(&zero, &[0.6, 0.4], 0.5).unwrap(), vec![1, 0]);
        let boundary = DeltaParam::from_lambda(vec![1.5f64.ln()]).unwrap();
        assert_eq!(delta_to_policy(&boundary, &[0.4], 0.5).unwrap(), vec![1]);
    }
}
