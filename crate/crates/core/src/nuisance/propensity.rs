//! Basis-expanded logistic propensity model fitted by ridge-penalized IRLS.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::{BasisExpansion, BasisKind};
use super::solve_spd;
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::stats::sigmoid;

pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub basis: BasisKind,
    /// Ridge strength on the mean-scaled log-likelihood; the intercept is not penalized.
    pub ridge: f64,
    pub clip: (f64, f64),
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            basis: BasisKind::Polynomial2,
            ridge: 1e-3,
            clip: DEFAULT_CLIP,
            max_iter: 200,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Penalized objective after each accepted iterate, starting at beta = 0.
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub standardizer: Standardizer,
    pub basis: BasisExpansion,
    pub beta: Vec<f64>,
    pub clip: (f64, f64),
    pub diagnostics: FitDiagnostics,
}

impl PropensityModel {
    /// Unclipped probability for a raw covariate row.
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        let z: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.standardizer.means[j]) / self.standardizer.scales[j])
            .collect();
        let g = self.basis.expand(&z);
        sigmoid(g.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }

    /// Probability clipped to `[clip.0, clip.1]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_raw(x).clamp(self.clip.0, self.clip.1)
    }

    pub fn is_clipped(&self, x: &[f64]) -> bool {
        let p = self.predict_raw(x);
        p <= self.clip.0 || p >= self.clip.1
    }
}

fn validate(cfg: &PropensityConfig) -> Result<()> {
    let (lo, hi) = cfg.clip;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::InvalidConfig(format!("clip range ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
    }
    if !(cfg.ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge {} must be >= 0", cfg.ridge)));
    }
    Ok(())
}

struct Objective<'a> {
    g: &'a DMatrix<f64>,
    t: &'a DVector<f64>,
    ridge: f64,
}

impl Objective<'_> {
    fn value(&self, beta: &DVector<f64>) -> f64 {
        let m = self.g.nrows() as f64;
        let eta = self.g * beta;
        let nll: f64 = eta
            .iter()
            .zip(self.t.iter())
            .map(|(&e, &t)| softplus(e) - t * e)
            .sum();
        nll / m + 0.5 * self.ridge * beta.rows(1, beta.len() - 1).norm_squared()
    }

    fn grad_hess(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.g.nrows() as f64;
        let eta = self.g * beta;
        let p = eta.map(sigmoid);
        let mut grad = self.g.transpose() * (&p - self.t) / m;
        let w = p.map(|v| v * (1.0 - v) / m);
        let mut weighted = self.g.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut hess = self.g.transpose() * weighted;
        for j in 1..beta.len() {
            grad[j] += self.ridge * beta[j];
            hess[(j, j)] += self.ridge;
        }
        (grad, hess)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Fits the propensity on units `idx`. Newton (IRLS) steps with backtracking,
/// so the objective never increases. Hitting `max_iter` is not an error: the
/// model comes back with `diagnostics.converged = false`.
pub fn fit_propensity(ds: &Dataset, idx: &[usize], cfg: &PropensityConfig) -> Result<PropensityModel> {
    validate(cfg)?;
    let treated = idx.iter().filter(|&&i| ds.t()[i] == 1).count();
    if idx.is_empty() || treated == 0 || treated == idx.len() {
        return Err(Error::SingleClass);
    }
    let standardizer = Standardizer::fit(ds.x(), idx);
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| standardizer.transform_row(ds.x(), i)).collect();
    let basis = BasisExpansion::fit(cfg.basis, &rows, cfg.seed)?;
    let s = basis.dim();
    let mut flat = Vec::with_capacity(rows.len() * s);
    for r in &rows {
        flat.extend(basis.expand(r));
    }
    let g = DMatrix::from_row_slice(rows.len(), s, &flat);
    let t = DVector::from_iterator(idx.len(), idx.iter().map(|&i| f64::from(ds.t()[i])));
    let obj = Objective {
        g: &g,
        t: &t,
        ridge: cfg.ridge,
    };

    let mut beta = DVector::zeros(s);
    let mut loss = obj.value(&beta);
    let mut loss_trace = vec![loss];
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let (grad, hess) = obj.grad_hess(&beta);
        grad_norm = grad.norm();
        if grad_norm <= cfg.tol {
            converged = true;
            break;
        }
        let step = solve_spd(hess, -&grad)
            .ok_or_else(|| Error::DegenerateDesign("propensity Hessian is not positive definite".into()))?;
        let slope = grad.dot(&step);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let cand_loss = obj.value(&cand);
            if cand_loss.is_finite() && cand_loss <= loss + 1e-4 * scale * slope {
                accepted = Some((cand, cand_loss));
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((cand, cand_loss)) => {
                beta = cand;
                loss = cand_loss;
                loss_trace.push(loss);
            }
            // No descent left at machine precision.
            None => break,
        }
    }
    if !converged {
        let (grad, _) = obj.grad_hess(&beta);
        grad_norm = grad.norm();
        converged = grad_norm <= cfg.tol;
        if !converged {
            log::warn!("propensity fit stopped after {iterations} iterations, gradient norm {grad_norm:e}");
        }
    }
    Ok(PropensityModel {
        standardizer,
        basis,
        beta: beta.iter().copied().collect(),
        clip: cfg.clip,
        diagnostics: FitDiagnostics {
            iterations,
            grad_norm,
            converged,
            loss_trace,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{make_synthetic, DgpSpec};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn uninformative_covariates_give_class_rate() {
        let n = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Each covariate row appears once per arm, so x carries no information about t.
        let half = DMatrix::from_fn(n / 2, 3, |_, _| rng.random::<f64>());
        let x = DMatrix::from_fn(n, 3, |i, j| half[(i / 2, j)]);
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let ds = Dataset::new(x, t, vec![0.0; n]).unwrap();
        let model = fit_propensity(&ds, &all(n), &PropensityConfig::default()).unwrap();
        assert!(model.diagnostics.converged);
        for i in 0..n {
            assert!((model.predict(&ds.row(i)) - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn poly2_recovers_default_propensity() {
        let (ds, gt) = make_synthetic(&DgpSpec::nonlinear_default(), 4000, 12).unwrap();
        let model = fit_propensity(&ds, &all(ds.n()), &PropensityConfig::default()).unwrap();
        let p = gt.p_true.unwrap();
        let mae: f64 = (0..ds.n()).map(|i| (model.predict(&ds.row(i)) - p[i]).abs()).sum::<f64>() / ds.n() as f64;
        assert!(mae < 0.05, "mean abs error {mae}");
    }

    #[test]
    fn huge_ridge_leaves_intercept_at_class_rate() {
        let (ds, _) = make_synthetic(&DgpSpec::nonlinear_default(), 500, 2).unwrap();
        let cfg = PropensityConfig {
            ridge: 1e9,
            ..Default::default()
        };
        let model = fit_propensity(&ds, &all(ds.n()), &cfg).unwrap();
        let rate = ds.treated_count() as f64 / ds.n() as f64;
        assert!(model.beta[1..].iter().all(|b| b.abs() < 1e-7));
        assert!((model.predict(&ds.row(0)) - rate).abs() < 1e-6);
    }

    #[test]
    fn loss_is_monotone_and_predictions_clipped() {
        let (ds, _) = make_synthetic(&DgpSpec::nonlinear_default(), 800, 8).unwrap();
        let cfg = PropensityConfig {
            basis: BasisKind::Polynomial2PlusRbf,
            clip: (0.2, 0.8),
            ..Default::default()
        };
        let model = fit_propensity(&ds, &all(ds.n()), &cfg).unwrap();
        for w in model.diagnostics.loss_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        for i in 0..ds.n() {
            let p = model.predict(&ds.row(i));
            assert!((0.2..=0.8).contains(&p));
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let (ds, _) = make_synthetic(&DgpSpec::nonlinear_default(), 100, 1).unwrap();
        let treated: Vec<usize> = (0..ds.n()).filter(|&i| ds.t()[i] == 1).collect();
        assert!(matches!(
            fit_propensity(&ds, &treated, &PropensityConfig::default()),
            Err(Error::SingleClass)
        ));
    }
}
