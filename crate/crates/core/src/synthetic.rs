//! Synthetic data with known potential outcomes, used as the verification oracle.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::stats::sigmoid;

pub type Surface = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A data-generating process: covariates are iid standard normal, treatment is
/// Bernoulli(p(x)) and `y = mu_t(x) + sigma * eps`.
#[derive(Clone)]
pub struct DgpSpec {
    pub d: usize,
    pub propensity: Surface,
    pub mu0: Surface,
    pub mu1: Surface,
    pub sigma: f64,
}

impl fmt::Debug for DgpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DgpSpec")
            .field("d", &self.d)
            .field("sigma", &self.sigma)
            .finish_non_exhaustive()
    }
}

impl DgpSpec {
    pub fn new(
        d: usize,
        propensity: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        mu0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        mu1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        sigma: f64,
    ) -> Self {
        DgpSpec {
            d,
            propensity: Arc::new(propensity),
            mu0: Arc::new(mu0),
            mu1: Arc::new(mu1),
            sigma,
        }
    }

    /// Default benchmark: d = 6,
    /// p(x) = sigmoid(0.4 x1 - 0.3 x2 + 0.2 x1 x2),
    /// mu0(x) = 2 x1 + 0.5 x2^2, mu1(x) = mu0(x) + 1 + 0.5 x3, sigma = 1.
    pub fn nonlinear_default() -> Self {
        Self::new(
            6,
            |x| sigmoid(0.4 * x[0] - 0.3 * x[1] + 0.2 * x[0] * x[1]),
            default_mu0,
            |x| default_mu0(x) + 1.0 + 0.5 * x[2],
            1.0,
        )
    }

    /// `mu0 = x . beta`, `mu1 = mu0 + effect`, mild confounding through x1.
    pub fn linear(beta: Vec<f64>, effect: f64, sigma: f64) -> Self {
        let d = beta.len();
        let b0 = Arc::new(beta);
        let b1 = Arc::clone(&b0);
        Self::new(
            d,
            |x| sigmoid(0.5 * x[0]),
            move |x| dot(x, &b0),
            move |x| dot(x, &b1) + effect,
            sigma,
        )
    }

    /// Randomized assignment with p = 0.5 and a constant effect on top of the default mu0.
    pub fn randomized(effect: f64, sigma: f64) -> Self {
        Self::new(6, |_| 0.5, default_mu0, move |x| default_mu0(x) + effect, sigma)
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidSpec("d must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise scale {} must be finite and >= 0", self.sigma)));
        }
        Ok(())
    }
}

fn default_mu0(x: &[f64]) -> f64 {
    2.0 * x[0] + 0.5 * x[1] * x[1]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Draws `n` units. Deterministic given `seed`; per unit the draw order is
/// covariates, treatment uniform, outcome noise.
pub fn make_synthetic(spec: &DgpSpec, n: usize, seed: u64) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::TooFewUnits { needed: 2, have: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * spec.d);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut mu0 = Vec::with_capacity(n);
    let mut mu1 = Vec::with_capacity(n);
    let mut p_true = Vec::with_capacity(n);
    let mut row = vec![0.0; spec.d];
    for i in 0..n {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let p = (spec.propensity)(&row);
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "propensity {p} at unit {i} is not strictly inside (0, 1)"
            )));
        }
        let m0 = (spec.mu0)(&row);
        let m1 = (spec.mu1)(&row);
        let u: f64 = rng.random();
        let ti = u8::from(u < p);
        let eps: f64 = rng.sample(StandardNormal);
        let base = if ti == 1 { m1 } else { m0 };
        xs.extend_from_slice(&row);
        t.push(ti);
        y.push(base + spec.sigma * eps);
        mu0.push(m0);
        mu1.push(m1);
        p_true.push(p);
    }
    let x = DMatrix::from_row_slice(n, spec.d, &xs);
    let ds = Dataset::new(x, t, y)?;
    let truth = GroundTruth::new(mu0, mu1, Some(p_true))?;
    Ok((ds, truth))
}
