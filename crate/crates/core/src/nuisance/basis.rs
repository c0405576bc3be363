//! Feature maps g_1..g_s for the basis-expanded logistic propensity model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Intercept alone; the deliberately misspecified propensity.
    InterceptOnly,
    Raw,
    Polynomial2,
    Polynomial2PlusRbf,
}

impl std::str::FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intercept" | "intercept_only" => Ok(BasisKind::InterceptOnly),
            "raw" => Ok(BasisKind::Raw),
            "poly2" | "polynomial2" => Ok(BasisKind::Polynomial2),
            "poly2rbf" | "polynomial2_plus_rbf" => Ok(BasisKind::Polynomial2PlusRbf),
            other => Err(Error::InvalidConfig(format!("unknown basis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisExpansion {
    pub kind: BasisKind,
    pub d: usize,
    pub centers: Option<Vec<Vec<f64>>>,
    pub bandwidth: f64,
}

impl BasisExpansion {
    /// Expansion without RBF terms. Panics for [`BasisKind::Polynomial2PlusRbf`];
    /// use [`BasisExpansion::fit`] or [`BasisExpansion::with_rbf`] for that kind.
    pub fn new(kind: BasisKind, d: usize) -> Self {
        assert!(
            kind != BasisKind::Polynomial2PlusRbf,
            "RBF expansions need centers"
        );
        BasisExpansion {
            kind,
            d,
            centers: None,
            bandwidth: 1.0,
        }
    }

    pub fn with_rbf(d: usize, centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth {bandwidth} must be positive")));
        }
        if centers.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidConfig("RBF center dimension mismatch".into()));
        }
        Ok(BasisExpansion {
            kind: BasisKind::Polynomial2PlusRbf,
            d,
            centers: Some(centers),
            bandwidth,
        })
    }

    /// Builds the expansion for `rows` (already standardized). RBF centers come
    /// from k-means with k = min(10, floor(sqrt(n))) and the bandwidth from the
    /// median pairwise distance.
    pub fn fit(kind: BasisKind, rows: &[Vec<f64>], seed: u64) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if kind != BasisKind::Polynomial2PlusRbf {
            return Ok(Self::new(kind, d));
        }
        let k = ((rows.len() as f64).sqrt().floor() as usize).clamp(1, 10);
        let centers = kmeans(rows, k, seed);
        let bandwidth = median_pairwise_distance(rows);
        Self::with_rbf(d, centers, if bandwidth > 0.0 { bandwidth } else { 1.0 })
    }

    /// Output dimension s.
    pub fn dim(&self) -> usize {
        let d = self.d;
        match self.kind {
            BasisKind::InterceptOnly => 1,
            BasisKind::Raw => 1 + d,
            BasisKind::Polynomial2 => 1 + d + d * (d + 1) / 2,
            BasisKind::Polynomial2PlusRbf => {
                1 + d + d * (d + 1) / 2 + self.centers.as_ref().map_or(0, Vec::len)
            }
        }
    }

    /// `[1]`, `[1, x]`, `[1, x, x_i x_j (i <= j)]`, optionally followed by
    /// `exp(-|x - c|^2 / (2 h^2))` per center.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.push(1.0);
        if self.kind == BasisKind::InterceptOnly {
            return out;
        }
        out.extend_from_slice(x);
        if self.kind == BasisKind::Raw {
            return out;
        }
        for i in 0..x.len() {
            for j in i..x.len() {
                out.push(x[i] * x[j]);
            }
        }
        if let Some(centers) = &self.centers {
            let denom = 2.0 * self.bandwidth * self.bandwidth;
            for c in centers {
                out.push((-sq_dist(x, c) / denom).exp());
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// k-means++ seeding followed by Lloyd iterations.
fn kmeans(rows: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.len();
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in nearest.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        centers.push(rows[pick].clone());
        for (i, r) in rows.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, &centers[centers.len() - 1]));
        }
    }

    let d = rows[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let best = (0..centers.len())
                .min_by(|&a, &b| sq_dist(r, &centers[a]).total_cmp(&sq_dist(r, &centers[b])))
                .unwrap_or(0);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(r) {
                *s += v;
            }
        }
        for (c, (s, &m)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if m > 0 {
                *c = s.iter().map(|v| v / m as f64).collect();
            }
        }
    }
    centers
}

/// Median distance over pairs drawn from an evenly spaced subsample of at most 500 rows.
fn median_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let stride = rows.len().div_ceil(500).max(1);
    let sample: Vec<&Vec<f64>> = rows.iter().step_by(stride).collect();
    let mut dists = Vec::with_capacity(sample.len() * sample.len() / 2);
    for i in 0..sample.len() {
        for j in (i + 1)..sample.len() {
            dists.push(sq_dist(sample[i], sample[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    dists[dists.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_adds_intercept() {
        let b = BasisExpansion::new(BasisKind::Raw, 2);
        assert_eq!(b.expand(&[3.0, -1.0]), vec![1.0, 3.0, -1.0]);
        assert_eq!(b.dim(), 3);
    }

    #[test]
    fn polynomial2_monomials() {
        let b = BasisExpansion::new(BasisKind::Polynomial2, 2);
        assert_eq!(b.expand(&[1.0, 2.0]), vec![1.0, 1.0, 2.0, 1.0, 2.0, 4.0]);
        let b6 = BasisExpansion::new(BasisKind::Polynomial2, 6);
        let z = b6.expand(&[0.0; 6]);
        assert_eq!(z.len(), b6.dim());
        assert_eq!(z[0], 1.0);
        assert!(z[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rbf_terms_are_bounded_and_sized() {
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
            .collect();
        let b = BasisExpansion::fit(BasisKind::Polynomial2PlusRbf, &rows, 5).unwrap();
        assert_eq!(b.centers.as_ref().unwrap().len(), 10);
        let e = b.expand(&[0.0, 0.0]);
        assert_eq!(e.len(), b.dim());
        assert!(e[6..].iter().all(|v| v.is_finite() && *v > 0.0 && *v <= 1.0));
        assert_eq!(b, BasisExpansion::fit(BasisKind::Polynomial2PlusRbf, &rows, 5).unwrap());
    }

    #[test]
    fn parses_cli_names() {
        assert_eq!("poly2".parse::<BasisKind>().unwrap(), BasisKind::Polynomial2);
        assert_eq!("poly2rbf".parse::<BasisKind>().unwrap(), BasisKind::Polynomial2PlusRbf);
        assert!("cubic".parse::<BasisKind>().is_err());
    }
}
