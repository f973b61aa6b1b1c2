use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::Context;
use crate::error::{Error, Result};
use crate::seed::SeedStream;

/// Componentwise truncated normal over the two context factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncatedNormalSpec {
    pub mean: [f64; 2],
    pub std_dev: f64,
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Default for TruncatedNormalSpec {
    fn default() -> Self {
        TruncatedNormalSpec {
            mean: [1.0, 1.0],
            std_dev: 0.25,
            lower: [0.6, 0.6],
            upper: [1.4, 1.4],
        }
    }
}

// Below this acceptance probability rejection sampling is replaced by the
// inverse CDF.
const MIN_ACCEPTANCE: f64 = 1e-3;

impl TruncatedNormalSpec {
    /// `std_dev == 0` is accepted as a point mass at the mean.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDistribution(m));
        if !(self.std_dev >= 0.0 && self.std_dev.is_finite()) {
            return bad("std_dev must be non-negative".into());
        }
        for i in 0..2 {
            if !(self.lower[i] < self.upper[i]) {
                return bad(format!("lower[{i}] must be below upper[{i}]"));
            }
            if self.lower[i] <= 0.0 {
                return bad(format!("lower[{i}] must be positive"));
            }
            if !(self.lower[i] <= self.mean[i] && self.mean[i] <= self.upper[i]) {
                return bad(format!("mean[{i}] outside bounds"));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..2).map(|i| (self.lower[i], self.upper[i])).collect()
    }

    pub fn mean_context(&self) -> Context {
        Context::new(self.mean[0], self.mean[1])
    }

    fn draw_component(&self, i: usize, rng: &mut crate::seed::Rng) -> f64 {
        let (mu, sd, lo, hi) = (self.mean[i], self.std_dev, self.lower[i], self.upper[i]);
        if sd == 0.0 {
            return mu;
        }
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let a = unit.cdf((lo - mu) / sd);
        let b = unit.cdf((hi - mu) / sd);
        if b - a >= MIN_ACCEPTANCE {
            loop {
                let z: f64 = StandardNormal.sample(rng);
                let x = mu + sd * z;
                if x >= lo && x <= hi {
                    return x;
                }
            }
        }
        let u: f64 = rng.gen();
        let x = mu + sd * unit.inverse_cdf(a + u * (b - a));
        if x.is_finite() {
            x.clamp(lo, hi)
        } else {
            mu.clamp(lo, hi)
        }
    }

    /// Independent draws from one seeded stream.
    pub fn sample_many(&self, n: usize, seed: SeedStream) -> Vec<Context> {
        let mut rng = seed.rng();
        (0..n)
            .map(|_| {
                let s = self.draw_component(0, &mut rng);
                let d = self.draw_component(1, &mut rng);
                Context::new(s, d)
            })
            .collect()
    }
}

/// One context draw, deterministic in the seed.
pub fn sample_context(spec: &TruncatedNormalSpec, seed: SeedStream) -> Context {
    spec.sample_many(1, seed)[0]
}

/// Latin hypercube design with `n` points.
///
/// Continuous dimensions are stratified into `n` equal cells. Integer
/// dimensions are stratified over `[lo - 0.5, hi + 0.5)` and rounded, which
/// gives every admissible integer the same share of the strata.
pub fn latin_hypercube(
    n: usize,
    bounds: &[(f64, f64)],
    integer_mask: &[bool],
    seed: SeedStream,
) -> Vec<Vec<f64>> {
    assert!(n >= 1, "latin hypercube needs at least one point");
    assert_eq!(bounds.len(), integer_mask.len());
    let mut rng = seed.rng();
    let mut points = vec![vec![0.0; bounds.len()]; n];
    for (dim, (&(lo, hi), &is_int)) in bounds.iter().zip(integer_mask).enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        let (a, b) = if is_int { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        for (point, &cell) in points.iter_mut().zip(&strata) {
            let u = (cell as f64 + rng.gen::<f64>()) / n as f64;
            let x = a + u * (b - a);
            point[dim] = if is_int { x.round().clamp(lo, hi) } else { x.min(hi) };
        }
    }
    points
}
