//! Weak and strong views via additive Gaussian noise: `A(x) = x + N(μ, σ²)`.
//! The output is not clipped back to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub mu: f64,
    pub sigma: f64,
    pub strength: Strength,
}

pub const DEFAULT_NOISE_MEAN: f64 = 0.5;
pub const DEFAULT_WEAK_SIGMA: f64 = 0.2;
pub const DEFAULT_STRONG_SIGMA: f64 = 0.8;

impl AugmentSpec {
    pub fn new(mu: f64, sigma: f64, strength: Strength) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::invalid(
                "augment",
                format!("sigma {sigma} must be finite and >= 0"),
            ));
        }
        Ok(AugmentSpec {
            mu,
            sigma,
            strength,
        })
    }

    pub fn weak() -> Self {
        AugmentSpec {
            mu: DEFAULT_NOISE_MEAN,
            sigma: DEFAULT_WEAK_SIGMA,
            strength: Strength::Weak,
        }
    }

    pub fn strong() -> Self {
        AugmentSpec {
            mu: DEFAULT_NOISE_MEAN,
            sigma: DEFAULT_STRONG_SIGMA,
            strength: Strength::Strong,
        }
    }
}

/// Checks that a weak/strong pair is ordered.
pub fn validate_pair(weak: &AugmentSpec, strong: &AugmentSpec) -> Result<()> {
    AugmentSpec::new(weak.mu, weak.sigma, weak.strength)?;
    AugmentSpec::new(strong.mu, strong.sigma, strong.strength)?;
    if weak.sigma >= strong.sigma {
        return Err(Error::invalid(
            "augment",
            format!(
                "weak sigma {} must be below strong sigma {}",
                weak.sigma, strong.sigma
            ),
        ));
    }
    Ok(())
}

pub fn augment<R: Rng + ?Sized>(x: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor> {
    if !(spec.sigma >= 0.0) {
        return Err(Error::invalid(
            "augment",
            format!("negative sigma {}", spec.sigma),
        ));
    }
    if spec.sigma == 0.0 {
        return Ok(x.map(|v| v + spec.mu));
    }
    let noise =
        Normal::new(spec.mu, spec.sigma).map_err(|e| Error::invalid("augment", e.to_string()))?;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += noise.sample(rng);
    }
    Ok(out)
}
