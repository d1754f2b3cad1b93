//! Counterfactual policies: when does a perturbation count as a label swap?

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::LabelVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum CounterfactualPolicy {
    /// Fires with probability equal to the changed fraction.
    Stochastic,
    /// Fires when the changed fraction is strictly above `kappa`.
    Threshold { kappa: f64 },
}

impl Default for CounterfactualPolicy {
    fn default() -> Self {
        CounterfactualPolicy::Stochastic
    }
}

impl CounterfactualPolicy {
    pub fn threshold(kappa: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(Error::InvalidConfig(format!("kappa {kappa} outside [0, 1]")));
        }
        Ok(CounterfactualPolicy::Threshold { kappa })
    }

    /// Decides whether a changed fraction `p` is a counterfactual.
    /// The stochastic variant consumes exactly one draw from `rng`; the
    /// threshold variant consumes none.
    pub fn evaluate<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> bool {
        match *self {
            CounterfactualPolicy::Stochastic => rng.random::<f64>() < p,
            CounterfactualPolicy::Threshold { kappa } => p > kappa,
        }
    }
}

impl fmt::Display for CounterfactualPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CounterfactualPolicy::Stochastic => write!(f, "stochastic"),
            CounterfactualPolicy::Threshold { kappa } => write!(f, "threshold:{kappa}"),
        }
    }
}

impl FromStr for CounterfactualPolicy {
    type Err = Error;

    /// `stochastic` or `threshold:<kappa>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "stochastic" => Ok(CounterfactualPolicy::Stochastic),
            other => match other.strip_prefix("threshold:") {
                Some(k) => {
                    let kappa = k
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad kappa {k:?}")))?;
                    CounterfactualPolicy::threshold(kappa)
                }
                None => Err(Error::InvalidConfig(format!("unknown policy {other:?}"))),
            },
        }
    }
}

/// Share of positions whose label differs.
pub fn changed_fraction(original: &LabelVector, perturbed: &LabelVector) -> Result<f64> {
    if original.len() != perturbed.len() {
        return Err(Error::LengthMismatch {
            left: original.len(),
            right: perturbed.len(),
        });
    }
    let changed = original
        .labels()
        .iter()
        .zip(perturbed.labels())
        .filter(|(a, b)| a != b)
        .count();
    Ok(changed as f64 / original.len() as f64)
}
