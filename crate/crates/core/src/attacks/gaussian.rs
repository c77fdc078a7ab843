use serde::{Deserialize, Serialize};
use libm::erfc;

use super::AttackOutput;
use crate::error::{Error, Result};
use crate::signals::ScoreTable;

/// Lower bound on every fitted variance. Memorized samples can produce
/// identical OUT scores across models.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub sigma2: f64,
}

impl GaussianFit {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Score distributions of one sample under the target and the reference models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPair {
    pub target: GaussianFit,
    pub reference: GaussianFit,
}

/// Sample mean and unbiased variance (0 for a single sample), floored.
pub fn fit_gaussian(samples: &[f64]) -> Result<GaussianFit> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot fit a Gaussian to zero samples"));
    }
    let n = samples.len() as f64;
    let mu = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(GaussianFit {
        mu,
        sigma2: var.max(VARIANCE_FLOOR),
    })
}

/// Distribution of `target - reference` for independent Gaussians.
pub fn gaussian_difference(pair: &GaussianPair) -> GaussianFit {
    GaussianFit {
        mu: pair.target.mu - pair.reference.mu,
        sigma2: pair.target.sigma2 + pair.reference.sigma2,
    }
}

/// Standard normal CDF through the complementary error function, accurate
/// deep into the lower tail.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// One-sided test against each sample's OUT distribution:
/// `Phi((raw - mu_out) / sigma_out)`, large when the observation sits above
/// what non-member models produce.
pub fn attack_lira_offline(table: &ScoreTable, out_scores: &[Vec<f64>]) -> Result<AttackOutput> {
    if out_scores.len() != table.len() {
        return Err(Error::invalid(format!(
            "{} OUT score rows for {} samples",
            out_scores.len(),
            table.len()
        )));
    }
    let scores = table
        .raw
        .iter()
        .zip(out_scores)
        .map(|(&raw, outs)| {
            let fit = fit_gaussian(outs)?;
            Ok(normal_cdf((raw - fit.mu) / fit.sigma()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(AttackOutput::new("lira_offline", table.ids.clone(), scores))
}
