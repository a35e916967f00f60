use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian membership of one point in the positive partition versus each
/// of the K negative partitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftWeights {
    pub sigma: f64,
    /// s⁺: the positive term over the partition normalizer.
    pub positive_weight: f64,
    /// Each negative term over the same normalizer.
    pub per_negative_weights: Vec<f64>,
    /// s⁻: the largest entry of `per_negative_weights`.
    pub negative_weight: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Soft assignment of `query` between `positive` and `negatives`.
///
/// Evaluated through log-sum-exp, so very distant points or tiny `sigma`
/// never underflow the normalizer to zero.
pub fn soft_assign<N: AsRef<[f64]>>(query: &[f64], positive: &[f64], negatives: &[N], sigma: f64) -> Result<SoftWeights> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("soft assignment needs at least one negative".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive and finite, got {sigma}")));
    }
    let dim = query.len();
    for v in std::iter::once(positive).chain(negatives.iter().map(AsRef::as_ref)) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
    }
    let scale = 1.0 / (2.0 * sigma * sigma);
    let pos_logit = -sq_dist(query, positive) * scale;
    let neg_logits: Vec<f64> = negatives.iter().map(|n| -sq_dist(query, n.as_ref()) * scale).collect();

    let top = neg_logits.iter().copied().fold(pos_logit, f64::max);
    let pos_term = (pos_logit - top).exp();
    let neg_terms: Vec<f64> = neg_logits.iter().map(|l| (l - top).exp()).collect();
    let tau = pos_term + neg_terms.iter().sum::<f64>();

    let per_negative_weights: Vec<f64> = neg_terms.iter().map(|t| t / tau).collect();
    let negative_weight = per_negative_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SoftWeights {
        sigma,
        positive_weight: pos_term / tau,
        per_negative_weights,
        negative_weight,
    })
}
