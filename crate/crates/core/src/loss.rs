//! Ranking and assisted-supervision objectives.
//!
//! All hinges use raw inner products. Callers that want cosine behaviour
//! normalize their inputs first.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::embed::SubspacePair;
use crate::error::{Error, Result};

/// Weight of the assisted term in the combined objective.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Relevance of an auxiliary translation stream.
pub const DEFAULT_LAMBDA_F: f64 = 0.3;
/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ψ⁺ − mean(negatives): the direction ψ* is scored along.
pub fn contrast_direction<N: AsRef<[f64]>>(positive: &[f64], negatives: &[N]) -> Result<Vec<f64>> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("at least one negative is required".into()));
    }
    let k = negatives.len() as f64;
    let mut dir = positive.to_vec();
    for n in negatives {
        let n = n.as_ref();
        check_dim(positive.len(), n.len())?;
        dir.iter_mut().zip(n).for_each(|(d, v)| *d -= v / k);
    }
    Ok(dir)
}

/// max(0, 1 − ψ*ᵀ(ψ⁺ − mean of negatives)).
pub fn hinge_rank<N: AsRef<[f64]>>(psi_star: &[f64], positive: &[f64], negatives: &[N]) -> Result<f64> {
    check_dim(positive.len(), psi_star.len())?;
    let dir = contrast_direction(positive, negatives)?;
    Ok((1.0 - dot(psi_star, &dir)).max(0.0))
}

/// Pre-hinge argument of the assisted loss:
/// 1 − μᵀ(μ⁺ − μ⁻) − Σₙ uₙᵀ(uₙ⁺ − uₙ⁻).
pub fn assisted_argument(
    mu: &[f64],
    basis: ArrayView2<'_, f64>,
    mu_pos: &[f64],
    basis_pos: ArrayView2<'_, f64>,
    mu_neg: &[f64],
    basis_neg: ArrayView2<'_, f64>,
) -> Result<f64> {
    let dim = mu.len();
    check_dim(dim, mu_pos.len())?;
    check_dim(dim, mu_neg.len())?;
    for b in [&basis, &basis_pos, &basis_neg] {
        if b.nrows() != dim || b.ncols() != basis.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "bases must all be {dim}x{}, found {}x{}",
                basis.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
    }
    let mut arg = 1.0 - mu.iter().zip(mu_pos.iter().zip(mu_neg)).map(|(m, (p, n))| m * (p - n)).sum::<f64>();
    for j in 0..basis.ncols() {
        let (u, up, un) = (basis.column(j), basis_pos.column(j), basis_neg.column(j));
        arg -= u.iter().zip(up.iter().zip(un.iter())).map(|(a, (p, n))| a * (p - n)).sum::<f64>();
    }
    Ok(arg)
}

/// max(0, [`assisted_argument`]).
pub fn hinge_assisted(
    mu: &[f64],
    basis: ArrayView2<'_, f64>,
    mu_pos: &[f64],
    basis_pos: ArrayView2<'_, f64>,
    mu_neg: &[f64],
    basis_neg: ArrayView2<'_, f64>,
) -> Result<f64> {
    Ok(assisted_argument(mu, basis, mu_pos, basis_pos, mu_neg, basis_neg)?.max(0.0))
}

/// Ranking hinge plus λ times the squared distance to the positive-neighbor mean.
pub fn nno_loss<N: AsRef<[f64]>>(
    psi_star: &[f64],
    positive: &[f64],
    negatives: &[N],
    neighbor_mean: &[f64],
    lambda: f64,
) -> Result<f64> {
    Ok(nno_breakdown(psi_star, positive, negatives, neighbor_mean, lambda)?.total)
}

pub fn nno_breakdown<N: AsRef<[f64]>>(
    psi_star: &[f64],
    positive: &[f64],
    negatives: &[N],
    neighbor_mean: &[f64],
    lambda: f64,
) -> Result<LossBreakdown> {
    check_dim(psi_star.len(), neighbor_mean.len())?;
    let primary = hinge_rank(psi_star, positive, negatives)?;
    let pull: f64 = psi_star.iter().zip(neighbor_mean).map(|(a, b)| (a - b) * (a - b)).sum();
    LossBreakdown::new(primary, pull, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub primary: f64,
    pub assisted: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(primary: f64, assisted: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self {
            primary,
            assisted,
            lambda,
            total: primary + lambda * assisted,
        })
    }
}

/// L† on the predicted descriptor plus λ·L‡ on the predicted (μ, Θ).
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<N: AsRef<[f64]>>(
    psi_star: &[f64],
    positive: &[f64],
    negatives: &[N],
    mu: &[f64],
    basis: ArrayView2<'_, f64>,
    targets: &SubspacePair,
    lambda: f64,
) -> Result<LossBreakdown> {
    let primary = hinge_rank(psi_star, positive, negatives)?;
    let assisted = hinge_assisted(
        mu,
        basis,
        targets.positive.mean.as_slice().expect("contiguous"),
        targets.positive.basis.view(),
        targets.negative.mean.as_slice().expect("contiguous"),
        targets.negative.basis.view(),
    )?;
    LossBreakdown::new(primary, assisted, lambda)
}

/// One language's decoder outputs over M′ positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageStream {
    pub weight: f64,
    pub predictions: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl LanguageStream {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("stream weight {} must be non-negative", self.weight)));
        }
        if self.predictions.len() != self.targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} targets",
                self.predictions.len(),
                self.targets.len()
            )));
        }
        for (index, (p, y)) in self.predictions.iter().zip(&self.targets).enumerate() {
            if p.len() != y.len() {
                return Err(Error::ShapeMismatch(format!(
                    "position {index}: vocabulary {} vs {}",
                    p.len(),
                    y.len()
                )));
            }
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NotDistribution { index, sum });
            }
            let ones = y.iter().filter(|&&v| v == 1.0).count();
            let zeros = y.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != y.len() {
                return Err(Error::NotOneHot { index });
            }
        }
        Ok(())
    }

    /// Σₘ −yₘᵀ log pₘ without the stream weight.
    pub fn unweighted_nll(&self) -> f64 {
        self.predictions
            .iter()
            .zip(&self.targets)
            .map(|(p, y)| {
                p.iter()
                    .zip(y)
                    .filter(|(_, &t)| t != 0.0)
                    .map(|(&pv, &t)| -t * pv.max(LOG_FLOOR).ln())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Weighted negative log-likelihood over all language streams. The first
/// stream is the base language and must carry weight 1.
pub fn multilingual_nll(streams: &[LanguageStream]) -> Result<f64> {
    let base = streams
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least the base stream is required".into()))?;
    if base.weight != 1.0 {
        return Err(Error::InvalidArgument(format!("base stream weight must be 1, got {}", base.weight)));
    }
    let mut total = 0.0;
    for s in streams {
        s.validate()?;
        total += s.weight * s.unweighted_nll();
    }
    Ok(total)
}
