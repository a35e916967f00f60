//! Neighbor-embedding context subspaces.
//!
//! For one ranking episode, the positive target and each of the K negative
//! targets are looked up in the descriptor bank. The η neighbors of the
//! positive and the ηK pooled neighbors of the negatives are each reduced to
//! a mean and the leading η′ principal directions of the centered set.
//!
//! Hard assignment (NEHA) uses the neighbors as retrieved. Soft assignment
//! (NESA) first rescales every neighbor by its Gaussian membership in the
//! positive partition (see [`soft_assign`]).

mod soft;
mod svd;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{DescriptorBank, TargetEpisode};
use crate::error::{Error, Result};
use crate::search::{knn, SearchIndex};

pub use soft::{soft_assign, SoftWeights};
pub use svd::{canonical_sign, truncated_svd};

/// A point-set summary: its mean and `eta_prime` orthonormal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSubspace {
    pub mean: Array1<f64>,
    /// `dim × eta_prime`, orthonormal columns.
    pub basis: Array2<f64>,
    /// Singular values of the centered points, non-increasing.
    pub eigenvalues: Vec<f64>,
}

impl ContextSubspace {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn eta_prime(&self) -> usize {
        self.basis.ncols()
    }

    pub fn direction(&self, n: usize) -> ArrayView1<'_, f64> {
        self.basis.column(n)
    }
}

/// Positive- and negative-side subspaces of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspacePair {
    pub positive: ContextSubspace,
    pub negative: ContextSubspace,
}

/// Which soft weight rescales the neighbors of negative targets under NESA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeWeighting {
    /// s⁺ of each negative-side neighbor, the same weight the positive side uses.
    #[default]
    SPlus,
    /// s⁻, the max-over-negatives weight.
    SMinus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbedMode {
    Neha,
    Nesa { sigma: f64, negative_weighting: NegativeWeighting },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub mode: EmbedMode,
    pub eta: usize,
    pub eta_prime: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            mode: EmbedMode::Nesa {
                sigma: 0.5,
                negative_weighting: NegativeWeighting::SPlus,
            },
            eta: 4,
            eta_prime: 4,
        }
    }
}

fn validate(positive: &[f64], negatives: &[Vec<f64>], bank: &DescriptorBank, eta: usize, eta_prime: usize) -> Result<()> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("at least one negative target is required".into()));
    }
    if eta == 0 {
        return Err(Error::InvalidArgument("eta must be at least 1".into()));
    }
    if eta_prime > eta {
        return Err(Error::InvalidArgument(format!("eta_prime {eta_prime} exceeds eta {eta}")));
    }
    if eta_prime > bank.dim() {
        return Err(Error::InvalidArgument(format!(
            "eta_prime {eta_prime} exceeds descriptor dimension {}",
            bank.dim()
        )));
    }
    if bank.len() < eta {
        return Err(Error::InsufficientNeighbors {
            requested: eta,
            available: bank.len(),
        });
    }
    for v in std::iter::once(positive).chain(negatives.iter().map(Vec::as_slice)) {
        if v.len() != bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: bank.dim(),
                found: v.len(),
            });
        }
    }
    Ok(())
}

/// Retrieves neighbor rows: η for the positive, then η per negative in order.
fn neighbor_rows(
    positive: &[f64],
    negatives: &[Vec<f64>],
    bank: &DescriptorBank,
    index: &SearchIndex,
    eta: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let pos = knn(index, bank, positive, eta)?.rows;
    let mut neg = Vec::with_capacity(eta * negatives.len());
    for q in negatives {
        neg.extend(knn(index, bank, q, eta)?.rows);
    }
    if pos.len() < eta || neg.len() < eta * negatives.len() {
        return Err(Error::InsufficientNeighbors {
            requested: eta,
            available: bank.len(),
        });
    }
    Ok((pos, neg))
}

fn stack(bank: &DescriptorBank, rows: &[usize], weights: Option<&[f64]>) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), bank.dim()));
    for (i, &r) in rows.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        for (dst, &src) in out.row_mut(i).iter_mut().zip(bank.row(r)) {
            *dst = w * f64::from(src);
        }
    }
    out
}

/// Neighbor embedding by hard assignment.
pub fn neha(
    positive: &[f64],
    negatives: &[Vec<f64>],
    bank: &DescriptorBank,
    index: &SearchIndex,
    eta: usize,
    eta_prime: usize,
) -> Result<SubspacePair> {
    validate(positive, negatives, bank, eta, eta_prime)?;
    let (pos_rows, neg_rows) = neighbor_rows(positive, negatives, bank, index, eta)?;
    Ok(SubspacePair {
        positive: truncated_svd(stack(bank, &pos_rows, None).view(), eta_prime)?,
        negative: truncated_svd(stack(bank, &neg_rows, None).view(), eta_prime)?,
    })
}

/// Neighbor embedding by soft assignment: every retrieved neighbor is
/// rescaled by its soft weight before the mean and SVD.
#[allow(clippy::too_many_arguments)]
pub fn nesa(
    positive: &[f64],
    negatives: &[Vec<f64>],
    bank: &DescriptorBank,
    index: &SearchIndex,
    eta: usize,
    eta_prime: usize,
    sigma: f64,
    negative_weighting: NegativeWeighting,
) -> Result<SubspacePair> {
    validate(positive, negatives, bank, eta, eta_prime)?;
    let (pos_rows, neg_rows) = neighbor_rows(positive, negatives, bank, index, eta)?;
    let weigh = |rows: &[usize], use_negative: bool| -> Result<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                let w = soft_assign(bank.row_f64(r).as_slice().expect("contiguous"), positive, negatives, sigma)?;
                Ok(if use_negative { w.negative_weight } else { w.positive_weight })
            })
            .collect()
    };
    let pos_w = weigh(&pos_rows, false)?;
    let neg_w = weigh(&neg_rows, negative_weighting == NegativeWeighting::SMinus)?;
    Ok(SubspacePair {
        positive: truncated_svd(stack(bank, &pos_rows, Some(&pos_w)).view(), eta_prime)?,
        negative: truncated_svd(stack(bank, &neg_rows, Some(&neg_w)).view(), eta_prime)?,
    })
}

/// Subspaces for one episode, using its positive and negative bank rows as targets.
pub fn embed_episode(
    config: &EmbedConfig,
    episode: &TargetEpisode,
    bank: &DescriptorBank,
    index: &SearchIndex,
) -> Result<SubspacePair> {
    let positive = bank.row_f64(episode.positive_row).to_vec();
    let negatives: Vec<Vec<f64>> = episode.negative_rows.iter().map(|&r| bank.row_f64(r).to_vec()).collect();
    match config.mode {
        EmbedMode::Neha => neha(&positive, &negatives, bank, index, config.eta, config.eta_prime),
        EmbedMode::Nesa {
            sigma,
            negative_weighting,
        } => nesa(
            &positive,
            &negatives,
            bank,
            index,
            config.eta,
            config.eta_prime,
            sigma,
            negative_weighting,
        ),
    }
}

/// [`embed_episode`] over many episodes in parallel; output follows input order.
pub fn embed_episodes(
    config: &EmbedConfig,
    episodes: &[TargetEpisode],
    bank: &DescriptorBank,
    index: &SearchIndex,
) -> Result<Vec<SubspacePair>> {
    episodes.par_iter().map(|ep| embed_episode(config, ep, bank, index)).collect()
}

/// Mean of the η nearest bank rows to the positive target, the pull target
/// of the nearest-neighbor-only baseline.
pub fn positive_neighbor_mean(
    episode: &TargetEpisode,
    bank: &DescriptorBank,
    index: &SearchIndex,
    eta: usize,
) -> Result<Array1<f64>> {
    let positive = bank.row_f64(episode.positive_row);
    let rows = knn(index, bank, positive.as_slice().expect("contiguous"), eta)?.rows;
    if rows.len() < eta {
        return Err(Error::InsufficientNeighbors {
            requested: eta,
            available: bank.len(),
        });
    }
    Ok(stack(bank, &rows, None).mean_axis(ndarray::Axis(0)).expect("eta >= 1"))
}
