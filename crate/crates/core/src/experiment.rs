//! End-to-end ranking runs on synthetic data: generate, index, embed,
//! train, evaluate.

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{DescriptorBank, TargetEpisode};
use crate::embed::{embed_episode, positive_neighbor_mean, EmbedConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_ranking, ScoreKind};
use crate::model::{train_head, Assist, HeadKind, HeadParams, HeadShape, TrainConfig, TrainingExample};
use crate::search::{build_index, Metric, SearchIndex};
use crate::synth::{generate, SynthConfig};

/// What supervision the head trains with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum Objective {
    /// Ranking hinge plus the assisted hinge against neighbor subspaces.
    Combined(EmbedConfig),
    /// Ranking hinge plus a pull toward the mean of `eta` positive neighbors.
    Nno { eta: usize },
    /// Ranking hinge alone.
    Plain,
}

impl Objective {
    /// Head shape for this objective; only the combined objective has
    /// subspace directions to predict.
    pub fn head_shape(&self, kind: HeadKind, context_dim: usize, descriptor_dim: usize) -> HeadShape {
        match (self, kind) {
            (_, HeadKind::SingleFc) => HeadShape::single_fc(context_dim, descriptor_dim),
            (Objective::Combined(e), HeadKind::MainPlusContext) => HeadShape::new(context_dim, descriptor_dim, e.eta_prime),
            (_, HeadKind::MainPlusContext) => HeadShape::new(context_dim, descriptor_dim, 0),
        }
    }
}

/// Converts episodes into training examples for `objective`.
pub fn build_examples(
    episodes: &[TargetEpisode],
    bank: &DescriptorBank,
    index: &SearchIndex,
    objective: &Objective,
) -> Result<Vec<TrainingExample>> {
    episodes
        .par_iter()
        .map(|ep| {
            let assist = match objective {
                Objective::Combined(cfg) => Assist::Subspaces(embed_episode(cfg, ep, bank, index)?),
                Objective::Nno { eta } => Assist::NeighborMean(positive_neighbor_mean(ep, bank, index, *eta)?),
                Objective::Plain => Assist::None,
            };
            Ok(TrainingExample {
                context: Array1::from(ep.context.clone()),
                positive: bank.row_f64(ep.positive_row),
                negatives: ep.negative_rows.iter().map(|&r| bank.row_f64(r)).collect(),
                assist,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingExperiment {
    pub synth: SynthConfig,
    /// The last `test_episodes` generated episodes are held out.
    pub test_episodes: usize,
    pub objective: Objective,
    pub head_kind: HeadKind,
    pub train: TrainConfig,
    pub metric: Metric,
    pub score: ScoreKind,
}

impl Default for RankingExperiment {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            test_episodes: 100,
            objective: Objective::Combined(EmbedConfig::default()),
            head_kind: HeadKind::MainPlusContext,
            train: TrainConfig {
                seed: SynthConfig::default().seed,
                ..TrainConfig::default()
            },
            metric: Metric::default(),
            score: ScoreKind::default(),
        }
    }
}

impl RankingExperiment {
    /// Uses `seed` for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingOutcome {
    /// Test recall of the freshly initialized head, by cutoff.
    pub untrained: BTreeMap<usize, f64>,
    /// Test recall after training, by cutoff.
    pub trained: BTreeMap<usize, f64>,
    /// Mean training loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub params: HeadParams,
}

pub const RECALL_CUTOFFS: [usize; 3] = [1, 2, 3];

pub fn run_ranking(exp: &RankingExperiment) -> Result<RankingOutcome> {
    let data = generate(&exp.synth)?;
    if exp.test_episodes == 0 || exp.test_episodes >= data.episodes.len() {
        return Err(Error::InvalidArgument(format!(
            "test split of {} leaves no training or no test episodes out of {}",
            exp.test_episodes,
            data.episodes.len()
        )));
    }
    let (train_eps, test_eps) = data.episodes.split_at(data.episodes.len() - exp.test_episodes);
    let index = build_index(&data.bank, exp.metric, 1, exp.train.seed)?;
    let examples = build_examples(train_eps, &data.bank, &index, &exp.objective)?;
    let shape = exp.objective.head_shape(exp.head_kind, exp.synth.context_dim(), data.bank.dim());

    let initial = HeadParams::init(shape, exp.train.init_scale, &mut exp.train.rng())?;
    let untrained = evaluate_ranking(&initial, test_eps, &data.bank, &RECALL_CUTOFFS, exp.score)?;
    let (params, loss_trace) = train_head(&examples, shape, &exp.train)?;
    let trained = evaluate_ranking(&params, test_eps, &data.bank, &RECALL_CUTOFFS, exp.score)?;
    Ok(RankingOutcome {
        untrained,
        trained,
        loss_trace,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RankingExperiment {
        let mut exp = RankingExperiment::default();
        exp.synth = SynthConfig {
            dim: 8,
            n_clusters: 4,
            bank_size: 60,
            n_episodes: 60,
            k: 3,
            ..SynthConfig::default()
        };
        exp.test_episodes = 20;
        exp.train.epochs = 5;
        exp
    }

    #[test]
    fn runs_every_objective() {
        for objective in [Objective::Combined(EmbedConfig::default()), Objective::Nno { eta: 1 }, Objective::Plain] {
            let out = run_ranking(&RankingExperiment { objective, ..tiny() }).unwrap();
            assert_eq!(out.loss_trace.len(), 5);
            assert!(out.trained[&1] <= out.trained[&3]);
        }
    }

    #[test]
    fn repeatable() {
        let a = run_ranking(&tiny()).unwrap();
        let b = run_ranking(&tiny()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_degenerate_split() {
        assert!(run_ranking(&RankingExperiment { test_episodes: 60, ..tiny() }).is_err());
    }
}
