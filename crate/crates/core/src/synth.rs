//! Seeded synthetic data: a clustered descriptor bank, ranking episodes
//! whose contexts are noisy linear images of the positive's cluster
//! center, and decoder-output streams for the multilingual loss.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bank::{DescriptorBank, TaskLabel, TargetEpisode};
use crate::error::{Error, Result};
use crate::loss::LanguageStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_clusters: usize,
    pub bank_size: usize,
    pub n_episodes: usize,
    pub k: usize,
    /// Per-coordinate standard deviation of bank rows around their center.
    pub noise: f64,
    /// Per-coordinate standard deviation of the context before projection.
    pub context_noise: f64,
    /// Length of context vectors; `None` means `dim`.
    #[serde(default)]
    pub context_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_clusters: 8,
            bank_size: 500,
            n_episodes: 500,
            k: 5,
            noise: 0.05,
            context_noise: 0.1,
            context_dim: None,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn context_dim(&self) -> usize {
        self.context_dim.unwrap_or(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("n_clusters", self.n_clusters),
            ("bank_size", self.bank_size),
            ("n_episodes", self.n_episodes),
            ("k", self.k),
            ("context_dim", self.context_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.bank_size < self.n_clusters {
            return Err(Error::InvalidArgument(format!(
                "bank_size {} is smaller than n_clusters {}",
                self.bank_size, self.n_clusters
            )));
        }
        for (name, v) in [("noise", self.noise), ("context_noise", self.context_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be a non-negative number")));
            }
        }
        if self.n_clusters < 2 {
            return Err(Error::NeedTwoClusters);
        }
        let smallest_other = self.bank_size - self.bank_size.div_ceil(self.n_clusters);
        if smallest_other < self.k {
            return Err(Error::InvalidArgument(format!(
                "k = {} negatives cannot be drawn from {} rows outside a cluster",
                self.k, smallest_other
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub bank: DescriptorBank,
    pub episodes: Vec<TargetEpisode>,
    /// Cluster of every bank row.
    pub clusters: Vec<usize>,
    /// Cluster centers, one per row, each of unit length.
    pub centers: Array2<f64>,
    /// The context map, `context_dim × dim`.
    pub projection: Array2<f64>,
}

/// Width of zero-padded row ids so they sort in row order.
fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Array1<f64> {
    if sd == 0.0 {
        return Array1::zeros(n);
    }
    let d = Normal::new(0.0, sd).expect("finite sd");
    Array1::from_iter((0..n).map(|_| d.sample(rng)))
}

/// Generates a bank and episodes.
///
/// Row `i` belongs to cluster `i mod n_clusters`. An episode draws the
/// positive uniformly from the bank; its K negatives come from distinct
/// other clusters when there are enough, so that positive and negatives
/// are exchangeable under any fixed scoring. The task label is the
/// positive's cluster modulo three.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let SynthConfig {
        dim,
        n_clusters,
        bank_size,
        n_episodes,
        k,
        noise,
        context_noise,
        ..
    } = *config;
    let c = config.context_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut centers = Array2::<f64>::zeros((n_clusters, dim));
    for mut row in centers.rows_mut() {
        loop {
            row.assign(&gaussian_vec(&mut rng, dim, 1.0));
            let n = row.dot(&row).sqrt();
            if n > 1e-12 {
                row /= n;
                break;
            }
        }
    }

    let clusters: Vec<usize> = (0..bank_size).map(|i| i % n_clusters).collect();
    let mut data = Vec::with_capacity(bank_size * dim);
    for &cl in &clusters {
        let row = &centers.row(cl) + &gaussian_vec(&mut rng, dim, noise);
        data.extend(row.iter().map(|&v| v as f32));
    }
    let w = id_width(bank_size);
    let ids = (0..bank_size).map(|i| format!("t{i:0w$}")).collect();
    let bank = DescriptorBank::new(dim, data, ids)?;

    let scale = 1.0 / (dim as f64).sqrt();
    let projection = Array2::from_shape_fn((c, dim), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });

    let members: Vec<Vec<usize>> = (0..n_clusters)
        .map(|cl| (0..bank_size).filter(|&i| clusters[i] == cl).collect())
        .collect();
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let pos = rng.random_range(0..bank_size);
        let pc = clusters[pos];
        let others: Vec<usize> = (0..n_clusters).filter(|&x| x != pc).collect();
        let neg_clusters: Vec<usize> = if others.len() >= k {
            sample(&mut rng, others.len(), k).into_iter().map(|i| others[i]).collect()
        } else {
            (0..k).map(|_| others[rng.random_range(0..others.len())]).collect()
        };
        let mut negs: Vec<usize> = Vec::with_capacity(k);
        for cl in neg_clusters {
            let pool: Vec<usize> = members[cl].iter().copied().filter(|r| !negs.contains(r)).collect();
            negs.push(pool[rng.random_range(0..pool.len())]);
        }
        let latent = &centers.row(pc) + &gaussian_vec(&mut rng, dim, context_noise);
        let context = projection.dot(&latent).to_vec();
        let label = TaskLabel::from_class_index(pc % 3).expect("three classes");
        episodes.push(TargetEpisode::from_rows(&bank, context, pos, negs, label)?);
    }

    Ok(SynthData {
        bank,
        episodes,
        clusters,
        centers,
        projection,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Vocabulary size of every language; the first is the base language.
    pub vocab_sizes: Vec<usize>,
    /// Weight of every language; the base weight must be 1.
    pub weights: Vec<f64>,
    /// Decoder positions per sentence.
    pub positions: usize,
    pub sentences: usize,
    /// Share of probability mass moved from the target to uniform.
    pub corruption: f64,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty() || self.vocab_sizes.len() != self.weights.len() {
            return Err(Error::InvalidArgument("need one weight per vocabulary, at least one language".into()));
        }
        if self.vocab_sizes.iter().any(|&v| v < 2) {
            return Err(Error::InvalidArgument("vocabulary sizes must be at least 2".into()));
        }
        if self.weights[0] != 1.0 {
            return Err(Error::InvalidArgument("base language weight must be 1".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("language weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::InvalidArgument("corruption must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One stream set per sentence. Targets are one-hot tokens drawn uniformly;
/// predictions are `(1 - r) * target + r / V`.
pub fn generate_language_streams(config: &StreamConfig) -> Result<Vec<Vec<LanguageStream>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r = config.corruption;
    Ok((0..config.sentences)
        .map(|_| {
            config
                .vocab_sizes
                .iter()
                .zip(&config.weights)
                .map(|(&v, &weight)| {
                    let mut predictions = Vec::with_capacity(config.positions);
                    let mut targets = Vec::with_capacity(config.positions);
                    for _ in 0..config.positions {
                        let tok = rng.random_range(0..v);
                        let y: Vec<f64> = (0..v).map(|i| if i == tok { 1.0 } else { 0.0 }).collect();
                        predictions.push(y.iter().map(|t| (1.0 - r) * t + r / v as f64).collect());
                        targets.push(y);
                    }
                    LanguageStream {
                        weight,
                        predictions,
                        targets,
                    }
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::multilingual_nll;

    fn small() -> SynthConfig {
        SynthConfig {
            dim: 8,
            n_clusters: 4,
            bank_size: 40,
            n_episodes: 30,
            k: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_rows_are_centers() {
        let data = generate(&SynthConfig { noise: 0.0, ..small() }).unwrap();
        for (i, &cl) in data.clusters.iter().enumerate() {
            let want: Vec<f32> = data.centers.row(cl).iter().map(|&v| v as f32).collect();
            assert_eq!(data.bank.row(i), want.as_slice());
        }
        for c in data.centers.rows() {
            assert!((c.dot(&c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.bank, c.bank);
    }

    #[test]
    fn one_cluster_cannot_make_negatives() {
        let cfg = SynthConfig {
            n_clusters: 1,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::NeedTwoClusters)));
    }

    #[test]
    fn episodes_respect_clusters() {
        let data = generate(&small()).unwrap();
        for ep in &data.episodes {
            let pc = data.clusters[ep.positive_row];
            assert_eq!(ep.k(), 3);
            assert_eq!(ep.context.len(), 8);
            assert_eq!(ep.task_label.class_index(), pc % 3);
            let mut seen = std::collections::HashSet::new();
            for &n in &ep.negative_rows {
                assert_ne!(data.clusters[n], pc);
                assert!(seen.insert(data.clusters[n]), "negative clusters are distinct");
            }
        }
        // Few clusters: negatives repeat clusters but stay distinct rows.
        let data = generate(&SynthConfig { n_clusters: 2, k: 5, ..small() }).unwrap();
        for ep in &data.episodes {
            let mut rows = ep.negative_rows.clone();
            rows.dedup();
            rows.sort();
            rows.dedup();
            assert_eq!(rows.len(), 5);
        }
    }

    #[test]
    fn small_noise_keeps_nearest_center() {
        let data = generate(&SynthConfig { noise: 0.02, ..small() }).unwrap();
        let min_gap = (0..4)
            .flat_map(|a| (0..4).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| (&data.centers.row(a) - &data.centers.row(b)).mapv(|v| v * v).sum().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(0.02 * (8f64).sqrt() * 3.0 < min_gap / 4.0);
        for (i, &cl) in data.clusters.iter().enumerate() {
            let row = data.bank.row_f64(i);
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    let da = (&row - &data.centers.row(a)).mapv(|v| v * v).sum();
                    let db = (&row - &data.centers.row(b)).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, cl);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { bank_size: 3, ..small() }).is_err());
        assert!(generate(&SynthConfig { k: 0, ..small() }).is_err());
        assert!(generate(&SynthConfig { noise: f64::NAN, ..small() }).is_err());
    }

    fn streams(corruption: f64, vocab: usize) -> Vec<Vec<LanguageStream>> {
        generate_language_streams(&StreamConfig {
            vocab_sizes: vec![vocab],
            weights: vec![1.0],
            positions: 6,
            sentences: 3,
            corruption,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn stream_losses_match_closed_form() {
        for s in streams(0.0, 5) {
            assert_eq!(multilingual_nll(&s).unwrap(), 0.0);
        }
        for s in streams(1.0, 7) {
            assert!((multilingual_nll(&s).unwrap() - 6.0 * 7f64.ln()).abs() < 1e-9);
        }
        for s in streams(0.5, 4) {
            let want = 6.0 * -(0.5f64 + 0.5 / 4.0).ln();
            assert!((multilingual_nll(&s).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn stream_config_validation() {
        let bad = StreamConfig {
            vocab_sizes: vec![1],
            weights: vec![1.0],
            positions: 1,
            sentences: 1,
            corruption: 0.0,
            seed: 0,
        };
        assert!(generate_language_streams(&bad).is_err());
        assert!(generate_language_streams(&StreamConfig { vocab_sizes: vec![3], weights: vec![0.3], ..bad.clone() }).is_err());
        assert!(generate_language_streams(&StreamConfig { vocab_sizes: vec![3], corruption: 1.5, ..bad }).is_err());
    }
}
