//! Recall@k ranking evaluation, discriminator accuracy and grid sweeps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::bank::{DescriptorBank, TaskLabel, TargetEpisode};
use crate::error::{Error, Result};
use crate::model::{discriminator_predict, head_forward, DiscriminatorParams, HeadParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Inner product of unit-normalized vectors.
    #[default]
    Cosine,
    /// Raw inner product.
    Dot,
}

fn descending_score_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// 1-based rank of `positive_id` by descending score, ties by ascending id.
pub fn rank_of(scores: &[(String, f64)], positive_id: &str) -> Result<usize> {
    let (_, pos_score) = scores
        .iter()
        .find(|(id, _)| id == positive_id)
        .ok_or_else(|| Error::MissingPositive(positive_id.to_owned()))?;
    if scores.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::InvalidArgument("candidate scores must be finite".into()));
    }
    let me = (positive_id.to_owned(), *pos_score);
    Ok(1 + scores
        .iter()
        .filter(|c| descending_score_then_id(c, &me) == Ordering::Less)
        .count())
}

/// Whether the positive lands in the top `l`.
pub fn recall_at(scores: &[(String, f64)], positive_id: &str, l: usize) -> Result<bool> {
    if l == 0 {
        return Err(Error::InvalidArgument("recall cutoff must be at least 1".into()));
    }
    Ok(rank_of(scores, positive_id)? <= l)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Scores the positive and every negative of `episode` against `psi_star`.
pub fn score_candidates(psi_star: &[f64], episode: &TargetEpisode, bank: &DescriptorBank, kind: ScoreKind) -> Vec<(String, f64)> {
    let query = match kind {
        ScoreKind::Cosine => unit(psi_star),
        ScoreKind::Dot => psi_star.to_vec(),
    };
    std::iter::once(episode.positive_row)
        .chain(episode.negative_rows.iter().copied())
        .map(|r| {
            let row = bank.row_f64(r);
            let cand = match kind {
                ScoreKind::Cosine => unit(row.as_slice().expect("contiguous")),
                ScoreKind::Dot => row.to_vec(),
            };
            (bank.id(r).to_owned(), query.iter().zip(&cand).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Mean recall over `episodes` for every cutoff in `l_values`.
pub fn evaluate_ranking(
    params: &HeadParams,
    episodes: &[TargetEpisode],
    bank: &DescriptorBank,
    l_values: &[usize],
    kind: ScoreKind,
) -> Result<BTreeMap<usize, f64>> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no episodes to evaluate".into()));
    }
    let ranks: Vec<usize> = episodes
        .par_iter()
        .map(|ep| {
            let out = head_forward(params, &ep.context)?;
            let scores = score_candidates(out.psi_star.as_slice().expect("contiguous"), ep, bank, kind);
            rank_of(&scores, &ep.positive_id)
        })
        .collect::<Result<_>>()?;
    l_values
        .iter()
        .map(|&l| {
            if l == 0 {
                return Err(Error::InvalidArgument("recall cutoff must be at least 1".into()));
            }
            let hits = ranks.iter().filter(|&&r| r <= l).count();
            Ok((l, hits as f64 / ranks.len() as f64))
        })
        .collect()
}

pub fn discriminator_accuracy(params: &DiscriminatorParams, data: &[(Vec<f64>, TaskLabel)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no examples to evaluate".into()));
    }
    let mut hits = 0usize;
    for (x, y) in data {
        if discriminator_predict(params, x)? == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// The metric names a sweep may report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "R@1")]
    R1,
    #[serde(rename = "R@2")]
    R2,
    #[serde(rename = "R@3")]
    R3,
    #[serde(rename = "accuracy")]
    Accuracy,
    #[serde(rename = "loss")]
    Loss,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::R1 => "R@1",
            MetricName::R2 => "R@2",
            MetricName::R3 => "R@3",
            MetricName::Accuracy => "accuracy",
            MetricName::Loss => "loss",
        }
    }

    /// The recall cutoff, for the R@k metrics.
    pub fn recall_cutoff(self) -> Option<usize> {
        match self {
            MetricName::R1 => Some(1),
            MetricName::R2 => Some(2),
            MetricName::R3 => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r@1" | "r1" => Ok(MetricName::R1),
            "r@2" | "r2" => Ok(MetricName::R2),
            "r@3" | "r3" => Ok(MetricName::R3),
            "accuracy" => Ok(MetricName::Accuracy),
            "loss" => Ok(MetricName::Loss),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub params: BTreeMap<String, f64>,
    #[serde(rename = "metric")]
    pub metric_name: MetricName,
    #[serde(rename = "value")]
    pub metric_value: f64,
    pub seed: u64,
}

/// Named axes of a cartesian hyperparameter grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid {
    axes: BTreeMap<String, Vec<f64>>,
}

impl Grid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn axis(mut self, name: impl Into<String>, values: impl IntoIterator<Item = f64>) -> Self {
        self.axes.insert(name.into(), values.into_iter().collect());
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.axes.keys().map(String::as_str)
    }

    pub fn size(&self) -> usize {
        if self.axes.is_empty() {
            0
        } else {
            self.axes.values().map(Vec::len).product()
        }
    }

    /// Every point, ordered lexicographically: axes by name, values in the
    /// order given, the last axis varying fastest.
    pub fn points(&self) -> Vec<BTreeMap<String, f64>> {
        let mut out = vec![BTreeMap::new()];
        if self.axes.is_empty() {
            return Vec::new();
        }
        for (name, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.insert(name.clone(), v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

impl FromStr for Grid {
    type Err = Error;

    /// `name=a..b` (inclusive integer range) or `name=v1|v2|...`, comma separated.
    fn from_str(s: &str) -> Result<Self> {
        let mut grid = Grid::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, raw) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("grid axis {part:?} lacks '='")))?;
            let bad = || Error::InvalidArgument(format!("cannot parse grid values {raw:?}"));
            let values: Vec<f64> = if let Some((lo, hi)) = raw.split_once("..") {
                let lo: i64 = lo.trim().parse().map_err(|_| bad())?;
                let hi: i64 = hi.trim().parse().map_err(|_| bad())?;
                if hi < lo {
                    return Err(bad());
                }
                (lo..=hi).map(|v| v as f64).collect()
            } else {
                raw.split('|')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            };
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(bad());
            }
            if grid.axes.insert(name.trim().to_owned(), values).is_some() {
                return Err(Error::InvalidArgument(format!("grid axis {name:?} given twice")));
            }
        }
        if grid.axes.is_empty() {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        Ok(grid)
    }
}

/// Default cap on the number of grid points a sweep will evaluate.
pub const DEFAULT_GRID_CAP: usize = 10_000;

/// `eta_prime <= eta` whenever both axes are present.
pub fn eta_prime_within_eta(point: &BTreeMap<String, f64>) -> bool {
    match (point.get("eta"), point.get("eta_prime")) {
        (Some(eta), Some(ep)) => ep <= eta,
        _ => true,
    }
}

/// Evaluates `runner` at every feasible grid point with the shared `seed`.
/// Infeasible points are skipped and logged. Points may run in parallel;
/// records come back in grid order.
pub fn sweep<F, P>(grid: &Grid, feasible: P, runner: F, seed: u64, cap: usize) -> Result<Vec<SweepRecord>>
where
    F: Fn(&BTreeMap<String, f64>, u64) -> Result<(MetricName, f64)> + Sync,
    P: Fn(&BTreeMap<String, f64>) -> bool,
{
    let size = grid.size();
    if size == 0 {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    if size > cap {
        return Err(Error::GridTooLarge { size, cap });
    }
    let points: Vec<_> = grid
        .points()
        .into_iter()
        .filter(|p| {
            let ok = feasible(p);
            if !ok {
                log::info!("skipping infeasible grid point {p:?}");
            }
            ok
        })
        .collect();
    points
        .into_par_iter()
        .map(|params| {
            let (metric_name, metric_value) = runner(&params, seed)?;
            if !metric_value.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite {metric_name} at {params:?}")));
            }
            Ok(SweepRecord {
                params,
                metric_name,
                metric_value,
                seed,
            })
        })
        .collect()
}

/// CSV with header `param:<name>...,metric,value,seed`.
pub fn format_sweep_csv(records: &[SweepRecord]) -> Result<String> {
    let names: Vec<String> = records.first().map(|r| r.params.keys().cloned().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = names.iter().map(|n| format!("param:{n}")).collect();
    header.extend(["metric", "value", "seed"].map(String::from));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for r in records {
        let mut row: Vec<String> = names
            .iter()
            .map(|n| r.params.get(n).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        row.push(r.metric_name.to_string());
        row.push(r.metric_value.to_string());
        row.push(r.seed.to_string());
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

pub fn format_sweep_jsonl(records: &[SweepRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Writes `<prefix>.csv` and `<prefix>.jsonl`.
pub fn write_sweep(records: &[SweepRecord], csv_path: &Path, jsonl_path: &Path) -> Result<()> {
    write_atomic(csv_path, format_sweep_csv(records)?.as_bytes())?;
    write_atomic(jsonl_path, format_sweep_jsonl(records).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(a, b)| (a.to_string(), *b)).collect()
    }

    #[test]
    fn top_scoring_positive_recalls_at_one() {
        let s = scores(&[("p", 0.9), ("a", 0.1), ("b", 0.5)]);
        assert!(recall_at(&s, "p", 1).unwrap());
    }

    #[test]
    fn second_place_fails_r1_passes_r2() {
        let s = scores(&[("a", 0.3), ("p", 0.8), ("b", 0.9), ("c", 0.1), ("d", -0.4), ("e", 0.0)]);
        assert!(!recall_at(&s, "p", 1).unwrap());
        assert!(recall_at(&s, "p", 2).unwrap());
    }

    #[test]
    fn missing_positive_is_an_error() {
        let s = scores(&[("a", 0.3)]);
        assert!(matches!(recall_at(&s, "p", 1), Err(Error::MissingPositive(_))));
    }

    #[test]
    fn all_equal_scores_follow_id_order() {
        // Oracle: sort ids ascending, rank is position + 1.
        let ids = ["e", "b", "p", "a", "q"];
        let s: Vec<_> = ids.iter().map(|i| (i.to_string(), 0.5)).collect();
        let mut sorted = ids.to_vec();
        sorted.sort();
        for id in ids {
            let want = sorted.iter().position(|x| *x == id).unwrap() + 1;
            assert_eq!(rank_of(&s, id).unwrap(), want);
        }
    }

    #[test]
    fn grid_points_are_lexicographic() {
        let g: Grid = "b=1|2|3,a=10..11".parse().unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        let flat: Vec<(f64, f64)> = pts.iter().map(|p| (p["a"], p["b"])).collect();
        assert_eq!(flat, vec![(10.0, 1.0), (10.0, 2.0), (10.0, 3.0), (11.0, 1.0), (11.0, 2.0), (11.0, 3.0)]);
        assert!("a".parse::<Grid>().is_err());
        assert!("a=3..1".parse::<Grid>().is_err());
        assert!("a=1,a=2".parse::<Grid>().is_err());
    }

    #[test]
    fn sweep_single_point_and_ordering() {
        let one = Grid::new().axis("lambda", [0.5]);
        let recs = sweep(&one, |_| true, |_, _| Ok((MetricName::Loss, 1.0)), 3, 10).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].seed, 3);

        let g = Grid::new().axis("x", [1.0, 2.0]).axis("y", [1.0, 2.0, 3.0]);
        let recs = sweep(&g, |_| true, |p, _| Ok((MetricName::R1, p["x"] * 10.0 + p["y"])), 0, 10).unwrap();
        let vals: Vec<f64> = recs.iter().map(|r| r.metric_value).collect();
        assert_eq!(vals, vec![11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn sweep_skips_infeasible_and_caps() {
        let g: Grid = "eta=2..7,eta_prime=0..7".parse().unwrap();
        let recs = sweep(&g, eta_prime_within_eta, |_, _| Ok((MetricName::R1, 0.0)), 0, 100).unwrap();
        let feasible = (2..=7).map(|eta| eta + 1).sum::<usize>();
        assert_eq!(recs.len(), feasible);
        assert!(recs.iter().all(|r| r.params["eta_prime"] <= r.params["eta"]));
        assert!(matches!(
            sweep(&g, eta_prime_within_eta, |_, _| Ok((MetricName::R1, 0.0)), 0, 10),
            Err(Error::GridTooLarge { size: 48, cap: 10 })
        ));
    }

    #[test]
    fn csv_layout() {
        let recs = vec![SweepRecord {
            params: [("eta".to_string(), 4.0), ("sigma".to_string(), 0.5)].into(),
            metric_name: MetricName::R1,
            metric_value: 0.75,
            seed: 7,
        }];
        assert_eq!(format_sweep_csv(&recs).unwrap(), "param:eta,param:sigma,metric,value,seed\n4,0.5,R@1,0.75,7\n");
        let back: SweepRecord = serde_json::from_str(format_sweep_jsonl(&recs).trim()).unwrap();
        assert_eq!(back, recs[0]);
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_cutoff(vals in prop::collection::vec(-1.0f64..1.0, 2..8), pick in 0usize..8) {
            let s: Vec<_> = vals.iter().enumerate().map(|(i, v)| (format!("c{i}"), *v)).collect();
            let pos = format!("c{}", pick % vals.len());
            let mut prev = false;
            for l in 1..=vals.len() {
                let hit = recall_at(&s, &pos, l).unwrap();
                prop_assert!(hit || !prev);
                prev = hit;
            }
            prop_assert!(prev);
        }

        #[test]
        fn rank_ignores_positive_rescaling(vals in prop::collection::vec(-1.0f64..1.0, 2..8), c in 0.01f64..100.0) {
            let s: Vec<_> = vals.iter().enumerate().map(|(i, v)| (format!("c{i}"), *v)).collect();
            let t: Vec<_> = s.iter().map(|(i, v)| (i.clone(), v * c)).collect();
            for (id, _) in &s {
                prop_assert_eq!(rank_of(&s, id).unwrap(), rank_of(&t, id).unwrap());
            }
        }
    }
}
