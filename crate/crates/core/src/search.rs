//! k-nearest-neighbor retrieval over a [`DescriptorBank`].
//!
//! A flat index scans every row exactly. A partitioned index keeps a coarse
//! quantizer (centroids refined for a fixed number of iterations from a
//! seeded initialization) and scans only the rows of the `probe_count`
//! closest partitions.

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::bank::DescriptorBank;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: [u8; 4] = *b"NEIX";
pub const INDEX_VERSION: u32 = 1;

/// Centroid refinement passes for partitioned indexes.
pub const REFINE_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Euclidean distance on raw vectors.
    L2,
    /// Euclidean distance between unit-normalized vectors; orders exactly
    /// like cosine similarity.
    #[default]
    Cosine,
    /// Negated inner product. Unlike the other metrics this can be negative.
    InnerProduct,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
            Metric::InnerProduct => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::L2),
            1 => Some(Metric::Cosine),
            2 => Some(Metric::InnerProduct),
            _ => None,
        }
    }

    pub fn distance(self, query: &[f64], row: &[f32]) -> f64 {
        match self {
            Metric::L2 => query
                .iter()
                .zip(row)
                .map(|(&q, &x)| {
                    let d = q - f64::from(x);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let qn = norm(query.iter().copied());
                let xn = norm(row.iter().map(|&x| f64::from(x)));
                // Divide rather than multiply by reciprocals so that
                // collinear vectors normalize to identical coordinates.
                let unit = |v: f64, n: f64| if n > 0.0 { v / n } else { 0.0 };
                query
                    .iter()
                    .zip(row)
                    .map(|(&q, &x)| {
                        let d = unit(q, qn) - unit(f64::from(x), xn);
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            }
            Metric::InnerProduct => -query.iter().zip(row).map(|(&q, &x)| q * f64::from(x)).sum::<f64>(),
        }
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partitions {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

impl Partitions {
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn centroid(&self, p: usize) -> &[f32] {
        &self.centroids[p * self.dim..(p + 1) * self.dim]
    }

    pub fn list(&self, p: usize) -> &[u32] {
        &self.lists[p]
    }

    /// Partition id of every row, in row order.
    pub fn assignment(&self, count: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; count];
        for (p, list) in self.lists.iter().enumerate() {
            for &r in list {
                out[r as usize] = p;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchIndex {
    metric: Metric,
    dim: usize,
    partitions: Option<Partitions>,
    probe_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub ids: Vec<String>,
    pub rows: Vec<usize>,
    pub distances: Vec<f64>,
}

impl KnnResult {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl SearchIndex {
    pub fn flat(metric: Metric, dim: usize) -> Self {
        Self {
            metric,
            dim,
            partitions: None,
            probe_count: 1,
        }
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn partitions(&self) -> Option<&Partitions> {
        self.partitions.as_ref()
    }

    pub fn probe_count(&self) -> usize {
        self.probe_count
    }

    pub fn is_flat(&self) -> bool {
        self.partitions.is_none()
    }

    /// Sets how many partitions a query scans; clamped to `[1, n_partitions]`.
    pub fn with_probe_count(mut self, probes: usize) -> Self {
        let max = self.partitions.as_ref().map_or(1, |p| p.len().max(1));
        self.probe_count = probes.clamp(1, max);
        self
    }
}

pub fn build_index(bank: &DescriptorBank, metric: Metric, n_partitions: usize, seed: u64) -> Result<SearchIndex> {
    let dim = bank.dim();
    if n_partitions == 0 {
        return Ok(SearchIndex::flat(metric, dim));
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let count = bank.len();
    if n_partitions > count {
        return Err(Error::InvalidArgument(format!(
            "n_partitions {n_partitions} exceeds bank size {count}"
        )));
    }

    let partitions = if n_partitions == count {
        Partitions {
            dim,
            centroids: bank.data().to_vec(),
            lists: (0..count as u32).map(|r| vec![r]).collect(),
        }
    } else {
        refine_partitions(bank, metric, n_partitions, seed)
    };
    Ok(SearchIndex {
        metric,
        dim,
        partitions: Some(partitions),
        probe_count: 1,
    })
}

fn nearest_centroid(metric: Metric, centroids: &[f32], dim: usize, point: &[f64]) -> usize {
    centroids
        .chunks_exact(dim)
        .map(|c| metric.distance(point, c))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one centroid")
}

fn refine_partitions(bank: &DescriptorBank, metric: Metric, k: usize, seed: u64) -> Partitions {
    let dim = bank.dim();
    let count = bank.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = rand::seq::index::sample(&mut rng, count, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<f32> = init.iter().flat_map(|&r| bank.row(r).iter().copied()).collect();
    let rows: Vec<Vec<f64>> = (0..count).map(|r| bank.row_f64(r).to_vec()).collect();

    let mut assign = vec![0usize; count];
    for _ in 0..REFINE_ITERATIONS {
        for (r, row) in rows.iter().enumerate() {
            assign[r] = nearest_centroid(metric, &centroids, dim, row);
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut sizes = vec![0usize; k];
        for (r, row) in rows.iter().enumerate() {
            let p = assign[r];
            sizes[p] += 1;
            for (s, v) in sums[p * dim..(p + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        for p in 0..k {
            // Empty partitions keep their previous centroid.
            if sizes[p] > 0 {
                for j in 0..dim {
                    centroids[p * dim + j] = (sums[p * dim + j] / sizes[p] as f64) as f32;
                }
            }
        }
    }
    for (r, row) in rows.iter().enumerate() {
        assign[r] = nearest_centroid(metric, &centroids, dim, row);
    }
    let mut lists = vec![Vec::new(); k];
    for (r, &p) in assign.iter().enumerate() {
        lists[p].push(r as u32);
    }
    Partitions { dim, centroids, lists }
}

fn by_distance_then_row(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Returns the `eta` nearest bank rows to `query`, closest first.
pub fn knn(index: &SearchIndex, bank: &DescriptorBank, query: &[f64], eta: usize) -> Result<KnnResult> {
    if eta == 0 {
        return Err(Error::InvalidArgument("eta must be at least 1".into()));
    }
    if index.dim != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: index.dim,
        });
    }
    if query.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: query.len(),
        });
    }
    let metric = index.metric;
    let want = eta.min(bank.len());

    let mut scored: Vec<(f64, usize)> = match &index.partitions {
        None => (0..bank.len()).map(|r| (metric.distance(query, bank.row(r)), r)).collect(),
        Some(parts) => {
            let mut order: Vec<(f64, usize)> =
                (0..parts.len()).map(|p| (metric.distance(query, parts.centroid(p)), p)).collect();
            order.sort_by(by_distance_then_row);
            let mut rows = Vec::new();
            for (probed, &(_, p)) in order.iter().enumerate() {
                if probed >= index.probe_count && rows.len() >= want {
                    break;
                }
                rows.extend(parts.list(p).iter().map(|&r| r as usize));
            }
            rows.into_iter().map(|r| (metric.distance(query, bank.row(r)), r)).collect()
        }
    };

    if want < scored.len() {
        scored.select_nth_unstable_by(want, by_distance_then_row);
        scored.truncate(want);
    }
    scored.sort_by(by_distance_then_row);
    Ok(KnnResult {
        ids: scored.iter().map(|&(_, r)| bank.id(r).to_owned()).collect(),
        rows: scored.iter().map(|&(_, r)| r).collect(),
        distances: scored.iter().map(|&(d, _)| d).collect(),
    })
}

/// Runs [`knn`] for many queries in parallel; output order follows input order.
pub fn knn_batch(index: &SearchIndex, bank: &DescriptorBank, queries: &[Vec<f64>], eta: usize) -> Result<Vec<KnnResult>> {
    queries.par_iter().map(|q| knn(index, bank, q, eta)).collect()
}

pub fn encode_index(index: &SearchIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.push(index.metric.code());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.probe_count as u32).to_le_bytes());
    let n = index.partitions.as_ref().map_or(0, Partitions::len);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    if let Some(parts) = &index.partitions {
        for v in &parts.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for list in &parts.lists {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for r in list {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a serialized index and checks its partition lists cover
/// `bank_len` rows exactly once.
pub fn decode_index(bytes: &[u8], bank_len: usize) -> Result<SearchIndex> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4).map_err(|_| Error::BadMagic {
        expected: INDEX_MAGIC,
        found: bytes.to_vec(),
    })?;
    if magic != INDEX_MAGIC {
        return Err(Error::BadMagic {
            expected: INDEX_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = cur.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::VersionMismatch {
            expected: INDEX_VERSION,
            found: version,
        });
    }
    let code = cur.take(1)?[0];
    let metric = Metric::from_code(code).ok_or_else(|| Error::Format(format!("unknown metric code {code}")))?;
    let dim = cur.u32()? as usize;
    let probe_count = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    if dim == 0 || probe_count == 0 {
        return Err(Error::Format("index header has zero dim or probe count".into()));
    }
    let partitions = if n == 0 {
        None
    } else {
        let raw = cur.take(4 * n * dim)?;
        let centroids: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut seen = vec![false; bank_len];
        let mut lists = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u32()? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let r = cur.u32()?;
                match seen.get_mut(r as usize) {
                    Some(s) if !*s => *s = true,
                    _ => return Err(Error::Format(format!("partition row {r} is out of range or repeated"))),
                }
                list.push(r);
            }
            lists.push(list);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("partition lists do not cover every bank row".into()));
        }
        Some(Partitions { dim, centroids, lists })
    };
    if cur.at != bytes.len() {
        return Err(Error::TrailingBytes {
            expected: cur.at as u64,
            found: bytes.len() as u64,
        });
    }
    if partitions.is_none() && probe_count != 1 {
        return Err(Error::Format("flat index must have probe count 1".into()));
    }
    Ok(SearchIndex {
        metric,
        dim,
        partitions,
        probe_count,
    })
}

pub fn save_index(index: &SearchIndex, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_index(index))
}

pub fn load_index(path: impl AsRef<Path>, bank: &DescriptorBank) -> Result<SearchIndex> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let index = decode_index(&bytes, bank.len())?;
    if index.dim != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: index.dim,
        });
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_bank(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> DescriptorBank {
        DescriptorBank::from_rows(
            dim,
            (0..count).map(|i| (format!("r{i:03}"), (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())),
        )
        .unwrap()
    }

    /// Exhaustive oracle: every pairwise distance, full sort.
    fn oracle(bank: &DescriptorBank, metric: Metric, q: &[f64], eta: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..bank.len())
            .map(|r| {
                let x: Vec<f64> = bank.row(r).iter().map(|&v| v as f64).collect();
                let d = match metric {
                    Metric::L2 => q.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                    Metric::Cosine => {
                        let na = q.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let nb = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let cos = q.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / (na * nb);
                        (2.0 - 2.0 * cos).max(0.0).sqrt()
                    }
                    Metric::InnerProduct => -q.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>(),
                };
                (r, d)
            })
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(eta);
        all
    }

    #[test]
    fn flat_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank = random_bank(&mut rng, 50, 8);
        for metric in [Metric::L2, Metric::Cosine, Metric::InnerProduct] {
            let index = build_index(&bank, metric, 0, 0).unwrap();
            for _ in 0..10 {
                let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let got = knn(&index, &bank, &q, 7).unwrap();
                let want = oracle(&bank, metric, &q, 7);
                assert_eq!(got.rows, want.iter().map(|w| w.0).collect::<Vec<_>>());
                for (d, w) in got.distances.iter().zip(&want) {
                    assert!((d - w.1).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn self_match_comes_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = random_bank(&mut rng, 20, 4);
        let index = build_index(&bank, Metric::L2, 0, 0).unwrap();
        let q = bank.row_f64(13).to_vec();
        let res = knn(&index, &bank, &q, 3).unwrap();
        assert_eq!(res.rows[0], 13);
        assert_eq!(res.distances[0], 0.0);
        assert_eq!(res.ids[0], "r013");
    }

    #[test]
    fn eta_beyond_count_returns_everything_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = random_bank(&mut rng, 6, 3);
        let index = build_index(&bank, Metric::L2, 0, 0).unwrap();
        let res = knn(&index, &bank, &[0.0, 0.0, 0.0], 100).unwrap();
        assert_eq!(res.len(), 6);
        assert!(res.distances.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn collinear_rows_tie_exactly_under_cosine() {
        let bank = DescriptorBank::from_rows(1, [("a", vec![3.0f32]), ("b", vec![-1.0]), ("c", vec![0.7]), ("d", vec![1e-3])]).unwrap();
        let res = knn(&SearchIndex::flat(Metric::Cosine, 1), &bank, &[0.3], 3).unwrap();
        assert_eq!(res.ids, ["a", "c", "d"]);
        assert_eq!(res.distances, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_break_by_row() {
        let bank = DescriptorBank::from_rows(1, vec![("a", vec![1.0]), ("b", vec![-1.0]), ("c", vec![1.0])]).unwrap();
        let index = build_index(&bank, Metric::L2, 0, 0).unwrap();
        let res = knn(&index, &bank, &[0.0], 3).unwrap();
        assert_eq!(res.rows, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = random_bank(&mut rng, 6, 3);
        let index = build_index(&bank, Metric::L2, 0, 0).unwrap();
        assert!(matches!(knn(&index, &bank, &[0.0; 2], 1), Err(Error::DimensionMismatch { .. })));
        assert!(knn(&index, &bank, &[0.0; 3], 0).is_err());
        let empty = DescriptorBank::new(3, vec![], vec![]).unwrap();
        assert!(matches!(build_index(&empty, Metric::L2, 2, 0), Err(Error::EmptyBank)));
        assert!(build_index(&empty, Metric::L2, 0, 0).unwrap().is_flat());
        assert!(build_index(&bank, Metric::L2, 7, 0).is_err());
    }

    #[test]
    fn one_partition_per_row_when_saturated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = random_bank(&mut rng, 9, 2);
        let index = build_index(&bank, Metric::L2, 9, 1).unwrap();
        let parts = index.partitions().unwrap();
        assert_eq!(parts.len(), 9);
        for p in 0..9 {
            assert_eq!(parts.list(p), &[p as u32]);
        }
    }

    #[test]
    fn partitioning_is_deterministic_and_a_disjoint_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bank = random_bank(&mut rng, 80, 6);
        let a = build_index(&bank, Metric::Cosine, 4, 99).unwrap();
        let b = build_index(&bank, Metric::Cosine, 4, 99).unwrap();
        assert_eq!(a, b);
        let assign = a.partitions().unwrap().assignment(bank.len());
        assert!(assign.iter().all(|&p| p < 4));
        let total: usize = (0..4).map(|p| a.partitions().unwrap().list(p).len()).sum();
        assert_eq!(total, 80);
    }

    #[test]
    fn full_probe_equals_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = random_bank(&mut rng, 60, 5);
        let flat = build_index(&bank, Metric::L2, 0, 0).unwrap();
        let ivf = build_index(&bank, Metric::L2, 6, 2).unwrap().with_probe_count(6);
        for _ in 0..20 {
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(knn(&flat, &bank, &q, 5).unwrap(), knn(&ivf, &bank, &q, 5).unwrap());
        }
    }

    #[test]
    fn single_probe_still_fills_eta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = random_bank(&mut rng, 30, 3);
        let ivf = build_index(&bank, Metric::L2, 10, 2).unwrap();
        let res = knn(&ivf, &bank, &[0.0, 0.0, 0.0], 12).unwrap();
        assert_eq!(res.len(), 12);
    }

    #[test]
    fn index_bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = random_bank(&mut rng, 30, 3);
        for idx in [
            build_index(&bank, Metric::InnerProduct, 0, 0).unwrap(),
            build_index(&bank, Metric::L2, 5, 2).unwrap().with_probe_count(2),
        ] {
            let bytes = encode_index(&idx);
            assert_eq!(decode_index(&bytes, bank.len()).unwrap(), idx);
            assert!(decode_index(&bytes[..bytes.len() - 1], bank.len()).is_err());
        }
        let bytes = encode_index(&build_index(&bank, Metric::L2, 5, 2).unwrap());
        assert!(decode_index(&bytes, bank.len() + 1).is_err());
    }

    #[test]
    fn batch_is_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bank = random_bank(&mut rng, 40, 4);
        let index = build_index(&bank, Metric::Cosine, 0, 0).unwrap();
        let queries: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| knn_batch(&index, &bank, &queries, 4).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
