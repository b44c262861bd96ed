use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, FormatError, Result};
use crate::matgen::MaterialDataset;
use crate::nn::{Best2, BuildStats, Collector, KnnSource, NnIndex, Probe, QueryParams, QueryResult};
use crate::phase::MappedPoint;

/// Directed k-nearest-neighbor graph searched by greedy descent.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    points: Vec<MappedPoint>,
    /// `k` neighbor ids per point, nearest first.
    adjacency: Vec<u32>,
    k: usize,
    builder_fd: f64,
    seed: u64,
    stats: BuildStats,
}

/// Builds the graph by asking `builder` for the `k` nearest points of every
/// data point, itself excluded.
pub fn build_knn_graph(
    data: &MaterialDataset,
    k: usize,
    builder: &dyn KnnSource,
    builder_fd: f64,
    seed: u64,
) -> Result<KnnGraph> {
    KnnGraph::build(data.require_bound()?.to_vec(), k, builder, builder_fd, seed)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl KnnGraph {
    pub fn build(
        points: Vec<MappedPoint>,
        k: usize,
        builder: &dyn KnnSource,
        builder_fd: f64,
        seed: u64,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if k == 0 || k >= n {
            return Err(Error::Contract(format!("graph degree k = {k} must satisfy 1 <= k < N = {n}")));
        }
        if n > u32::MAX as usize {
            return Err(Error::Contract("too many points for 32-bit ids".into()));
        }
        let start = Instant::now();
        let lists: Vec<Vec<u32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut ids: Vec<u32> = builder
                    .knn(&points[i], k + 1, builder_fd)
                    .into_iter()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, _)| j as u32)
                    .collect();
                ids.truncate(k);
                ids
            })
            .collect();
        let mut adjacency = Vec::with_capacity(n * k);
        for (i, ids) in lists.into_iter().enumerate() {
            if ids.len() != k {
                return Err(Error::Contract(format!("builder returned {} neighbors for point {i}", ids.len())));
            }
            adjacency.extend(ids);
        }
        let memory_bytes = adjacency.len() * 4 + n * std::mem::size_of::<MappedPoint>();
        let stats = BuildStats { build_time: start.elapsed(), memory_bytes };
        Ok(Self { points, adjacency, k, builder_fd, seed, stats })
    }

    pub(crate) fn from_parts(
        adjacency: Vec<u32>,
        k: usize,
        points: &[MappedPoint],
        builder_fd: f64,
        seed: u64,
    ) -> Result<Self, FormatError> {
        let n = points.len();
        if k == 0 || k >= n {
            return Err(FormatError::Invalid(format!("degree {k} invalid for {n} points")));
        }
        if adjacency.len() != n * k {
            return Err(FormatError::Invalid(format!("{} ids for {n} lists of {k}", adjacency.len())));
        }
        for (i, list) in adjacency.chunks_exact(k).enumerate() {
            for &j in list {
                if j as usize >= n || j as usize == i {
                    return Err(FormatError::Invalid(format!("point {i} has bad neighbor {j}")));
                }
            }
        }
        let memory_bytes = adjacency.len() * 4 + std::mem::size_of_val(points);
        Ok(Self {
            points: points.to_vec(),
            adjacency,
            k,
            builder_fd,
            seed,
            stats: BuildStats { build_time: Default::default(), memory_bytes },
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn builder_fd(&self) -> f64 {
        self.builder_fd
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn neighbors(&self, id: usize) -> &[u32] {
        &self.adjacency[id * self.k..(id + 1) * self.k]
    }

    pub fn adjacency(&self) -> &[u32] {
        &self.adjacency
    }

    /// Start node for queries without a warm start, derived from the graph
    /// seed and the query coordinates.
    pub fn cold_start(&self, q: &MappedPoint) -> usize {
        let h = q.0.iter().fold(mix(self.seed), |h, v| mix(h ^ v.to_bits()));
        (h % self.points.len() as u64) as usize
    }
}

impl NnIndex for KnnGraph {
    fn name(&self) -> &'static str {
        "graph"
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn point(&self, id: usize) -> &MappedPoint {
        &self.points[id]
    }

    /// Evaluates all neighbors of the current node and moves to the closest
    /// one while that strictly improves; stops at a local minimum or after
    /// `f_s` moves. The runner-up is the second best point seen.
    fn query(&self, q: &MappedPoint, params: &QueryParams) -> QueryResult {
        let p = params.normalized();
        let mut cur = match p.warm_start {
            Some(s) if s < self.points.len() => s,
            _ => self.cold_start(q),
        };
        let mut probe = Probe::new(q);
        let mut seen = Best2::new();
        let mut d_cur = probe.dist_sq(&self.points[cur].0);
        seen.offer(cur as u32, d_cur);
        let mut hops = 0u64;
        let limit = p.f_s.map_or(u64::MAX, |s| s as u64);
        while hops < limit {
            let mut next = (f64::INFINITY, u32::MAX);
            for &j in self.neighbors(cur) {
                let d = probe.dist_sq(&self.points[j as usize].0);
                seen.offer(j, d);
                if d < next.0 || (d == next.0 && j < next.1) {
                    next = (d, j);
                }
            }
            if next.0 < d_cur {
                cur = next.1 as usize;
                d_cur = next.0;
                hops += 1;
            } else {
                break;
            }
        }
        let mut r = seen.into_result(probe.comparisons, false);
        r.hops = hops;
        r
    }

    fn build_stats(&self) -> BuildStats {
        self.stats
    }
}
