use std::time::Instant;

use crate::error::{Error, Result};
use crate::matgen::MaterialDataset;
use crate::nn::{Best2, BuildStats, Collector, KBest, KnnSource, NnIndex, Probe, QueryParams, QueryResult};
use crate::phase::MappedPoint;

/// Exhaustive scan; the exactness oracle for every other index.
#[derive(Debug, Clone)]
pub struct LinearIndex {
    points: Vec<MappedPoint>,
    stats: BuildStats,
}

impl LinearIndex {
    pub fn new(points: Vec<MappedPoint>) -> Self {
        let start = Instant::now();
        let memory_bytes = points.len() * std::mem::size_of::<MappedPoint>();
        Self { points, stats: BuildStats { build_time: start.elapsed(), memory_bytes } }
    }

    pub fn build(data: &MaterialDataset) -> Result<Self> {
        let mapped = data.require_bound()?;
        Ok(Self::new(mapped.to_vec()))
    }

    fn scan<C: Collector>(&self, probe: &mut Probe, coll: &mut C) {
        for (i, p) in self.points.iter().enumerate() {
            let d = probe.dist_sq(&p.0);
            coll.offer(i as u32, d);
        }
    }
}

impl NnIndex for LinearIndex {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn point(&self, id: usize) -> &MappedPoint {
        &self.points[id]
    }

    fn query(&self, q: &MappedPoint, _params: &QueryParams) -> QueryResult {
        let mut probe = Probe::new(q);
        let mut best = Best2::new();
        self.scan(&mut probe, &mut best);
        best.into_result(probe.comparisons, true)
    }

    fn build_stats(&self) -> BuildStats {
        self.stats
    }

    fn exact_second(&self) -> bool {
        true
    }
}

impl KnnSource for LinearIndex {
    fn knn(&self, q: &MappedPoint, k: usize, _f_d: f64) -> Vec<(usize, f64)> {
        let mut probe = Probe::new(q);
        let mut coll = KBest::new(k);
        self.scan(&mut probe, &mut coll);
        coll.into_sorted()
    }
}

/// Exact 1-NN and 2-NN of `q` over the dataset's mapped points.
pub fn linear_query(data: &MaterialDataset, q: &MappedPoint) -> Result<QueryResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mapped = data.require_bound()?;
    let mut probe = Probe::new(q);
    let mut best = Best2::new();
    for (i, p) in mapped.iter().enumerate() {
        let d = probe.dist_sq(&p.0);
        best.offer(i as u32, d);
    }
    Ok(best.into_result(probe.comparisons, true))
}
