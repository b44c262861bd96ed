//! Nearest-neighbor indices over mapped material points.
//!
//! Every index answers 1-NN queries on the plain squared Euclidean distance
//! between [`MappedPoint`]s; the material metric lives entirely in the
//! mapping. Ties are broken by the smallest data index. Distance
//! evaluations are counted at a single choke point ([`Probe`]) so that the
//! reported comparison counts can be trusted by the benchmarks.

mod backend;
mod graph;
mod kdtree;
mod kmeans;
mod linear;
pub mod serialize;

use std::time::Duration;

pub use backend::{BackendSpec, GraphBuilder};
pub use graph::{build_knn_graph, KnnGraph};
pub use kdtree::{KdNode, KdTree, DEFAULT_LEAF_SIZE};
pub use kmeans::{KMeansTree, KmChildren, KmNode, DEFAULT_BRANCHING};
pub use linear::{linear_query, LinearIndex};

use crate::phase::{sq_dist, MappedPoint, PHASE_DIM};

/// Per-query accuracy controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryParams {
    /// Backtracking relaxation in `[0, 1]`; 1 is exact, 0 a single descent.
    pub f_d: f64,
    /// Maximum node changes of a graph search.
    pub f_s: Option<usize>,
    /// Graph start node, usually the previous nearest neighbor.
    pub warm_start: Option<usize>,
}

impl Default for QueryParams {
    fn default() -> Self {
        Self::exact()
    }
}

impl QueryParams {
    pub fn exact() -> Self {
        Self { f_d: 1.0, f_s: None, warm_start: None }
    }

    pub fn with_fd(f_d: f64) -> Self {
        Self { f_d, ..Self::exact() }
    }

    /// Clamps `f_d` into `[0, 1]` and `f_s` to at least 1.
    pub fn normalized(mut self) -> Self {
        self.f_d = if self.f_d.is_nan() { 1.0 } else { self.f_d.clamp(0.0, 1.0) };
        self.f_s = self.f_s.map(|s| s.max(1));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryResult {
    pub best_id: usize,
    pub best_dist_sq: f64,
    /// Runner-up distance, when the search produced one.
    pub second_dist_sq: Option<f64>,
    /// Whether `second_dist_sq` is the true second-nearest distance.
    pub second_exact: bool,
    pub comparisons: u64,
    /// Node changes (graph search only).
    pub hops: u64,
    /// Answered from a previous result without searching.
    pub skipped: bool,
}

impl QueryResult {
    /// The previous answer reused for a query that moved less than δ.
    pub fn reused(prev: &QueryResult, best_dist_sq: f64) -> Self {
        Self { best_dist_sq, comparisons: 0, hops: 0, skipped: true, ..*prev }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BuildStats {
    pub build_time: Duration,
    /// Bytes held by the structure, including its copy of the coordinates.
    pub memory_bytes: usize,
}

/// Immutable nearest-neighbor structure over one dataset.
pub trait NnIndex: Send + Sync {
    fn name(&self) -> &'static str;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, id: usize) -> &MappedPoint;

    fn query(&self, q: &MappedPoint, params: &QueryParams) -> QueryResult;

    fn build_stats(&self) -> BuildStats;

    /// Whether `second_dist_sq` is exact at `f_d = 1`.
    fn exact_second(&self) -> bool {
        false
    }
}

/// Indices able to return the `k` nearest points; used to build graphs.
pub trait KnnSource: Send + Sync {
    /// Up to `k` nearest `(id, dist_sq)` pairs, ascending by `(dist, id)`.
    fn knn(&self, q: &MappedPoint, k: usize, f_d: f64) -> Vec<(usize, f64)>;
}

/// Counts every distance evaluation of one query.
pub(crate) struct Probe<'a> {
    q: &'a [f64; PHASE_DIM],
    pub comparisons: u64,
}

impl<'a> Probe<'a> {
    pub fn new(q: &'a MappedPoint) -> Self {
        Self { q: &q.0, comparisons: 0 }
    }

    #[inline]
    pub fn dist_sq(&mut self, p: &[f64; PHASE_DIM]) -> f64 {
        self.comparisons += 1;
        sq_dist(self.q, p)
    }

    #[inline]
    pub fn coord(&self, dim: usize) -> f64 {
        self.q[dim]
    }
}

/// Receives candidate points during a tree search and supplies the pruning
/// radius (squared).
pub(crate) trait Collector {
    fn offer(&mut self, id: u32, d2: f64);
    fn bound_sq(&self) -> f64;
}

#[inline]
fn before(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Best and runner-up; prunes on the best.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Best2 {
    pub best: (f64, u32),
    pub second: (f64, u32),
}

impl Best2 {
    pub fn new() -> Self {
        Self { best: (f64::INFINITY, u32::MAX), second: (f64::INFINITY, u32::MAX) }
    }

    pub fn into_result(self, comparisons: u64, second_exact: bool) -> QueryResult {
        QueryResult {
            best_id: self.best.1 as usize,
            best_dist_sq: self.best.0,
            second_dist_sq: (self.second.1 != u32::MAX).then_some(self.second.0),
            second_exact: second_exact && self.second.1 != u32::MAX,
            comparisons,
            hops: 0,
            skipped: false,
        }
    }
}

impl Collector for Best2 {
    #[inline]
    fn offer(&mut self, id: u32, d2: f64) {
        if id == self.best.1 || id == self.second.1 {
            return;
        }
        let c = (d2, id);
        if before(c, self.best) {
            self.second = self.best;
            self.best = c;
        } else if before(c, self.second) {
            self.second = c;
        }
    }

    #[inline]
    fn bound_sq(&self) -> f64 {
        self.best.0
    }
}

/// The `k` best; prunes on the k-th.
pub(crate) struct KBest {
    k: usize,
    items: Vec<(f64, u32)>,
}

impl KBest {
    pub fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    pub fn into_sorted(self) -> Vec<(usize, f64)> {
        self.items.into_iter().map(|(d, id)| (id as usize, d)).collect()
    }
}

impl Collector for KBest {
    fn offer(&mut self, id: u32, d2: f64) {
        let c = (d2, id);
        if self.items.len() == self.k && !before(c, *self.items.last().unwrap()) {
            return;
        }
        if self.items.iter().any(|&(_, i)| i == id) {
            return;
        }
        let pos = self.items.partition_point(|&x| before(x, c));
        self.items.insert(pos, c);
        self.items.truncate(self.k);
    }

    fn bound_sq(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items.last().unwrap().0
        }
    }
}

/// Which form of the movement threshold δ to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaRule {
    /// `δ = (d₂ − d₁)/2`, the half gap between second and first neighbor.
    #[default]
    Corrected,
    /// `δ = (d₁ − d₂)/2` taken literally; never positive, so it never fires.
    AsPrinted,
}

pub fn skip_threshold(prev: &QueryResult, rule: DeltaRule) -> Option<f64> {
    let d1 = prev.best_dist_sq.sqrt();
    let d2 = prev.second_dist_sq?.sqrt();
    Some(match rule {
        DeltaRule::Corrected => (d2 - d1) / 2.0,
        DeltaRule::AsPrinted => (d1 - d2) / 2.0,
    })
}

/// True when the query moved less than δ since `prev` was computed at
/// `q_prev`. With an exact `second_dist_sq`, `prev.best_id` is then still a
/// nearest neighbor of `q_now`.
pub fn should_skip(prev: &QueryResult, q_prev: &MappedPoint, q_now: &MappedPoint) -> bool {
    should_skip_with(prev, q_prev, q_now, DeltaRule::Corrected)
}

pub fn should_skip_with(prev: &QueryResult, q_prev: &MappedPoint, q_now: &MappedPoint, rule: DeltaRule) -> bool {
    match skip_threshold(prev, rule) {
        Some(delta) => q_prev.dist_sq(q_now).sqrt() < delta,
        None => false,
    }
}

/// Fraction of results whose distance equals the oracle's (within a relative
/// `1e-12`).
pub fn recall_at_1(results: &[QueryResult], oracle: &[QueryResult]) -> f64 {
    assert_eq!(results.len(), oracle.len());
    if results.is_empty() {
        return 1.0;
    }
    let hits = results
        .iter()
        .zip(oracle)
        .filter(|(r, o)| r.best_dist_sq <= o.best_dist_sq * (1.0 + 1e-12) + f64::MIN_POSITIVE)
        .count();
    hits as f64 / results.len() as f64
}
