use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, FormatError, Result};
use crate::matgen::{substream, unit_f64, MaterialDataset};
use crate::nn::{Best2, BuildStats, Collector, KBest, KnnSource, NnIndex, Probe, QueryParams, QueryResult};
use crate::phase::{sq_dist, MappedPoint, PHASE_DIM};

pub const DEFAULT_BRANCHING: usize = 4;
const LLOYD_MAX_ITERS: usize = 25;
const LLOYD_REL_TOL: f64 = 1e-6;
/// Point count above which the Lloyd assignment step runs in parallel.
const PAR_ASSIGN_MIN: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KmChildren {
    /// `count` consecutive nodes starting at `first`.
    Inner { first: u32, count: u32 },
    /// Range into the tree's leaf-ordered point arrays.
    Leaf { start: u32, end: u32 },
}

/// Cluster node: mean of the contained points and the largest distance
/// from it to any of them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmNode {
    pub center: MappedPoint,
    pub radius: f64,
    pub children: KmChildren,
}

/// Hierarchical k-means tree with radius-scaled backtracking.
#[derive(Debug, Clone)]
pub struct KMeansTree {
    nodes: Vec<KmNode>,
    perm: Vec<u32>,
    coords: Vec<MappedPoint>,
    slot: Vec<u32>,
    k: usize,
    seed: u64,
    stats: BuildStats,
}

fn mean_of(points: &[MappedPoint], ids: &[u32]) -> [f64; PHASE_DIM] {
    let mut c = [0.0; PHASE_DIM];
    for &i in ids {
        for (a, v) in c.iter_mut().zip(points[i as usize].0) {
            *a += v;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    c.map(|v| v * inv)
}

fn radius_of(points: &[MappedPoint], ids: &[u32], center: &[f64; PHASE_DIM]) -> f64 {
    ids.iter().map(|&i| sq_dist(&points[i as usize].0, center)).fold(0.0, f64::max).sqrt()
}

fn nearest_center(p: &[f64; PHASE_DIM], centers: &[[f64; PHASE_DIM]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Returns a cluster label
/// per entry of `ids`.
fn kmeans(points: &[MappedPoint], ids: &[u32], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = ids.len();
    let at = |j: usize| &points[ids[j] as usize].0;
    let mut centers: Vec<[f64; PHASE_DIM]> = Vec::with_capacity(k);
    centers.push(*at(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|j| sq_dist(at(j), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = unit_f64(rng) * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (j, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = j;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = *at(pick);
        for (j, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(at(j), &c));
        }
        centers.push(c);
    }

    let scale = {
        let m = mean_of(points, ids);
        radius_of(points, ids, &m).max(f64::MIN_POSITIVE)
    };
    let mut labels = vec![0usize; n];
    for _ in 0..LLOYD_MAX_ITERS {
        let assign = |j: usize| nearest_center(at(j), &centers);
        let assigned: Vec<(usize, f64)> = if n >= PAR_ASSIGN_MIN {
            (0..n).into_par_iter().map(assign).collect()
        } else {
            (0..n).map(assign).collect()
        };
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        let mut sums = vec![[0.0; PHASE_DIM]; k];
        let mut counts = vec![0usize; k];
        for (j, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(at(j)) {
                *s += v;
            }
        }
        // Empty clusters are re-seeded at the point farthest from its center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&j| counts[labels[j]] > 1)
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)));
                if let Some(j) = far {
                    let old = labels[j];
                    counts[old] -= 1;
                    for (s, v) in sums[old].iter_mut().zip(at(j)) {
                        *s -= v;
                    }
                    labels[j] = c;
                    counts[c] = 1;
                    sums[c] = *at(j);
                }
            }
        }
        let mut moved = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let next = sums[c].map(|v| v * inv);
            moved = moved.max(sq_dist(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        if moved <= LLOYD_REL_TOL * scale {
            break;
        }
    }
    labels
}

impl KMeansTree {
    pub fn build(data: &MaterialDataset, k: usize, seed: u64) -> Result<Self> {
        Self::from_points(data.require_bound()?.to_vec(), k, seed)
    }

    pub fn from_points(points: Vec<MappedPoint>, k: usize, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if k < 2 {
            return Err(Error::Contract("branching factor k must be at least 2".into()));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::Contract("too many points for 32-bit ids".into()));
        }
        let start = Instant::now();
        let mut perm: Vec<u32> = (0..points.len() as u32).collect();
        let root_center = mean_of(&points, &perm);
        let mut nodes = vec![KmNode {
            center: MappedPoint(root_center),
            radius: radius_of(&points, &perm, &root_center),
            children: KmChildren::Leaf { start: 0, end: 0 },
        }];
        Self::grow(&points, &mut perm, 0, 0, k, seed, &mut nodes);
        let coords: Vec<MappedPoint> = perm.iter().map(|&i| points[i as usize]).collect();
        let mut slot = vec![0u32; points.len()];
        for (s, &id) in perm.iter().enumerate() {
            slot[id as usize] = s as u32;
        }
        let memory_bytes = nodes.len() * std::mem::size_of::<KmNode>()
            + coords.len() * std::mem::size_of::<MappedPoint>()
            + 8 * perm.len();
        let stats = BuildStats { build_time: start.elapsed(), memory_bytes };
        Ok(Self { nodes, perm, coords, slot, k, seed, stats })
    }

    /// Fills in `nodes[me]`, whose center and radius are already set, for
    /// the points `ids` stored at `offset` in leaf order.
    fn grow(
        points: &[MappedPoint],
        ids: &mut [u32],
        offset: usize,
        me: usize,
        k: usize,
        seed: u64,
        nodes: &mut Vec<KmNode>,
    ) {
        let n = ids.len();
        if n <= k * k {
            nodes[me].children = KmChildren::Leaf { start: offset as u32, end: (offset + n) as u32 };
            return;
        }
        let mut rng = substream(seed, me as u64);
        let mut labels = kmeans(points, ids, k, &mut rng);
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        if counts.contains(&0) || counts.contains(&n) {
            // Degenerate clustering (e.g. duplicate points): split evenly by position.
            for (j, l) in labels.iter_mut().enumerate() {
                *l = j * k / n;
            }
            counts = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
        }
        // Stable reorder of ids by label.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&j| labels[j]);
        let reordered: Vec<u32> = order.iter().map(|&j| ids[j]).collect();
        ids.copy_from_slice(&reordered);

        let first = nodes.len();
        let mut bounds = Vec::with_capacity(k);
        let mut at = 0;
        for &count in &counts {
            let sub = &ids[at..at + count];
            let center = mean_of(points, sub);
            nodes.push(KmNode {
                center: MappedPoint(center),
                radius: radius_of(points, sub, &center),
                children: KmChildren::Leaf { start: 0, end: 0 },
            });
            bounds.push((at, count));
            at += count;
        }
        nodes[me].children = KmChildren::Inner { first: first as u32, count: k as u32 };
        for (c, (at, count)) in bounds.into_iter().enumerate() {
            Self::grow(points, &mut ids[at..at + count], offset + at, first + c, k, seed, nodes);
        }
    }

    pub fn nodes(&self) -> &[KmNode] {
        &self.nodes
    }

    pub fn branching(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn permutation(&self) -> &[u32] {
        &self.perm
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &KMeansTree, n: usize) -> usize {
            match t.nodes[n].children {
                KmChildren::Leaf { .. } => 1,
                KmChildren::Inner { first, count } => {
                    1 + (first..first + count).map(|c| walk(t, c as usize)).max().unwrap_or(0)
                }
            }
        }
        walk(self, 0)
    }

    /// Ids of the points below `node`.
    pub fn contained(&self, node: usize) -> Vec<usize> {
        match self.nodes[node].children {
            KmChildren::Leaf { start, end } => (start..end).map(|s| self.perm[s as usize] as usize).collect(),
            KmChildren::Inner { first, count } => {
                (first..first + count).flat_map(|c| self.contained(c as usize)).collect()
            }
        }
    }

    pub(crate) fn from_parts(
        nodes: Vec<KmNode>,
        perm: Vec<u32>,
        points: &[MappedPoint],
        k: usize,
        seed: u64,
    ) -> Result<Self, FormatError> {
        let n = points.len();
        if k < 2 {
            return Err(FormatError::Invalid("branching factor below 2".into()));
        }
        if perm.len() != n {
            return Err(FormatError::Invalid(format!("index covers {} points, dataset has {n}", perm.len())));
        }
        let mut slot = vec![u32::MAX; n];
        for (s, &id) in perm.iter().enumerate() {
            let id = id as usize;
            if id >= n || slot[id] != u32::MAX {
                return Err(FormatError::Invalid(format!("permutation entry {id} invalid or repeated")));
            }
            slot[id] = s as u32;
        }
        let coords: Vec<MappedPoint> = perm.iter().map(|&i| points[i as usize]).collect();
        if nodes.is_empty() {
            return Err(FormatError::Invalid("no nodes".into()));
        }
        // Children follow their parent, each node is reached once, leaves
        // tile [0, n) in order, and every point lies within the radius of
        // each ancestor.
        let mut seen = vec![false; nodes.len()];
        let mut next_leaf = 0u32;
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, Vec::new())];
        while let Some((id, ancestors)) = stack.pop() {
            if id >= nodes.len() || std::mem::replace(&mut seen[id], true) {
                return Err(FormatError::Invalid(format!("node {id} out of range or shared")));
            }
            let node = &nodes[id];
            if !(node.radius >= 0.0 && node.radius.is_finite()) || node.center.0.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::Invalid(format!("node {id} has a bad center or radius")));
            }
            match node.children {
                KmChildren::Leaf { start, end } => {
                    if start != next_leaf || end < start || end as usize > n {
                        return Err(FormatError::Invalid(format!("leaf {id} range {start}..{end} out of order")));
                    }
                    if (end - start) as usize > k * k {
                        return Err(FormatError::Invalid(format!("leaf {id} exceeds bucket size")));
                    }
                    let mut chain = ancestors;
                    chain.push(id);
                    for p in &coords[start as usize..end as usize] {
                        for &a in &chain {
                            let d = sq_dist(&p.0, &nodes[a].center.0).sqrt();
                            if d > nodes[a].radius * (1.0 + 1e-12) + 1e-300 {
                                return Err(FormatError::Invalid(format!("point outside radius of node {a}")));
                            }
                        }
                    }
                    next_leaf = end;
                }
                KmChildren::Inner { first, count } => {
                    let first = first as usize;
                    if first <= id || count == 0 || count as usize > k || first + count as usize > nodes.len() {
                        return Err(FormatError::Invalid(format!("node {id} has malformed children")));
                    }
                    let mut chain = ancestors;
                    chain.push(id);
                    for c in (first..first + count as usize).rev() {
                        stack.push((c, chain.clone()));
                    }
                }
            }
        }
        if next_leaf as usize != n || seen.iter().any(|s| !s) {
            return Err(FormatError::Invalid("leaves do not cover every point".into()));
        }
        let memory_bytes = nodes.len() * std::mem::size_of::<KmNode>() + coords.len() * 96 + 8 * n;
        Ok(Self { nodes, perm, coords, slot, k, seed, stats: BuildStats { build_time: Default::default(), memory_bytes } })
    }

    fn search<C: Collector>(&self, node: usize, probe: &mut Probe, coll: &mut C, f_d: f64) {
        match self.nodes[node].children {
            KmChildren::Leaf { start, end } => {
                for s in start as usize..end as usize {
                    let d = probe.dist_sq(&self.coords[s].0);
                    coll.offer(self.perm[s], d);
                }
            }
            KmChildren::Inner { first, count } => {
                let mut order: Vec<(f64, usize)> = (first as usize..(first + count) as usize)
                    .map(|c| (probe.dist_sq(&self.nodes[c].center.0).sqrt(), c))
                    .collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                self.search(order[0].1, probe, coll, f_d);
                if f_d <= 0.0 {
                    return;
                }
                for &(dist, c) in &order[1..] {
                    // d(x, q) − f_d·d_r < d_c
                    if dist - f_d * self.nodes[c].radius < coll.bound_sq().sqrt() {
                        self.search(c, probe, coll, f_d);
                    }
                }
            }
        }
    }
}

impl NnIndex for KMeansTree {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn len(&self) -> usize {
        self.perm.len()
    }

    fn point(&self, id: usize) -> &MappedPoint {
        &self.coords[self.slot[id] as usize]
    }

    fn query(&self, q: &MappedPoint, params: &QueryParams) -> QueryResult {
        let p = params.normalized();
        let mut probe = Probe::new(q);
        let mut best = Best2::new();
        self.search(0, &mut probe, &mut best, p.f_d);
        best.into_result(probe.comparisons, false)
    }

    fn build_stats(&self) -> BuildStats {
        self.stats
    }
}

impl KnnSource for KMeansTree {
    fn knn(&self, q: &MappedPoint, k: usize, f_d: f64) -> Vec<(usize, f64)> {
        let mut probe = Probe::new(q);
        let mut coll = KBest::new(k);
        self.search(0, &mut probe, &mut coll, f_d.clamp(0.0, 1.0));
        coll.into_sorted()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matgen::{sample_dataset, MaterialParams, DEFAULT_BOUNDS};
    use crate::nn::{KdTree, LinearIndex};
    use crate::phase::pca_metric;

    fn sampled_data(n: usize, seed: u64) -> MaterialDataset {
        let mut d = sample_dataset(n, DEFAULT_BOUNDS, &MaterialParams::default(), seed).unwrap();
        let c = pca_metric(d.points()).unwrap();
        d.bind_metric(c);
        d
    }

    fn queries(d: &MaterialDataset, n: usize, seed: u64) -> Vec<MappedPoint> {
        let mut rng = substream(seed, 0);
        (0..n)
            .map(|i| {
                let base = d.mapped()[rng.gen_range(0..d.len())];
                let scale = if i % 2 == 0 { 0.05 } else { 2.0 };
                MappedPoint(std::array::from_fn(|k| base.0[k] + scale * (unit_f64(&mut rng) - 0.5)))
            })
            .collect()
    }

    #[test]
    fn small_sets_are_one_leaf() {
        let d = sampled_data(16, 1);
        let t = KMeansTree::build(&d, 4, 0).unwrap();
        assert_eq!(t.nodes().len(), 1);
        let lin = LinearIndex::build(&d).unwrap();
        let q = MappedPoint([0.1; PHASE_DIM]);
        let (a, b) = (t.query(&q, &QueryParams::with_fd(0.0)), lin.query(&q, &QueryParams::exact()));
        assert_eq!((a.best_id, a.comparisons), (b.best_id, 16));
    }

    #[test]
    fn buckets_and_coverage() {
        let d = sampled_data(10_000, 2);
        let t = KMeansTree::build(&d, 4, 3).unwrap();
        let mut all = Vec::new();
        for node in t.nodes() {
            if let KmChildren::Leaf { start, end } = node.children {
                assert!(end - start <= 16);
                all.extend(start..end);
            }
        }
        assert_eq!(all.len(), 10_000);
        let mut ids = t.contained(0);
        ids.sort_unstable();
        assert!(ids.iter().enumerate().all(|(i, &v)| i == v));
    }

    #[test]
    fn radii_are_exact() {
        let d = sampled_data(2000, 4);
        let t = KMeansTree::build(&d, 3, 5).unwrap();
        for (n, node) in t.nodes().iter().enumerate() {
            let max = t
                .contained(n)
                .iter()
                .map(|&i| d.mapped()[i].dist_sq(&node.center).sqrt())
                .fold(0.0, f64::max);
            assert!((max - node.radius).abs() <= 1e-12 * max.max(1.0));
        }
    }

    #[test]
    fn exact_search_matches_linear_scan() {
        let d = sampled_data(10_000, 6);
        let t = KMeansTree::build(&d, DEFAULT_BRANCHING, 7).unwrap();
        let lin = LinearIndex::build(&d).unwrap();
        for q in queries(&d, 1000, 8) {
            let a = t.query(&q, &QueryParams::exact());
            let b = lin.query(&q, &QueryParams::exact());
            assert_eq!(a.best_dist_sq, b.best_dist_sq);
        }
    }

    #[test]
    fn single_descent_cost() {
        let d = sampled_data(10_000, 9);
        let t = KMeansTree::build(&d, 4, 10).unwrap();
        let bound = (4 * t.depth() + 16) as u64;
        for q in queries(&d, 300, 11) {
            let r = t.query(&q, &QueryParams::with_fd(0.0));
            assert!(r.comparisons <= bound, "{} > {bound}", r.comparisons);
            assert_eq!(r.best_dist_sq, d.mapped()[r.best_id].dist_sq(&q));
        }
    }

    #[test]
    fn exact_search_is_cheaper_than_kdtree_on_manifold_data() {
        let d = sampled_data(20_000, 12);
        let km = KMeansTree::build(&d, 4, 13).unwrap();
        let kd = KdTree::build(&d, 16).unwrap();
        let qs = queries(&d, 400, 14);
        let total = |idx: &dyn NnIndex| qs.iter().map(|q| idx.query(q, &QueryParams::exact()).comparisons).sum::<u64>();
        let (a, b) = (total(&km), total(&kd));
        assert!(a < b, "kmeans {a} vs kd {b}");
    }

    #[test]
    fn duplicates_terminate() {
        let t = KMeansTree::from_points(vec![MappedPoint([1.0; PHASE_DIM]); 300], 4, 0).unwrap();
        let r = t.query(&MappedPoint([1.0; PHASE_DIM]), &QueryParams::exact());
        assert_eq!(r.best_dist_sq, 0.0);
    }

    #[test]
    fn build_is_deterministic() {
        let d = sampled_data(3000, 15);
        let a = KMeansTree::build(&d, 4, 1).unwrap();
        let b = KMeansTree::build(&d, 4, 1).unwrap();
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.permutation(), b.permutation());
        KMeansTree::from_parts(a.nodes().to_vec(), a.permutation().to_vec(), d.mapped(), 4, 1).unwrap();
    }
}
