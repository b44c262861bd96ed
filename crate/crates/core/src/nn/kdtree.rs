use std::time::Instant;

use crate::error::{Error, FormatError, Result};
use crate::matgen::MaterialDataset;
use crate::nn::{Best2, BuildStats, Collector, KBest, KnnSource, NnIndex, Probe, QueryParams, QueryResult};
use crate::phase::{MappedPoint, PHASE_DIM};

pub const DEFAULT_LEAF_SIZE: usize = 16;

/// A node of the 12-d tree. Points in the low subtree have coordinate
/// `<= value` along `dim`, points in the high subtree `>= value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KdNode {
    Split { dim: u8, value: f64, low: u32, high: u32 },
    /// Range into the tree's leaf-ordered point arrays.
    Leaf { start: u32, end: u32 },
}

/// Median-split k-d tree on the dimension of maximum spread, searched with
/// branch-and-bound backtracking relaxed by `f_d`.
#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<KdNode>,
    /// Data ids in leaf order.
    perm: Vec<u32>,
    /// Coordinates in leaf order.
    coords: Vec<MappedPoint>,
    /// Leaf-order slot of every data id.
    slot: Vec<u32>,
    leaf_size: usize,
    depth: usize,
    stats: BuildStats,
}

fn max_spread_dim(coords: &[MappedPoint], ids: &[u32]) -> usize {
    let mut lo = [f64::INFINITY; PHASE_DIM];
    let mut hi = [f64::NEG_INFINITY; PHASE_DIM];
    for &i in ids {
        let p = &coords[i as usize].0;
        for d in 0..PHASE_DIM {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let mut best = 0;
    for d in 1..PHASE_DIM {
        if hi[d] - lo[d] > hi[best] - lo[best] {
            best = d;
        }
    }
    best
}

impl KdTree {
    pub fn build(data: &MaterialDataset, leaf_size: usize) -> Result<Self> {
        Self::from_points(data.require_bound()?.to_vec(), leaf_size)
    }

    pub fn from_points(points: Vec<MappedPoint>, leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if leaf_size == 0 {
            return Err(Error::Contract("leaf size must be at least 1".into()));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::Contract("too many points for 32-bit ids".into()));
        }
        let start = Instant::now();
        let mut perm: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        let mut depth = 0;
        Self::split(&points, &mut perm, 0, leaf_size, &mut nodes, 1, &mut depth);
        let coords: Vec<MappedPoint> = perm.iter().map(|&i| points[i as usize]).collect();
        let mut slot = vec![0u32; points.len()];
        for (s, &id) in perm.iter().enumerate() {
            slot[id as usize] = s as u32;
        }
        let memory_bytes = nodes.len() * std::mem::size_of::<KdNode>()
            + coords.len() * std::mem::size_of::<MappedPoint>()
            + 2 * perm.len() * 4;
        let stats = BuildStats { build_time: start.elapsed(), memory_bytes };
        Ok(Self { nodes, perm, coords, slot, leaf_size, depth, stats })
    }

    fn split(
        points: &[MappedPoint],
        ids: &mut [u32],
        offset: usize,
        leaf_size: usize,
        nodes: &mut Vec<KdNode>,
        level: usize,
        depth: &mut usize,
    ) -> u32 {
        let me = nodes.len() as u32;
        *depth = (*depth).max(level);
        if ids.len() <= leaf_size {
            nodes.push(KdNode::Leaf { start: offset as u32, end: (offset + ids.len()) as u32 });
            return me;
        }
        let dim = max_spread_dim(points, ids);
        let mid = ids.len() / 2;
        // Total order on (coordinate, id) makes the partition deterministic.
        ids.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize].0[dim].total_cmp(&points[b as usize].0[dim]).then(a.cmp(&b))
        });
        let value = points[ids[mid] as usize].0[dim];
        nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let (low_ids, high_ids) = ids.split_at_mut(mid);
        let low = Self::split(points, low_ids, offset, leaf_size, nodes, level + 1, depth);
        let high = Self::split(points, high_ids, offset + mid, leaf_size, nodes, level + 1, depth);
        nodes[me as usize] = KdNode::Split { dim: dim as u8, value, low, high };
        me
    }

    pub fn nodes(&self) -> &[KdNode] {
        &self.nodes
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Levels from root to the deepest leaf, counting both.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Data ids in leaf order.
    pub fn permutation(&self) -> &[u32] {
        &self.perm
    }

    pub(crate) fn from_parts(
        nodes: Vec<KdNode>,
        perm: Vec<u32>,
        points: &[MappedPoint],
        leaf_size: usize,
    ) -> Result<Self, FormatError> {
        let n = points.len();
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
        // Walk from the root: children must come after their parent, every
        // node is reached once, leaves tile [0, n) in order, and split
        // invariants hold for every point below.
        if nodes.is_empty() {
            return Err(FormatError::Invalid("no nodes".into()));
        }
        let mut seen = vec![false; nodes.len()];
        let mut next_leaf_start = 0u32;
        let mut depth = 0;
        // (node, level, constraints from ancestors)
        let mut stack: Vec<(u32, usize, Vec<(u8, f64, bool)>)> = vec![(0, 1, Vec::new())];
        while let Some((id, level, bounds)) = stack.pop() {
            let idx = id as usize;
            if idx >= nodes.len() || std::mem::replace(&mut seen[idx], true) {
                return Err(FormatError::Invalid(format!("node {id} out of range or shared")));
            }
            depth = depth.max(level);
            match nodes[idx] {
                KdNode::Leaf { start, end } => {
                    if start != next_leaf_start || end < start || end as usize > n {
                        return Err(FormatError::Invalid(format!("leaf {id} range {start}..{end} out of order")));
                    }
                    if end - start > leaf_size as u32 {
                        return Err(FormatError::Invalid(format!("leaf {id} exceeds leaf size")));
                    }
                    for p in &coords[start as usize..end as usize] {
                        for &(dim, value, is_low) in &bounds {
                            let c = p.0[dim as usize];
                            if (is_low && !(c <= value)) || (!is_low && !(c >= value)) {
                                return Err(FormatError::Invalid(format!("point violates split below node {id}")));
                            }
                        }
                    }
                    next_leaf_start = end;
                }
                KdNode::Split { dim, value, low, high } => {
                    if dim as usize >= PHASE_DIM || !value.is_finite() || low <= id || high <= id {
                        return Err(FormatError::Invalid(format!("split node {id} malformed")));
                    }
                    let mut hb = bounds.clone();
                    hb.push((dim, value, false));
                    let mut lb = bounds;
                    lb.push((dim, value, true));
                    // Low is visited first so leaves are checked in order.
                    stack.push((high, level + 1, hb));
                    stack.push((low, level + 1, lb));
                }
            }
        }
        if next_leaf_start as usize != n || seen.iter().any(|s| !s) {
            return Err(FormatError::Invalid("leaves do not cover every point".into()));
        }
        let memory_bytes = nodes.len() * std::mem::size_of::<KdNode>() + coords.len() * 96 + 8 * n;
        Ok(Self { nodes, perm, coords, slot, leaf_size, depth, stats: BuildStats { build_time: Default::default(), memory_bytes } })
    }

    fn search<C: Collector>(&self, node: u32, probe: &mut Probe, coll: &mut C, fd_sq: f64, backtrack: bool) {
        match self.nodes[node as usize] {
            KdNode::Leaf { start, end } => {
                for s in start as usize..end as usize {
                    let d = probe.dist_sq(&self.coords[s].0);
                    coll.offer(self.perm[s], d);
                }
            }
            KdNode::Split { dim, value, low, high } => {
                let diff = probe.coord(dim as usize) - value;
                let (near, far) = if diff <= 0.0 { (low, high) } else { (high, low) };
                self.search(near, probe, coll, fd_sq, backtrack);
                // Visit the far side when d_b² <= f_d²·d_c².
                if backtrack && diff * diff <= fd_sq * coll.bound_sq() {
                    self.search(far, probe, coll, fd_sq, backtrack);
                }
            }
        }
    }
}

impl NnIndex for KdTree {
    fn name(&self) -> &'static str {
        "kdtree"
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
        self.search(0, &mut probe, &mut best, p.f_d * p.f_d, p.f_d > 0.0);
        best.into_result(probe.comparisons, false)
    }

    fn build_stats(&self) -> BuildStats {
        self.stats
    }
}

impl KnnSource for KdTree {
    fn knn(&self, q: &MappedPoint, k: usize, f_d: f64) -> Vec<(usize, f64)> {
        let f_d = f_d.clamp(0.0, 1.0);
        let mut probe = Probe::new(q);
        let mut coll = KBest::new(k);
        self.search(0, &mut probe, &mut coll, f_d * f_d, f_d > 0.0);
        coll.into_sorted()
    }
}
