//! Versioned little-endian index files. Every file is
//! `magic (8) | version (u32) | body | crc32 (u32)`; the point coordinates
//! are not stored and must be supplied from the dataset on load.

use std::path::Path;

use crate::error::{FormatError, Result};
use crate::nn::kmeans::KmChildren;
use crate::nn::{KMeansTree, KdNode, KdTree, KmNode, KnnGraph, NnIndex};
use crate::phase::{MappedPoint, PHASE_DIM};

pub const KDTREE_MAGIC: &[u8; 8] = b"DDMKDT\0\0";
pub const KMEANS_MAGIC: &[u8; 8] = b"DDMKMT\0\0";
pub const GRAPH_MAGIC: &[u8; 8] = b"DDMKNG\0\0";
pub const INDEX_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(INDEX_VERSION);
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    body: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and checksum; the reader then walks the body.
    fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self, FormatError> {
        if bytes.len() < 16 {
            return Err(FormatError::Header(format!("file is {} bytes", bytes.len())));
        }
        if &bytes[..8] != magic {
            return Err(FormatError::Header("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(FormatError::Header(format!("unsupported version {version}")));
        }
        let end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..end]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        Ok(Reader { body: &bytes[..end], at: 12 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.body.len()).ok_or(FormatError::Truncated {
            expected: (self.at as u64).saturating_add(n as u64) + 4,
            found: self.body.len() as u64 + 4,
        })?;
        let s = &self.body[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Fails unless at least `count * size` bytes remain, so that counts
    /// read from the file cannot trigger huge allocations.
    fn expect(&self, count: u64, size: u64) -> Result<usize, FormatError> {
        let need = count.saturating_mul(size);
        let left = (self.body.len() - self.at) as u64;
        if need > left {
            return Err(FormatError::Truncated { expected: self.at as u64 + need + 4, found: self.body.len() as u64 + 4 });
        }
        Ok(count as usize)
    }

    fn done(&self) -> Result<(), FormatError> {
        match self.body.len() - self.at {
            0 => Ok(()),
            extra => Err(FormatError::Invalid(format!("{extra} trailing bytes"))),
        }
    }
}

fn check_n(stored: u64, points: &[MappedPoint]) -> Result<(), FormatError> {
    if stored != points.len() as u64 {
        return Err(FormatError::Invalid(format!("index built for {stored} points, dataset has {}", points.len())));
    }
    Ok(())
}

fn read_perm(r: &mut Reader, n: usize) -> Result<Vec<u32>, FormatError> {
    r.expect(n as u64, 4)?;
    (0..n).map(|_| r.u32()).collect()
}

pub fn encode_kdtree(t: &KdTree) -> Vec<u8> {
    let mut w = Writer::new(KDTREE_MAGIC);
    w.u64(t.len() as u64);
    w.u32(t.leaf_size() as u32);
    w.u32(t.nodes().len() as u32);
    for node in t.nodes() {
        match *node {
            KdNode::Split { dim, value, low, high } => {
                w.u8(0);
                w.u8(dim);
                w.f64(value);
                w.u32(low);
                w.u32(high);
            }
            KdNode::Leaf { start, end } => {
                w.u8(1);
                w.u32(start);
                w.u32(end);
            }
        }
    }
    for &id in t.permutation() {
        w.u32(id);
    }
    w.finish()
}

pub fn decode_kdtree(bytes: &[u8], points: &[MappedPoint]) -> Result<KdTree, FormatError> {
    let mut r = Reader::open(bytes, KDTREE_MAGIC)?;
    let n = r.u64()?;
    check_n(n, points)?;
    let leaf_size = r.u32()? as usize;
    if leaf_size == 0 {
        return Err(FormatError::Invalid("leaf size 0".into()));
    }
    let count = r.u32()? as u64;
    let count = r.expect(count, 9)?;
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        nodes.push(match r.u8()? {
            0 => KdNode::Split { dim: r.u8()?, value: r.f64()?, low: r.u32()?, high: r.u32()? },
            1 => KdNode::Leaf { start: r.u32()?, end: r.u32()? },
            tag => return Err(FormatError::Invalid(format!("unknown node tag {tag}"))),
        });
    }
    let perm = read_perm(&mut r, points.len())?;
    r.done()?;
    KdTree::from_parts(nodes, perm, points, leaf_size)
}

pub fn encode_kmeans(t: &KMeansTree) -> Vec<u8> {
    let mut w = Writer::new(KMEANS_MAGIC);
    w.u64(t.len() as u64);
    w.u32(t.branching() as u32);
    w.u64(t.seed());
    w.u32(t.nodes().len() as u32);
    for node in t.nodes() {
        for v in node.center.0 {
            w.f64(v);
        }
        w.f64(node.radius);
        let (tag, a, b) = match node.children {
            KmChildren::Inner { first, count } => (0, first, count),
            KmChildren::Leaf { start, end } => (1, start, end),
        };
        w.u8(tag);
        w.u32(a);
        w.u32(b);
    }
    for &id in t.permutation() {
        w.u32(id);
    }
    w.finish()
}

pub fn decode_kmeans(bytes: &[u8], points: &[MappedPoint]) -> Result<KMeansTree, FormatError> {
    let mut r = Reader::open(bytes, KMEANS_MAGIC)?;
    let n = r.u64()?;
    check_n(n, points)?;
    let k = r.u32()? as usize;
    let seed = r.u64()?;
    let count = r.u32()? as u64;
    let count = r.expect(count, (PHASE_DIM as u64 + 1) * 8 + 9)?;
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut center = [0.0; PHASE_DIM];
        for v in center.iter_mut() {
            *v = r.f64()?;
        }
        let radius = r.f64()?;
        let (tag, a, b) = (r.u8()?, r.u32()?, r.u32()?);
        let children = match tag {
            0 => KmChildren::Inner { first: a, count: b },
            1 => KmChildren::Leaf { start: a, end: b },
            _ => return Err(FormatError::Invalid(format!("unknown node tag {tag}"))),
        };
        nodes.push(KmNode { center: MappedPoint(center), radius, children });
    }
    let perm = read_perm(&mut r, points.len())?;
    r.done()?;
    KMeansTree::from_parts(nodes, perm, points, k, seed)
}

/// Graph ids are written with 4 bytes when `N` fits, otherwise 8.
pub fn encode_graph(g: &KnnGraph) -> Vec<u8> {
    let mut w = Writer::new(GRAPH_MAGIC);
    let wide = g.len() > u32::MAX as usize;
    w.u64(g.len() as u64);
    w.u32(g.k() as u32);
    w.u8(if wide { 8 } else { 4 });
    w.f64(g.builder_fd());
    w.u64(g.seed());
    for &id in g.adjacency() {
        if wide {
            w.u64(id as u64);
        } else {
            w.u32(id);
        }
    }
    w.finish()
}

pub fn decode_graph(bytes: &[u8], points: &[MappedPoint]) -> Result<KnnGraph, FormatError> {
    let mut r = Reader::open(bytes, GRAPH_MAGIC)?;
    let n = r.u64()?;
    check_n(n, points)?;
    let k = r.u32()? as usize;
    let width = r.u8()?;
    let builder_fd = r.f64()?;
    let seed = r.u64()?;
    if !(0.0..=1.0).contains(&builder_fd) {
        return Err(FormatError::Invalid(format!("builder f_d {builder_fd} outside [0, 1]")));
    }
    let total = r.expect((n).saturating_mul(k as u64), width.max(1) as u64)?;
    let ids: Vec<u32> = match width {
        4 => (0..total).map(|_| r.u32()).collect::<Result<_, _>>()?,
        8 => (0..total)
            .map(|_| r.u64().and_then(|v| u32::try_from(v).map_err(|_| FormatError::Invalid(format!("id {v} too large")))))
            .collect::<Result<_, _>>()?,
        other => return Err(FormatError::Header(format!("id width {other}"))),
    };
    r.done()?;
    KnnGraph::from_parts(ids, k, points, builder_fd, seed)
}

/// Writes bytes to a fresh file; refuses to replace an existing one.
pub fn write_new(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().write(true).create_new(true).open(path)?;
    f.write_all(bytes)?;
    Ok(())
}
