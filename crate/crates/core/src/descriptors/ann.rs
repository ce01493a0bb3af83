//! Approximate nearest-neighbor search over a descriptor set: a forest of
//! randomized splitting trees searched best-bin-first with a shared
//! cross-tree priority queue and a bounded leaf-visit budget.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{squared_distance, Descriptor, MatchPair};

/// Index build and search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnParams {
    /// Number of randomized trees.
    pub tree_count: u32,
    /// Maximum descriptors per leaf.
    pub leaf_size: u32,
    /// Default leaf-visit budget per query.
    pub checks: u32,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            tree_count: 4,
            leaf_size: 16,
            checks: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum AnnError {
    #[error("index section too short")]
    Truncated,
    #[error("bad index magic bytes")]
    BadMagic,
    #[error("unsupported index version {0}")]
    Version(u8),
    #[error("index is inconsistent: {0}")]
    Corrupt(&'static str),
}

const ANN_MAGIC: &[u8; 7] = b"VLANN1\0";
const ANN_VERSION: u8 = 1;

/// Number of highest-variance dimensions the split dimension is drawn from.
const SPLIT_CANDIDATES: usize = 5;
/// Upper bound on the points sampled for mean/variance estimation per node.
const VARIANCE_SAMPLE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        dim: u32,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        len: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
    /// Descriptor ids, permuted so every leaf owns a contiguous range.
    ids: Vec<u32>,
}

/// Immutable randomized-tree forest over a descriptor set.
///
/// The index stores descriptor ids only; queries take the owning descriptor
/// slice, which must be the slice the index was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    params: AnnParams,
    seed: u64,
    len: u32,
    dim: u32,
    trees: Vec<Tree>,
}

impl AnnIndex {
    /// Builds the forest. Deterministic for a given `seed`: building twice
    /// yields byte-identical serialized indices.
    pub fn build(database: &[Descriptor], params: AnnParams, seed: u64) -> Self {
        assert!(!database.is_empty(), "cannot index an empty descriptor set");
        assert!(params.tree_count >= 1 && params.leaf_size >= 1);
        let dim = database[0].dim() as u32;
        let trees = (0..params.tree_count)
            .map(|t| {
                let tree_seed = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64);
                build_tree(database, params.leaf_size as usize, tree_seed)
            })
            .collect();
        Self {
            params,
            seed,
            len: database.len() as u32,
            dim,
            trees,
        }
    }

    pub fn params(&self) -> AnnParams {
        self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of descriptors the index was built over.
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Total leaf count across all trees. Searching with this many checks is
    /// an exhaustive scan and matches [`super::brute_force_knn`] exactly.
    pub fn total_leaves(&self) -> usize {
        self.trees
            .iter()
            .map(|t| {
                t.nodes
                    .iter()
                    .filter(|n| matches!(n, Node::Leaf { .. }))
                    .count()
            })
            .sum()
    }

    /// Approximate k-nearest neighbors, ascending by distance (ties broken
    /// by descriptor id). `database` must be the slice the index was built
    /// from; `checks` bounds the number of leaves visited.
    pub fn knn(
        &self,
        database: &[Descriptor],
        query: &Descriptor,
        k: usize,
        checks: usize,
    ) -> Vec<MatchPair> {
        debug_assert_eq!(database.len(), self.len as usize);
        let k = k.min(database.len());
        if k == 0 {
            return Vec::new();
        }

        // Pending branches ordered by accumulated hyperplane margin. The
        // margin only steers visit order; no branch is ever pruned, so a
        // large enough budget degenerates to an exhaustive scan.
        let mut pending: BinaryHeap<Reverse<(OrdF32, u32, u32)>> = BinaryHeap::new();
        let mut seen = vec![0u64; (database.len() + 63) / 64];
        let mut best: BinaryHeap<(OrdF32, u32)> = BinaryHeap::new();
        let mut visited = 0usize;

        for (tree_idx, _) in self.trees.iter().enumerate() {
            pending.push(Reverse((OrdF32(0.0), tree_idx as u32, 0)));
        }

        while let Some(Reverse((margin, tree_idx, node_idx))) = pending.pop() {
            if visited >= checks {
                break;
            }
            let tree = &self.trees[tree_idx as usize];
            let mut node_idx = node_idx as usize;
            loop {
                match &tree.nodes[node_idx] {
                    Node::Split {
                        dim,
                        threshold,
                        left,
                        right,
                    } => {
                        let delta = query.as_slice()[*dim as usize] - threshold;
                        let (near, far) = if delta < 0.0 {
                            (*left, *right)
                        } else {
                            (*right, *left)
                        };
                        let far_margin = OrdF32(margin.0 + delta * delta);
                        pending.push(Reverse((far_margin, tree_idx, far)));
                        node_idx = near as usize;
                    }
                    Node::Leaf { start, len } => {
                        visited += 1;
                        for &id in &tree.ids[*start as usize..(*start + *len) as usize] {
                            let (word, bit) = (id as usize / 64, id as usize % 64);
                            if seen[word] & (1 << bit) != 0 {
                                continue;
                            }
                            seen[word] |= 1 << bit;
                            let d = squared_distance(query, &database[id as usize]);
                            if best.len() < k {
                                best.push((OrdF32(d), id));
                            } else if let Some(&(worst, worst_id)) = best.peek() {
                                if OrdF32(d) < worst || (OrdF32(d) == worst && id < worst_id) {
                                    best.pop();
                                    best.push((OrdF32(d), id));
                                }
                            }
                        }
                        break;
                    }
                }
            }
        }

        let mut out: Vec<MatchPair> = best
            .into_iter()
            .map(|(d, id)| MatchPair {
                query_index: 0,
                target_index: id as usize,
                distance: d.0,
                ratio: 0.0,
            })
            .collect();
        out.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.target_index.cmp(&b.target_index))
        });
        out
    }

    /// Serializes parameters, tree topology and the descriptor id tables.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ANN_MAGIC);
        out.push(ANN_VERSION);
        put_u32(&mut out, self.params.tree_count);
        put_u32(&mut out, self.params.leaf_size);
        put_u32(&mut out, self.params.checks);
        put_u64(&mut out, self.seed);
        put_u32(&mut out, self.len);
        put_u32(&mut out, self.dim);
        for tree in &self.trees {
            put_u32(&mut out, tree.nodes.len() as u32);
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        dim,
                        threshold,
                        left,
                        right,
                    } => {
                        out.push(0);
                        put_u32(&mut out, *dim);
                        put_u32(&mut out, threshold.to_bits());
                        put_u32(&mut out, *left);
                        put_u32(&mut out, *right);
                    }
                    Node::Leaf { start, len } => {
                        out.push(1);
                        put_u32(&mut out, *start);
                        put_u32(&mut out, *len);
                    }
                }
            }
            put_u32(&mut out, tree.ids.len() as u32);
            for &id in &tree.ids {
                put_u32(&mut out, id);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AnnError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(7)?;
        if magic != ANN_MAGIC {
            return Err(AnnError::BadMagic);
        }
        let version = r.u8()?;
        if version != ANN_VERSION {
            return Err(AnnError::Version(version));
        }
        let params = AnnParams {
            tree_count: r.u32()?,
            leaf_size: r.u32()?,
            checks: r.u32()?,
        };
        let seed = r.u64()?;
        let len = r.u32()?;
        let dim = r.u32()?;
        let mut trees = Vec::with_capacity(params.tree_count as usize);
        for _ in 0..params.tree_count {
            let node_count = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(node_count);
            for _ in 0..node_count {
                match r.u8()? {
                    0 => nodes.push(Node::Split {
                        dim: r.u32()?,
                        threshold: f32::from_bits(r.u32()?),
                        left: r.u32()?,
                        right: r.u32()?,
                    }),
                    1 => nodes.push(Node::Leaf {
                        start: r.u32()?,
                        len: r.u32()?,
                    }),
                    _ => return Err(AnnError::Corrupt("unknown node kind")),
                }
            }
            let id_count = r.u32()? as usize;
            if id_count != len as usize {
                return Err(AnnError::Corrupt("id table size mismatch"));
            }
            let mut ids = Vec::with_capacity(id_count);
            for _ in 0..id_count {
                let id = r.u32()?;
                if id >= len {
                    return Err(AnnError::Corrupt("descriptor id out of range"));
                }
                ids.push(id);
            }
            trees.push(Tree { nodes, ids });
        }
        Ok(Self {
            params,
            seed,
            len,
            dim,
            trees,
        })
    }
}

fn build_tree(database: &[Descriptor], leaf_size: usize, seed: u64) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = (0..database.len() as u32).collect();
    let mut nodes = Vec::new();
    let mut out_ids = Vec::with_capacity(ids.len());
    split_recursive(database, &mut ids, leaf_size, &mut rng, &mut nodes, &mut out_ids);
    Tree {
        nodes,
        ids: out_ids,
    }
}

fn split_recursive(
    database: &[Descriptor],
    ids: &mut Vec<u32>,
    leaf_size: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
    out_ids: &mut Vec<u32>,
) -> u32 {
    if ids.len() <= leaf_size {
        return push_leaf(ids, nodes, out_ids);
    }

    let dim = database[0].dim();
    // estimate per-dimension mean and variance on a strided sample
    let stride = (ids.len() / VARIANCE_SAMPLE).max(1);
    let sample: Vec<u32> = ids.iter().step_by(stride).copied().collect();
    let inv_n = 1.0 / sample.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for &id in &sample {
        for (m, &v) in mean.iter_mut().zip(database[id as usize].as_slice()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_n;
    }
    let mut var = vec![0.0f64; dim];
    for &id in &sample {
        for ((v, &x), m) in var.iter_mut().zip(database[id as usize].as_slice()).zip(&mean) {
            let d = x as f64 - m;
            *v += d * d;
        }
    }

    // randomized pick among the highest-variance dimensions
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let candidates = SPLIT_CANDIDATES.min(dim);
    let split_dim = order[rng.gen_range(0..candidates)];
    let threshold = mean[split_dim] as f32;

    let mut left: Vec<u32> = Vec::with_capacity(ids.len() / 2);
    let mut right: Vec<u32> = Vec::with_capacity(ids.len() / 2);
    for &id in ids.iter() {
        if database[id as usize].as_slice()[split_dim] < threshold {
            left.push(id);
        } else {
            right.push(id);
        }
    }
    if left.is_empty() || right.is_empty() {
        // constant data along every candidate dimension; give up splitting
        return push_leaf(ids, nodes, out_ids);
    }

    let node_idx = nodes.len() as u32;
    nodes.push(Node::Split {
        dim: split_dim as u32,
        threshold,
        left: 0,
        right: 0,
    });
    let mut left_ids = left;
    let mut right_ids = right;
    let left_idx = split_recursive(database, &mut left_ids, leaf_size, rng, nodes, out_ids);
    let right_idx = split_recursive(database, &mut right_ids, leaf_size, rng, nodes, out_ids);
    if let Node::Split { left, right, .. } = &mut nodes[node_idx as usize] {
        *left = left_idx;
        *right = right_idx;
    }
    node_idx
}

fn push_leaf(ids: &[u32], nodes: &mut Vec<Node>, out_ids: &mut Vec<u32>) -> u32 {
    let start = out_ids.len() as u32;
    out_ids.extend_from_slice(ids);
    let idx = nodes.len() as u32;
    nodes.push(Node::Leaf {
        start,
        len: ids.len() as u32,
    });
    idx
}

/// Total-ordered f32 wrapper for the heaps.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF32(f32);

impl Eq for OrdF32 {}

impl PartialOrd for OrdF32 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF32 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AnnError> {
        if self.pos + n > self.bytes.len() {
            return Err(AnnError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, AnnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, AnnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AnnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
