// SPDX-License-Identifier: Apache-2.0

//! Tree shapes: how blocks map to leaves and how nodes hang together.
//!
//! [`BalancedTopology`] derives everything from heap index arithmetic.
//! [`PointerTree`] stores explicit links and backs both the Huffman oracle
//! tree and the self-adjusting tree.

pub mod balanced;
pub mod dmt;
pub mod huffman;

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, NodeId};

pub use balanced::BalancedTopology;
pub use dmt::{splay_decision, splay_step, SplayDecision, SplayPolicy, StepEffect, StepKind};
pub use huffman::{
    brute_force_optimal, build_huffman, expected_depth, trace_to_profile, weighted_path_length, HuffmanShape,
    OptimalCost,
};

/// Structural contract shared by every tree strategy.
pub trait Topology {
    fn n_blocks(&self) -> u64;
    /// Size of the node id space, which is also the number of metadata records.
    fn id_space(&self) -> u64;
    /// Nodes that carry a digest; padding nodes are excluded.
    fn real_node_count(&self) -> u64;
    fn root(&self) -> NodeId;
    fn parent(&self, node: NodeId) -> Option<NodeId>;
    /// Ordered children; empty for leaves.
    fn children_into(&self, node: NodeId, out: &mut Vec<NodeId>);
    fn leaf_of(&self, block: BlockId) -> NodeId;
    fn block_of(&self, node: NodeId) -> Option<BlockId>;
    fn is_leaf(&self, node: NodeId) -> bool;
    /// Padding node with no real leaf below it. Its digest is all zeros and it
    /// is never stored.
    fn is_void(&self, _node: NodeId) -> bool {
        false
    }
    /// Whether records carry parent/child pointers.
    fn stores_pointers(&self) -> bool;

    /// `(parent, left, right)` as stored in a record, [`NONE`] where absent.
    /// Trees without stored pointers use `NONE` throughout.
    fn links(&self, _node: NodeId) -> (u64, u64, u64) {
        (NONE, NONE, NONE)
    }

    fn children(&self, node: NodeId) -> Vec<NodeId> {
        let mut v = Vec::new();
        self.children_into(node, &mut v);
        v
    }

    /// Edges from the root.
    fn depth(&self, node: NodeId) -> u32 {
        let mut d = 0;
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            d += 1;
            cur = p;
        }
        d
    }

    /// Depth of every non-void node, indexed by id (`None` for void ids).
    fn all_depths(&self) -> Vec<Option<u32>> {
        let mut depths = vec![None; self.id_space() as usize];
        let mut queue = VecDeque::from([(self.root(), 0u32)]);
        let mut kids = Vec::new();
        while let Some((node, d)) = queue.pop_front() {
            depths[node.index()] = Some(d);
            self.children_into(node, &mut kids);
            for &c in &kids {
                if !self.is_void(c) {
                    queue.push_back((c, d + 1));
                }
            }
        }
        depths
    }

    fn leaf_depths(&self) -> Vec<u32> {
        let all = self.all_depths();
        (0..self.n_blocks()).map(|b| all[self.leaf_of(BlockId(b)).index()].expect("leaf reachable")).collect()
    }
}

/// Which strategy a tree was built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TreeKind {
    Balanced { k: u32 },
    Huffman,
    Dmt,
}

impl std::fmt::Display for TreeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TreeKind::Balanced { k } => write!(f, "balanced:{k}"),
            TreeKind::Huffman => f.write_str("huffman"),
            TreeKind::Dmt => f.write_str("dmt"),
        }
    }
}

/// Binary tree with explicit links over `2n - 1` nodes.
///
/// Leaf of block `b` is node `n - 1 + b`; internal nodes are `0..n-1`. With a
/// single block the root is the leaf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointerTree {
    n: u64,
    root: u64,
    parent: Vec<u64>,
    left: Vec<u64>,
    right: Vec<u64>,
}

pub const NONE: u64 = crate::store::NONE;

impl PointerTree {
    /// Heap-shaped complete binary tree: node `i` has children `2i+1, 2i+2`.
    /// Coincides with the balanced binary layout when `n` is a power of two.
    pub fn complete(n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("tree needs at least one block"));
        }
        let total = (2 * n - 1) as usize;
        let mut parent = vec![NONE; total];
        let mut left = vec![NONE; total];
        let mut right = vec![NONE; total];
        for i in 0..(n - 1) as usize {
            left[i] = 2 * i as u64 + 1;
            right[i] = 2 * i as u64 + 2;
            parent[2 * i + 1] = i as u64;
            parent[2 * i + 2] = i as u64;
        }
        Ok(PointerTree { n, root: 0, parent, left, right })
    }

    /// Builds from raw links and checks that they form a valid tree.
    pub fn from_links(n: u64, parent: Vec<u64>, left: Vec<u64>, right: Vec<u64>) -> Result<Self> {
        let total = (2 * n).saturating_sub(1) as usize;
        if n == 0 || parent.len() != total || left.len() != total || right.len() != total {
            return Err(Error::usage("link arrays do not match 2n-1 nodes"));
        }
        let roots: Vec<u64> = (0..total as u64).filter(|&i| parent[i as usize] == NONE).collect();
        if roots.len() != 1 {
            return Err(Error::Inconsistent { node: NodeId(roots.get(1).copied().unwrap_or(0)) });
        }
        let t = PointerTree { n, root: roots[0], parent, left, right };
        t.validate()?;
        Ok(t)
    }

    pub fn node_count(&self) -> u64 {
        2 * self.n - 1
    }

    pub fn first_leaf(&self) -> u64 {
        self.n - 1
    }

    pub fn left(&self, node: NodeId) -> Option<NodeId> {
        link(self.left[node.index()])
    }

    pub fn right(&self, node: NodeId) -> Option<NodeId> {
        link(self.right[node.index()])
    }

    pub fn raw_links(&self, node: NodeId) -> (u64, u64, u64) {
        let i = node.index();
        (self.parent[i], self.left[i], self.right[i])
    }

    /// Checks binary shape, a single root, link symmetry, reachability of
    /// every node, and that exactly the ids `n-1..2n-1` are leaves.
    pub fn validate(&self) -> Result<()> {
        let total = self.node_count();
        let bad = |i: u64| Error::Inconsistent { node: NodeId(i) };
        if self.root >= total || self.parent[self.root as usize] != NONE {
            return Err(bad(self.root));
        }
        for i in 0..total {
            let (p, l, r) = self.raw_links(NodeId(i));
            let leaf = i >= self.first_leaf();
            if leaf != (l == NONE) || (l == NONE) != (r == NONE) || (l != NONE && l == r) {
                return Err(bad(i));
            }
            for c in [l, r] {
                if c != NONE && (c >= total || self.parent[c as usize] != i) {
                    return Err(bad(i));
                }
            }
            if i != self.root && (p >= total || (self.left[p as usize] != i && self.right[p as usize] != i)) {
                return Err(bad(i));
            }
        }
        let mut seen = 0u64;
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            seen += 1;
            if seen > total {
                return Err(bad(v));
            }
            let (_, l, r) = self.raw_links(NodeId(v));
            if l != NONE {
                stack.push(l);
                stack.push(r);
            }
        }
        if seen != total {
            return Err(bad(self.root));
        }
        Ok(())
    }

    pub fn swap_children(&mut self, node: NodeId) {
        let i = node.index();
        std::mem::swap(&mut self.left[i], &mut self.right[i]);
    }

    /// Single rotation lifting `x` above its parent. Returns `(y, moved)` where
    /// `y` is the old parent and `moved` the subtree root handed from `x` to `y`.
    pub fn rotate_up(&mut self, x: NodeId) -> (NodeId, NodeId) {
        let xi = x.0;
        let y = self.parent[xi as usize];
        assert!(y != NONE, "cannot rotate the root");
        let g = self.parent[y as usize];
        let moved;
        if self.left[y as usize] == xi {
            moved = self.right[xi as usize];
            self.left[y as usize] = moved;
            self.right[xi as usize] = y;
        } else {
            moved = self.left[xi as usize];
            self.right[y as usize] = moved;
            self.left[xi as usize] = y;
        }
        self.parent[moved as usize] = y;
        self.parent[y as usize] = xi;
        self.parent[xi as usize] = g;
        if g == NONE {
            self.root = xi;
        } else if self.left[g as usize] == y {
            self.left[g as usize] = xi;
        } else {
            self.right[g as usize] = xi;
        }
        (NodeId(y), NodeId(moved))
    }

    pub fn is_left_child(&self, node: NodeId) -> bool {
        let p = self.parent[node.index()];
        p != NONE && self.left[p as usize] == node.0
    }
}

fn link(v: u64) -> Option<NodeId> {
    (v != NONE).then_some(NodeId(v))
}

impl Topology for PointerTree {
    fn n_blocks(&self) -> u64 {
        self.n
    }

    fn id_space(&self) -> u64 {
        self.node_count()
    }

    fn real_node_count(&self) -> u64 {
        self.node_count()
    }

    fn root(&self) -> NodeId {
        NodeId(self.root)
    }

    fn parent(&self, node: NodeId) -> Option<NodeId> {
        link(self.parent[node.index()])
    }

    fn children_into(&self, node: NodeId, out: &mut Vec<NodeId>) {
        out.clear();
        let i = node.index();
        if self.left[i] != NONE {
            out.push(NodeId(self.left[i]));
            out.push(NodeId(self.right[i]));
        }
    }

    fn leaf_of(&self, block: BlockId) -> NodeId {
        NodeId(self.n - 1 + block.0)
    }

    fn block_of(&self, node: NodeId) -> Option<BlockId> {
        (node.0 >= self.n - 1 && node.0 < self.node_count()).then(|| BlockId(node.0 - (self.n - 1)))
    }

    fn is_leaf(&self, node: NodeId) -> bool {
        node.0 >= self.n - 1
    }

    fn stores_pointers(&self) -> bool {
        true
    }

    fn links(&self, node: NodeId) -> (u64, u64, u64) {
        self.raw_links(node)
    }
}

/// Writes `node_id parent left right depth` lines, `-` for absent links.
/// For k-ary nodes `left`/`right` are the first and last non-void child.
pub fn write_shape<T: Topology + ?Sized, W: Write>(topo: &T, out: &mut W) -> std::io::Result<()> {
    let depths = topo.all_depths();
    let fmt = |n: Option<NodeId>| n.map_or_else(|| "-".to_string(), |n| n.0.to_string());
    let mut kids = Vec::new();
    for (i, d) in depths.iter().enumerate() {
        let Some(d) = d else { continue };
        let node = NodeId(i as u64);
        topo.children_into(node, &mut kids);
        kids.retain(|&c| !topo.is_void(c));
        writeln!(
            out,
            "{} {} {} {} {}",
            i,
            fmt(topo.parent(node)),
            fmt(kids.first().copied()),
            fmt(kids.last().copied()),
            d
        )?;
    }
    Ok(())
}

/// Number of leaves at each depth.
pub fn leaf_depth_histogram<T: Topology + ?Sized>(topo: &T) -> BTreeMap<u32, u64> {
    let mut h = BTreeMap::new();
    for d in topo.leaf_depths() {
        *h.entry(d).or_insert(0) += 1;
    }
    h
}

pub fn write_histogram_csv<W: Write>(hist: &BTreeMap<u32, u64>, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "depth,leaves")?;
    for (d, c) in hist {
        writeln!(out, "{d},{c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_tree_links() {
        let t = PointerTree::complete(4).unwrap();
        assert_eq!(t.node_count(), 7);
        t.validate().unwrap();
        assert_eq!(t.children(NodeId(0)), vec![NodeId(1), NodeId(2)]);
        assert_eq!(t.leaf_of(BlockId(0)), NodeId(3));
        assert_eq!(t.block_of(NodeId(6)), Some(BlockId(3)));
        assert_eq!(t.block_of(NodeId(2)), None);
        assert_eq!(t.leaf_depths(), vec![2; 4]);
    }

    #[test]
    fn single_block_root_is_leaf() {
        let t = PointerTree::complete(1).unwrap();
        t.validate().unwrap();
        assert_eq!(t.root(), NodeId(0));
        assert!(t.is_leaf(NodeId(0)));
        assert_eq!(t.leaf_depths(), vec![0]);
    }

    #[test]
    fn uneven_complete_tree_is_valid() {
        for n in 1..40 {
            let t = PointerTree::complete(n).unwrap();
            t.validate().unwrap();
            let depths = t.leaf_depths();
            let kraft: f64 = depths.iter().map(|&d| 0.5f64.powi(d as i32)).sum();
            assert!((kraft - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_validity() {
        let mut t = PointerTree::complete(8).unwrap();
        let (y, moved) = t.rotate_up(NodeId(1));
        assert_eq!((y, moved), (NodeId(0), NodeId(4)));
        assert_eq!(t.root(), NodeId(1));
        t.validate().unwrap();
        assert_eq!(t.depth(NodeId(3)), 1);
        assert_eq!(t.depth(NodeId(5)), 3);
    }

    #[test]
    fn corrupted_links_are_rejected() {
        let t = PointerTree::complete(4).unwrap();
        let (mut p, mut l, r): (Vec<u64>, Vec<u64>, Vec<u64>) = (t.parent.clone(), t.left.clone(), t.right.clone());
        l[0] = 2;
        assert!(PointerTree::from_links(4, p.clone(), l.clone(), r.clone()).is_err());
        l[0] = 1;
        p[3] = 2;
        assert!(PointerTree::from_links(4, p, l, r).is_err());
    }

    #[test]
    fn shape_export_format() {
        let t = PointerTree::complete(2).unwrap();
        let mut out = Vec::new();
        write_shape(&t, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0 - 1 2 0\n1 0 - - 1\n2 0 - - 1\n");
        let mut csv = Vec::new();
        write_histogram_csv(&leaf_depth_histogram(&t), &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "depth,leaves\n1,2\n");
    }
}
