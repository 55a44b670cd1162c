// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};
use crate::model::{balanced_height, BlockId, NodeId, TreeArity};
use crate::topology::Topology;

/// Complete k-ary tree in heap order. Children of `i` are `k*i+1 ..= k*i+k`.
///
/// The leaf level is padded to `k^height` slots; padding slots and every node
/// above only padding are void.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalancedTopology {
    n: u64,
    k: u64,
    height: u32,
    /// First id of each level, plus one past the end.
    level_start: Vec<u64>,
    /// `k^(height - level)`: leaf slots spanned by one node of each level.
    span: Vec<u64>,
}

impl BalancedTopology {
    pub fn new(n_blocks: u64, arity: TreeArity) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::usage("tree needs at least one block"));
        }
        let k = arity.get() as u64;
        let height = balanced_height(n_blocks, k);
        let mut level_start = Vec::with_capacity(height as usize + 2);
        let mut width = 1u64;
        let mut start = 0u64;
        for _ in 0..=height {
            level_start.push(start);
            start += width;
            width = width.saturating_mul(k);
        }
        level_start.push(start);
        let span = (0..=height).map(|l| k.pow(height - l)).collect();
        Ok(BalancedTopology { n: n_blocks, k, height, level_start, span })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn arity(&self) -> u64 {
        self.k
    }

    /// Nodes in the full padded tree, `(k^(h+1) - 1) / (k - 1)`.
    pub fn padded_node_count(&self) -> u64 {
        self.level_start[self.height as usize + 1]
    }

    pub fn first_leaf(&self) -> u64 {
        self.level_start[self.height as usize]
    }

    pub fn level(&self, node: NodeId) -> u32 {
        // Levels are few (at most 64), a scan beats anything clever.
        let mut l = 0;
        while self.level_start[l + 1] <= node.0 {
            l += 1;
        }
        l as u32
    }

    /// Ids of one level that are not void.
    pub fn real_range(&self, level: u32) -> std::ops::Range<u64> {
        let l = level as usize;
        let count = self.n.div_ceil(self.span[l]);
        self.level_start[l]..self.level_start[l] + count
    }
}

impl Topology for BalancedTopology {
    fn n_blocks(&self) -> u64 {
        self.n
    }

    /// Only ids up to the last real leaf are ever stored.
    fn id_space(&self) -> u64 {
        self.first_leaf() + self.n
    }

    fn real_node_count(&self) -> u64 {
        (0..=self.height).map(|l| self.real_range(l).count() as u64).sum()
    }

    fn root(&self) -> NodeId {
        NodeId(0)
    }

    fn parent(&self, node: NodeId) -> Option<NodeId> {
        (node.0 > 0).then(|| NodeId((node.0 - 1) / self.k))
    }

    fn children_into(&self, node: NodeId, out: &mut Vec<NodeId>) {
        out.clear();
        if node.0 < self.first_leaf() {
            let first = self.k * node.0 + 1;
            out.extend((first..first + self.k).map(NodeId));
        }
    }

    fn leaf_of(&self, block: BlockId) -> NodeId {
        NodeId(self.first_leaf() + block.0)
    }

    fn block_of(&self, node: NodeId) -> Option<BlockId> {
        let first = self.first_leaf();
        (node.0 >= first && node.0 < first + self.n).then(|| BlockId(node.0 - first))
    }

    fn is_leaf(&self, node: NodeId) -> bool {
        node.0 >= self.first_leaf()
    }

    fn is_void(&self, node: NodeId) -> bool {
        if node.0 >= self.padded_node_count() {
            return true;
        }
        let l = self.level(node) as usize;
        (node.0 - self.level_start[l]) * self.span[l] >= self.n
    }

    fn stores_pointers(&self) -> bool {
        false
    }

    fn depth(&self, node: NodeId) -> u32 {
        self.level(node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bal(n: u64, k: u32) -> BalancedTopology {
        BalancedTopology::new(n, TreeArity::new(k).unwrap()).unwrap()
    }

    #[test]
    fn binary_basics() {
        let t = bal(4, 2);
        assert_eq!(t.parent(NodeId(1)), Some(NodeId(0)));
        assert_eq!(t.padded_node_count(), 7);
        assert_eq!((3..7).map(|i| t.block_of(NodeId(i)).unwrap().0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(t.real_node_count(), 7);
        assert_eq!(t.leaf_depths(), vec![2; 4]);
        assert_eq!(bal(8, 2).leaf_depths(), vec![3; 8]);
    }

    #[test]
    fn large_tree_heights() {
        assert_eq!(bal(262_144, 2).height(), 18);
        assert_eq!(bal(262_144, 64).height(), 3);
        assert_eq!(bal(262_144, 2).real_node_count(), 2 * 262_144 - 1);
    }

    #[test]
    fn padding_is_void() {
        let t = bal(5, 2);
        assert_eq!(t.height(), 3);
        // Leaves 7..12 real, 12..15 void; node 6 covers slots 6,7 only.
        assert!(!t.is_void(NodeId(11)));
        assert!(t.is_void(NodeId(12)));
        assert!(t.is_void(NodeId(6)));
        assert!(!t.is_void(NodeId(5)));
        assert_eq!(t.id_space(), 12);
        assert_eq!(t.real_node_count(), 5 + 3 + 2 + 1);
        let t = bal(65, 64);
        assert_eq!(t.real_node_count(), 65 + 2 + 1);
        assert!(t.is_void(NodeId(3)));
    }

    #[test]
    fn void_matches_leaf_coverage_oracle() {
        for k in [2u32, 4, 8] {
            for n in 1..70u64 {
                let t = bal(n, k);
                for i in 0..t.padded_node_count() {
                    let node = NodeId(i);
                    // Oracle: descend to the leaf level and look for a real leaf.
                    let mut frontier = vec![node];
                    let mut leaves = Vec::new();
                    while let Some(v) = frontier.pop() {
                        if t.is_leaf(v) {
                            leaves.push(v);
                        } else {
                            frontier.extend(t.children(v));
                        }
                    }
                    let real = leaves.iter().any(|&l| t.block_of(l).is_some());
                    assert_eq!(t.is_void(node), !real, "n={n} k={k} node={i}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn parent_child_inverse(n in 1u64..5000, k in prop::sample::select(vec![2u32, 4, 8, 64]), pick in 0u64..u64::MAX) {
            let t = bal(n, k);
            let node = NodeId(pick % t.padded_node_count());
            if let Some(p) = t.parent(node) {
                prop_assert!(t.children(p).contains(&node));
                prop_assert_eq!(t.depth(p) + 1, t.depth(node));
            }
            for c in t.children(node) {
                prop_assert_eq!(t.parent(c), Some(node));
            }
        }
    }
}
