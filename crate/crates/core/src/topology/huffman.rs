// SPDX-License-Identifier: Apache-2.0

//! Frequency-optimal binary trees and the exhaustive oracle used to check them.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::model::{blocks_for_io, FrequencyProfile};
use crate::topology::{PointerTree, Topology, NONE};
use crate::workload::WorkloadOp;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuffmanShape {
    pub tree: PointerTree,
    /// Leaf depth (codeword length) per block.
    pub depth_of: Vec<u32>,
}

/// Builds the tree that minimizes `sum(w_i * depth_i)`.
///
/// Zero weights are raised to 1 so every block gets a leaf. Ties pop in
/// (weight, creation order) order, so the shape is deterministic.
pub fn build_huffman(profile: &FrequencyProfile) -> Result<HuffmanShape> {
    let n = profile.len() as u64;
    if n == 0 {
        return Err(Error::usage("empty frequency profile"));
    }
    let total = (2 * n - 1) as usize;
    let mut parent = vec![NONE; total];
    let mut left = vec![NONE; total];
    let mut right = vec![NONE; total];

    // Creation order: leaves 0..n, then internal nodes n..2n-1. The k-th
    // internal node created gets id n-2-k so the final merge is the root, id 0.
    let id_of = |c: u64| if c < n { n - 1 + c } else { n - 2 - (c - n) };

    let mut heap: BinaryHeap<Reverse<(u128, u64)>> =
        profile.weights().iter().enumerate().map(|(i, &w)| Reverse((w.max(1) as u128, i as u64))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        let (ia, ib, ip) = (id_of(a), id_of(b), id_of(next));
        left[ip as usize] = ia;
        right[ip as usize] = ib;
        parent[ia as usize] = ip;
        parent[ib as usize] = ip;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    let tree = PointerTree::from_links(n, parent, left, right)?;
    let depth_of = tree.leaf_depths();
    Ok(HuffmanShape { tree, depth_of })
}

/// `sum(w_i * depth_i)` in exact integer arithmetic.
pub fn weighted_path_length(profile: &FrequencyProfile, depths: &[u32]) -> Result<u128> {
    if depths.len() != profile.len() {
        return Err(Error::usage(format!("{} depths for {} blocks", depths.len(), profile.len())));
    }
    Ok(profile.weights().iter().zip(depths).map(|(&w, &d)| w as u128 * d as u128).sum())
}

/// Access-weighted mean leaf depth.
pub fn expected_depth(depths: &[u32], profile: &FrequencyProfile) -> Result<f64> {
    Ok(weighted_path_length(profile, depths)? as f64 / profile.total() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OptimalCost {
    pub weighted_path_length: u128,
    /// Depths of one minimizing tree.
    pub depths: Vec<u32>,
}

impl OptimalCost {
    pub fn expected_depth(&self, profile: &FrequencyProfile) -> f64 {
        self.weighted_path_length as f64 / profile.total() as f64
    }
}

/// Largest profile the exhaustive search accepts.
pub const BRUTE_FORCE_MAX: usize = 8;

/// Minimum weighted path length over every full binary tree with `n`
/// labeled leaves, found by enumeration.
///
/// Trees on `k` leaves are grown from trees on `k - 1` leaves by splicing the
/// new leaf onto each of the `2k - 3` edges (or above the root), which visits
/// every labeled full binary tree exactly once.
pub fn brute_force_optimal(profile: &FrequencyProfile) -> Result<OptimalCost> {
    let n = profile.len();
    if n == 0 || n > BRUTE_FORCE_MAX {
        return Err(Error::usage(format!("brute force supports 1..={BRUTE_FORCE_MAX} blocks, got {n}")));
    }
    // Nodes 0..n are leaves, internal nodes are appended after them.
    let mut parent = vec![usize::MAX; 2 * n];
    let mut best = OptimalCost { weighted_path_length: u128::MAX, depths: Vec::new() };
    if n == 1 {
        return Ok(OptimalCost { weighted_path_length: 0, depths: vec![0] });
    }
    parent[0] = n;
    parent[1] = n;
    let mut nodes = vec![0, 1, n];
    grow(profile.weights(), &mut parent, &mut nodes, 2, &mut best);
    Ok(best)
}

fn grow(weights: &[u64], parent: &mut [usize], nodes: &mut Vec<usize>, placed: usize, best: &mut OptimalCost) {
    let n = weights.len();
    if placed == n {
        let depths: Vec<u32> = (0..n)
            .map(|leaf| {
                let mut d = 0;
                let mut v = leaf;
                while parent[v] != usize::MAX {
                    v = parent[v];
                    d += 1;
                }
                d
            })
            .collect();
        let cost: u128 = weights.iter().zip(&depths).map(|(&w, &d)| w as u128 * d as u128).sum();
        if cost < best.weighted_path_length {
            *best = OptimalCost { weighted_path_length: cost, depths };
        }
        return;
    }
    let leaf = placed;
    let joint = n + placed - 1;
    let existing = nodes.clone();
    for &v in &existing {
        // Splice `joint` between v and its parent, with the new leaf beside v.
        let old = parent[v];
        parent[joint] = old;
        parent[v] = joint;
        parent[leaf] = joint;
        nodes.push(leaf);
        nodes.push(joint);
        grow(weights, parent, nodes, placed + 1, best);
        nodes.truncate(nodes.len() - 2);
        parent[v] = old;
        parent[joint] = usize::MAX;
        parent[leaf] = usize::MAX;
    }
}

/// Per-block access counts of a request stream; reads and writes both count.
pub fn trace_to_profile(ops: &[WorkloadOp], block_size: u64, capacity: u64) -> Result<FrequencyProfile> {
    if block_size == 0 || !capacity.is_multiple_of(block_size) {
        return Err(Error::usage("capacity must be a multiple of the block size"));
    }
    let mut counts = vec![0u64; (capacity / block_size) as usize];
    for op in ops {
        for b in blocks_for_io(op.offset, op.length, block_size, capacity)? {
            counts[b.index() as usize] += 1;
        }
    }
    FrequencyProfile::new(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TreeArity;
    use crate::topology::BalancedTopology;
    use crate::workload::OpKind;
    use proptest::prelude::*;

    fn prof(w: &[u64]) -> FrequencyProfile {
        FrequencyProfile::new(w.to_vec()).unwrap()
    }

    #[test]
    fn uniform_four_is_flat() {
        assert_eq!(build_huffman(&prof(&[1, 1, 1, 1])).unwrap().depth_of, vec![2; 4]);
    }

    #[test]
    fn dyadic_profile() {
        let p = prof(&[8, 4, 2, 2]);
        let h = build_huffman(&p).unwrap();
        assert_eq!(h.depth_of, vec![1, 2, 3, 3]);
        assert_eq!(expected_depth(&h.depth_of, &p).unwrap(), 1.75);
        assert_eq!(brute_force_optimal(&p).unwrap().weighted_path_length, 28);
    }

    #[test]
    fn small_brute_force_cases() {
        let two = brute_force_optimal(&prof(&[3, 9])).unwrap();
        assert_eq!(two.depths, vec![1, 1]);
        let three = brute_force_optimal(&prof(&[2, 1, 1])).unwrap();
        assert_eq!((three.weighted_path_length, three.depths), (6, vec![1, 2, 2]));
        assert!(brute_force_optimal(&prof(&[1; 9])).is_err());
    }

    #[test]
    fn enumeration_counts_all_labeled_trees() {
        // (2n-3)!! labeled full binary trees; count by making every tree tie.
        fn count(n: usize) -> u64 {
            let mut parent = vec![usize::MAX; 2 * n];
            parent[0] = n;
            parent[1] = n;
            let mut nodes = vec![0, 1, n];
            let mut c = 0;
            fn walk(n: usize, parent: &mut [usize], nodes: &mut Vec<usize>, placed: usize, c: &mut u64) {
                if placed == n {
                    *c += 1;
                    return;
                }
                let joint = n + placed - 1;
                for v in nodes.clone() {
                    let old = parent[v];
                    parent[joint] = old;
                    parent[v] = joint;
                    parent[placed] = joint;
                    nodes.push(placed);
                    nodes.push(joint);
                    walk(n, parent, nodes, placed + 1, c);
                    nodes.truncate(nodes.len() - 2);
                    parent[v] = old;
                    parent[joint] = usize::MAX;
                    parent[placed] = usize::MAX;
                }
            }
            walk(n, &mut parent, &mut nodes, 2, &mut c);
            c
        }
        assert_eq!([count(2), count(3), count(4), count(5)], [1, 3, 15, 105]);
    }

    #[test]
    fn single_block() {
        let h = build_huffman(&prof(&[5])).unwrap();
        assert_eq!(h.depth_of, vec![0]);
        assert_eq!(brute_force_optimal(&prof(&[5])).unwrap().weighted_path_length, 0);
    }

    #[test]
    fn zero_weights_still_get_leaves() {
        let p = prof(&[0, 0, 7, 0]);
        let h = build_huffman(&p).unwrap();
        h.tree.validate().unwrap();
        assert_eq!(h.depth_of.len(), 4);
        assert_eq!(h.depth_of[2], 1);
    }

    #[test]
    fn trace_profile_counts() {
        let op = |offset, length| WorkloadOp { t_ns: 0, kind: OpKind::Write, offset, length };
        let p = trace_to_profile(&[op(0, 32768)], 4096, 16 * 4096).unwrap();
        assert_eq!(&p.weights()[..9], &[1, 1, 1, 1, 1, 1, 1, 1, 0]);
        let twice =
            trace_to_profile(&[op(0, 32768), op(4096, 4096), op(0, 32768), op(4096, 4096)], 4096, 16 * 4096).unwrap();
        let once = trace_to_profile(&[op(0, 32768), op(4096, 4096)], 4096, 16 * 4096).unwrap();
        assert!(twice.weights().iter().zip(once.weights()).all(|(a, b)| *a == 2 * b));
        assert!(trace_to_profile(&[], 4096, 16 * 4096).is_err());
    }

    fn profile_strategy(max_n: usize) -> impl Strategy<Value = Vec<u64>> {
        prop::collection::vec(1u64..1000, 1..=max_n)
    }

    proptest! {
        #[test]
        fn matches_exhaustive_oracle(w in profile_strategy(6)) {
            let p = prof(&w);
            let h = build_huffman(&p).unwrap();
            let opt = brute_force_optimal(&p).unwrap();
            prop_assert_eq!(weighted_path_length(&p, &h.depth_of).unwrap(), opt.weighted_path_length);
        }

        #[test]
        fn kraft_equality_and_entropy_bound(w in prop::collection::vec(0u64..10_000, 1..300)) {
            prop_assume!(w.iter().any(|&x| x > 0));
            let raised: Vec<u64> = w.iter().map(|&x| x.max(1)).collect();
            let p = prof(&raised);
            let h = build_huffman(&p).unwrap();
            h.tree.validate().unwrap();
            let kraft: f64 = h.depth_of.iter().map(|&d| 0.5f64.powi(d as i32)).sum();
            prop_assert!((kraft - 1.0).abs() < 1e-9);
            if raised.len() > 1 {
                let e = expected_depth(&h.depth_of, &p).unwrap();
                let ent = p.entropy_bits();
                prop_assert!(ent <= e + 1e-9 && e < ent + 1.0, "H={} E={}", ent, e);
            }
        }

        #[test]
        fn never_worse_than_balanced(w in prop::collection::vec(1u64..1000, 2..200)) {
            let p = prof(&w);
            let h = build_huffman(&p).unwrap();
            let b = BalancedTopology::new(w.len() as u64, TreeArity::BINARY).unwrap();
            let bal = PointerTree::complete(w.len() as u64).unwrap();
            let eh = expected_depth(&h.depth_of, &p).unwrap();
            prop_assert!(eh <= expected_depth(&b.leaf_depths(), &p).unwrap() + 1e-12);
            prop_assert!(eh <= expected_depth(&bal.leaf_depths(), &p).unwrap() + 1e-12);
        }
    }
}
