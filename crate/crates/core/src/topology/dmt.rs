// SPDX-License-Identifier: Apache-2.0

//! Splay policy and the structural half of a splay step.
//!
//! The engine drives the digest side: it authenticates the nodes a step will
//! touch, applies [`splay_step`], then rehashes and commits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::NodeId;
use crate::topology::{PointerTree, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplayPolicy {
    /// Splaying happens only while the window is open.
    pub window: bool,
    pub probability: f64,
    pub seed: u64,
}

impl Default for SplayPolicy {
    fn default() -> Self {
        SplayPolicy { window: true, probability: 0.01, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplayDecision {
    Skip,
    Splay { distance: u32 },
}

/// Decides whether an access splays and how far.
///
/// `leaf_hotness` is `None` when the leaf is not cached. The Bernoulli draw is
/// taken whenever the window is open, so the random stream does not depend on
/// cache state. Distance is `hotness + 1`; with every counter starting at 0 a
/// distance of `hotness` alone would never move anything.
pub fn splay_decision<R: Rng + ?Sized>(leaf_hotness: Option<i64>, policy: &SplayPolicy, rng: &mut R) -> SplayDecision {
    if !policy.window {
        return SplayDecision::Skip;
    }
    let hit = rng.random_bool(policy.probability.clamp(0.0, 1.0));
    match (hit, leaf_hotness) {
        (true, Some(h)) => SplayDecision::Splay { distance: (h.max(0) as u64 + 1).min(u32::MAX as u64) as u32 },
        _ => SplayDecision::Skip,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Zig,
    ZigZig,
    ZigZag,
}

impl StepKind {
    pub fn levels(self) -> u32 {
        match self {
            StepKind::Zig => 1,
            _ => 2,
        }
    }

    pub fn rotations(self) -> u32 {
        self.levels()
    }
}

/// What a step changed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepEffect {
    pub kind: StepKind,
    /// Nodes whose child list changed (content or order), deepest first.
    pub rehash: Vec<NodeId>,
    /// Nodes whose parent link changed.
    pub reparented: Vec<NodeId>,
}

/// Lifts `x` by one zig, zig-zig or zig-zag step, keeping `leaf` as a child
/// of `x` throughout. Before each single rotation the children of `x` are
/// swapped if needed so `leaf` sits on the outer side and travels with it.
///
/// `x` must be an internal non-root node and `leaf` one of its children.
pub fn splay_step(tree: &mut PointerTree, x: NodeId, leaf: NodeId) -> StepEffect {
    debug_assert_eq!(tree.parent(leaf), Some(x));
    let y = tree.parent(x).expect("splay target is not the root");
    let g = tree.parent(y);
    let mut rehash = Vec::with_capacity(3);
    let mut reparented = Vec::with_capacity(6);

    let mut lift = |tree: &mut PointerTree, node: NodeId, keep: NodeId, rehash: &mut Vec<NodeId>| {
        let outer = if tree.is_left_child(node) { tree.left(node) } else { tree.right(node) };
        if outer != Some(keep) {
            tree.swap_children(node);
        }
        let (old_parent, moved) = tree.rotate_up(node);
        rehash.push(old_parent);
        reparented.extend([old_parent, moved, node]);
    };

    let kind = match g {
        None => {
            lift(tree, x, leaf, &mut rehash);
            StepKind::Zig
        }
        Some(_) if tree.is_left_child(x) == tree.is_left_child(y) => {
            // y keeps x on its outer side, so it rotates first without a swap.
            lift(tree, y, x, &mut rehash);
            lift(tree, x, leaf, &mut rehash);
            StepKind::ZigZig
        }
        Some(_) => {
            lift(tree, x, leaf, &mut rehash);
            lift(tree, x, leaf, &mut rehash);
            StepKind::ZigZag
        }
    };
    rehash.push(x);
    // Deepest first: a node rehashed later may sit above one rehashed earlier.
    rehash.sort_by_key(|&n| std::cmp::Reverse(tree.depth(n)));
    rehash.dedup();
    reparented.sort_unstable();
    reparented.dedup();
    StepEffect { kind, rehash, reparented }
}
