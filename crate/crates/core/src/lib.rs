// SPDX-License-Identifier: Apache-2.0

//! Authenticated block storage over hash trees with interchangeable shapes:
//! balanced k-ary, Huffman-optimal for a known access profile, and a
//! self-adjusting splay tree.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod cost;
pub mod crypto;
pub mod engine;
pub mod error;
pub mod harness;
pub mod model;
pub mod par;
pub mod store;
pub mod topology;
pub mod workload;

pub use engine::{Engine, EngineConfig, IoOutcome, OpCounters, TreeShape};
pub use error::{Error, IntegrityFailure, IntegrityKind, Result};
pub use model::{BlockId, Digest, FrequencyProfile, NodeId, RootAnchor, TreeArity};
pub use store::UntrustedStore;
pub use topology::{Topology, TreeKind};
pub use workload::{OpKind, WorkloadOp};
