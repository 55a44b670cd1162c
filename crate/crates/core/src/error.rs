// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use crate::model::{BlockId, Digest, NodeId};

pub type Result<T> = std::result::Result<T, Error>;

/// What exactly failed to line up during an integrity check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntegrityKind {
    /// AEAD tag of the block did not verify.
    BlockMac,
    /// A block that was never written holds non-zero bytes.
    UnwrittenBlock,
    /// Recomputed digest differs from the digest stored for that node.
    NodeDigest,
    /// Recomputed digest differs from an authenticated cached ancestor.
    CachedAncestor,
    /// Recomputed root differs from the trusted root anchor.
    RootAnchor,
    /// A metadata record is malformed or disagrees with the trusted topology.
    Record,
}

/// Forensic details of a detected integrity violation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegrityFailure {
    pub kind: IntegrityKind,
    pub block: Option<BlockId>,
    pub node: NodeId,
    /// Distance (in edges) from the accessed leaf to `node`; 0 is the leaf.
    pub level: u32,
    pub expected: Digest,
    pub computed: Digest,
}

impl fmt::Display for IntegrityFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} mismatch at node {} (level {})", self.kind, self.node, self.level)?;
        if let Some(b) = self.block {
            write!(f, " while accessing block {b}")?;
        }
        write!(f, ": expected {}, computed {}", self.expected, self.computed)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("block {block} out of range (device has {n_blocks} blocks)")]
    BlockRange { block: u64, n_blocks: u64 },

    #[error("node {node} out of range (tree has {node_count} node ids)")]
    NodeRange { node: u64, node_count: u64 },

    #[error("I/O [{offset}, +{length}) exceeds device capacity {capacity}")]
    IoRange { offset: u64, length: u64, capacity: u64 },

    #[error("expected {expected} bytes, got {actual}")]
    Size { expected: usize, actual: usize },

    #[error("block {0} failed authentication")]
    Authenticity(BlockId),

    #[error("integrity failure: {0}")]
    Integrity(Box<IntegrityFailure>),

    #[error("I/O request failed on {} block(s); first: {}", .0.len(), .0[0])]
    IoIntegrity(Vec<IntegrityFailure>),

    #[error("inconsistent metadata image at node {node}")]
    Inconsistent { node: NodeId },

    #[error("{0}")]
    Usage(String),

    #[error("tamper hooks are disabled outside test mode")]
    TamperDisabled,

    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn integrity(f: IntegrityFailure) -> Self {
        Error::Integrity(Box::new(f))
    }

    /// True for every variant that signals tampering or an inconsistent image.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            Error::Integrity(_) | Error::IoIntegrity(_) | Error::Authenticity(_) | Error::Inconsistent { .. }
        )
    }

    pub fn integrity_failure(&self) -> Option<&IntegrityFailure> {
        match self {
            Error::Integrity(f) => Some(f),
            Error::IoIntegrity(v) => v.first(),
            _ => None,
        }
    }
}
