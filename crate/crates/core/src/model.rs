// SPDX-License-Identifier: Apache-2.0

//! Identifiers and value types shared by every layer of the store.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default data unit; matches the disk I/O size.
pub const DEFAULT_BLOCK_SIZE: usize = 4096;

pub const DIGEST_LEN: usize = 32;

/// Size of the trusted root anchor file: digest followed by a little-endian generation.
pub const ANCHOR_FILE_LEN: usize = DIGEST_LEN + 8;

/// Index of a data block on the device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u64);

impl BlockId {
    pub fn checked(index: u64, n_blocks: u64) -> Result<Self> {
        if index < n_blocks {
            Ok(BlockId(index))
        } else {
            Err(Error::BlockRange { block: index, n_blocks })
        }
    }

    pub fn index(self) -> u64 {
        self.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// Index of a hash tree node. Doubles as the record slot in the metadata region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A 32-byte node value: a widened leaf MAC or a keyed internal hash.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != DIGEST_LEN * 2 {
            return None;
        }
        let mut out = [0u8; DIGEST_LEN];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16)?;
            let lo = (chunk[1] as char).to_digit(16)?;
            out[i] = (hi * 16 + lo) as u8;
        }
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad digest hex"))
    }
}

/// The root digest kept in trusted storage, versioned by a commit counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootAnchor {
    pub digest: Digest,
    pub generation: u64,
}

impl RootAnchor {
    pub fn new(digest: Digest) -> Self {
        RootAnchor { digest, generation: 0 }
    }

    /// Replaces the digest and bumps the generation by exactly one.
    pub fn commit(&mut self, digest: Digest) {
        self.digest = digest;
        self.generation += 1;
    }

    pub fn to_bytes(&self) -> [u8; ANCHOR_FILE_LEN] {
        let mut out = [0u8; ANCHOR_FILE_LEN];
        out[..DIGEST_LEN].copy_from_slice(&self.digest.0);
        out[DIGEST_LEN..].copy_from_slice(&self.generation.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != ANCHOR_FILE_LEN {
            return Err(Error::Size { expected: ANCHOR_FILE_LEN, actual: bytes.len() });
        }
        let mut digest = [0u8; DIGEST_LEN];
        digest.copy_from_slice(&bytes[..DIGEST_LEN]);
        let generation = u64::from_le_bytes(bytes[DIGEST_LEN..].try_into().unwrap());
        Ok(RootAnchor { digest: Digest(digest), generation })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Per-block access weights, dense over `[0, n_blocks)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    weights: Vec<u64>,
}

impl FrequencyProfile {
    pub fn new(weights: Vec<u64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::usage("frequency profile is empty"));
        }
        if weights.iter().all(|&w| w == 0) {
            return Err(Error::usage("frequency profile has no positive weight"));
        }
        Ok(FrequencyProfile { weights })
    }

    /// Quantizes probabilities onto integer weights with `scale` units of resolution.
    pub fn from_probabilities(probs: &[f64], scale: f64) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::usage("probabilities must be finite and non-negative"));
        }
        Self::new(probs.iter().map(|p| (p * scale).round() as u64).collect())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, block: BlockId) -> u64 {
        self.weights[block.0 as usize]
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn total(&self) -> u64 {
        self.weights.iter().sum()
    }

    /// Normalized probabilities; sums to 1.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.weights.iter().map(|&w| w as f64 / total).collect()
    }

    /// Shannon entropy in bits of the normalized profile.
    pub fn entropy_bits(&self) -> f64 {
        self.probabilities().into_iter().filter(|&p| p > 0.0).map(|p| -p * p.log2()).sum()
    }
}

/// Branching factor of a balanced tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct TreeArity(u32);

impl TreeArity {
    pub const SUPPORTED: [u32; 4] = [2, 4, 8, 64];
    pub const BINARY: TreeArity = TreeArity(2);

    pub fn new(k: u32) -> Result<Self> {
        if Self::SUPPORTED.contains(&k) {
            Ok(TreeArity(k))
        } else {
            Err(Error::usage(format!("unsupported arity {k}; expected one of 2, 4, 8, 64")))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for TreeArity {
    type Error = Error;
    fn try_from(k: u32) -> Result<Self> {
        TreeArity::new(k)
    }
}

impl From<TreeArity> for u32 {
    fn from(a: TreeArity) -> u32 {
        a.0
    }
}

/// Smallest `h` with `k^h >= n`; the height of a balanced `k`-ary tree over `n` leaves.
pub fn balanced_height(n: u64, k: u64) -> u32 {
    let mut h = 0;
    let mut span = 1u64;
    while span < n {
        span = span.saturating_mul(k);
        h += 1;
    }
    h
}

/// Maps a byte range onto the consecutive blocks it touches.
pub fn blocks_for_io(offset: u64, length: u64, block_size: u64, capacity: u64) -> Result<Vec<BlockId>> {
    let end = offset.checked_add(length).ok_or(Error::IoRange { offset, length, capacity })?;
    if end > capacity || offset > capacity {
        return Err(Error::IoRange { offset, length, capacity });
    }
    if length == 0 {
        return Ok(Vec::new());
    }
    let first = offset / block_size;
    let last = (end - 1) / block_size;
    Ok((first..=last).map(BlockId).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAP: u64 = 1 << 30;

    #[test]
    fn aligned_32k_write_touches_eight_blocks() {
        let blocks = blocks_for_io(0, 32768, 4096, CAP).unwrap();
        assert_eq!(blocks, (0..8).map(BlockId).collect::<Vec<_>>());
    }

    #[test]
    fn single_aligned_block() {
        assert_eq!(blocks_for_io(0, 4096, 4096, CAP).unwrap(), vec![BlockId(0)]);
    }

    #[test]
    fn straddling_write() {
        assert_eq!(blocks_for_io(2048, 4096, 4096, CAP).unwrap(), vec![BlockId(0), BlockId(1)]);
    }

    #[test]
    fn straddling_matches_enumeration() {
        // Brute force: mark every byte and collect the blocks that own one.
        let bs = 16u64;
        let cap = 16 * bs;
        for offset in 0..cap {
            for len in 0..=(cap - offset).min(3 * bs) {
                let mut expect: Vec<u64> = (offset..offset + len).map(|b| b / bs).collect();
                expect.dedup();
                let got: Vec<u64> = blocks_for_io(offset, len, bs, cap).unwrap().into_iter().map(|b| b.0).collect();
                assert_eq!(got, expect, "offset {offset} len {len}");
                if len > 0 {
                    assert_eq!(got.len() as u64, ((offset % bs) + len).div_ceil(bs));
                }
            }
        }
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(blocks_for_io(CAP - 4096, 8192, 4096, CAP), Err(Error::IoRange { .. })));
        assert!(matches!(blocks_for_io(u64::MAX, 2, 4096, CAP), Err(Error::IoRange { .. })));
        assert!(BlockId::checked(10, 10).is_err());
        assert_eq!(BlockId::checked(9, 10).unwrap(), BlockId(9));
    }

    #[test]
    fn ids_round_trip_through_json() {
        let b = BlockId(262_143);
        let n = NodeId(524_286);
        assert_eq!(serde_json::from_str::<BlockId>(&serde_json::to_string(&b).unwrap()).unwrap(), b);
        assert_eq!(serde_json::from_str::<NodeId>(&serde_json::to_string(&n).unwrap()).unwrap(), n);
    }

    #[test]
    fn anchor_bytes() {
        let mut a = RootAnchor::new(Digest([7; 32]));
        a.commit(Digest([9; 32]));
        assert_eq!(a.generation, 1);
        let b = RootAnchor::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert!(RootAnchor::from_bytes(&[0u8; 39]).is_err());
    }

    #[test]
    fn digest_hex() {
        let d = Digest([0xab; 32]);
        assert_eq!(Digest::from_hex(&d.to_hex()), Some(d));
        assert_eq!(Digest::from_hex("zz"), None);
    }

    #[test]
    fn heights() {
        assert_eq!(balanced_height(262_144, 2), 18);
        assert_eq!(balanced_height(262_144, 64), 3);
        assert_eq!(balanced_height(1, 2), 0);
        assert_eq!(balanced_height(5, 2), 3);
        assert_eq!(balanced_height(1 << 20, 64), 4);
    }

    #[test]
    fn profile_validation() {
        assert!(FrequencyProfile::new(vec![]).is_err());
        assert!(FrequencyProfile::new(vec![0, 0]).is_err());
        let p = FrequencyProfile::new(vec![1, 1, 1, 1]).unwrap();
        assert!((p.entropy_bits() - 2.0).abs() < 1e-12);
        assert!(TreeArity::new(3).is_err());
        assert_eq!(TreeArity::new(64).unwrap().get(), 64);
    }
}
