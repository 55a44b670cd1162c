// SPDX-License-Identifier: Apache-2.0

//! Block sealing (AES-128-GCM) and keyed node hashing (HMAC-SHA-256).
//!
//! Leaves of the hash tree are the GCM tags produced when a block is sealed,
//! widened to 32 bytes. Internal nodes hash the ordered concatenation of their
//! children's digests under a separate 256-bit key. The block id is bound as
//! associated data so a sealed block moved to another slot no longer opens.

use std::fs;
use std::path::Path;

use aes_gcm::aead::generic_array::GenericArray;
use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes128Gcm, KeyInit};
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::error::{Error, Result};
use crate::model::{BlockId, Digest, DIGEST_LEN};

pub const BLOCK_KEY_LEN: usize = 16;
pub const NODE_KEY_LEN: usize = 32;
pub const KEY_FILE_LEN: usize = BLOCK_KEY_LEN + NODE_KEY_LEN;
pub const IV_LEN: usize = 12;
pub const MAC_LEN: usize = 16;

pub type Iv = [u8; IV_LEN];
pub type Mac16 = [u8; MAC_LEN];

type HmacSha256 = Hmac<Sha256>;

/// Block encryption key and node hashing key. Never written next to the data.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    block_key: [u8; BLOCK_KEY_LEN],
    node_key: [u8; NODE_KEY_LEN],
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KeyMaterial(..)")
    }
}

impl KeyMaterial {
    pub fn new(block_key: [u8; BLOCK_KEY_LEN], node_key: [u8; NODE_KEY_LEN]) -> Result<Self> {
        if block_key[..] == node_key[..BLOCK_KEY_LEN] {
            return Err(Error::usage("block key and node key must differ"));
        }
        Ok(KeyMaterial { block_key, node_key })
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        loop {
            let mut block_key = [0u8; BLOCK_KEY_LEN];
            let mut node_key = [0u8; NODE_KEY_LEN];
            rng.fill_bytes(&mut block_key);
            rng.fill_bytes(&mut node_key);
            if let Ok(k) = KeyMaterial::new(block_key, node_key) {
                return k;
            }
        }
    }

    /// Parses the 48-byte key file layout: block key followed by node key.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != KEY_FILE_LEN {
            return Err(Error::Size { expected: KEY_FILE_LEN, actual: bytes.len() });
        }
        let mut block_key = [0u8; BLOCK_KEY_LEN];
        let mut node_key = [0u8; NODE_KEY_LEN];
        block_key.copy_from_slice(&bytes[..BLOCK_KEY_LEN]);
        node_key.copy_from_slice(&bytes[BLOCK_KEY_LEN..]);
        KeyMaterial::new(block_key, node_key)
    }

    pub fn to_bytes(&self) -> [u8; KEY_FILE_LEN] {
        let mut out = [0u8; KEY_FILE_LEN];
        out[..BLOCK_KEY_LEN].copy_from_slice(&self.block_key);
        out[BLOCK_KEY_LEN..].copy_from_slice(&self.node_key);
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// A block as it lives on the untrusted device: ciphertext plus the leaf's IV and tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlock {
    pub ciphertext: Vec<u8>,
    pub iv: Iv,
    pub mac: Mac16,
}

/// Which function computes internal node digests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeHashKind {
    /// HMAC-SHA-256 under the node key.
    #[default]
    KeyedSha256,
    /// Fast keyed mixing hash; structural tests only, not collision resistant.
    Fast,
}

#[derive(Clone)]
enum NodeHasher {
    Sha(HmacSha256),
    Fast([u64; 4]),
}

/// Crypto operations used by the authenticator. Stateless after key setup.
#[derive(Clone)]
pub struct CryptoProvider {
    aead: Aes128Gcm,
    hasher: NodeHasher,
    block_size: usize,
}

impl CryptoProvider {
    pub fn new(keys: &KeyMaterial, kind: NodeHashKind, block_size: usize) -> Self {
        let aead = Aes128Gcm::new(GenericArray::from_slice(&keys.block_key));
        let hasher = match kind {
            NodeHashKind::KeyedSha256 => NodeHasher::Sha(
                <HmacSha256 as Mac>::new_from_slice(&keys.node_key).expect("hmac accepts any key length"),
            ),
            NodeHashKind::Fast => {
                let mut seeds = [0u64; 4];
                for (i, s) in seeds.iter_mut().enumerate() {
                    *s = u64::from_le_bytes(keys.node_key[i * 8..i * 8 + 8].try_into().unwrap());
                }
                NodeHasher::Fast(seeds)
            }
        };
        CryptoProvider { aead, hasher, block_size }
    }

    pub fn kind(&self) -> NodeHashKind {
        match self.hasher {
            NodeHasher::Sha(_) => NodeHashKind::KeyedSha256,
            NodeHasher::Fast(_) => NodeHashKind::Fast,
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn seal_block(&self, block: BlockId, plaintext: &[u8], iv: Iv) -> Result<SealedBlock> {
        let mut ciphertext = plaintext.to_vec();
        let mac = self.seal_in_place(block, &mut ciphertext, iv)?;
        Ok(SealedBlock { ciphertext, iv, mac })
    }

    /// Encrypts `buf` in place and returns the tag.
    pub fn seal_in_place(&self, block: BlockId, buf: &mut [u8], iv: Iv) -> Result<Mac16> {
        if buf.len() != self.block_size {
            return Err(Error::Size { expected: self.block_size, actual: buf.len() });
        }
        let aad = block.0.to_le_bytes();
        let tag = self
            .aead
            .encrypt_in_place_detached(GenericArray::from_slice(&iv), &aad, buf)
            .map_err(|_| Error::usage("AES-GCM refused to seal"))?;
        Ok(tag.into())
    }

    pub fn open_block(&self, block: BlockId, sealed: &SealedBlock) -> Result<Vec<u8>> {
        let mut plaintext = sealed.ciphertext.clone();
        self.open_in_place(block, &mut plaintext, &sealed.iv, &sealed.mac)?;
        Ok(plaintext)
    }

    /// Decrypts `buf` in place iff the tag verifies for (block id, iv, ciphertext).
    pub fn open_in_place(&self, block: BlockId, buf: &mut [u8], iv: &Iv, mac: &Mac16) -> Result<()> {
        if buf.len() != self.block_size {
            return Err(Error::Size { expected: self.block_size, actual: buf.len() });
        }
        let aad = block.0.to_le_bytes();
        self.aead
            .decrypt_in_place_detached(GenericArray::from_slice(iv), &aad, buf, GenericArray::from_slice(mac))
            .map_err(|_| Error::Authenticity(block))
    }

    /// Keyed digest of the ordered concatenation of `children`.
    pub fn node_digest(&self, children: &[Digest]) -> Result<Digest> {
        if children.len() < 2 {
            return Err(Error::usage(format!("internal node needs at least 2 children, got {}", children.len())));
        }
        Ok(match &self.hasher {
            NodeHasher::Sha(mac) => {
                let mut mac = mac.clone();
                for c in children {
                    mac.update(&c.0);
                }
                Digest(mac.finalize().into_bytes().into())
            }
            NodeHasher::Fast(seeds) => fast_digest(seeds, children),
        })
    }
}

/// Widens a 16-byte GCM tag to a leaf digest: tag in the low bytes, zero padded.
pub fn leaf_digest(sealed: &SealedBlock) -> Digest {
    leaf_digest_from_mac(&sealed.mac)
}

pub fn leaf_digest_from_mac(mac: &Mac16) -> Digest {
    let mut d = [0u8; DIGEST_LEN];
    d[..MAC_LEN].copy_from_slice(mac);
    Digest(d)
}

/// Recovers the tag from a leaf digest; `None` if the padding is not zero.
pub fn mac_from_leaf_digest(d: &Digest) -> Option<Mac16> {
    if d.0[MAC_LEN..].iter().any(|&b| b != 0) {
        return None;
    }
    Some(d.0[..MAC_LEN].try_into().unwrap())
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fast_digest(seeds: &[u64; 4], children: &[Digest]) -> Digest {
    let mut lanes = *seeds;
    for (lane, l) in lanes.iter_mut().enumerate() {
        *l ^= (children.len() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ lane as u64;
    }
    for child in children {
        for word in child.0.chunks_exact(8) {
            let w = u64::from_le_bytes(word.try_into().unwrap());
            for (lane, l) in lanes.iter_mut().enumerate() {
                *l = mix64(*l ^ w.rotate_left(lane as u32 * 16)).wrapping_add(w);
            }
        }
    }
    let mut out = [0u8; DIGEST_LEN];
    for (lane, l) in lanes.iter().enumerate() {
        out[lane * 8..lane * 8 + 8].copy_from_slice(&mix64(*l).to_le_bytes());
    }
    Digest(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn provider(kind: NodeHashKind) -> CryptoProvider {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        CryptoProvider::new(&KeyMaterial::generate(&mut rng), kind, 4096)
    }

    fn block(fill: u8) -> Vec<u8> {
        (0..4096).map(|i| (i as u8).wrapping_mul(31) ^ fill).collect()
    }

    #[test]
    fn seal_open_round_trip() {
        let c = provider(NodeHashKind::KeyedSha256);
        let pt = block(3);
        let sealed = c.seal_block(BlockId(5), &pt, [1; 12]).unwrap();
        assert_eq!(sealed.ciphertext.len(), pt.len());
        assert_ne!(sealed.ciphertext, pt);
        assert_eq!(c.open_block(BlockId(5), &sealed).unwrap(), pt);
    }

    #[test]
    fn block_id_is_bound() {
        let c = provider(NodeHashKind::KeyedSha256);
        let pt = block(0);
        let a = c.seal_block(BlockId(1), &pt, [4; 12]).unwrap();
        let b = c.seal_block(BlockId(2), &pt, [4; 12]).unwrap();
        assert_ne!(a.mac, b.mac);
        assert!(matches!(c.open_block(BlockId(2), &a), Err(Error::Authenticity(BlockId(2)))));
    }

    #[test]
    fn wrong_length_rejected() {
        let c = provider(NodeHashKind::KeyedSha256);
        assert!(matches!(c.seal_block(BlockId(0), &[0u8; 100], [0; 12]), Err(Error::Size { .. })));
    }

    #[test]
    fn single_bit_flips_fail() {
        let c = provider(NodeHashKind::KeyedSha256);
        let sealed = c.seal_block(BlockId(9), &block(7), [2; 12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let mut t = sealed.clone();
            let bit = rng.random_range(0..4096 * 8);
            t.ciphertext[bit / 8] ^= 1 << (bit % 8);
            assert!(c.open_block(BlockId(9), &t).is_err());
        }
        for bit in 0..IV_LEN * 8 {
            let mut t = sealed.clone();
            t.iv[bit / 8] ^= 1 << (bit % 8);
            assert!(c.open_block(BlockId(9), &t).is_err());
        }
        for bit in 0..MAC_LEN * 8 {
            let mut t = sealed.clone();
            t.mac[bit / 8] ^= 1 << (bit % 8);
            assert!(c.open_block(BlockId(9), &t).is_err());
        }
        for bit in 0..64 {
            assert!(c.open_block(BlockId(9 ^ (1 << bit)), &sealed).is_err());
        }
    }

    #[test]
    fn node_digest_order_and_count_sensitive() {
        for kind in [NodeHashKind::KeyedSha256, NodeHashKind::Fast] {
            let c = provider(kind);
            let d1 = Digest([1; 32]);
            let d2 = Digest([2; 32]);
            let a = c.node_digest(&[d1, d2]).unwrap();
            assert_eq!(a, c.node_digest(&[d1, d2]).unwrap());
            assert_ne!(a, c.node_digest(&[d2, d1]).unwrap());
            assert_ne!(a, c.node_digest(&[d1, d2, Digest::ZERO]).unwrap());
            assert!(c.node_digest(&[]).is_err());
            assert!(c.node_digest(&[d1]).is_err());
        }
    }

    #[test]
    fn node_digest_collision_free_on_corpus() {
        for kind in [NodeHashKind::KeyedSha256, NodeHashKind::Fast] {
            let c = provider(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut seen = HashSet::new();
            for i in 0..5000 {
                let k = [2, 4, 8, 64][i % 4];
                let children: Vec<Digest> = (0..k)
                    .map(|_| {
                        let mut d = [0u8; 32];
                        rng.fill_bytes(&mut d);
                        Digest(d)
                    })
                    .collect();
                assert!(seen.insert(c.node_digest(&children).unwrap()));
            }
        }
    }

    #[test]
    fn sixty_four_ary_input_is_2048_bytes() {
        let children = vec![Digest([3; 32]); 64];
        let bytes: usize = children.iter().map(|d| d.0.len()).sum();
        assert_eq!(bytes, 2048);
        provider(NodeHashKind::KeyedSha256).node_digest(&children).unwrap();
    }

    #[test]
    fn leaf_digest_widening() {
        let c = provider(NodeHashKind::KeyedSha256);
        let pt = block(1);
        let a = c.seal_block(BlockId(3), &pt, [5; 12]).unwrap();
        let b = c.seal_block(BlockId(3), &pt, [6; 12]).unwrap();
        assert_eq!(leaf_digest(&a), leaf_digest(&a.clone()));
        assert_ne!(leaf_digest(&a), leaf_digest(&b));
        assert_eq!(leaf_digest(&a).0.len(), 32);
        assert_eq!(mac_from_leaf_digest(&leaf_digest(&a)), Some(a.mac));
        assert_eq!(mac_from_leaf_digest(&Digest([1; 32])), None);
    }

    #[test]
    fn key_file_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = KeyMaterial::generate(&mut rng);
        let bytes = k.to_bytes();
        assert_eq!(bytes.len(), 48);
        assert_eq!(KeyMaterial::from_bytes(&bytes).unwrap(), k);
        assert!(KeyMaterial::from_bytes(&bytes[..47]).is_err());
        assert!(KeyMaterial::new([1; 16], [1; 32]).is_err());
    }
}
