// SPDX-License-Identifier: Apache-2.0

//! The untrusted device: a data region of ciphertext blocks and a metadata
//! region of fixed-size node records.
//!
//! Nothing read from here is believed until the authenticator has checked it
//! against the trusted root anchor. Test builds can mutate either region
//! through [`UntrustedStore::tamper`] to play the adversary.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::crypto::{Iv, IV_LEN};
use crate::error::{Error, Result};
use crate::model::{BlockId, Digest, NodeId, DIGEST_LEN};

/// Stride of one metadata record.
pub const NODE_RECORD_SIZE: usize = 80;

/// Pointer sentinel for "no node".
pub const NONE: u64 = u64::MAX;

pub mod flags {
    /// Record has been initialized.
    pub const VALID: u32 = 1;
    pub const LEAF: u32 = 1 << 1;
    /// Leaf whose block has been sealed at least once.
    pub const WRITTEN: u32 = 1 << 2;
    pub const ALL: u32 = VALID | LEAF | WRITTEN;
}

/// One metadata record. The record at byte offset `i * 80` belongs to node `i`.
///
/// Layout (little-endian): parent `0..8`, left `8..16`, right `16..24`,
/// hotness `24..32`, digest `32..64`, iv `64..76`, flags `76..80`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub parent: u64,
    pub left: u64,
    pub right: u64,
    pub hotness: i64,
    pub digest: Digest,
    pub iv: Iv,
    pub flags: u32,
}

impl Default for NodeRecord {
    fn default() -> Self {
        NodeRecord {
            parent: NONE,
            left: NONE,
            right: NONE,
            hotness: 0,
            digest: Digest::ZERO,
            iv: [0; IV_LEN],
            flags: 0,
        }
    }
}

impl NodeRecord {
    pub fn encode(&self) -> [u8; NODE_RECORD_SIZE] {
        let mut b = [0u8; NODE_RECORD_SIZE];
        b[0..8].copy_from_slice(&self.parent.to_le_bytes());
        b[8..16].copy_from_slice(&self.left.to_le_bytes());
        b[16..24].copy_from_slice(&self.right.to_le_bytes());
        b[24..32].copy_from_slice(&self.hotness.to_le_bytes());
        b[32..64].copy_from_slice(&self.digest.0);
        b[64..76].copy_from_slice(&self.iv);
        b[76..80].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() != NODE_RECORD_SIZE {
            return Err(Error::Size { expected: NODE_RECORD_SIZE, actual: b.len() });
        }
        let u = |r: std::ops::Range<usize>| u64::from_le_bytes(b[r].try_into().unwrap());
        let mut digest = [0u8; DIGEST_LEN];
        digest.copy_from_slice(&b[32..64]);
        Ok(NodeRecord {
            parent: u(0..8),
            left: u(8..16),
            right: u(16..24),
            hotness: i64::from_le_bytes(b[24..32].try_into().unwrap()),
            digest: Digest(digest),
            iv: b[64..76].try_into().unwrap(),
            flags: u32::from_le_bytes(b[76..80].try_into().unwrap()),
        })
    }

    pub fn is_leaf(&self) -> bool {
        self.flags & flags::LEAF != 0
    }

    pub fn is_written(&self) -> bool {
        self.flags & flags::WRITTEN != 0
    }

    pub fn byte_offset(node: NodeId) -> u64 {
        node.0 * NODE_RECORD_SIZE as u64
    }
}

/// Which half of the device a tamper or snapshot addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionKind {
    Data,
    Meta,
}

/// Saved bytes of one or more ranges, restorable later (replay attacks).
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    pieces: Vec<(RegionKind, u64, Vec<u8>)>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

#[derive(Clone, Debug)]
pub enum Mutation {
    FlipBit { bit: u8 },
    Overwrite(Vec<u8>),
    RestoreSnapshot(Snapshot),
}

/// Shape of the device image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreLayout {
    pub capacity_bytes: u64,
    pub block_size: usize,
    pub max_nodes: u64,
    pub data_path: Option<PathBuf>,
    pub meta_path: Option<PathBuf>,
}

impl StoreLayout {
    pub fn n_blocks(&self) -> u64 {
        self.capacity_bytes / self.block_size as u64
    }

    pub fn data_len(&self) -> u64 {
        self.n_blocks() * self.block_size as u64
    }

    pub fn meta_len(&self) -> u64 {
        self.max_nodes * NODE_RECORD_SIZE as u64
    }
}

enum Region {
    File(File),
    Memory(Vec<u8>),
}

impl Region {
    fn read_at(&self, buf: &mut [u8], offset: u64) -> Result<()> {
        match self {
            Region::File(f) => f.read_exact_at(buf, offset)?,
            Region::Memory(v) => {
                let start = offset as usize;
                let end = start + buf.len();
                if end > v.len() {
                    return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
                }
                buf.copy_from_slice(&v[start..end]);
            }
        }
        Ok(())
    }

    fn write_at(&mut self, buf: &[u8], offset: u64) -> Result<()> {
        match self {
            Region::File(f) => f.write_all_at(buf, offset)?,
            Region::Memory(v) => {
                let start = offset as usize;
                let end = start + buf.len();
                if end > v.len() {
                    return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
                }
                v[start..end].copy_from_slice(buf);
            }
        }
        Ok(())
    }

    fn sync(&self) -> Result<()> {
        if let Region::File(f) = self {
            f.sync_data()?;
        }
        Ok(())
    }
}

/// Raw access counts, independent of the authenticator's counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub data_reads: u64,
    pub data_writes: u64,
    pub meta_reads: u64,
    pub meta_writes: u64,
}

pub struct UntrustedStore {
    layout: StoreLayout,
    data: Region,
    meta: Region,
    device_latency: Option<Duration>,
    tamper_enabled: bool,
    stats: StoreStats,
}

impl std::fmt::Debug for UntrustedStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UntrustedStore").field("layout", &self.layout).field("stats", &self.stats).finish()
    }
}

fn check_layout(layout: &StoreLayout) -> Result<()> {
    if layout.block_size == 0 || !layout.capacity_bytes.is_multiple_of(layout.block_size as u64) {
        return Err(Error::usage("capacity must be a positive multiple of the block size"));
    }
    if layout.n_blocks() == 0 {
        return Err(Error::usage("device must hold at least one block"));
    }
    Ok(())
}

impl UntrustedStore {
    /// Creates both regions as zero-filled (sparse) files. Refuses to clobber
    /// existing files unless `force` is set.
    pub fn create_files(layout: StoreLayout, force: bool) -> Result<Self> {
        check_layout(&layout)?;
        let (data_path, meta_path) = file_paths(&layout)?;
        let open = |p: &Path, len: u64| -> Result<File> {
            if p.exists() && !force {
                return Err(Error::usage(format!("{} already exists (use --force)", p.display())));
            }
            let f = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(p)?;
            f.set_len(len)?;
            Ok(f)
        };
        let data = open(&data_path, layout.data_len())?;
        let meta = open(&meta_path, layout.meta_len())?;
        Ok(Self::from_regions(layout, Region::File(data), Region::File(meta)))
    }

    pub fn open_files(layout: StoreLayout) -> Result<Self> {
        check_layout(&layout)?;
        let (data_path, meta_path) = file_paths(&layout)?;
        let open = |p: &Path, len: u64| -> Result<File> {
            let f = OpenOptions::new().read(true).write(true).open(p)?;
            let actual = f.metadata()?.len();
            if actual != len {
                return Err(Error::usage(format!("{} is {actual} bytes, expected {len}", p.display())));
            }
            Ok(f)
        };
        let data = open(&data_path, layout.data_len())?;
        let meta = open(&meta_path, layout.meta_len())?;
        Ok(Self::from_regions(layout, Region::File(data), Region::File(meta)))
    }

    /// Purely in-memory image, for tests and in-process benchmarks.
    pub fn in_memory(capacity_bytes: u64, block_size: usize, max_nodes: u64) -> Result<Self> {
        let layout = StoreLayout { capacity_bytes, block_size, max_nodes, data_path: None, meta_path: None };
        check_layout(&layout)?;
        let data = Region::Memory(vec![0; layout.data_len() as usize]);
        let meta = Region::Memory(vec![0; layout.meta_len() as usize]);
        Ok(Self::from_regions(layout, data, meta))
    }

    fn from_regions(layout: StoreLayout, data: Region, meta: Region) -> Self {
        UntrustedStore {
            layout,
            data,
            meta,
            device_latency: None,
            tamper_enabled: cfg!(test),
            stats: StoreStats::default(),
        }
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    pub fn n_blocks(&self) -> u64 {
        self.layout.n_blocks()
    }

    pub fn block_size(&self) -> usize {
        self.layout.block_size
    }

    pub fn max_nodes(&self) -> u64 {
        self.layout.max_nodes
    }

    pub fn stats(&self) -> StoreStats {
        self.stats
    }

    /// Adds a busy-wait of `latency` to every data block access.
    pub fn set_device_latency(&mut self, latency: Option<Duration>) {
        self.device_latency = latency.filter(|d| !d.is_zero());
    }

    pub fn enable_tamper(&mut self, enabled: bool) {
        self.tamper_enabled = enabled;
    }

    fn simulate_latency(&self) {
        if let Some(d) = self.device_latency {
            let start = Instant::now();
            while start.elapsed() < d {
                std::hint::spin_loop();
            }
        }
    }

    fn check_block(&self, block: BlockId) -> Result<u64> {
        if block.0 >= self.n_blocks() {
            return Err(Error::BlockRange { block: block.0, n_blocks: self.n_blocks() });
        }
        Ok(block.0 * self.layout.block_size as u64)
    }

    fn check_node(&self, node: NodeId) -> Result<u64> {
        if node.0 >= self.layout.max_nodes {
            return Err(Error::NodeRange { node: node.0, node_count: self.layout.max_nodes });
        }
        Ok(NodeRecord::byte_offset(node))
    }

    pub fn read_block_raw(&mut self, block: BlockId, buf: &mut [u8]) -> Result<()> {
        let off = self.check_block(block)?;
        if buf.len() != self.layout.block_size {
            return Err(Error::Size { expected: self.layout.block_size, actual: buf.len() });
        }
        self.simulate_latency();
        self.data.read_at(buf, off)?;
        self.stats.data_reads += 1;
        Ok(())
    }

    pub fn write_block_raw(&mut self, block: BlockId, buf: &[u8]) -> Result<()> {
        let off = self.check_block(block)?;
        if buf.len() != self.layout.block_size {
            return Err(Error::Size { expected: self.layout.block_size, actual: buf.len() });
        }
        self.simulate_latency();
        self.data.write_at(buf, off)?;
        self.stats.data_writes += 1;
        Ok(())
    }

    pub fn read_node(&mut self, node: NodeId) -> Result<NodeRecord> {
        let off = self.check_node(node)?;
        let mut b = [0u8; NODE_RECORD_SIZE];
        self.meta.read_at(&mut b, off)?;
        self.stats.meta_reads += 1;
        NodeRecord::decode(&b)
    }

    pub fn write_node(&mut self, node: NodeId, rec: &NodeRecord) -> Result<()> {
        let off = self.check_node(node)?;
        self.meta.write_at(&rec.encode(), off)?;
        self.stats.meta_writes += 1;
        Ok(())
    }

    /// Reads `count` consecutive records starting at `first` in one request.
    pub fn read_nodes(&mut self, first: NodeId, count: usize) -> Result<Vec<NodeRecord>> {
        self.check_node(first)?;
        if count == 0 {
            return Ok(Vec::new());
        }
        self.check_node(NodeId(first.0 + count as u64 - 1))?;
        let mut buf = vec![0u8; count * NODE_RECORD_SIZE];
        self.meta.read_at(&mut buf, NodeRecord::byte_offset(first))?;
        self.stats.meta_reads += count as u64;
        buf.chunks_exact(NODE_RECORD_SIZE).map(NodeRecord::decode).collect()
    }

    /// Writes consecutive records starting at `first` in one request.
    pub fn write_nodes(&mut self, first: NodeId, recs: &[NodeRecord]) -> Result<()> {
        if recs.is_empty() {
            return Ok(());
        }
        self.check_node(first)?;
        self.check_node(NodeId(first.0 + recs.len() as u64 - 1))?;
        let mut buf = Vec::with_capacity(recs.len() * NODE_RECORD_SIZE);
        for r in recs {
            buf.extend_from_slice(&r.encode());
        }
        self.meta.write_at(&buf, NodeRecord::byte_offset(first))?;
        self.stats.meta_writes += recs.len() as u64;
        Ok(())
    }

    /// Byte range of a block's ciphertext within the data region.
    pub fn block_range(&self, block: BlockId) -> (RegionKind, u64, usize) {
        (RegionKind::Data, block.0 * self.layout.block_size as u64, self.layout.block_size)
    }

    /// Byte range of a node record within the metadata region.
    pub fn record_range(&self, node: NodeId) -> (RegionKind, u64, usize) {
        (RegionKind::Meta, NodeRecord::byte_offset(node), NODE_RECORD_SIZE)
    }

    fn region_mut(&mut self, kind: RegionKind) -> &mut Region {
        match kind {
            RegionKind::Data => &mut self.data,
            RegionKind::Meta => &mut self.meta,
        }
    }

    fn region_len(&self, kind: RegionKind) -> u64 {
        match kind {
            RegionKind::Data => self.layout.data_len(),
            RegionKind::Meta => self.layout.meta_len(),
        }
    }

    /// Records the current bytes of the given ranges.
    pub fn snapshot(&self, ranges: &[(RegionKind, u64, usize)]) -> Result<Snapshot> {
        let mut pieces = Vec::with_capacity(ranges.len());
        for &(kind, off, len) in ranges {
            let mut buf = vec![0u8; len];
            let region = match kind {
                RegionKind::Data => &self.data,
                RegionKind::Meta => &self.meta,
            };
            region.read_at(&mut buf, off)?;
            pieces.push((kind, off, buf));
        }
        Ok(Snapshot { pieces })
    }

    /// Adversarial mutation of the untrusted image. Never touches trusted state.
    pub fn tamper(&mut self, region: RegionKind, byte_offset: u64, mutation: Mutation) -> Result<()> {
        if !self.tamper_enabled {
            return Err(Error::TamperDisabled);
        }
        match mutation {
            Mutation::FlipBit { bit } => {
                if byte_offset >= self.region_len(region) {
                    return Err(Error::usage("tamper offset beyond region"));
                }
                let r = self.region_mut(region);
                let mut b = [0u8; 1];
                r.read_at(&mut b, byte_offset)?;
                b[0] ^= 1 << (bit % 8);
                r.write_at(&b, byte_offset)?;
            }
            Mutation::Overwrite(bytes) => self.region_mut(region).write_at(&bytes, byte_offset)?,
            Mutation::RestoreSnapshot(snap) => {
                for (kind, off, bytes) in snap.pieces {
                    self.region_mut(kind).write_at(&bytes, off)?;
                }
            }
        }
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        self.data.sync()?;
        self.meta.sync()
    }
}

fn file_paths(layout: &StoreLayout) -> Result<(PathBuf, PathBuf)> {
    match (&layout.data_path, &layout.meta_path) {
        (Some(d), Some(m)) if d != m => Ok((d.clone(), m.clone())),
        (Some(_), Some(_)) => Err(Error::usage("data and metadata paths must differ")),
        _ => Err(Error::usage("file-backed store needs both data and metadata paths")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(dir: &Path) -> StoreLayout {
        StoreLayout {
            capacity_bytes: 16 * 4096,
            block_size: 4096,
            max_nodes: 31,
            data_path: Some(dir.join("data.img")),
            meta_path: Some(dir.join("meta.img")),
        }
    }

    #[test]
    fn block_round_trip_and_zero_image() {
        let mut s = UntrustedStore::in_memory(16 * 4096, 4096, 31).unwrap();
        let mut buf = vec![1u8; 4096];
        s.read_block_raw(BlockId(3), &mut buf).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
        let data: Vec<u8> = (0..4096).map(|i| i as u8).collect();
        s.write_block_raw(BlockId(3), &data).unwrap();
        s.read_block_raw(BlockId(3), &mut buf).unwrap();
        assert_eq!(buf, data);
        assert!(matches!(s.read_block_raw(BlockId(16), &mut buf), Err(Error::BlockRange { .. })));
    }

    #[test]
    fn record_round_trips() {
        let mut s = UntrustedStore::in_memory(4096, 4096, 4).unwrap();
        let none = NodeRecord { flags: flags::VALID, digest: Digest([4; 32]), ..Default::default() };
        s.write_node(NodeId(0), &none).unwrap();
        assert_eq!(s.read_node(NodeId(0)).unwrap(), none);
        let leaf = NodeRecord {
            parent: 0,
            hotness: -3,
            iv: [9; 12],
            flags: flags::VALID | flags::LEAF | flags::WRITTEN,
            ..none
        };
        s.write_node(NodeId(2), &leaf).unwrap();
        assert_eq!(s.read_node(NodeId(2)).unwrap(), leaf);
        assert!(s.read_node(NodeId(4)).is_err());
    }

    #[test]
    fn record_stride_is_80_bytes_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        let mut s = UntrustedStore::create_files(l.clone(), false).unwrap();
        let rec = NodeRecord { parent: 0x0102, flags: flags::VALID, digest: Digest([0xee; 32]), ..Default::default() };
        s.write_node(NodeId(5), &rec).unwrap();
        drop(s);
        let bytes = std::fs::read(l.meta_path.as_ref().unwrap()).unwrap();
        assert_eq!(bytes.len(), 31 * 80);
        let at = 5 * 80;
        assert_eq!(&bytes[at..at + 8], &0x0102u64.to_le_bytes());
        assert_eq!(&bytes[at + 8..at + 16], &[0xff; 8]);
        assert_eq!(&bytes[at + 32..at + 64], &[0xee; 32]);
        assert_eq!(&bytes[at + 76..at + 80], &1u32.to_le_bytes());
        assert!(bytes[..at].iter().all(|&b| b == 0));
        assert!(bytes[at + 80..].iter().all(|&b| b == 0));
    }

    #[test]
    fn persistence_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout(dir.path());
        let data = vec![0x5a; 4096];
        let rec = NodeRecord { left: 7, right: 8, flags: flags::VALID, ..Default::default() };
        {
            let mut s = UntrustedStore::create_files(l.clone(), false).unwrap();
            s.write_block_raw(BlockId(15), &data).unwrap();
            s.write_node(NodeId(30), &rec).unwrap();
            s.sync().unwrap();
        }
        assert!(UntrustedStore::create_files(l.clone(), false).is_err());
        let mut s = UntrustedStore::open_files(l).unwrap();
        let mut buf = vec![0; 4096];
        s.read_block_raw(BlockId(15), &mut buf).unwrap();
        assert_eq!(buf, data);
        assert_eq!(s.read_node(NodeId(30)).unwrap(), rec);
    }

    #[test]
    fn tamper_and_restore() {
        let mut s = UntrustedStore::in_memory(2 * 4096, 4096, 3).unwrap();
        let data = vec![0x11; 4096];
        s.write_block_raw(BlockId(1), &data).unwrap();
        let snap = s.snapshot(&[s.block_range(BlockId(1))]).unwrap();
        s.tamper(RegionKind::Data, 4096 + 10, Mutation::FlipBit { bit: 3 }).unwrap();
        let mut buf = vec![0; 4096];
        s.read_block_raw(BlockId(1), &mut buf).unwrap();
        assert_eq!(buf[10], 0x11 ^ 8);
        s.tamper(RegionKind::Data, 0, Mutation::RestoreSnapshot(snap)).unwrap();
        s.read_block_raw(BlockId(1), &mut buf).unwrap();
        assert_eq!(buf, data);
        s.enable_tamper(false);
        assert!(matches!(s.tamper(RegionKind::Meta, 0, Mutation::Overwrite(vec![1])), Err(Error::TamperDisabled)));
    }

    #[test]
    fn device_latency_is_added() {
        let mut s = UntrustedStore::in_memory(4096, 4096, 1).unwrap();
        s.set_device_latency(Some(Duration::from_micros(60)));
        let mut buf = vec![0; 4096];
        let t = Instant::now();
        for _ in 0..20 {
            s.read_block_raw(BlockId(0), &mut buf).unwrap();
        }
        assert!(t.elapsed() >= Duration::from_micros(20 * 60));
    }
}
