// SPDX-License-Identifier: Apache-2.0

//! The authenticator: verified block reads, authenticated block writes, and
//! the self-adjusting tree's splay commits, all against one root anchor.
//!
//! Trusted state is the root anchor, the secure cache, the keys and the tree
//! topology. Everything fetched from the [`UntrustedStore`] is checked before
//! it is believed. A cached entry is the truth for its node; an uncached
//! node's truth is its on-disk record.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::cache::{CacheConfig, CacheEntry, LeafMeta, SecureCache, Victim};
use crate::crypto::{leaf_digest_from_mac, mac_from_leaf_digest, CryptoProvider, KeyMaterial, NodeHashKind, IV_LEN};
use crate::error::{Error, IntegrityFailure, IntegrityKind, Result};
use crate::model::{blocks_for_io, BlockId, Digest, FrequencyProfile, NodeId, RootAnchor, TreeArity};
use crate::par;
use crate::store::{flags, NodeRecord, UntrustedStore};
use crate::topology::{
    build_huffman, splay_decision, splay_step, BalancedTopology, PointerTree, SplayDecision, SplayPolicy, Topology,
    TreeKind,
};
use crate::workload::{OpKind, WorkloadOp};

/// Concrete shape held by the engine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeShape {
    Balanced(BalancedTopology),
    Pointer(PointerTree),
}

impl TreeShape {
    /// Initial shape for a strategy. Huffman needs a profile.
    pub fn build(kind: TreeKind, n_blocks: u64, profile: Option<&FrequencyProfile>) -> Result<Self> {
        match kind {
            TreeKind::Balanced { k } => Ok(TreeShape::Balanced(BalancedTopology::new(n_blocks, TreeArity::new(k)?)?)),
            TreeKind::Dmt => Ok(TreeShape::Pointer(PointerTree::complete(n_blocks)?)),
            TreeKind::Huffman => {
                let p = profile.ok_or_else(|| Error::usage("huffman tree needs a frequency profile"))?;
                if p.len() as u64 != n_blocks {
                    return Err(Error::usage(format!("profile covers {} blocks, device has {n_blocks}", p.len())));
                }
                Ok(TreeShape::Pointer(build_huffman(p)?.tree))
            }
        }
    }

    fn as_topology(&self) -> &dyn Topology {
        match self {
            TreeShape::Balanced(t) => t,
            TreeShape::Pointer(t) => t,
        }
    }

    /// Internal nodes grouped so that every node's children lie in earlier
    /// groups. Void nodes are left out.
    fn internal_levels(&self) -> Vec<Vec<NodeId>> {
        match self {
            TreeShape::Balanced(t) => (0..t.height()).rev().map(|l| t.real_range(l).map(NodeId).collect()).collect(),
            TreeShape::Pointer(t) => {
                let total = t.node_count() as usize;
                let mut order = Vec::with_capacity(total);
                let mut stack = vec![t.root()];
                while let Some(v) = stack.pop() {
                    order.push(v);
                    if let (Some(l), Some(r)) = (t.left(v), t.right(v)) {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                let mut height = vec![0u32; total];
                let mut levels: Vec<Vec<NodeId>> = Vec::new();
                for &v in order.iter().rev() {
                    if let (Some(l), Some(r)) = (t.left(v), t.right(v)) {
                        let h = 1 + height[l.index()].max(height[r.index()]);
                        height[v.index()] = h;
                        if levels.len() < h as usize {
                            levels.resize_with(h as usize, Vec::new);
                        }
                        levels[h as usize - 1].push(v);
                    }
                }
                for l in &mut levels {
                    l.sort_unstable();
                }
                levels
            }
        }
    }
}

impl Topology for TreeShape {
    fn n_blocks(&self) -> u64 {
        self.as_topology().n_blocks()
    }
    fn id_space(&self) -> u64 {
        self.as_topology().id_space()
    }
    fn real_node_count(&self) -> u64 {
        self.as_topology().real_node_count()
    }
    fn root(&self) -> NodeId {
        self.as_topology().root()
    }
    fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.as_topology().parent(node)
    }
    fn children_into(&self, node: NodeId, out: &mut Vec<NodeId>) {
        self.as_topology().children_into(node, out)
    }
    fn leaf_of(&self, block: BlockId) -> NodeId {
        self.as_topology().leaf_of(block)
    }
    fn block_of(&self, node: NodeId) -> Option<BlockId> {
        self.as_topology().block_of(node)
    }
    fn is_leaf(&self, node: NodeId) -> bool {
        self.as_topology().is_leaf(node)
    }
    fn is_void(&self, node: NodeId) -> bool {
        self.as_topology().is_void(node)
    }
    fn stores_pointers(&self) -> bool {
        self.as_topology().stores_pointers()
    }
    fn links(&self, node: NodeId) -> (u64, u64, u64) {
        self.as_topology().links(node)
    }
    fn depth(&self, node: NodeId) -> u32 {
        self.as_topology().depth(node)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tree: TreeKind,
    pub cache_ratio: f64,
    pub hash: NodeHashKind,
    /// Used only by the self-adjusting tree.
    pub splay: SplayPolicy,
    /// Seeds the IV generator together with the current anchor.
    pub iv_seed: u64,
}

impl EngineConfig {
    pub fn new(tree: TreeKind) -> Self {
        EngineConfig {
            tree,
            cache_ratio: 0.1,
            hash: NodeHashKind::KeyedSha256,
            splay: SplayPolicy::default(),
            iv_seed: 0,
        }
    }
}

/// Work counters. Monotone over the engine's lifetime; use [`OpCounters::since`]
/// for an interval.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub node_hashes_computed: u64,
    pub bytes_hashed: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub meta_reads: u64,
    pub meta_writes: u64,
    pub data_reads: u64,
    pub data_writes: u64,
    pub splays_performed: u64,
    pub rotations_performed: u64,
    pub block_seals: u64,
    pub block_opens: u64,
    pub block_reads: u64,
    pub block_writes: u64,
    pub anchor_commits: u64,
}

impl OpCounters {
    pub fn since(&self, earlier: &OpCounters) -> OpCounters {
        OpCounters {
            node_hashes_computed: self.node_hashes_computed - earlier.node_hashes_computed,
            bytes_hashed: self.bytes_hashed - earlier.bytes_hashed,
            cache_hits: self.cache_hits - earlier.cache_hits,
            cache_misses: self.cache_misses - earlier.cache_misses,
            meta_reads: self.meta_reads - earlier.meta_reads,
            meta_writes: self.meta_writes - earlier.meta_writes,
            data_reads: self.data_reads - earlier.data_reads,
            data_writes: self.data_writes - earlier.data_writes,
            splays_performed: self.splays_performed - earlier.splays_performed,
            rotations_performed: self.rotations_performed - earlier.rotations_performed,
            block_seals: self.block_seals - earlier.block_seals,
            block_opens: self.block_opens - earlier.block_opens,
            block_reads: self.block_reads - earlier.block_reads,
            block_writes: self.block_writes - earlier.block_writes,
            anchor_commits: self.anchor_commits - earlier.anchor_commits,
        }
    }

    pub fn cache_hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Work {
    node_hashes: u64,
    bytes_hashed: u64,
    splays: u64,
    rotations: u64,
    seals: u64,
    opens: u64,
    block_reads: u64,
    block_writes: u64,
    commits: u64,
}

/// Result of one [`Engine::io`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IoOutcome {
    pub blocks: usize,
    pub node_hashes: u64,
    pub splays: u64,
}

/// A node value obtained during one operation, with its leaf payload.
#[derive(Clone, Copy, Debug)]
struct Known {
    digest: Digest,
    leaf: Option<LeafMeta>,
    /// Came from the untrusted store rather than the cache.
    fetched: bool,
}

/// Everything except the topology, so a splay can mutate the tree while
/// using the rest of the engine.
struct Core {
    store: UntrustedStore,
    cache: SecureCache,
    crypto: CryptoProvider,
    anchor: RootAnchor,
    iv_seed: u64,
    iv_rng: ChaCha8Rng,
    work: Work,
    kids: Vec<NodeId>,
    digests: Vec<Digest>,
}

fn failure(
    kind: IntegrityKind,
    block: Option<BlockId>,
    node: NodeId,
    level: u32,
    expected: Digest,
    computed: Digest,
) -> Error {
    Error::integrity(IntegrityFailure { kind, block, node, level, expected, computed })
}

/// IV stream keyed by the seed and the anchor it starts from, so reopening a
/// device never replays IVs already used under the same key.
fn iv_rng(seed: u64, anchor: &RootAnchor) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"iv-stream");
    h.update(seed.to_le_bytes());
    h.update(anchor.digest.0);
    h.update(anchor.generation.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn record_for(shape: &dyn Topology, node: NodeId, digest: Digest, hotness: i64, leaf: Option<LeafMeta>) -> NodeRecord {
    let (parent, left, right) = shape.links(node);
    let mut f = flags::VALID;
    let mut iv = [0u8; IV_LEN];
    if let Some(m) = leaf {
        f |= flags::LEAF;
        iv = m.iv;
        if m.written {
            f |= flags::WRITTEN;
        }
    }
    NodeRecord { parent, left, right, hotness, digest, iv, flags: f }
}

fn void_record() -> NodeRecord {
    NodeRecord { parent: 0, left: 0, right: 0, hotness: 0, digest: Digest::ZERO, iv: [0; IV_LEN], flags: 0 }
}

/// Digest of every node, computed level by level from the leaves. With
/// `stored`, leaf digests come from the records and every internal record must
/// agree with its recomputed value.
fn compute_digests(
    shape: &TreeShape,
    crypto: &CryptoProvider,
    stored: Option<&[NodeRecord]>,
) -> Result<(Vec<Digest>, u64)> {
    let mut digests = vec![Digest::ZERO; shape.id_space() as usize];
    if let Some(recs) = stored {
        for b in 0..shape.n_blocks() {
            let leaf = shape.leaf_of(BlockId(b)).index();
            digests[leaf] = recs[leaf].digest;
        }
    }
    let mut hashes = 0u64;
    for level in shape.internal_levels() {
        let computed = {
            let digests = &digests;
            par::try_map_range(level.len(), |i| {
                let v = level[i];
                let kids: Vec<Digest> = shape
                    .children(v)
                    .iter()
                    .map(|&c| if shape.is_void(c) { Digest::ZERO } else { digests[c.index()] })
                    .collect();
                let d = crypto.node_digest(&kids)?;
                match stored {
                    Some(recs) if recs[v.index()].digest != d => Err(Error::Inconsistent { node: v }),
                    _ => Ok(d),
                }
            })?
        };
        hashes += level.len() as u64;
        for (v, d) in level.iter().zip(computed) {
            digests[v.index()] = d;
        }
    }
    Ok((digests, hashes))
}

const RECORD_CHUNK: usize = 1 << 16;

fn read_all_records(store: &mut UntrustedStore, count: u64) -> Result<Vec<NodeRecord>> {
    let mut out = Vec::with_capacity(count as usize);
    let mut first = 0u64;
    while first < count {
        let n = RECORD_CHUNK.min((count - first) as usize);
        out.extend(store.read_nodes(NodeId(first), n)?);
        first += n as u64;
    }
    Ok(out)
}

impl Core {
    fn hash(&mut self, children: &[Digest]) -> Result<Digest> {
        self.work.node_hashes += 1;
        self.work.bytes_hashed += (children.len() * 32) as u64;
        self.crypto.node_digest(children)
    }

    fn write_back(&mut self, shape: &dyn Topology, victim: Option<Victim>) -> Result<()> {
        if let Some((node, e)) = victim {
            let rec = record_for(shape, node, e.digest, e.hotness, e.leaf);
            self.store.write_node(node, &rec)?;
        }
        Ok(())
    }

    /// Reads a record and checks everything trusted state can vouch for
    /// without hashing: flags, role, links, and leaf payload encoding.
    fn fetch(&mut self, shape: &dyn Topology, node: NodeId, block: Option<BlockId>, level: u32) -> Result<Known> {
        let rec = self.store.read_node(node)?;
        let leaf = shape.is_leaf(node);
        let bad = || failure(IntegrityKind::Record, block, node, level, Digest::ZERO, rec.digest);
        if rec.flags & !flags::ALL != 0 || rec.flags & flags::VALID == 0 || rec.is_leaf() != leaf {
            return Err(bad());
        }
        if (rec.parent, rec.left, rec.right) != shape.links(node) {
            return Err(bad());
        }
        let meta = if leaf {
            let written = rec.is_written();
            let ok = if written {
                mac_from_leaf_digest(&rec.digest).is_some()
            } else {
                rec.digest == Digest::ZERO && rec.iv == [0; IV_LEN]
            };
            if !ok {
                return Err(bad());
            }
            Some(LeafMeta { iv: rec.iv, written })
        } else {
            if rec.is_written() || rec.iv != [0; IV_LEN] {
                return Err(bad());
            }
            None
        };
        Ok(Known { digest: rec.digest, leaf: meta, fetched: true })
    }

    /// Trusted value from the cache, else an unverified one from the store.
    fn lookup(&mut self, shape: &dyn Topology, node: NodeId, block: Option<BlockId>, level: u32) -> Result<Known> {
        if shape.is_void(node) {
            return Ok(Known { digest: Digest::ZERO, leaf: None, fetched: false });
        }
        if let Some(e) = self.cache.get(node) {
            return Ok(Known { digest: e.digest, leaf: e.leaf, fetched: false });
        }
        self.fetch(shape, node, block, level)
    }

    /// Digest of `parent` with `given` substituted for one child and the
    /// others looked up. Values fetched from the store are appended to `fetched`.
    fn hash_children(
        &mut self,
        shape: &dyn Topology,
        parent: NodeId,
        given: (NodeId, Digest),
        block: Option<BlockId>,
        level: u32,
        fetched: &mut Vec<(NodeId, Known)>,
    ) -> Result<Digest> {
        let mut kids = std::mem::take(&mut self.kids);
        let mut digests = std::mem::take(&mut self.digests);
        shape.children_into(parent, &mut kids);
        digests.clear();
        let mut result = Ok(());
        for &c in &kids {
            if c == given.0 {
                digests.push(given.1);
                continue;
            }
            match self.lookup(shape, c, block, level) {
                Ok(k) => {
                    if k.fetched {
                        fetched.push((c, k));
                    }
                    digests.push(k.digest);
                }
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let out = result.and_then(|_| self.hash(&digests));
        self.kids = kids;
        self.digests = digests;
        out
    }

    fn insert_clean(&mut self, shape: &dyn Topology, nodes: &[(NodeId, Known)]) -> Result<()> {
        for &(node, k) in nodes {
            let v = self.cache.insert_authenticated(node, k.digest, k.leaf);
            self.write_back(shape, v)?;
        }
        Ok(())
    }

    fn put_dirty(&mut self, shape: &dyn Topology, node: NodeId, digest: Digest, leaf: Option<LeafMeta>) -> Result<()> {
        let v = self.cache.put_dirty(node, digest, leaf);
        self.write_back(shape, v)
    }

    fn commit(&mut self, root: Digest) {
        self.anchor.commit(root);
        self.work.commits += 1;
    }

    /// Verifies one block into `out`. The leaf's MAC is checked first; then,
    /// unless the leaf itself was cached, digests are recomputed upward until
    /// a cached ancestor or the anchor confirms them.
    fn read_block(&mut self, shape: &dyn Topology, block: BlockId, out: &mut [u8]) -> Result<()> {
        let leaf = shape.leaf_of(block);
        let (known, cached) = match self.cache.get(leaf) {
            Some(e) => (Known { digest: e.digest, leaf: e.leaf, fetched: false }, true),
            None => (self.fetch(shape, leaf, Some(block), 0)?, false),
        };
        let meta = known.leaf.expect("leaf entries carry leaf metadata");
        self.store.read_block_raw(block, out)?;
        self.work.block_reads += 1;
        if meta.written {
            let mac = mac_from_leaf_digest(&known.digest)
                .ok_or_else(|| failure(IntegrityKind::Record, Some(block), leaf, 0, Digest::ZERO, known.digest))?;
            self.work.opens += 1;
            self.crypto
                .open_in_place(block, out, &meta.iv, &mac)
                .map_err(|_| failure(IntegrityKind::BlockMac, Some(block), leaf, 0, known.digest, Digest::ZERO))?;
        } else if out.iter().any(|&b| b != 0) {
            return Err(failure(IntegrityKind::UnwrittenBlock, Some(block), leaf, 0, Digest::ZERO, Digest::ZERO));
        }
        if cached {
            return Ok(());
        }

        let mut fetched = vec![(leaf, known)];
        let mut cur = leaf;
        let mut cur_digest = known.digest;
        let mut level = 0;
        while let Some(p) = shape.parent(cur) {
            level += 1;
            let computed = self.hash_children(shape, p, (cur, cur_digest), Some(block), level, &mut fetched)?;
            if let Some(e) = self.cache.get(p) {
                if e.digest != computed {
                    return Err(failure(IntegrityKind::CachedAncestor, Some(block), p, level, e.digest, computed));
                }
                return self.insert_clean(shape, &fetched);
            }
            let rec = self.fetch(shape, p, Some(block), level)?;
            if rec.digest != computed {
                return Err(failure(IntegrityKind::NodeDigest, Some(block), p, level, rec.digest, computed));
            }
            fetched.push((p, rec));
            cur = p;
            cur_digest = computed;
        }
        if cur_digest != self.anchor.digest {
            return Err(failure(IntegrityKind::RootAnchor, Some(block), cur, level, self.anchor.digest, cur_digest));
        }
        self.insert_clean(shape, &fetched)
    }

    /// Seals and writes one block, then rehashes every ancestor to the root.
    ///
    /// Sibling values are taken from the cache or the store as they are, so an
    /// update costs exactly one hash per level.
    fn write_block(&mut self, shape: &dyn Topology, block: BlockId, plaintext: &[u8]) -> Result<()> {
        let leaf = shape.leaf_of(block);
        let mut iv = [0u8; IV_LEN];
        self.iv_rng.fill_bytes(&mut iv);
        let mut buf = plaintext.to_vec();
        let mac = self.crypto.seal_in_place(block, &mut buf, iv)?;
        self.work.seals += 1;
        let leaf_digest = leaf_digest_from_mac(&mac);

        let mut siblings = Vec::new();
        let mut path = Vec::new();
        let mut cur = leaf;
        let mut cur_digest = leaf_digest;
        let mut level = 0;
        while let Some(p) = shape.parent(cur) {
            level += 1;
            cur_digest = self.hash_children(shape, p, (cur, cur_digest), Some(block), level, &mut siblings)?;
            path.push((p, cur_digest));
            cur = p;
        }
        // Nothing touches the device before every fetch above has succeeded.
        self.store.write_block_raw(block, &buf)?;
        self.work.block_writes += 1;
        self.commit(cur_digest);
        self.put_dirty(shape, leaf, leaf_digest, Some(LeafMeta { iv, written: true }))?;
        for (p, d) in path {
            self.put_dirty(shape, p, d, None)?;
        }
        self.insert_clean(shape, &siblings)
    }

    /// Trusted digests for every node on `x`'s root path and all their
    /// children, authenticated top-down from the anchor. A node whose children
    /// all come from the cache needs no hash.
    fn authenticate_chain(
        &mut self,
        shape: &dyn Topology,
        x: NodeId,
        block: BlockId,
    ) -> Result<HashMap<NodeId, Known>> {
        let mut chain = vec![x];
        while let Some(p) = shape.parent(*chain.last().unwrap()) {
            chain.push(p);
        }
        chain.reverse();
        let mut ws: HashMap<NodeId, Known> = HashMap::with_capacity(2 * chain.len() + 1);
        let root = chain[0];
        ws.insert(root, Known { digest: self.anchor.digest, leaf: None, fetched: false });
        let mut kids = Vec::new();
        let mut digests = Vec::new();
        for (depth, &v) in chain.iter().enumerate() {
            shape.children_into(v, &mut kids);
            digests.clear();
            let mut any_fetched = false;
            for &c in &kids {
                let k = self.lookup(shape, c, Some(block), depth as u32 + 1)?;
                any_fetched |= k.fetched;
                digests.push(k.digest);
                ws.insert(c, k);
            }
            if any_fetched {
                let computed = self.hash(&digests)?;
                let expected = ws[&v].digest;
                if computed != expected {
                    return Err(failure(IntegrityKind::NodeDigest, Some(block), v, depth as u32, expected, computed));
                }
            }
        }
        Ok(ws)
    }

    /// Splays the parent of `block`'s leaf up by at least `distance` levels or
    /// to the root. Each step authenticates what it will touch, rotates,
    /// rehashes the changed nodes and their ancestors, and commits.
    fn splay(&mut self, tree: &mut PointerTree, block: BlockId, distance: u32) -> Result<u32> {
        let leaf = tree.leaf_of(block);
        let Some(x) = tree.parent(leaf) else { return Ok(0) };
        let mut promoted = 0;
        self.work.splays += 1;
        while promoted < distance && tree.parent(x).is_some() {
            let mut ws = self.authenticate_chain(&*tree, x, block)?;

            // Every depth change happens inside the subtree of the step's top
            // node, which `x` replaces at the same depth.
            let y = tree.parent(x).unwrap();
            let top = tree.parent(y).unwrap_or(y);
            let before = self.cached_depths(tree, top);

            let effect = splay_step(tree, x, leaf);
            self.work.rotations += effect.kind.rotations() as u64;
            promoted += effect.kind.levels();

            let after: HashMap<NodeId, u32> = self.cached_depths(tree, x).into_iter().collect();
            for (v, d0) in before {
                if let Some(&d1) = after.get(&v) {
                    if d0 != d1 {
                        self.cache.adjust_hotness(v, d0 as i64 - d1 as i64);
                    }
                }
            }

            let mut changed = effect.rehash.clone();
            let mut up = tree.parent(x);
            while let Some(v) = up {
                changed.push(v);
                up = tree.parent(v);
            }
            let mut kids = Vec::new();
            let mut digests = Vec::new();
            for &v in &changed {
                tree.children_into(v, &mut kids);
                digests.clear();
                digests.extend(kids.iter().map(|c| ws[c].digest));
                let d = self.hash(&digests)?;
                let k = ws.get_mut(&v).expect("rehashed nodes were authenticated");
                k.digest = d;
            }
            self.commit(ws[&tree.root()].digest);

            let mut dirty: Vec<NodeId> = changed.iter().chain(&effect.reparented).copied().collect();
            dirty.sort_unstable();
            dirty.dedup();
            for &v in &dirty {
                let k = ws.remove(&v).expect("touched nodes were authenticated");
                self.put_dirty(&*tree, v, k.digest, k.leaf)?;
            }
            let mut clean: Vec<(NodeId, Known)> = ws.into_iter().filter(|(_, k)| k.fetched).collect();
            clean.sort_unstable_by_key(|(n, _)| *n);
            self.insert_clean(&*tree, &clean)?;
        }
        Ok(promoted)
    }

    /// Cached nodes under `top` with their depth relative to it. The walk
    /// stops at uncached nodes, whose hotness is not tracked.
    fn cached_depths(&self, tree: &PointerTree, top: NodeId) -> Vec<(NodeId, u32)> {
        let mut out = Vec::new();
        let mut stack = vec![(top, 0u32)];
        let mut kids = Vec::new();
        while let Some((v, d)) = stack.pop() {
            if !self.cache.contains(v) {
                continue;
            }
            out.push((v, d));
            tree.children_into(v, &mut kids);
            stack.extend(kids.iter().map(|&c| (c, d + 1)));
        }
        out
    }

    fn counters(&self) -> OpCounters {
        let c = self.cache.stats();
        let s = self.store.stats();
        OpCounters {
            node_hashes_computed: self.work.node_hashes,
            bytes_hashed: self.work.bytes_hashed,
            cache_hits: c.hits,
            cache_misses: c.misses,
            meta_reads: s.meta_reads,
            meta_writes: s.meta_writes,
            data_reads: s.data_reads,
            data_writes: s.data_writes,
            splays_performed: self.work.splays,
            rotations_performed: self.work.rotations,
            block_seals: self.work.seals,
            block_opens: self.work.opens,
            block_reads: self.work.block_reads,
            block_writes: self.work.block_writes,
            anchor_commits: self.work.commits,
        }
    }
}

/// Authenticated block device over an untrusted store.
///
/// Not internally synchronized; wrap it in a mutex to share it. That single
/// lock is the global tree lock.
pub struct Engine {
    shape: TreeShape,
    config: EngineConfig,
    core: Core,
    splay_rng: ChaCha8Rng,
    anchor_path: Option<PathBuf>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("anchor", &self.core.anchor)
            .field("cache", &self.core.cache)
            .finish()
    }
}

impl Engine {
    /// Lays out a fresh tree over a zeroed store: every leaf unwritten with a
    /// zero digest, every internal digest computed, generation 0.
    pub fn create(
        mut store: UntrustedStore,
        keys: &KeyMaterial,
        config: EngineConfig,
        shape: TreeShape,
        anchor_path: Option<PathBuf>,
    ) -> Result<Self> {
        check_fit(&store, &shape)?;
        let crypto = CryptoProvider::new(keys, config.hash, store.block_size());
        let (digests, hashes) = compute_digests(&shape, &crypto, None)?;
        let total = shape.id_space();
        let mut first = 0u64;
        while first < total {
            let n = RECORD_CHUNK.min((total - first) as usize) as u64;
            let recs: Vec<NodeRecord> = (first..first + n)
                .map(|i| {
                    let node = NodeId(i);
                    if shape.is_void(node) {
                        void_record()
                    } else {
                        let leaf = shape.is_leaf(node).then_some(LeafMeta { iv: [0; IV_LEN], written: false });
                        record_for(&shape, node, digests[node.index()], 0, leaf)
                    }
                })
                .collect();
            store.write_nodes(NodeId(first), &recs)?;
            first += n;
        }
        let anchor = RootAnchor::new(digests[shape.root().index()]);
        if let Some(p) = &anchor_path {
            anchor.store(p)?;
        }
        let mut engine = Self::assemble(store, crypto, config, shape, anchor, anchor_path)?;
        engine.core.work.node_hashes += hashes;
        Ok(engine)
    }

    /// Opens an existing image. The whole tree is recomputed from the store
    /// and must match `anchor`; pointer trees take their shape from the records.
    pub fn open(
        mut store: UntrustedStore,
        keys: &KeyMaterial,
        config: EngineConfig,
        anchor: RootAnchor,
        anchor_path: Option<PathBuf>,
    ) -> Result<Self> {
        let n = store.n_blocks();
        let shape = match config.tree {
            TreeKind::Balanced { k } => TreeShape::Balanced(BalancedTopology::new(n, TreeArity::new(k)?)?),
            TreeKind::Huffman | TreeKind::Dmt => {
                let total = 2 * n - 1;
                if store.max_nodes() < total {
                    return Err(Error::usage("metadata region too small for a pointer tree"));
                }
                let recs = read_all_records(&mut store, total)?;
                let parent = recs.iter().map(|r| r.parent).collect();
                let left = recs.iter().map(|r| r.left).collect();
                let right = recs.iter().map(|r| r.right).collect();
                TreeShape::Pointer(PointerTree::from_links(n, parent, left, right)?)
            }
        };
        check_fit(&store, &shape)?;
        let crypto = CryptoProvider::new(keys, config.hash, store.block_size());
        let recs = read_all_records(&mut store, shape.id_space())?;
        let (digests, _) = compute_digests(&shape, &crypto, Some(&recs))?;
        let root = digests[shape.root().index()];
        if root != anchor.digest {
            return Err(failure(IntegrityKind::RootAnchor, None, shape.root(), 0, anchor.digest, root));
        }
        Self::assemble(store, crypto, config, shape, anchor, anchor_path)
    }

    fn assemble(
        store: UntrustedStore,
        crypto: CryptoProvider,
        config: EngineConfig,
        shape: TreeShape,
        anchor: RootAnchor,
        anchor_path: Option<PathBuf>,
    ) -> Result<Self> {
        let cache = SecureCache::new(CacheConfig::from_ratio(config.cache_ratio, shape.real_node_count())?);
        let splay_rng = ChaCha8Rng::seed_from_u64(config.splay.seed);
        let iv_rng = iv_rng(config.iv_seed, &anchor);
        Ok(Engine {
            shape,
            core: Core {
                store,
                cache,
                crypto,
                anchor,
                iv_seed: config.iv_seed,
                iv_rng,
                work: Work::default(),
                kids: Vec::new(),
                digests: Vec::new(),
            },
            config,
            splay_rng,
            anchor_path,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn tree_kind(&self) -> TreeKind {
        self.config.tree
    }

    pub fn topology(&self) -> &TreeShape {
        &self.shape
    }

    pub fn n_blocks(&self) -> u64 {
        self.shape.n_blocks()
    }

    pub fn block_size(&self) -> usize {
        self.core.store.block_size()
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.n_blocks() * self.block_size() as u64
    }

    pub fn anchor(&self) -> RootAnchor {
        self.core.anchor
    }

    pub fn counters(&self) -> OpCounters {
        self.core.counters()
    }

    pub fn cache(&self) -> &SecureCache {
        &self.core.cache
    }

    pub fn cached_entry(&self, node: NodeId) -> Option<CacheEntry> {
        self.core.cache.peek(node).copied()
    }

    pub fn splay_policy(&self) -> SplayPolicy {
        self.config.splay
    }

    /// Changes window and probability; the random stream continues.
    pub fn set_splay_window(&mut self, window: bool, probability: f64) {
        self.config.splay.window = window;
        self.config.splay.probability = probability;
    }

    /// Direct access to the untrusted device, for latency injection and
    /// adversarial tests.
    pub fn store_mut(&mut self) -> &mut UntrustedStore {
        &mut self.core.store
    }

    pub fn store(&self) -> &UntrustedStore {
        &self.core.store
    }

    fn check_block(&self, block: BlockId) -> Result<()> {
        if block.0 >= self.n_blocks() {
            return Err(Error::BlockRange { block: block.0, n_blocks: self.n_blocks() });
        }
        Ok(())
    }

    /// Verified read of one block into `out`, then the post-access hook.
    pub fn read_block_into(&mut self, block: BlockId, out: &mut [u8]) -> Result<()> {
        self.check_block(block)?;
        if out.len() != self.block_size() {
            return Err(Error::Size { expected: self.block_size(), actual: out.len() });
        }
        self.core.read_block(&self.shape, block, out)?;
        self.post_access(block)
    }

    pub fn read_block(&mut self, block: BlockId) -> Result<Vec<u8>> {
        let mut out = vec![0u8; self.block_size()];
        self.read_block_into(block, &mut out)?;
        Ok(out)
    }

    /// Authenticated write of one block. Returns the new anchor generation.
    pub fn write_block(&mut self, block: BlockId, plaintext: &[u8]) -> Result<u64> {
        self.check_block(block)?;
        if plaintext.len() != self.block_size() {
            return Err(Error::Size { expected: self.block_size(), actual: plaintext.len() });
        }
        self.core.write_block(&self.shape, block, plaintext)?;
        self.post_access(block)?;
        Ok(self.core.anchor.generation)
    }

    fn post_access(&mut self, block: BlockId) -> Result<()> {
        let TreeShape::Pointer(tree) = &mut self.shape else { return Ok(()) };
        if self.config.tree != TreeKind::Dmt {
            return Ok(());
        }
        let hotness = self.core.cache.hotness(tree.leaf_of(block));
        match splay_decision(hotness, &self.config.splay, &mut self.splay_rng) {
            SplayDecision::Skip => Ok(()),
            SplayDecision::Splay { distance } => self.core.splay(tree, block, distance).map(|_| ()),
        }
    }

    /// One byte-range request. Reads fill `buf`; writes take their payload
    /// from it. Partial blocks are read, patched and rewritten. Integrity
    /// failures on any block fail the whole request with every failure listed;
    /// a write is refused before any block is written if a partial block fails.
    pub fn io(&mut self, op: &WorkloadOp, buf: &mut [u8]) -> Result<IoOutcome> {
        if op.length == 0 {
            return Ok(IoOutcome::default());
        }
        if buf.len() as u64 != op.length {
            return Err(Error::Size { expected: op.length as usize, actual: buf.len() });
        }
        let bs = self.block_size() as u64;
        let blocks = blocks_for_io(op.offset, op.length, bs, self.capacity_bytes())?;
        let start = self.counters();
        let mut scratch = vec![0u8; bs as usize];
        let mut failures = Vec::new();
        // Byte range of `buf` covered by block `b`, and the offset within the block.
        let span = |b: BlockId| {
            let block_start = b.0 * bs;
            let lo = op.offset.max(block_start);
            let hi = (op.offset + op.length).min(block_start + bs);
            ((lo - op.offset) as usize..(hi - op.offset) as usize, (lo - block_start) as usize)
        };
        let note = |e: Error, failures: &mut Vec<IntegrityFailure>| -> Result<()> {
            match e {
                Error::Integrity(f) => {
                    failures.push(*f);
                    Ok(())
                }
                other => Err(other),
            }
        };
        match op.kind {
            OpKind::Read => {
                for &b in &blocks {
                    let (range, within) = span(b);
                    let res = if range.len() == bs as usize {
                        self.read_block_into(b, &mut buf[range])
                    } else {
                        self.read_block_into(b, &mut scratch).map(|_| {
                            let len = range.len();
                            buf[range].copy_from_slice(&scratch[within..within + len]);
                        })
                    };
                    if let Err(e) = res {
                        note(e, &mut failures)?;
                    }
                }
            }
            OpKind::Write => {
                let mut partial: Vec<(BlockId, Vec<u8>)> = Vec::new();
                for &b in &blocks {
                    let (range, _) = span(b);
                    if range.len() != bs as usize {
                        match self.read_block(b) {
                            Ok(old) => partial.push((b, old)),
                            Err(e) => note(e, &mut failures)?,
                        }
                    }
                }
                if failures.is_empty() {
                    for &b in &blocks {
                        let (range, within) = span(b);
                        if let Some((_, old)) = partial.iter_mut().find(|(pb, _)| *pb == b) {
                            let len = range.len();
                            old[within..within + len].copy_from_slice(&buf[range]);
                            let data = std::mem::take(old);
                            self.write_block(b, &data)?;
                        } else {
                            self.write_block(b, &buf[range])?;
                        }
                    }
                }
            }
        }
        if !failures.is_empty() {
            return Err(Error::IoIntegrity(failures));
        }
        let end = self.counters();
        Ok(IoOutcome {
            blocks: blocks.len(),
            node_hashes: end.node_hashes_computed - start.node_hashes_computed,
            splays: end.splays_performed - start.splays_performed,
        })
    }

    /// Writes every dirty cached node to the store and persists the anchor.
    /// Returns the number of records written.
    pub fn flush(&mut self) -> Result<usize> {
        let shape = &self.shape;
        let store = &mut self.core.store;
        let n = self.core.cache.flush_dirty(|node, e| {
            let rec = record_for(shape, node, e.digest, e.hotness, e.leaf);
            store.write_node(node, &rec)
        })?;
        if let Some(p) = &self.anchor_path {
            self.core.anchor.store(p)?;
        }
        Ok(n)
    }

    /// Flushes, then empties the cache so the next accesses run cold.
    pub fn drop_cache(&mut self) -> Result<()> {
        self.flush()?;
        self.core.cache.clear();
        Ok(())
    }

    /// Flushes and syncs both regions.
    pub fn close(mut self) -> Result<RootAnchor> {
        self.flush()?;
        self.core.store.sync()?;
        Ok(self.core.anchor)
    }

    /// Root recomputed from every record on the store. Only meaningful after
    /// [`Engine::flush`]; any internal record that disagrees with its children
    /// yields [`Error::Inconsistent`].
    pub fn recompute_root_full(&mut self) -> Result<Digest> {
        let recs = read_all_records(&mut self.core.store, self.shape.id_space())?;
        let (digests, _) = compute_digests(&self.shape, &self.core.crypto, Some(&recs))?;
        Ok(digests[self.shape.root().index()])
    }

    /// Leaf first, root last.
    pub fn auth_path(&self, block: BlockId) -> Vec<NodeId> {
        let mut path = vec![self.shape.leaf_of(block)];
        while let Some(p) = self.shape.parent(*path.last().unwrap()) {
            path.push(p);
        }
        path
    }

    /// Non-void siblings of every node on the authentication path.
    pub fn auth_siblings(&self, block: BlockId) -> Vec<NodeId> {
        let path = self.auth_path(block);
        let mut out = Vec::new();
        for w in path.windows(2) {
            for c in self.shape.children(w[1]) {
                if c != w[0] && !self.shape.is_void(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn leaf_depth(&self, block: BlockId) -> u32 {
        self.shape.depth(self.shape.leaf_of(block))
    }

    /// Reseeds the IV stream from the current anchor, e.g. after restoring a
    /// device image in tests.
    pub fn reseed_ivs(&mut self) {
        self.core.iv_rng = iv_rng(self.core.iv_seed, &self.core.anchor);
    }
}

fn check_fit(store: &UntrustedStore, shape: &TreeShape) -> Result<()> {
    if store.n_blocks() != shape.n_blocks() {
        return Err(Error::usage(format!("store has {} blocks, tree has {}", store.n_blocks(), shape.n_blocks())));
    }
    if store.max_nodes() < shape.id_space() {
        return Err(Error::usage(format!(
            "metadata region holds {} records, tree needs {}",
            store.max_nodes(),
            shape.id_space()
        )));
    }
    Ok(())
}

/// Records the metadata region needs for a strategy.
pub fn required_records(kind: TreeKind, n_blocks: u64) -> Result<u64> {
    Ok(match kind {
        TreeKind::Balanced { k } => BalancedTopology::new(n_blocks, TreeArity::new(k)?)?.id_space(),
        TreeKind::Huffman | TreeKind::Dmt => 2 * n_blocks - 1,
    })
}
