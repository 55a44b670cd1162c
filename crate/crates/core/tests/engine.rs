// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use dmt_core::crypto::KeyMaterial;
use dmt_core::engine::required_records;
use dmt_core::model::{BlockId, FrequencyProfile, RootAnchor};
use dmt_core::store::{Mutation, RegionKind, StoreLayout, UntrustedStore};
use dmt_core::topology::dmt::SplayPolicy;
use dmt_core::topology::{Topology, TreeKind};
use dmt_core::{Engine, EngineConfig, Error, IntegrityKind, OpKind, TreeShape, WorkloadOp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BS: usize = 4096;

fn keys() -> KeyMaterial {
    KeyMaterial::generate(&mut ChaCha8Rng::seed_from_u64(42))
}

fn engine(tree: TreeKind, n: u64, cache_ratio: f64, p: f64, seed: u64) -> Engine {
    let profile = FrequencyProfile::new((0..n).map(|i| 1 + (i * 7919) % 13).collect()).unwrap();
    let shape = TreeShape::build(tree, n, Some(&profile)).unwrap();
    let mut store = UntrustedStore::in_memory(n * BS as u64, BS, required_records(tree, n).unwrap()).unwrap();
    store.enable_tamper(true);
    let config = EngineConfig {
        cache_ratio,
        splay: SplayPolicy { window: true, probability: p, seed },
        iv_seed: seed,
        ..EngineConfig::new(tree)
    };
    Engine::create(store, &keys(), config, shape, None).unwrap()
}

fn pattern(block: u64, version: u64) -> Vec<u8> {
    let mut v = vec![0u8; BS];
    for (i, b) in v.iter_mut().enumerate() {
        *b = (block as usize * 31 + version as usize * 7 + i) as u8;
    }
    v
}

fn all_trees() -> [TreeKind; 5] {
    [
        TreeKind::Balanced { k: 2 },
        TreeKind::Balanced { k: 4 },
        TreeKind::Balanced { k: 64 },
        TreeKind::Huffman,
        TreeKind::Dmt,
    ]
}

#[test]
fn reads_return_last_write_and_root_stays_consistent() {
    for tree in all_trees() {
        for n in [1u64, 2, 3, 37, 200] {
            let mut e = engine(tree, n, 0.1, 0.5, n);
            let mut shadow: HashMap<u64, u64> = HashMap::new();
            let mut rng = ChaCha8Rng::seed_from_u64(n);
            for step in 0..600u64 {
                let b = rng.random_range(0..n);
                if rng.random_bool(0.5) {
                    e.write_block(BlockId(b), &pattern(b, step)).unwrap();
                    shadow.insert(b, step);
                } else {
                    let got = e.read_block(BlockId(b)).unwrap();
                    match shadow.get(&b) {
                        Some(&v) => assert_eq!(got, pattern(b, v), "{tree} n={n} block {b}"),
                        None => assert!(got.iter().all(|&x| x == 0)),
                    }
                }
                if step % 97 == 0 {
                    e.drop_cache().unwrap();
                }
            }
            e.flush().unwrap();
            assert_eq!(e.recompute_root_full().unwrap(), e.anchor().digest, "{tree} n={n}");
        }
    }
}

#[test]
fn cold_write_hashes_exactly_the_height() {
    let mut e = engine(TreeKind::Balanced { k: 2 }, 1024, 0.1, 0.0, 0);
    for b in [0u64, 511, 1023] {
        e.drop_cache().unwrap();
        let before = e.counters();
        e.write_block(BlockId(b), &pattern(b, 1)).unwrap();
        assert_eq!(e.counters().since(&before).node_hashes_computed, 10);
    }
    // Warm writes hash the same amount: every ancestor is recomputed.
    let before = e.counters();
    e.write_block(BlockId(0), &pattern(0, 2)).unwrap();
    assert_eq!(e.counters().since(&before).node_hashes_computed, 10);
}

#[test]
fn flush_writes_the_dirty_path_once() {
    let mut e = engine(TreeKind::Balanced { k: 2 }, 1024, 0.5, 0.0, 0);
    e.drop_cache().unwrap();
    e.write_block(BlockId(5), &pattern(5, 0)).unwrap();
    assert_eq!(e.flush().unwrap(), 11);
    assert_eq!(e.flush().unwrap(), 0);
}

#[test]
fn splays_move_hot_leaves_up() {
    let n = 256;
    let mut e = engine(TreeKind::Dmt, n, 0.5, 1.0, 3);
    let start = e.leaf_depth(BlockId(77));
    for i in 0..50 {
        e.write_block(BlockId(77), &pattern(77, i)).unwrap();
    }
    assert!(e.leaf_depth(BlockId(77)) < start);
    assert!(e.counters().splays_performed > 0);
    if let TreeShape::Pointer(t) = e.topology() {
        t.validate().unwrap();
    }
    e.flush().unwrap();
    assert_eq!(e.recompute_root_full().unwrap(), e.anchor().digest);
}

#[test]
fn cached_leaf_reads_skip_hashing() {
    let mut e = engine(TreeKind::Balanced { k: 2 }, 64, 1.0, 0.0, 0);
    e.write_block(BlockId(3), &pattern(3, 0)).unwrap();
    let before = e.counters();
    e.read_block(BlockId(3)).unwrap();
    assert_eq!(e.counters().since(&before).node_hashes_computed, 0);
    e.drop_cache().unwrap();
    let before = e.counters();
    e.read_block(BlockId(3)).unwrap();
    assert_eq!(e.counters().since(&before).node_hashes_computed, 6);
}

#[test]
fn partial_and_multi_block_io() {
    let mut e = engine(TreeKind::Dmt, 64, 0.2, 0.3, 9);
    let mut data: Vec<u8> = (0..3 * BS + 1000).map(|i| (i % 251) as u8).collect();
    let op = WorkloadOp { t_ns: 0, kind: OpKind::Write, offset: 512, length: data.len() as u64 };
    let out = e.io(&op, &mut data.clone()).unwrap();
    assert_eq!(out.blocks, 4);
    let mut back = vec![0u8; data.len()];
    e.io(&WorkloadOp { kind: OpKind::Read, ..op }, &mut back).unwrap();
    assert_eq!(back, data);
    let mut head = vec![0u8; 512];
    e.io(&WorkloadOp { t_ns: 0, kind: OpKind::Read, offset: 0, length: 512 }, &mut head).unwrap();
    assert!(head.iter().all(|&b| b == 0));
    data.truncate(10);
    assert!(matches!(e.io(&op, &mut data), Err(Error::Size { .. })));
    let far = WorkloadOp { t_ns: 0, kind: OpKind::Read, offset: 64 * BS as u64, length: 512 };
    assert!(matches!(e.io(&far, &mut vec![0; 512]), Err(Error::IoRange { .. })));
}

#[test]
fn multi_block_failure_lists_every_bad_block() {
    let mut e = engine(TreeKind::Balanced { k: 2 }, 32, 0.1, 0.0, 0);
    for b in 0..4 {
        e.write_block(BlockId(b), &pattern(b, 0)).unwrap();
    }
    e.drop_cache().unwrap();
    for b in [1u64, 3] {
        e.store_mut().tamper(RegionKind::Data, b * BS as u64 + 9, Mutation::FlipBit { bit: 2 }).unwrap();
    }
    let op = WorkloadOp { t_ns: 0, kind: OpKind::Read, offset: 0, length: 4 * BS as u64 };
    match e.io(&op, &mut vec![0; 4 * BS]) {
        Err(Error::IoIntegrity(f)) => {
            let blocks: Vec<_> = f.iter().map(|x| x.block.unwrap().0).collect();
            assert_eq!(blocks, vec![1, 3]);
            assert!(f.iter().all(|x| x.kind == IntegrityKind::BlockMac));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn data_and_record_tampering_is_detected() {
    for tree in [TreeKind::Balanced { k: 2 }, TreeKind::Balanced { k: 8 }, TreeKind::Dmt, TreeKind::Huffman] {
        let n = 128;
        let mut e = engine(tree, n, 0.1, 0.5, 5);
        for b in (0..n).step_by(3) {
            e.write_block(BlockId(b), &pattern(b, 0)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..60 {
            e.drop_cache().unwrap();
            let b = rng.random_range(0..n);
            let (region, off) = if trial % 2 == 0 {
                (RegionKind::Data, b * BS as u64 + rng.random_range(0..BS as u64))
            } else {
                let path = e.auth_path(BlockId(b));
                let node = path[rng.random_range(0..path.len())];
                // Skip the advisory hotness field at bytes 24..32.
                let mut byte = rng.random_range(0..72u64);
                if byte >= 24 {
                    byte += 8;
                }
                (RegionKind::Meta, node.0 * 80 + byte)
            };
            let bit = rng.random_range(0..8);
            e.store_mut().tamper(region, off, Mutation::FlipBit { bit }).unwrap();
            let err = e.read_block(BlockId(b)).unwrap_err();
            assert!(err.is_integrity(), "{tree} trial {trial}: {err}");
            e.store_mut().tamper(region, off, Mutation::FlipBit { bit }).unwrap();
            e.read_block(BlockId(b)).unwrap();
        }
    }
}

#[test]
fn stale_path_replay_is_detected() {
    for tree in [TreeKind::Balanced { k: 2 }, TreeKind::Balanced { k: 4 }, TreeKind::Dmt] {
        let n = 64;
        let mut e = engine(tree, n, 0.1, 0.5, 1);
        let b = BlockId(17);
        e.write_block(b, &pattern(17, 0)).unwrap();
        e.drop_cache().unwrap();
        let mut ranges = vec![e.store().block_range(b)];
        ranges.extend(e.auth_path(b).iter().map(|&v| e.store().record_range(v)));
        let snap = e.store().snapshot(&ranges).unwrap();
        e.write_block(b, &pattern(17, 1)).unwrap();
        e.drop_cache().unwrap();
        e.store_mut().tamper(RegionKind::Data, 0, Mutation::RestoreSnapshot(snap)).unwrap();
        let err = e.read_block(b).unwrap_err();
        assert!(err.is_integrity(), "{tree}: {err}");
    }
}

#[test]
fn swapped_blocks_fail_authentication() {
    let mut e = engine(TreeKind::Balanced { k: 2 }, 16, 0.5, 0.0, 0);
    e.write_block(BlockId(1), &pattern(1, 0)).unwrap();
    e.write_block(BlockId(2), &pattern(2, 0)).unwrap();
    e.drop_cache().unwrap();
    let mut two = vec![0u8; BS];
    e.store_mut().read_block_raw(BlockId(2), &mut two).unwrap();
    e.store_mut().tamper(RegionKind::Data, BS as u64, Mutation::Overwrite(two)).unwrap();
    let err = e.read_block(BlockId(1)).unwrap_err();
    assert_eq!(err.integrity_failure().unwrap().kind, IntegrityKind::BlockMac);
}

#[test]
fn reopen_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let n = 100u64;
    for tree in [TreeKind::Balanced { k: 4 }, TreeKind::Dmt] {
        let layout = StoreLayout {
            capacity_bytes: n * BS as u64,
            block_size: BS,
            max_nodes: required_records(tree, n).unwrap(),
            data_path: Some(dir.path().join(format!("{tree}.data").replace(':', "_"))),
            meta_path: Some(dir.path().join(format!("{tree}.meta").replace(':', "_"))),
        };
        let anchor_path = dir.path().join("anchor");
        let store = UntrustedStore::create_files(layout.clone(), true).unwrap();
        let config =
            EngineConfig { splay: SplayPolicy { window: true, probability: 1.0, seed: 0 }, ..EngineConfig::new(tree) };
        let shape = TreeShape::build(tree, n, None).unwrap();
        let mut e = Engine::create(store, &keys(), config, shape, Some(anchor_path.clone())).unwrap();
        for b in 0..n {
            e.write_block(BlockId(b), &pattern(b, 3)).unwrap();
        }
        for _ in 0..20 {
            e.read_block(BlockId(5)).unwrap();
        }
        let anchor = e.close().unwrap();
        assert_eq!(RootAnchor::load(&anchor_path).unwrap(), anchor);

        let store = UntrustedStore::open_files(layout.clone()).unwrap();
        let mut e = Engine::open(store, &keys(), config, anchor, None).unwrap();
        for b in 0..n {
            assert_eq!(e.read_block(BlockId(b)).unwrap(), pattern(b, 3));
        }

        // A stale anchor is refused on open.
        let store = UntrustedStore::open_files(layout).unwrap();
        let stale = RootAnchor { generation: anchor.generation - 1, ..RootAnchor::new(dmt_core::Digest([1; 32])) };
        assert!(Engine::open(store, &keys(), config, stale, None).unwrap_err().is_integrity());
    }
}

#[test]
fn tampered_internal_record_breaks_recompute() {
    let mut e = engine(TreeKind::Balanced { k: 2 }, 64, 0.1, 0.0, 0);
    e.write_block(BlockId(0), &pattern(0, 0)).unwrap();
    e.flush().unwrap();
    let root = e.topology().root();
    let target = e.topology().parent(e.topology().leaf_of(BlockId(40))).unwrap();
    assert_ne!(target, root);
    e.store_mut().tamper(RegionKind::Meta, target.0 * 80 + 40, Mutation::FlipBit { bit: 0 }).unwrap();
    match e.recompute_root_full() {
        Err(Error::Inconsistent { node }) => assert_eq!(node, target),
        Ok(d) => assert_ne!(d, e.anchor().digest),
        Err(other) => panic!("{other}"),
    }
}

#[test]
fn identical_seeds_identical_anchor() {
    let run = || {
        let mut e = engine(TreeKind::Dmt, 128, 0.1, 0.5, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..500 {
            let b = rng.random_range(0..128);
            if rng.random_bool(0.5) {
                e.write_block(BlockId(b), &pattern(b, i)).unwrap();
            } else {
                e.read_block(BlockId(b)).unwrap();
            }
        }
        (e.counters(), e.anchor())
    };
    assert_eq!(run(), run());
}
