// SPDX-License-Identifier: Apache-2.0

//! Hashing cost calculators: measured hash latency by input size, expected
//! hashing time per I/O for a balanced tree of a given arity, and a
//! miss-rate-aware total work model.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crypto::{CryptoProvider, KeyMaterial, NodeHashKind};
use crate::error::{Error, Result};
use crate::model::{balanced_height, Digest, FrequencyProfile, DIGEST_LEN};

/// Mean hash latency (ns) by input size in bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    entries: BTreeMap<usize, f64>,
}

impl LatencyTable {
    /// Builds a table from raw measurements. Latencies are made
    /// non-decreasing in size by carrying the running maximum forward, which
    /// only smooths timer noise between neighbouring sizes.
    pub fn from_measurements(raw: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (size, ns) in raw {
            if !(ns >= 0.0) || !ns.is_finite() {
                return Err(Error::usage(format!("latency for {size} bytes must be a non-negative number")));
            }
            entries.insert(size, ns);
        }
        let mut floor = 0.0f64;
        for v in entries.values_mut() {
            floor = floor.max(*v);
            *v = floor;
        }
        Ok(LatencyTable { entries })
    }

    pub fn get(&self, size: usize) -> Option<f64> {
        self.entries.get(&size).copied()
    }

    pub fn entries(&self) -> &BTreeMap<usize, f64> {
        &self.entries
    }
}

/// Input size of one internal hash for arity `k`.
pub fn node_input_bytes(k: u32) -> usize {
    k as usize * DIGEST_LEN
}

/// Times the node hash for each size, which must be a multiple of the digest
/// length covering at least two children. Each size gets a warmup pass and
/// then `iterations` timed calls.
pub fn measure_hash_latency_with(sizes: &[usize], iterations: u32, kind: NodeHashKind) -> Result<LatencyTable> {
    if iterations == 0 {
        return Err(Error::usage("iterations must be positive"));
    }
    let keys = KeyMaterial::new([0x11; 16], [0x22; 32])?;
    let crypto = CryptoProvider::new(&keys, kind, 4096);
    let mut raw = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size % DIGEST_LEN != 0 || size < 2 * DIGEST_LEN {
            return Err(Error::usage(format!(
                "hash input size {size} is not a multiple of {DIGEST_LEN} covering two children"
            )));
        }
        let children: Vec<Digest> = (0..size / DIGEST_LEN).map(|i| Digest([i as u8; DIGEST_LEN])).collect();
        for _ in 0..(iterations / 10).max(100) {
            black_box(crypto.node_digest(black_box(&children))?);
        }
        let start = Instant::now();
        for _ in 0..iterations {
            black_box(crypto.node_digest(black_box(&children))?);
        }
        raw.push((size, start.elapsed().as_nanos() as f64 / iterations as f64));
    }
    LatencyTable::from_measurements(raw)
}

/// [`measure_hash_latency_with`] using keyed SHA-256 and 10^4 iterations.
pub fn measure_hash_latency(sizes: &[usize]) -> Result<LatencyTable> {
    measure_hash_latency_with(sizes, 10_000, NodeHashKind::KeyedSha256)
}

/// Expected hashing time (ns) for one I/O: blocks touched × tree height ×
/// latency of one `k`-child hash.
pub fn arity_cost(n_blocks: u64, k: u32, table: &LatencyTable, io_size: u64, block_size: u64) -> Result<f64> {
    if k < 2 || n_blocks == 0 || block_size == 0 {
        return Err(Error::usage("arity must be at least 2 and sizes positive"));
    }
    let bytes = node_input_bytes(k);
    let ns = table.get(bytes).ok_or_else(|| Error::usage(format!("latency table has no entry for {bytes} bytes")))?;
    let blocks = io_size.div_ceil(block_size);
    Ok(blocks as f64 * balanced_height(n_blocks, k as u64) as f64 * ns)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Cost of a hit in the trusted cache (ns).
    pub hit_ns: f64,
    /// Cache miss rate in `[0, 1]`.
    pub miss_rate: f64,
    /// Penalty to fetch and re-authenticate a missed node (ns).
    pub miss_penalty_ns: f64,
}

impl CostParams {
    pub fn new(hit_ns: f64, miss_rate: f64, miss_penalty_ns: f64) -> Result<Self> {
        let p = CostParams { hit_ns, miss_rate, miss_penalty_ns };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.hit_ns) || !ok(self.miss_penalty_ns) || !ok(self.miss_rate) || self.miss_rate > 1.0 {
            return Err(Error::usage("cost parameters must be non-negative with miss rate at most 1"));
        }
        Ok(())
    }
}

/// Average access time per node: `hit + miss_rate × penalty`.
pub fn amat(params: &CostParams) -> f64 {
    params.hit_ns + params.miss_rate * params.miss_penalty_ns
}

/// Expected work split into base hashing and miss-driven I/O, both weighted
/// by access frequency. Base work counts one unit per hash.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TotalWork {
    pub base: f64,
    pub io: f64,
}

impl TotalWork {
    pub fn total(&self) -> f64 {
        self.base + self.io
    }
}

pub fn total_work(profile: &FrequencyProfile, depths: &[u32], params: &CostParams) -> Result<TotalWork> {
    params.validate()?;
    if depths.len() != profile.len() {
        return Err(Error::usage(format!("{} depths for a profile of {} blocks", depths.len(), profile.len())));
    }
    let weighted: f64 = profile.probabilities().iter().zip(depths).map(|(p, &d)| p * d as f64).sum();
    Ok(TotalWork { base: weighted, io: params.miss_rate * params.miss_penalty_ns * weighted })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ArityRow {
    pub k: u32,
    pub height: u32,
    pub input_bytes: usize,
    pub hash_ns: f64,
    pub expected_ns_per_io: f64,
}

pub fn arity_table(
    n_blocks: u64,
    arities: &[u32],
    table: &LatencyTable,
    io_size: u64,
    block_size: u64,
) -> Result<Vec<ArityRow>> {
    arities
        .iter()
        .map(|&k| {
            Ok(ArityRow {
                k,
                height: balanced_height(n_blocks, k as u64),
                input_bytes: node_input_bytes(k),
                hash_ns: table.get(node_input_bytes(k)).unwrap_or(f64::NAN),
                expected_ns_per_io: arity_cost(n_blocks, k, table, io_size, block_size)?,
            })
        })
        .collect()
}

pub fn write_arity_csv<W: Write>(rows: &[ArityRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "k,height,input_bytes,hash_ns,expected_ns_per_io")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.1},{:.1}", r.k, r.height, r.input_bytes, r.hash_ns, r.expected_ns_per_io)?;
    }
    Ok(())
}
