// SPDX-License-Identifier: Apache-2.0

//! Benchmark driver: runs a request stream against an engine and reports
//! throughput, latency percentiles, hash counts and tree shape.
//!
//! Two clocks are supported. The virtual clock stamps op `i` at
//! `i × 10^9 / iops` ns and interleaves submitters round-robin on one
//! thread, so everything except wall-clock timing is reproducible. The wall
//! clock runs real submitter threads against the engine behind one mutex.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{KeyMaterial, NodeHashKind};
use crate::engine::{required_records, Engine, EngineConfig, OpCounters, TreeShape};
use crate::error::{Error, Result};
use crate::model::{FrequencyProfile, DEFAULT_BLOCK_SIZE};
use crate::store::UntrustedStore;
use crate::topology::dmt::SplayPolicy;
use crate::topology::huffman::trace_to_profile;
use crate::topology::{leaf_depth_histogram, TreeKind};
use crate::workload::{
    parse_trace, scale_trace, AccessShape, OpKind, PhaseSchedule, PhasedGenerator, WorkloadOp, WorkloadSpec,
};

const NS_PER_S: u64 = 1_000_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum WorkloadChoice {
    Uniform,
    Zipf {
        theta: f64,
    },
    /// Zipf(2.5), uniform, Zipf(2.0), uniform, Zipf(3.0).
    Shifting {
        phase_s: f64,
    },
    /// Replays a trace in order, wrapping around. Offsets are rescaled when
    /// `capacity` differs from the device capacity.
    Trace {
        path: PathBuf,
        capacity: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Clock {
    Virtual { iops: u64 },
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub capacity_bytes: u64,
    pub block_size: usize,
    pub cache_ratio: f64,
    pub read_ratio: f64,
    pub io_size: u64,
    pub threads: u32,
    pub iodepth: u32,
    pub tree: TreeKind,
    /// Trace whose access counts shape the Huffman tree. Without one the tree
    /// is built from the run's own request stream, warmup included.
    pub huffman_trace: Option<PathBuf>,
    pub splay_probability: f64,
    pub splay_window: bool,
    pub workload: WorkloadChoice,
    pub seed: u64,
    pub splay_seed: u64,
    pub iv_seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub clock: Clock,
    pub simulate_device_latency_us: u64,
    pub hash: NodeHashKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            capacity_bytes: 256 << 20,
            block_size: DEFAULT_BLOCK_SIZE,
            cache_ratio: 0.1,
            read_ratio: 0.01,
            io_size: 32768,
            threads: 1,
            iodepth: 1,
            tree: TreeKind::Dmt,
            huffman_trace: None,
            splay_probability: 0.01,
            splay_window: true,
            workload: WorkloadChoice::Zipf { theta: 2.5 },
            seed: 1,
            splay_seed: 2,
            iv_seed: 3,
            duration_s: 60.0,
            warmup_s: 10.0,
            clock: Clock::Virtual { iops: 1000 },
            simulate_device_latency_us: 0,
            hash: NodeHashKind::KeyedSha256,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0
            || self.capacity_bytes == 0
            || !self.capacity_bytes.is_multiple_of(self.block_size as u64)
        {
            return Err(Error::usage("capacity must be a positive multiple of the block size"));
        }
        if self.threads == 0 || self.iodepth == 0 {
            return Err(Error::usage("threads and iodepth must be positive"));
        }
        if !(self.duration_s > 0.0) || !(self.warmup_s >= 0.0) {
            return Err(Error::usage("duration must be positive and warmup non-negative"));
        }
        if let Clock::Virtual { iops: 0 } = self.clock {
            return Err(Error::usage("virtual iops must be positive"));
        }
        if !(0.0..=1.0).contains(&self.splay_probability) {
            return Err(Error::usage("splay probability outside [0, 1]"));
        }
        if let WorkloadChoice::Shifting { phase_s } = self.workload {
            if !(phase_s > 0.0) {
                return Err(Error::usage("phase length must be positive"));
            }
        }
        if !matches!(self.workload, WorkloadChoice::Trace { .. }) {
            self.base_spec(AccessShape::Uniform).validate(self.capacity_bytes)?;
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> u64 {
        self.capacity_bytes / self.block_size as u64
    }

    pub fn submitters(&self) -> u32 {
        self.threads * self.iodepth
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            tree: self.tree,
            cache_ratio: self.cache_ratio,
            hash: self.hash,
            splay: SplayPolicy {
                window: self.splay_window,
                probability: self.splay_probability,
                seed: self.splay_seed,
            },
            iv_seed: self.iv_seed,
        }
    }

    fn base_spec(&self, shape: AccessShape) -> WorkloadSpec {
        WorkloadSpec { shape, read_ratio: self.read_ratio, io_size: self.io_size, seed: self.seed }
    }

    fn warmup_ns(&self) -> u64 {
        (self.warmup_s * 1e9) as u64
    }

    fn end_ns(&self) -> u64 {
        ((self.warmup_s + self.duration_s) * 1e9) as u64
    }

    /// Ops issued by the virtual clock, warmup included.
    pub fn virtual_op_count(&self, iops: u64) -> u64 {
        ((self.warmup_s + self.duration_s) * iops as f64).round() as u64
    }
}

/// One submitter's request stream.
enum Source {
    Phased(Box<PhasedGenerator>),
    Trace { ops: std::sync::Arc<Vec<WorkloadOp>>, next: usize, step: usize },
}

impl Source {
    fn next_op(&mut self, t_ns: u64) -> WorkloadOp {
        match self {
            Source::Phased(g) => g.next_op(t_ns),
            Source::Trace { ops, next, step } => {
                let op = WorkloadOp { t_ns, ..ops[*next % ops.len()] };
                *next += *step;
                op
            }
        }
    }
}

/// Builds one source per submitter.
fn sources(cfg: &RunConfig) -> Result<Vec<Source>> {
    let n = cfg.submitters() as usize;
    match &cfg.workload {
        WorkloadChoice::Trace { path, capacity } => {
            let mut ops = parse_trace(path)?;
            if let Some(from) = capacity {
                if *from != cfg.capacity_bytes {
                    ops = scale_trace(&ops, *from, cfg.capacity_bytes)?;
                }
            }
            if ops.is_empty() {
                return Err(Error::usage("trace has no requests"));
            }
            let ops = std::sync::Arc::new(ops);
            Ok((0..n).map(|i| Source::Trace { ops: ops.clone(), next: i, step: n }).collect())
        }
        choice => {
            let schedule = match choice {
                WorkloadChoice::Uniform => PhaseSchedule::single(cfg.base_spec(AccessShape::Uniform)),
                WorkloadChoice::Zipf { theta } => {
                    PhaseSchedule::single(cfg.base_spec(AccessShape::Zipf { theta: *theta, center: 0 }))
                }
                WorkloadChoice::Shifting { phase_s } => {
                    PhaseSchedule::shifting(cfg.base_spec(AccessShape::Uniform), (phase_s * 1e9) as u64)
                }
                WorkloadChoice::Trace { .. } => unreachable!(),
            };
            (0..n)
                .map(|i| {
                    Ok(Source::Phased(Box::new(PhasedGenerator::new(schedule.clone(), cfg.capacity_bytes, i as u64)?)))
                })
                .collect()
        }
    }
}

/// Ops the virtual clock issues for `cfg` at `iops`, in submission order.
pub fn virtual_stream(cfg: &RunConfig, iops: u64) -> Result<Vec<WorkloadOp>> {
    let mut srcs = sources(cfg)?;
    let n = srcs.len();
    let count = cfg.virtual_op_count(iops);
    Ok((0..count)
        .map(|i| {
            let t = (i as u128 * NS_PER_S as u128 / iops as u128) as u64;
            srcs[i as usize % n].next_op(t)
        })
        .collect())
}

/// Access profile the Huffman tree is built from.
pub fn oracle_profile(cfg: &RunConfig) -> Result<FrequencyProfile> {
    let ops = match &cfg.huffman_trace {
        Some(path) => parse_trace(path)?,
        None => {
            let iops = match cfg.clock {
                Clock::Virtual { iops } => iops,
                Clock::Wall => RunConfig::default_oracle_iops(),
            };
            virtual_stream(cfg, iops)?
        }
    };
    trace_to_profile(&ops, cfg.block_size as u64, cfg.capacity_bytes)
}

impl RunConfig {
    /// Rate used to sample the Huffman profile when running on the wall clock.
    pub fn default_oracle_iops() -> u64 {
        1000
    }
}

/// Fresh engine over an in-memory store, with a random key.
pub fn build_engine(cfg: &RunConfig) -> Result<Engine> {
    cfg.validate()?;
    let n = cfg.n_blocks();
    let profile = match cfg.tree {
        TreeKind::Huffman => Some(oracle_profile(cfg)?),
        _ => None,
    };
    let shape = TreeShape::build(cfg.tree, n, profile.as_ref())?;
    let store = UntrustedStore::in_memory(cfg.capacity_bytes, cfg.block_size, required_records(cfg.tree, n)?)?;
    let keys = KeyMaterial::generate(&mut ChaCha8Rng::seed_from_u64(cfg.iv_seed ^ 0x6b65_7973));
    Engine::create(store, &keys, cfg.engine_config(), shape, None)
}

/// Nearest-rank percentile of a sorted slice; `q` in `[0, 1]`.
pub fn percentile(sorted: &[u64], q: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub p50_us: f64,
    pub p999_us: f64,
    pub mean_us: f64,
}

impl LatencySummary {
    fn from_ns(mut v: Vec<u64>) -> Self {
        if v.is_empty() {
            return LatencySummary::default();
        }
        v.sort_unstable();
        let us = |ns: u64| ns as f64 / 1e3;
        LatencySummary {
            count: v.len() as u64,
            p50_us: us(percentile(&v, 0.5).unwrap()),
            p999_us: us(percentile(&v, 0.999).unwrap()),
            mean_us: v.iter().sum::<u64>() as f64 / v.len() as f64 / 1e3,
        }
    }
}

/// Work in one second of the run, keyed by the op timestamps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SecondSample {
    pub second: u64,
    pub ops: u64,
    pub bytes: u64,
    pub node_hashes: u64,
    pub write_blocks: u64,
    pub write_hashes: u64,
}

impl SecondSample {
    pub fn hashes_per_op(&self) -> f64 {
        ratio(self.node_hashes, self.ops)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_s: f64,
    pub ops_per_s: f64,
    pub mb_per_s: f64,
    pub read_latency: LatencySummary,
    pub write_latency: LatencySummary,
    /// Megabytes completed per wall-clock second.
    pub wall_mb_per_s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub tree: String,
    pub n_blocks: u64,
    pub ops: u64,
    pub read_ops: u64,
    pub write_ops: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    /// Counter deltas over the measured interval.
    pub counters: OpCounters,
    /// Node hashes during read requests per block read.
    pub hashes_per_read: f64,
    /// Node hashes during write requests per block written.
    pub hashes_per_write: f64,
    pub hashes_per_op: f64,
    pub cache_hit_rate: f64,
    pub samples: Vec<SecondSample>,
    pub depth_histogram: BTreeMap<u32, u64>,
    pub anchor_digest: String,
    pub anchor_generation: u64,
    /// Wall-clock measurements; these differ between otherwise identical runs.
    pub timing: Timing,
}

impl RunReport {
    /// Report without the wall-clock section, for comparing runs.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.timing = Timing::default();
        serde_json::to_string_pretty(&r).expect("report serializes")
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("second,ops,bytes,node_hashes,hashes_per_op\n");
        for x in &self.samples {
            s.push_str(&format!("{},{},{},{},{:.4}\n", x.second, x.ops, x.bytes, x.node_hashes, x.hashes_per_op()));
        }
        s
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct OpRecord {
    t_ns: u64,
    kind: OpKind,
    blocks: u32,
    bytes: u64,
    hashes: u64,
    latency_ns: u64,
    done_ns: u64,
}

/// Shared state of a run, guarded by the engine lock.
struct Locked {
    engine: Engine,
    warm: Option<OpCounters>,
}

fn fill_payload(buf: &mut [u8], tag: u64) {
    let bytes = tag.to_le_bytes();
    for chunk in buf.chunks_mut(512) {
        let n = chunk.len().min(8);
        chunk[..n].copy_from_slice(&bytes[..n]);
    }
}

fn run_one(locked: &Mutex<Locked>, op: &WorkloadOp, buf: &mut Vec<u8>, warmup_ns: u64, tag: u64) -> Result<OpRecord> {
    buf.resize(op.length as usize, 0);
    if op.kind == OpKind::Write {
        fill_payload(buf, tag);
    }
    let t0 = Instant::now();
    let mut g = locked.lock().unwrap_or_else(|e| e.into_inner());
    if g.warm.is_none() && op.t_ns >= warmup_ns {
        g.warm = Some(g.engine.counters());
    }
    let out = g.engine.io(op, buf)?;
    drop(g);
    Ok(OpRecord {
        t_ns: op.t_ns,
        kind: op.kind,
        blocks: out.blocks as u32,
        bytes: op.length,
        hashes: out.node_hashes,
        latency_ns: t0.elapsed().as_nanos() as u64,
        done_ns: 0,
    })
}

/// Runs `cfg`'s workload against `engine` and returns the report with the
/// engine. Integrity failures abort the run.
pub fn run_workload(engine: Engine, cfg: &RunConfig) -> Result<(RunReport, Engine)> {
    cfg.validate()?;
    if engine.capacity_bytes() != cfg.capacity_bytes || engine.block_size() != cfg.block_size {
        return Err(Error::usage("engine geometry does not match the run configuration"));
    }
    let mut engine = engine;
    engine.store_mut().set_device_latency(
        (cfg.simulate_device_latency_us > 0).then(|| Duration::from_micros(cfg.simulate_device_latency_us)),
    );
    let warmup_ns = cfg.warmup_ns();
    let end_ns = cfg.end_ns();
    let locked = Mutex::new(Locked { engine, warm: None });
    let started = Instant::now();

    let records: Vec<OpRecord> = match cfg.clock {
        Clock::Virtual { iops } => {
            let mut srcs = sources(cfg)?;
            let n = srcs.len();
            let mut buf = Vec::new();
            let mut out = Vec::with_capacity(cfg.virtual_op_count(iops) as usize);
            for i in 0..cfg.virtual_op_count(iops) {
                let t = (i as u128 * NS_PER_S as u128 / iops as u128) as u64;
                let op = srcs[i as usize % n].next_op(t);
                let mut r = run_one(&locked, &op, &mut buf, warmup_ns, i)?;
                r.done_ns = started.elapsed().as_nanos() as u64;
                out.push(r);
            }
            out
        }
        Clock::Wall => {
            let srcs = sources(cfg)?;
            let results: Vec<Result<Vec<OpRecord>>> = std::thread::scope(|s| {
                let handles: Vec<_> = srcs
                    .into_iter()
                    .enumerate()
                    .map(|(w, mut src)| {
                        let locked = &locked;
                        s.spawn(move || -> Result<Vec<OpRecord>> {
                            let mut buf = Vec::new();
                            let mut out = Vec::new();
                            let mut tag = ChaCha8Rng::seed_from_u64(w as u64);
                            loop {
                                let t = started.elapsed().as_nanos() as u64;
                                if t >= end_ns {
                                    return Ok(out);
                                }
                                let op = src.next_op(t);
                                let mut r = run_one(locked, &op, &mut buf, warmup_ns, tag.next_u64())?;
                                r.done_ns = started.elapsed().as_nanos() as u64;
                                out.push(r);
                            }
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("submitter panicked")).collect()
            });
            let mut all = Vec::new();
            for r in results {
                all.extend(r?);
            }
            all.sort_by_key(|r| (r.t_ns, r.done_ns));
            all
        }
    };
    let elapsed = started.elapsed();
    let Locked { engine, warm } = locked.into_inner().unwrap_or_else(|e| e.into_inner());
    let end = engine.counters();
    let counters = end.since(&warm.unwrap_or(end));
    let report = summarize(cfg, &engine, &records, counters, warmup_ns, elapsed);
    Ok((report, engine))
}

fn summarize(
    cfg: &RunConfig,
    engine: &Engine,
    records: &[OpRecord],
    counters: OpCounters,
    warmup_ns: u64,
    elapsed: Duration,
) -> RunReport {
    let measured: Vec<&OpRecord> = records.iter().filter(|r| r.t_ns >= warmup_ns).collect();
    let mut samples: BTreeMap<u64, SecondSample> = BTreeMap::new();
    let (mut reads, mut writes, mut rbytes, mut wbytes) = (0u64, 0u64, 0u64, 0u64);
    let (mut rblocks, mut wblocks, mut rhash, mut whash) = (0u64, 0u64, 0u64, 0u64);
    let mut rlat = Vec::new();
    let mut wlat = Vec::new();
    for r in &measured {
        let s = samples.entry(r.t_ns / NS_PER_S).or_default();
        s.second = r.t_ns / NS_PER_S;
        s.ops += 1;
        s.bytes += r.bytes;
        s.node_hashes += r.hashes;
        match r.kind {
            OpKind::Read => {
                reads += 1;
                rbytes += r.bytes;
                rblocks += r.blocks as u64;
                rhash += r.hashes;
                rlat.push(r.latency_ns);
            }
            OpKind::Write => {
                writes += 1;
                wbytes += r.bytes;
                wblocks += r.blocks as u64;
                whash += r.hashes;
                s.write_blocks += r.blocks as u64;
                s.write_hashes += r.hashes;
                wlat.push(r.latency_ns);
            }
        }
    }
    let ops = reads + writes;
    let measure_start = measured.first().map(|r| r.done_ns.saturating_sub(r.latency_ns)).unwrap_or(0);
    let measure_end = measured.iter().map(|r| r.done_ns).max().unwrap_or(0);
    let span_s = (measure_end.saturating_sub(measure_start)) as f64 / 1e9;
    let mut wall: BTreeMap<u64, u64> = BTreeMap::new();
    for r in &measured {
        *wall.entry(r.done_ns.saturating_sub(measure_start) / NS_PER_S).or_default() += r.bytes;
    }
    let wall_secs = wall.keys().next_back().map(|&s| s + 1).unwrap_or(0);
    let anchor = engine.anchor();
    RunReport {
        config: cfg.clone(),
        tree: cfg.tree.to_string(),
        n_blocks: engine.n_blocks(),
        ops,
        read_ops: reads,
        write_ops: writes,
        bytes_read: rbytes,
        bytes_written: wbytes,
        counters,
        hashes_per_read: ratio(rhash, rblocks),
        hashes_per_write: ratio(whash, wblocks),
        hashes_per_op: ratio(rhash + whash, ops),
        cache_hit_rate: counters.cache_hit_rate(),
        samples: samples.into_values().collect(),
        depth_histogram: leaf_depth_histogram(engine.topology()),
        anchor_digest: anchor.digest.to_hex(),
        anchor_generation: anchor.generation,
        timing: Timing {
            elapsed_s: elapsed.as_secs_f64(),
            ops_per_s: if span_s > 0.0 { ops as f64 / span_s } else { 0.0 },
            mb_per_s: if span_s > 0.0 { (rbytes + wbytes) as f64 / 1e6 / span_s } else { 0.0 },
            read_latency: LatencySummary::from_ns(rlat),
            write_latency: LatencySummary::from_ns(wlat),
            wall_mb_per_s: (0..wall_secs).map(|s| wall.get(&s).copied().unwrap_or(0) as f64 / 1e6).collect(),
        },
    }
}

/// In-memory engine plus [`run_workload`].
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let engine = build_engine(cfg)?;
    Ok(run_workload(engine, cfg)?.0)
}
