// SPDX-License-Identifier: Apache-2.0

//! Request streams: uniform and Zipfian generators, phase schedules, and a
//! small CSV trace format with capacity scaling.
//!
//! Trace format: UTF-8, LF line endings, header `t_ns,kind,offset,length`,
//! then one request per line with `kind` either `read` or `write`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Requests are aligned to this many bytes.
pub const SECTOR: u64 = 512;

pub const TRACE_HEADER: &str = "t_ns,kind,offset,length";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Read,
    Write,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Read => "read",
            OpKind::Write => "write",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadOp {
    pub t_ns: u64,
    pub kind: OpKind,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum AccessShape {
    Uniform,
    /// Rank `r` has probability proportional to `1 / r^theta`. `center`
    /// rotates which slots hold the hot ranks.
    Zipf {
        theta: f64,
        center: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub shape: AccessShape,
    pub read_ratio: f64,
    pub io_size: u64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self, capacity: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return Err(Error::usage(format!("read ratio {} outside [0, 1]", self.read_ratio)));
        }
        if self.io_size == 0 || !self.io_size.is_multiple_of(SECTOR) {
            return Err(Error::usage(format!("io size {} is not a positive multiple of {SECTOR}", self.io_size)));
        }
        if self.io_size > capacity {
            return Err(Error::usage("io size exceeds capacity"));
        }
        if let AccessShape::Zipf { theta, .. } = self.shape {
            if !(theta > 0.0) {
                return Err(Error::usage(format!("zipf theta must be positive, got {theta}")));
            }
        }
        Ok(())
    }
}

/// Zipf-distributed slot indices in `0..n`.
///
/// Ranks are mapped to slots through a permutation fixed by `perm_seed`; the
/// draw stream comes from `seed`. Streams sharing a `perm_seed` share hot slots.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    perm: Vec<u64>,
    center: u64,
    dist: Zipf<f64>,
    rng: ChaCha8Rng,
}

impl ZipfSampler {
    pub fn new(n: u64, theta: f64, center: u64, perm_seed: u64, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("zipf over zero slots"));
        }
        if !(theta > 0.0) {
            return Err(Error::usage(format!("zipf theta must be positive, got {theta}")));
        }
        let dist = Zipf::new(n as f64, theta).map_err(|e| Error::usage(format!("zipf: {e}")))?;
        let mut perm: Vec<u64> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        Ok(ZipfSampler { perm, center: center % n, dist, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Slot holding rank `rank` (1-based).
    pub fn slot_of_rank(&self, rank: u64) -> u64 {
        let n = self.perm.len() as u64;
        self.perm[((rank - 1 + self.center) % n) as usize]
    }

    pub fn sample(&mut self) -> u64 {
        let rank = self.dist.sample(&mut self.rng) as u64;
        self.slot_of_rank(rank.clamp(1, self.perm.len() as u64))
    }
}

/// Exact rank probabilities `1/r^theta / H(n, theta)` for ranks `1..=n`.
pub fn zipf_pmf(n: u64, theta: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-theta)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Endless request stream for one spec.
#[derive(Clone, Debug)]
pub struct OpGenerator {
    spec: WorkloadSpec,
    n_slots: u64,
    zipf: Option<ZipfSampler>,
    rng: ChaCha8Rng,
}

impl OpGenerator {
    /// `stream` distinguishes independent submitters of the same spec.
    pub fn new(spec: WorkloadSpec, capacity: u64, stream: u64) -> Result<Self> {
        spec.validate(capacity)?;
        let n_slots = capacity / spec.io_size;
        let stream_seed = spec.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let zipf = match spec.shape {
            AccessShape::Uniform => None,
            AccessShape::Zipf { theta, center } => {
                Some(ZipfSampler::new(n_slots, theta, center, spec.seed, stream_seed.wrapping_add(1))?)
            }
        };
        Ok(OpGenerator { spec, n_slots, zipf, rng: ChaCha8Rng::seed_from_u64(stream_seed) })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn next_op(&mut self, t_ns: u64) -> WorkloadOp {
        let kind = if self.rng.random_bool(self.spec.read_ratio) { OpKind::Read } else { OpKind::Write };
        let slot = match &mut self.zipf {
            Some(z) => z.sample(),
            None => self.rng.random_range(0..self.n_slots),
        };
        WorkloadOp { t_ns, kind, offset: slot * self.spec.io_size, length: self.spec.io_size }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub duration_ns: u64,
    pub spec: WorkloadSpec,
}

/// Specs that take turns by timestamp. Zipf phases get a fresh random center
/// drawn from `seed` so the hot region moves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
    pub seed: u64,
}

impl PhaseSchedule {
    pub fn single(spec: WorkloadSpec) -> Self {
        PhaseSchedule { phases: vec![Phase { duration_ns: u64::MAX, spec }], seed: spec.seed }
    }

    /// Zipf(2.5), uniform, Zipf(2.0), uniform, Zipf(3.0), each `phase_ns` long.
    pub fn shifting(base: WorkloadSpec, phase_ns: u64) -> Self {
        let zipf = |theta| AccessShape::Zipf { theta, center: 0 };
        let shapes = [zipf(2.5), AccessShape::Uniform, zipf(2.0), AccessShape::Uniform, zipf(3.0)];
        let phases = shapes
            .iter()
            .enumerate()
            .map(|(i, &shape)| Phase {
                duration_ns: phase_ns,
                spec: WorkloadSpec { shape, seed: base.seed.wrapping_add(i as u64 + 1), ..base },
            })
            .collect();
        PhaseSchedule { phases, seed: base.seed }
    }

    /// Start time of each phase.
    pub fn boundaries(&self) -> Vec<u64> {
        let mut t = 0u64;
        self.phases
            .iter()
            .map(|p| {
                let start = t;
                t = t.saturating_add(p.duration_ns);
                start
            })
            .collect()
    }

    pub fn total_ns(&self) -> u64 {
        self.phases.iter().fold(0u64, |a, p| a.saturating_add(p.duration_ns))
    }

    /// Phase in effect at `t_ns`; the last phase extends forever.
    pub fn phase_at(&self, t_ns: u64) -> usize {
        let b = self.boundaries();
        b.iter().rposition(|&s| s <= t_ns).unwrap_or(0)
    }

    /// Specs with their re-drawn Zipf centers, in phase order.
    pub fn resolved_specs(&self, capacity: u64) -> Vec<WorkloadSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5e_ed0f_a5e5);
        self.phases
            .iter()
            .map(|p| {
                let mut spec = p.spec;
                if let AccessShape::Zipf { theta, .. } = spec.shape {
                    let n_slots = (capacity / spec.io_size.max(1)).max(1);
                    spec.shape = AccessShape::Zipf { theta, center: rng.random_range(0..n_slots) };
                }
                spec
            })
            .collect()
    }
}

/// Stream that follows a [`PhaseSchedule`].
#[derive(Clone, Debug)]
pub struct PhasedGenerator {
    schedule: PhaseSchedule,
    specs: Vec<WorkloadSpec>,
    capacity: u64,
    stream: u64,
    current: Option<(usize, OpGenerator)>,
}

impl PhasedGenerator {
    pub fn new(schedule: PhaseSchedule, capacity: u64, stream: u64) -> Result<Self> {
        if schedule.phases.is_empty() {
            return Err(Error::usage("phase schedule is empty"));
        }
        let specs = schedule.resolved_specs(capacity);
        for s in &specs {
            s.validate(capacity)?;
        }
        Ok(PhasedGenerator { schedule, specs, capacity, stream, current: None })
    }

    pub fn phase_at(&self, t_ns: u64) -> usize {
        self.schedule.phase_at(t_ns)
    }

    pub fn next_op(&mut self, t_ns: u64) -> WorkloadOp {
        let phase = self.schedule.phase_at(t_ns);
        if self.current.as_ref().map(|(p, _)| *p) != Some(phase) {
            let g = OpGenerator::new(self.specs[phase], self.capacity, self.stream).expect("specs validated");
            self.current = Some((phase, g));
        }
        self.current.as_mut().unwrap().1.next_op(t_ns)
    }
}

fn parse_line(line: &str, n: usize) -> Result<WorkloadOp> {
    let err = |msg: String| Error::Parse { line: n, msg };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 fields, found {}", fields.len())));
    }
    let num = |s: &str, what: &str| s.parse::<u64>().map_err(|e| err(format!("{what} {s:?}: {e}")));
    let kind = match fields[1] {
        "read" | "r" | "R" => OpKind::Read,
        "write" | "w" | "W" => OpKind::Write,
        other => return Err(err(format!("unknown kind {other:?}"))),
    };
    Ok(WorkloadOp {
        t_ns: num(fields[0], "timestamp")?,
        kind,
        offset: num(fields[2], "offset")?,
        length: num(fields[3], "length")?,
    })
}

/// Parses a trace. The header line is optional; blank lines are skipped.
/// Line numbers in errors are 1-based.
pub fn parse_trace_reader<R: BufRead>(reader: R) -> Result<Vec<WorkloadOp>> {
    let mut ops = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == TRACE_HEADER) {
            continue;
        }
        ops.push(parse_line(line, i + 1)?);
    }
    Ok(ops)
}

pub fn parse_trace(path: &Path) -> Result<Vec<WorkloadOp>> {
    parse_trace_reader(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_trace<W: Write>(ops: &[WorkloadOp], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for op in ops {
        writeln!(out, "{},{},{},{}", op.t_ns, op.kind, op.offset, op.length)?;
    }
    Ok(())
}

/// Rescales offsets and lengths by `to / from`. Offsets round down and
/// lengths round up to [`SECTOR`]; requests are clipped to `to_capacity`.
pub fn scale_trace(ops: &[WorkloadOp], from_capacity: u64, to_capacity: u64) -> Result<Vec<WorkloadOp>> {
    if from_capacity == 0 || to_capacity < SECTOR {
        return Err(Error::usage("capacities must be positive and at least one sector"));
    }
    let scale = |v: u64| (v as u128 * to_capacity as u128 / from_capacity as u128) as u64;
    ops.iter()
        .map(|op| {
            if op.offset.saturating_add(op.length) > from_capacity {
                return Err(Error::IoRange { offset: op.offset, length: op.length, capacity: from_capacity });
            }
            let offset = (scale(op.offset) / SECTOR * SECTOR).min(to_capacity - SECTOR);
            let length = if op.length == 0 { 0 } else { scale(op.length).div_ceil(SECTOR).max(1) * SECTOR };
            Ok(WorkloadOp { offset, length: length.min(to_capacity - offset), ..*op })
        })
        .collect()
}
