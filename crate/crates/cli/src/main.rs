// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dmt_core::cost::{arity_table, measure_hash_latency_with, node_input_bytes, write_arity_csv};
use dmt_core::crypto::{KeyMaterial, NodeHashKind};
use dmt_core::engine::required_records;
use dmt_core::harness::{build_engine, oracle_profile, run_workload, Clock, RunConfig, WorkloadChoice};
use dmt_core::model::RootAnchor;
use dmt_core::store::{StoreLayout, UntrustedStore};
use dmt_core::topology::{leaf_depth_histogram, write_histogram_csv, write_shape, TreeKind};
use dmt_core::workload::{parse_trace, scale_trace, write_trace};
use dmt_core::{Engine, Error, TreeShape};

#[derive(Parser)]
#[command(name = "dmt-bench", version, about = "Authenticated block store benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a zeroed device image with a fresh tree and root anchor.
    Init(InitArgs),
    /// Run a workload and print a JSON report.
    Run(RunArgs),
    /// Measure hash latency and print expected hashing cost per arity as CSV.
    CostModel(CostArgs),
    /// Write the tree of an existing image as `node_id parent left right depth` lines.
    ExportShape(ExportArgs),
    /// Rescale a trace to another capacity.
    TraceScale(TraceScaleArgs),
}

#[derive(Args, Clone)]
struct Paths {
    /// Data region file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metadata region file.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Trusted root anchor file.
    #[arg(long)]
    anchor: Option<PathBuf>,
    /// 48-byte key file; must live in a different directory from the image.
    #[arg(long)]
    key: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HashArg {
    KeyedSha256,
    Fast,
}

impl From<HashArg> for NodeHashKind {
    fn from(h: HashArg) -> Self {
        match h {
            HashArg::KeyedSha256 => NodeHashKind::KeyedSha256,
            HashArg::Fast => NodeHashKind::Fast,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkloadArg {
    Uniform,
    Zipf,
    Shifting,
    Trace,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Wall,
}

/// `balanced:K`, `huffman`, `huffman:TRACE` or `dmt`.
#[derive(Clone, Debug)]
struct TreeArg {
    kind: TreeKind,
    trace: Option<PathBuf>,
}

fn parse_tree(s: &str) -> Result<TreeArg, String> {
    let (head, rest) = s.split_once(':').map_or((s, None), |(h, r)| (h, Some(r)));
    match (head, rest) {
        ("dmt", None) => Ok(TreeArg { kind: TreeKind::Dmt, trace: None }),
        ("balanced", Some(k)) => {
            let k: u32 = k.parse().map_err(|_| format!("bad arity {k:?}"))?;
            Ok(TreeArg { kind: TreeKind::Balanced { k }, trace: None })
        }
        ("huffman", rest) => Ok(TreeArg { kind: TreeKind::Huffman, trace: rest.map(PathBuf::from) }),
        _ => Err(format!("unknown tree {s:?}; expected balanced:K, huffman[:TRACE] or dmt")),
    }
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 256 << 20)]
    capacity_bytes: u64,
    #[arg(long, default_value_t = 4096)]
    block_size: usize,
    #[arg(long, value_parser = parse_tree, default_value = "dmt")]
    tree: TreeArg,
    #[arg(long, value_enum, default_value = "keyed-sha256")]
    hash: HashArg,
    #[arg(long, default_value_t = 3)]
    iv_seed: u64,
    /// Overwrite existing image files.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    paths: Paths,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 256 << 20)]
    capacity_bytes: u64,
    #[arg(long, default_value_t = 4096)]
    block_size: usize,
    #[arg(long, default_value_t = 0.1)]
    cache_ratio: f64,
    #[arg(long, default_value_t = 0.01)]
    read_ratio: f64,
    #[arg(long, default_value_t = 32768)]
    io_size: u64,
    #[arg(long, default_value_t = 1)]
    threads: u32,
    #[arg(long, default_value_t = 1)]
    iodepth: u32,
    /// Defaults to the image's tree, or dmt for in-memory runs.
    #[arg(long, value_parser = parse_tree)]
    tree: Option<TreeArg>,
    #[arg(long, default_value_t = 0.01)]
    splay_probability: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    splay_window: bool,
    #[arg(long, value_enum, default_value = "zipf")]
    workload: WorkloadArg,
    #[arg(long, default_value_t = 2.5)]
    theta: f64,
    #[arg(long, default_value_t = 30.0)]
    phase_s: f64,
    /// Trace to replay with `--workload trace`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Capacity the trace was recorded against; offsets are rescaled.
    #[arg(long)]
    trace_capacity: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    splay_seed: u64,
    #[arg(long, default_value_t = 3)]
    iv_seed: u64,
    #[arg(long, default_value_t = 60.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 10.0)]
    warmup_s: f64,
    #[arg(long, value_enum, default_value = "virtual")]
    clock: ClockArg,
    /// Request rate of the virtual clock.
    #[arg(long, default_value_t = 1000)]
    iops: u64,
    #[arg(long, default_value_t = 0)]
    simulate_device_latency_us: u64,
    #[arg(long, value_enum, default_value = "keyed-sha256")]
    hash: HashArg,
    /// Reinitialize the image before running.
    #[arg(long)]
    init: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-second samples as CSV.
    #[arg(long)]
    samples_csv: Option<PathBuf>,
    #[command(flatten)]
    paths: Paths,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 262_144)]
    n_blocks: u64,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,64")]
    arity: Vec<u32>,
    #[arg(long, default_value_t = 32768)]
    io_size: u64,
    #[arg(long, default_value_t = 4096)]
    block_size: u64,
    #[arg(long, default_value_t = 10_000)]
    iterations: u32,
}

#[derive(Args)]
struct ExportArgs {
    /// Shape output file.
    #[arg(long)]
    out: PathBuf,
    /// Leaf depth histogram CSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[command(flatten)]
    paths: Paths,
}

#[derive(Args)]
struct TraceScaleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    from_capacity: u64,
    #[arg(long)]
    to_capacity: u64,
}

/// Geometry stored next to the metadata file so later commands can reopen it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayoutFile {
    capacity_bytes: u64,
    block_size: usize,
    max_nodes: u64,
    tree: TreeKind,
    hash: NodeHashKind,
}

struct Image {
    data: PathBuf,
    meta: PathBuf,
    anchor: PathBuf,
    key: PathBuf,
}

fn sidecar(meta: &Path) -> PathBuf {
    let mut s = meta.as_os_str().to_owned();
    s.push(".layout.json");
    PathBuf::from(s)
}

fn parent_dir(p: &Path) -> PathBuf {
    let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    abs.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl Paths {
    fn any(&self) -> bool {
        self.data.is_some() || self.meta.is_some() || self.anchor.is_some() || self.key.is_some()
    }

    fn image(&self) -> Result<Image, Error> {
        let need =
            |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| Error::usage(format!("--{flag} is required")));
        let img = Image {
            data: need(&self.data, "data")?,
            meta: need(&self.meta, "meta")?,
            anchor: need(&self.anchor, "anchor")?,
            key: need(&self.key, "key")?,
        };
        let key_dir = parent_dir(&img.key);
        for p in [&img.data, &img.meta, &img.anchor] {
            if std::path::absolute(p).ok() == std::path::absolute(&img.key).ok() {
                return Err(Error::usage("key file must not share a path with the image"));
            }
        }
        if key_dir == parent_dir(&img.data) || key_dir == parent_dir(&img.meta) {
            return Err(Error::usage("key file must not be kept in the same directory as the data or metadata files"));
        }
        Ok(img)
    }
}

fn load_or_create_key(path: &Path) -> Result<KeyMaterial, Error> {
    if path.exists() {
        return KeyMaterial::load(path);
    }
    let keys = KeyMaterial::generate(&mut rand::rng());
    keys.store(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))?;
    }
    Ok(keys)
}

fn store_layout(img: &Image, capacity_bytes: u64, block_size: usize, max_nodes: u64) -> StoreLayout {
    StoreLayout {
        capacity_bytes,
        block_size,
        max_nodes,
        data_path: Some(img.data.clone()),
        meta_path: Some(img.meta.clone()),
    }
}

/// Creates the image files, the tree and the anchor; returns the live engine.
fn init_image(img: &Image, cfg: &RunConfig, force: bool) -> Result<Engine, Error> {
    cfg.validate()?;
    let n = cfg.n_blocks();
    let profile = match cfg.tree {
        TreeKind::Huffman => Some(oracle_profile(cfg)?),
        _ => None,
    };
    let shape = TreeShape::build(cfg.tree, n, profile.as_ref())?;
    let keys = load_or_create_key(&img.key)?;
    let layout = store_layout(img, cfg.capacity_bytes, cfg.block_size, required_records(cfg.tree, n)?);
    let store = UntrustedStore::create_files(layout.clone(), force)?;
    let side = LayoutFile {
        capacity_bytes: layout.capacity_bytes,
        block_size: layout.block_size,
        max_nodes: layout.max_nodes,
        tree: cfg.tree,
        hash: cfg.hash,
    };
    std::fs::write(sidecar(&img.meta), serde_json::to_string_pretty(&side).expect("layout serializes"))?;
    Engine::create(store, &keys, cfg.engine_config(), shape, Some(img.anchor.clone()))
}

fn read_sidecar(img: &Image) -> Result<LayoutFile, Error> {
    let text = std::fs::read_to_string(sidecar(&img.meta))?;
    serde_json::from_str(&text).map_err(|e| Error::usage(format!("bad layout file: {e}")))
}

fn open_image(img: &Image, cfg: &RunConfig) -> Result<Engine, Error> {
    let side = read_sidecar(img)?;
    let layout = store_layout(img, side.capacity_bytes, side.block_size, side.max_nodes);
    let store = UntrustedStore::open_files(layout)?;
    let keys = KeyMaterial::load(&img.key)?;
    let anchor = RootAnchor::load(&img.anchor)?;
    Engine::open(store, &keys, cfg.engine_config(), anchor, Some(img.anchor.clone()))
}

fn init_config(a: &InitArgs) -> RunConfig {
    RunConfig {
        capacity_bytes: a.capacity_bytes,
        block_size: a.block_size,
        tree: a.tree.kind,
        huffman_trace: a.tree.trace.clone(),
        hash: a.hash.into(),
        iv_seed: a.iv_seed,
        ..RunConfig::default()
    }
}

fn cmd_init(a: InitArgs) -> Result<(), Error> {
    if a.tree.kind == TreeKind::Huffman && a.tree.trace.is_none() {
        return Err(Error::usage("huffman needs a trace: --tree huffman:PATH"));
    }
    let img = a.paths.image()?;
    let engine = init_image(&img, &init_config(&a), a.force)?;
    let n = engine.n_blocks();
    let anchor = engine.close()?;
    eprintln!("initialized {n} blocks, {} tree, generation {}", a.tree.kind, anchor.generation);
    Ok(())
}

fn run_config(a: &RunArgs, tree: TreeArg) -> Result<RunConfig, Error> {
    let workload = match a.workload {
        WorkloadArg::Uniform => WorkloadChoice::Uniform,
        WorkloadArg::Zipf => WorkloadChoice::Zipf { theta: a.theta },
        WorkloadArg::Shifting => WorkloadChoice::Shifting { phase_s: a.phase_s },
        WorkloadArg::Trace => WorkloadChoice::Trace {
            path: a.trace.clone().ok_or_else(|| Error::usage("--workload trace needs --trace"))?,
            capacity: a.trace_capacity,
        },
    };
    Ok(RunConfig {
        capacity_bytes: a.capacity_bytes,
        block_size: a.block_size,
        cache_ratio: a.cache_ratio,
        read_ratio: a.read_ratio,
        io_size: a.io_size,
        threads: a.threads,
        iodepth: a.iodepth,
        tree: tree.kind,
        huffman_trace: tree.trace,
        splay_probability: a.splay_probability,
        splay_window: a.splay_window,
        workload,
        seed: a.seed,
        splay_seed: a.splay_seed,
        iv_seed: a.iv_seed,
        duration_s: a.duration_s,
        warmup_s: a.warmup_s,
        clock: match a.clock {
            ClockArg::Virtual => Clock::Virtual { iops: a.iops },
            ClockArg::Wall => Clock::Wall,
        },
        simulate_device_latency_us: a.simulate_device_latency_us,
        hash: a.hash.into(),
    })
}

fn cmd_run(a: RunArgs) -> Result<(), Error> {
    let (engine, cfg) = if a.paths.any() {
        let img = a.paths.image()?;
        if a.init {
            let tree = a.tree.clone().unwrap_or(TreeArg { kind: TreeKind::Dmt, trace: None });
            let cfg = run_config(&a, tree)?;
            (init_image(&img, &cfg, true)?, cfg)
        } else {
            let side = read_sidecar(&img)?;
            let tree = match a.tree.clone() {
                Some(t) if t.kind != side.tree => {
                    return Err(Error::usage(format!("image holds a {} tree; pass --init to rebuild", side.tree)))
                }
                Some(t) => t,
                None => TreeArg { kind: side.tree, trace: None },
            };
            let mut cfg = run_config(&a, tree)?;
            cfg.capacity_bytes = side.capacity_bytes;
            cfg.block_size = side.block_size;
            cfg.hash = side.hash;
            (open_image(&img, &cfg)?, cfg)
        }
    } else {
        let tree = a.tree.clone().unwrap_or(TreeArg { kind: TreeKind::Dmt, trace: None });
        let cfg = run_config(&a, tree)?;
        (build_engine(&cfg)?, cfg)
    };
    let (report, engine) = run_workload(engine, &cfg)?;
    engine.close()?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.report {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.samples_csv {
        std::fs::write(p, report.samples_csv())?;
    }
    Ok(())
}

fn cmd_cost_model(a: CostArgs) -> Result<(), Error> {
    let sizes: Vec<usize> = a.arity.iter().map(|&k| node_input_bytes(k)).collect();
    let table = measure_hash_latency_with(&sizes, a.iterations, NodeHashKind::KeyedSha256)?;
    let rows = arity_table(a.n_blocks, &a.arity, &table, a.io_size, a.block_size)?;
    let stdout = std::io::stdout();
    write_arity_csv(&rows, &mut stdout.lock())?;
    Ok(())
}

fn cmd_export_shape(a: ExportArgs) -> Result<(), Error> {
    let img = a.paths.image()?;
    let side = read_sidecar(&img)?;
    let cfg = RunConfig {
        capacity_bytes: side.capacity_bytes,
        block_size: side.block_size,
        tree: side.tree,
        hash: side.hash,
        ..RunConfig::default()
    };
    let engine = open_image(&img, &cfg)?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    write_shape(engine.topology(), &mut out)?;
    out.flush()?;
    if let Some(p) = &a.histogram {
        let mut h = BufWriter::new(File::create(p)?);
        write_histogram_csv(&leaf_depth_histogram(engine.topology()), &mut h)?;
        h.flush()?;
    }
    Ok(())
}

fn cmd_trace_scale(a: TraceScaleArgs) -> Result<(), Error> {
    let ops = parse_trace(&a.input)?;
    let scaled = scale_trace(&ops, a.from_capacity, a.to_capacity)?;
    let mut out = BufWriter::new(File::create(&a.output)?);
    write_trace(&scaled, &mut out)?;
    out.flush()?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_integrity() => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

fn report_error(e: &Error) {
    eprintln!("error: {e}");
    let failures: Vec<_> = match e {
        Error::Integrity(f) => vec![f.as_ref().clone()],
        Error::IoIntegrity(v) => v.clone(),
        _ => Vec::new(),
    };
    for f in failures {
        eprintln!(
            "  {:?}: node {} level {} block {} expected {} computed {}",
            f.kind,
            f.node,
            f.level,
            f.block.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
            f.expected.to_hex(),
            f.computed.to_hex()
        );
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Run(a) => cmd_run(a),
        Command::CostModel(a) => cmd_cost_model(a),
        Command::ExportShape(a) => cmd_export_shape(a),
        Command::TraceScale(a) => cmd_trace_scale(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            log::debug!("{e:?}");
            ExitCode::from(exit_code(&e))
        }
    }
}
