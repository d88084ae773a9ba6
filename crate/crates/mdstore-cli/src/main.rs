//! Operator command line for the multidimensional data store: synthetic data
//! generation, ingest benchmarking, queries, overlap statistics, segment
//! inspection, and a local benchmark run.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mdstore::stats::overlap_stats;
use mdstore::storage::SegmentStore;
use mdstore::synth::{generate_records, synthetic_descriptor_xml, GenMode};
use mdstore::{
    parse_descriptor, parse_query, DescriptorRegistry, FeedInput, FieldValue, IteratorKind,
    QueryValue, RangeQuery, RecordDescriptor, Scheme, SegmentationConfig, Store, StoreConfig,
};

#[derive(Parser)]
#[command(name = "mdstore", version, about = "Single-node multidimensional data store")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Random,
    Kdtree,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Random => Scheme::Random,
            SchemeArg::Kdtree => Scheme::KdTree,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum IterArg {
    Kd,
    Seq,
}

impl From<IterArg> for IteratorKind {
    fn from(i: IterArg) -> IteratorKind {
        match i {
            IterArg::Kd => IteratorKind::KdTree,
            IterArg::Seq => IteratorKind::Sequential,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic binary records (and optionally their descriptor).
    Gen(GenArgs),
    /// Ingest a binary or CSV file and report throughput.
    Ingest(IngestArgs),
    /// Run a range query against a store directory.
    Query(QueryArgs),
    /// Store statistics.
    Stats {
        #[command(subcommand)]
        what: StatsCmd,
    },
    /// Dump a segment's header and section summary.
    Inspect(InspectArgs),
    /// Run the local benchmark workloads (numbers are machine-specific).
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Pairwise bounding-hyperrectangle overlap across all segments.
    Overlap(OverlapArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output file for binary records.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    records: usize,
    /// Number of float32 indexing dimensions.
    #[arg(long, default_value_t = 5)]
    dims: usize,
    #[arg(long, value_enum, default_value_t = GenModeArg::Uniform)]
    mode: GenModeArg,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 0.02)]
    cluster_stddev: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the matching record descriptor XML here.
    #[arg(long)]
    emit_desc: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenModeArg {
    Uniform,
    Clustered,
}

#[derive(Args)]
struct StoreArgs {
    /// Record descriptor XML file.
    #[arg(long)]
    desc: PathBuf,
    /// Segment file directory.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 1 << 30)]
    cache_capacity: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Input records; `.csv` parses as text, anything else as binary.
    #[arg(long)]
    input: PathBuf,
    /// Force the input format instead of inferring from the extension.
    #[arg(long, value_enum)]
    input_format: Option<InputFormat>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Random)]
    scheme: SchemeArg,
    /// Feeder thread count.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Concurrent ingestion task limit (sizes the kd-node pool); defaults to
    /// the feeder count.
    #[arg(long)]
    ingestor_threads: Option<usize>,
    /// Maximum chunk size, in records.
    #[arg(long, alias = "max-chunk-records", default_value_t = 10_000)]
    chunk: usize,
    /// Target maximum segment size, in bytes.
    #[arg(long, alias = "target-segment-size", default_value_t = 1 << 20)]
    segment_size: u64,
    /// Overpacking factor for kd partitioning.
    #[arg(long, alias = "overpacking", default_value_t = 4)]
    overpack: u32,
    #[arg(long, default_value_t = 3)]
    median_samples: usize,
    #[arg(long, default_value_t = 1)]
    writer_threads: usize,
    #[arg(long, default_value_t = 500)]
    writer_period_ms: u64,
    #[arg(long, default_value_t = 64)]
    writer_batch_max: usize,
    /// Ingestion blocks while this many segments await persistence.
    #[arg(long, alias = "high-water-mark", default_value_t = 10_000)]
    high_water: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Bin,
    Csv,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Query text in the range DSL.
    #[arg(long, conflicts_with = "query_file")]
    query: Option<String>,
    /// File containing the query text.
    #[arg(long)]
    query_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = IterArg::Kd)]
    iterator: IterArg,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct OverlapArgs {
    #[command(flatten)]
    store: StoreArgs,
    /// Also list per-segment overlap counts.
    #[arg(long)]
    per_segment: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct InspectArgs {
    /// Segment UUID (with or without hyphens).
    uuid: String,
    #[command(flatten)]
    store: StoreArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 200_000)]
    records: usize,
    #[arg(long, default_value_t = 5)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let result = match Cli::parse().cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::Stats { what: StatsCmd::Overlap(a) } => cmd_overlap(a),
        Cmd::Inspect(a) => cmd_inspect(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_descriptor(path: &PathBuf) -> Result<Arc<RecordDescriptor>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading descriptor {}", path.display()))?;
    Ok(Arc::new(parse_descriptor(&text)?))
}

fn open_store(args: &StoreArgs, cfg_base: Option<StoreConfig>) -> Result<Store> {
    let desc = load_descriptor(&args.desc)?;
    let mut cfg = cfg_base.unwrap_or_default();
    cfg.cache_capacity = args.cache_capacity;
    cfg.seed = args.seed;
    Ok(Store::open(desc, cfg, &args.data_dir)?)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    if a.dims < 2 {
        bail!("--dims must be at least 2");
    }
    let mode = match a.mode {
        GenModeArg::Uniform => GenMode::Uniform,
        GenModeArg::Clustered => GenMode::Clustered {
            clusters: a.clusters,
            stddev: a.cluster_stddev,
        },
    };
    let data = generate_records(a.dims, a.records, mode, a.seed);
    std::fs::write(&a.out, &data).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(desc_path) = &a.emit_desc {
        std::fs::write(desc_path, synthetic_descriptor_xml(a.dims))
            .with_context(|| format!("writing {}", desc_path.display()))?;
    }
    eprintln!(
        "wrote {} records ({} bytes) to {}",
        a.records,
        data.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let cfg = StoreConfig {
        scheme: a.scheme.into(),
        segmentation: SegmentationConfig {
            max_segment_size: a.segment_size,
            overpacking: a.overpack,
            median_samples: a.median_samples,
        },
        max_chunk_records: a.chunk,
        ingestor_threads: a.ingestor_threads.unwrap_or(a.threads).max(a.threads).max(1),
        writer_threads: a.writer_threads,
        writer_period: Duration::from_millis(a.writer_period_ms),
        writer_batch_max: a.writer_batch_max,
        high_water_mark: a.high_water,
        cache_capacity: a.store.cache_capacity,
        seed: a.store.seed,
    };
    let store = open_store(&a.store, Some(cfg))?;

    let is_csv = match a.input_format {
        Some(InputFormat::Csv) => true,
        Some(InputFormat::Bin) => false,
        None => a.input.extension().and_then(|e| e.to_str()) == Some("csv"),
    };
    let report = if is_csv {
        let text = std::fs::read_to_string(&a.input)
            .with_context(|| format!("reading {}", a.input.display()))?;
        store.feed(FeedInput::Csv(&text), a.threads)?
    } else {
        let bytes = std::fs::read(&a.input)
            .with_context(|| format!("reading {}", a.input.display()))?;
        store.feed(FeedInput::Binary(bytes.into()), a.threads)?
    };
    store.close()?;

    match a.format {
        Format::Json => {
            let per_feeder: Vec<_> = report
                .per_feeder
                .iter()
                .map(|f| {
                    serde_json::json!({
                        "feeder": f.feeder,
                        "records": f.records,
                        "records_per_sec": f.records_per_sec(),
                        "error": f.error,
                    })
                })
                .collect();
            println!(
                "{}",
                serde_json::json!({
                    "records": report.records,
                    "chunks": report.chunks,
                    "segments": report.segments,
                    "elapsed_secs": report.elapsed.as_secs_f64(),
                    "records_per_sec": report.records_per_sec,
                    "per_feeder": per_feeder,
                })
            );
        }
        Format::Csv => {
            println!("records,chunks,segments,elapsed_secs,records_per_sec");
            println!(
                "{},{},{},{:.3},{:.0}",
                report.records,
                report.chunks,
                report.segments,
                report.elapsed.as_secs_f64(),
                report.records_per_sec
            );
            for f in &report.per_feeder {
                eprintln!(
                    "feeder {}: {} records, {:.0} rec/s{}",
                    f.feeder,
                    f.records,
                    f.records_per_sec(),
                    f.error.as_deref().map(|e| format!(", error: {e}")).unwrap_or_default()
                );
            }
        }
    }
    if let Some(err) = report.first_error() {
        bail!("ingest incomplete: {err}");
    }
    Ok(())
}

fn field_to_json(v: &FieldValue) -> serde_json::Value {
    match v {
        FieldValue::Str(s) => serde_json::json!(s),
        FieldValue::I64(x) => serde_json::json!(x),
        FieldValue::U32(x) => serde_json::json!(x),
        FieldValue::F32(x) => serde_json::json!(x),
        FieldValue::F64(x) => serde_json::json!(x),
    }
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let text = match (&a.query, &a.query_file) {
        (Some(q), _) => q.clone(),
        (None, Some(path)) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?,
        (None, None) => bail!("one of --query or --query-file is required"),
    };
    let store = open_store(&a.store, None)?;
    let q: RangeQuery = parse_query(text.trim(), store.desc())?;
    let result = store.execute(&q, a.iterator.into())?;
    let stats = result.stats;

    match a.format {
        Format::Json => {
            let value = match &result.value {
                QueryValue::Count(n) => serde_json::json!({"count": n}),
                QueryValue::Avg(v) => serde_json::json!({"avg": v}),
                QueryValue::Min(v) => serde_json::json!({"min": v.as_ref().map(field_to_json)}),
                QueryValue::Max(v) => serde_json::json!({"max": v.as_ref().map(field_to_json)}),
                QueryValue::Rows(rows) => {
                    let fields: Vec<&str> = projected_names(&q, store.desc());
                    serde_json::json!({
                        "fields": fields,
                        "rows": rows
                            .iter()
                            .map(|r| r.iter().map(field_to_json).collect::<Vec<_>>())
                            .collect::<Vec<_>>(),
                    })
                }
            };
            println!(
                "{}",
                serde_json::json!({
                    "result": value,
                    "segments_inspected": stats.segments_inspected,
                    "records_visited": stats.records_visited,
                    "matched": stats.matched,
                })
            );
        }
        Format::Csv => {
            match &result.value {
                QueryValue::Count(n) => {
                    println!("count,segments_inspected,records_visited");
                    println!("{n},{},{}", stats.segments_inspected, stats.records_visited);
                }
                QueryValue::Avg(v) => {
                    println!("avg,segments_inspected,records_visited");
                    println!(
                        "{},{},{}",
                        v.map_or(String::new(), |x| x.to_string()),
                        stats.segments_inspected,
                        stats.records_visited
                    );
                }
                QueryValue::Min(v) | QueryValue::Max(v) => {
                    let name = if matches!(result.value, QueryValue::Min(_)) { "min" } else { "max" };
                    println!("{name},segments_inspected,records_visited");
                    println!(
                        "{},{},{}",
                        v.as_ref().map_or(String::new(), |x| x.to_string()),
                        stats.segments_inspected,
                        stats.records_visited
                    );
                }
                QueryValue::Rows(rows) => {
                    let mut header = projected_names(&q, store.desc()).join(",");
                    header.push_str(",segments_inspected,records_visited");
                    println!("{header}");
                    for row in rows {
                        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                        println!(
                            "{},{},{}",
                            cells.join(","),
                            stats.segments_inspected,
                            stats.records_visited
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

fn projected_names<'d>(q: &RangeQuery, desc: &'d RecordDescriptor) -> Vec<&'d str> {
    match &q.projection {
        Some(fields) => fields.iter().map(|&f| desc.fields()[f].name.as_str()).collect(),
        None => desc.fields().iter().map(|f| f.name.as_str()).collect(),
    }
}

fn cmd_overlap(a: OverlapArgs) -> Result<()> {
    let store = open_store(&a.store, None)?;
    let rects = store.segment_rects();
    if rects.len() < 2 {
        eprintln!("note: store has {} segment(s); overlap needs at least 2", rects.len());
    }
    let report = overlap_stats(&rects);
    match a.format {
        Format::Json => {
            let mut obj = serde_json::json!({
                "segments": report.segment_count(),
                "mean": report.mean,
                "stddev": report.stddev,
            });
            if a.per_segment {
                obj["per_segment"] = report
                    .per_segment
                    .iter()
                    .map(|(u, c)| serde_json::json!({"uuid": u.to_string(), "overlaps": c}))
                    .collect();
            }
            println!("{obj}");
        }
        Format::Csv => {
            println!("segments,mean_overlaps,stddev");
            println!("{},{:.3},{:.3}", report.segment_count(), report.mean, report.stddev);
            if a.per_segment {
                println!("uuid,overlaps");
                for (u, c) in &report.per_segment {
                    println!("{u},{c}");
                }
            }
        }
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let uuid: uuid::Uuid = a.uuid.parse().context("invalid segment uuid")?;
    let desc = load_descriptor(&a.store.desc)?;
    let files = SegmentStore::open(&a.store.data_dir)?;
    let registry = DescriptorRegistry::with(Arc::clone(&desc));
    let seg = files.read(uuid, &registry)?;

    println!("segment        {}", seg.segment_uuid());
    println!("record type    {}", seg.record_type_uuid());
    println!("total length   {} bytes", seg.total_length());
    println!("records        {} x {} bytes", seg.record_count(), desc.record_size());
    println!("packed nodes   {}", seg.nodes().len());
    println!("initial dim    {}", seg.initial_dimension());
    println!("dims           {}", seg.dim_fields().len());
    for (i, &field) in seg.dim_fields().iter().enumerate() {
        let name = &desc.fields()[field as usize].name;
        let lo = &seg.bounds().lo()[i];
        let hi = &seg.bounds().hi()[i];
        println!("  dim {i} {name:<20} [{lo:?}, {hi:?}]");
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.dims < 2 {
        bail!("--dims must be at least 2");
    }
    println!("local benchmark: {} records, {} dims, seed {}", a.records, a.dims, a.seed);
    println!("(absolute numbers are machine-specific; use them for comparison only)");
    let desc_xml = synthetic_descriptor_xml(a.dims);
    let desc = Arc::new(parse_descriptor(&desc_xml)?);
    let uniform: Arc<[u8]> =
        generate_records(a.dims, a.records, GenMode::Uniform, a.seed).into();

    // Ingestion throughput across schemes and chunk sizes.
    println!("\ningest throughput (single feeder, binary)");
    println!("{:<10} {:>10} {:>14} {:>10}", "scheme", "chunk", "records_per_s", "segments");
    for scheme in [Scheme::Random, Scheme::KdTree] {
        for chunk in [10_000usize, 100_000] {
            let dir = tempfile::TempDir::new().context("tempdir")?;
            let cfg = StoreConfig {
                scheme,
                max_chunk_records: chunk,
                writer_period: Duration::from_secs(10),
                high_water_mark: 100_000,
                seed: a.seed,
                ..StoreConfig::default()
            };
            let store = Store::open(Arc::clone(&desc), cfg, dir.path())?;
            let rep = store.feed(FeedInput::Binary(Arc::clone(&uniform)), 1)?;
            println!(
                "{:<10} {:>10} {:>14.0} {:>10}",
                scheme.to_string(),
                chunk,
                rep.records_per_sec,
                rep.segments
            );
            store.close()?;
        }
    }

    // Iterator comparison on selective queries.
    println!("\nrecord iterators (random scheme, 30 selective queries)");
    {
        let dir = tempfile::TempDir::new()?;
        let cfg = StoreConfig {
            segmentation: SegmentationConfig {
                max_segment_size: 64 << 10,
                ..SegmentationConfig::default()
            },
            writer_period: Duration::from_secs(10),
            high_water_mark: 100_000,
            seed: a.seed,
            ..StoreConfig::default()
        };
        let store = Store::open(Arc::clone(&desc), cfg, dir.path())?;
        store.feed(FeedInput::Binary(Arc::clone(&uniform)), 1)?;
        let mut queries = Vec::new();
        for i in 0..30 {
            let lo = (i as f32) / 40.0;
            let mut parts = Vec::new();
            for d in 0..a.dims.min(5) {
                parts.push(format!("d{d} in [{}, {}]", lo, lo + 0.2));
            }
            queries.push(format!("count(*) where {}", parts.join(" and ")));
        }
        println!("{:<10} {:>16} {:>12}", "iterator", "records_visited", "elapsed_ms");
        for kind in [IteratorKind::KdTree, IteratorKind::Sequential] {
            let t0 = std::time::Instant::now();
            let mut visited = 0u64;
            for text in &queries {
                let q = parse_query(text, &desc)?;
                visited += store.execute(&q, kind)?.stats.records_visited;
            }
            println!(
                "{:<10} {:>16} {:>12.1}",
                kind.to_string(),
                visited,
                t0.elapsed().as_secs_f64() * 1e3
            );
        }
        store.close()?;
    }

    // Overlap comparison on clustered data.
    println!("\nsegment overlap (clustered data, chunk 10K, segment 256KB, overpack 1)");
    let clustered: Arc<[u8]> = generate_records(
        a.dims,
        a.records,
        GenMode::Clustered {
            clusters: 10,
            stddev: 0.02,
        },
        a.seed,
    )
    .into();
    println!("{:<10} {:>10} {:>12} {:>12}", "scheme", "segments", "mean", "stddev");
    for scheme in [Scheme::Random, Scheme::KdTree] {
        let dir = tempfile::TempDir::new()?;
        let cfg = StoreConfig {
            scheme,
            segmentation: SegmentationConfig {
                max_segment_size: 256 << 10,
                overpacking: 1,
                median_samples: 3,
            },
            writer_period: Duration::from_secs(10),
            high_water_mark: 100_000,
            seed: a.seed,
            ..StoreConfig::default()
        };
        let store = Store::open(Arc::clone(&desc), cfg, dir.path())?;
        store.feed(FeedInput::Binary(Arc::clone(&clustered)), 1)?;
        let report = overlap_stats(&store.segment_rects());
        println!(
            "{:<10} {:>10} {:>12.1} {:>12.1}",
            scheme.to_string(),
            report.segment_count(),
            report.mean,
            report.stddev
        );
        store.close()?;
    }
    Ok(())
}
