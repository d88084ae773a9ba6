//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its elapsed time (run with `--nocapture` to see them). Failures panic, so
//! a FAIL shows up as a failed test of the same name.
//!
//! Hardware-specific absolute throughput numbers are not asserted anywhere;
//! the performance criteria check trends and ratios at desk scale.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, PoisonError};
use std::time::{Duration, Instant};

use mdstore::query::{Aggregate, Bound, IteratorKind, QueryValue, RangeQuery};
use mdstore::record::{FieldSpec, FieldType, RecordDescriptor};
use mdstore::segment::{assemble, DataSegment, HEADER_LEN};
use mdstore::segmentation::PlannedGroup;
use mdstore::store::FeedInput;
use mdstore::synth::{generate_records, synthetic_descriptor, GenMode};
use mdstore::{
    DescriptorRegistry, DimValue, FieldValue, Scheme, SegmentationConfig, Store, StoreConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tempfile::TempDir;
use uuid::Uuid;

fn pass(criterion: &str, started: Instant, detail: String) {
    println!(
        "ACCEPTANCE {criterion}: PASS ({:.2?}) {detail}",
        started.elapsed()
    );
}

/// The criteria that measure wall time take this so parallel test threads
/// cannot distort each other's throughput numbers.
static PERF_GATE: Mutex<()> = Mutex::new(());

fn perf_gate() -> std::sync::MutexGuard<'static, ()> {
    PERF_GATE.lock().unwrap_or_else(PoisonError::into_inner)
}

fn base_config(scheme: Scheme, segment_size: u64, chunk: usize) -> StoreConfig {
    StoreConfig {
        scheme,
        segmentation: SegmentationConfig {
            max_segment_size: segment_size,
            overpacking: 4,
            median_samples: 3,
        },
        max_chunk_records: chunk,
        ingestor_threads: 4,
        writer_threads: 1,
        writer_period: Duration::from_secs(10),
        writer_batch_max: 256,
        high_water_mark: 100_000,
        cache_capacity: 1 << 30,
        seed: 1,
    }
}

fn sorted(mut rows: Vec<Vec<u8>>) -> Vec<Vec<u8>> {
    rows.sort();
    rows
}

/// Locally implemented compensated sum over a sorted value list; combined
/// with exact integer sums this makes oracle aggregates bit-comparable.
fn oracle_avg_float(mut vals: Vec<f64>) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in vals.iter().copied() {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    Some((sum + comp) / vals.len() as f64)
}

fn random_box_query(
    desc: &RecordDescriptor,
    rng: &mut impl Rng,
    bound_prob: f64,
    span: f32,
) -> RangeQuery {
    let mut q = RangeQuery::unbounded(desc, Aggregate::None);
    for d in 0..desc.dim_count() {
        if rng.random_bool(bound_prob) {
            let lo = rng.random_range(-0.05f32..0.95);
            q.set_bound(
                d,
                Some(Bound {
                    value: DimValue::Float32(lo),
                    inclusive: rng.random_bool(0.75),
                }),
                Some(Bound {
                    value: DimValue::Float32(lo + rng.random_range(0.01f32..span)),
                    inclusive: rng.random_bool(0.75),
                }),
            );
        }
    }
    q
}

/// Criterion 1: for 1e5 seeded uniform 5-dim records ingested under each
/// scheme, 100 random range queries per scheme agree exactly with a
/// full-scan oracle for both iterator kinds — result multisets and
/// aggregates.
#[test]
fn c01_oracle_equivalence() {
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let data = generate_records(5, 100_000, GenMode::Uniform, 20_001);
    let all: Vec<&[u8]> = data.chunks_exact(desc.record_size()).collect();

    let mut checked = 0u64;
    for scheme in [Scheme::Random, Scheme::KdTree] {
        let dir = TempDir::new().unwrap();
        let store = Store::open(
            Arc::clone(&desc),
            base_config(scheme, 64 << 10, 10_000),
            dir.path(),
        )
        .unwrap();
        let rep = store
            .feed(FeedInput::Binary(data.clone().into()), 1)
            .unwrap();
        assert_eq!(rep.first_error(), None);
        assert_eq!(rep.records, 100_000);

        let mut rng = ChaCha12Rng::seed_from_u64(31_337);
        for qi in 0..100 {
            let mut q = random_box_query(&desc, &mut rng, 0.6, 0.5);
            let matches: Vec<&[u8]> = all.iter().copied().filter(|r| q.matches(&desc, r)).collect();

            // Result multisets, both iterator kinds.
            let oracle_rows = sorted(matches.iter().map(|r| r.to_vec()).collect());
            for kind in [IteratorKind::KdTree, IteratorKind::Sequential] {
                let (rows, stats) = store.scan_raw(&q, kind).unwrap();
                assert_eq!(sorted(rows), oracle_rows, "scheme {scheme} kind {kind}");
                assert_eq!(stats.matched, matches.len() as u64);
            }

            // One aggregate per query, rotating through all of them.
            let field = 1 + (qi % 5); // one of the five float dims
            q.aggregate = match qi % 4 {
                0 => Aggregate::CountAll,
                1 => Aggregate::Avg(field),
                2 => Aggregate::Min(field),
                _ => Aggregate::Max(field),
            };
            let want = match q.aggregate {
                Aggregate::CountAll => QueryValue::Count(matches.len() as u64),
                Aggregate::Avg(f) => QueryValue::Avg(oracle_avg_float(
                    matches
                        .iter()
                        .map(|r| match desc.decode_field(r, f) {
                            FieldValue::F32(v) => v as f64,
                            other => panic!("unexpected {other:?}"),
                        })
                        .collect(),
                )),
                Aggregate::Min(f) => QueryValue::Min(
                    matches
                        .iter()
                        .map(|r| match desc.decode_field(r, f) {
                            FieldValue::F32(v) => v,
                            other => panic!("unexpected {other:?}"),
                        })
                        .min_by(|a, b| a.total_cmp(b))
                        .map(FieldValue::F32),
                ),
                Aggregate::Max(f) => QueryValue::Max(
                    matches
                        .iter()
                        .map(|r| match desc.decode_field(r, f) {
                            FieldValue::F32(v) => v,
                            other => panic!("unexpected {other:?}"),
                        })
                        .max_by(|a, b| a.total_cmp(b))
                        .map(FieldValue::F32),
                ),
                Aggregate::None => unreachable!(),
            };
            for kind in [IteratorKind::KdTree, IteratorKind::Sequential] {
                let got = store.execute(&q, kind).unwrap();
                assert_eq!(got.value, want, "aggregate mismatch, {scheme}/{kind}");
            }
            checked += 1;
        }
        store.validate_index().unwrap();
        store.close().unwrap();
    }
    pass(
        "C1 oracle-equivalence",
        t0,
        format!("{checked} queries x 2 iterators x 2 schemes, exact"),
    );
}

// --- criterion 2 support -----------------------------------------------

fn random_descriptor(rng: &mut impl Rng) -> Arc<RecordDescriptor> {
    let dims = rng.random_range(2..=9usize);
    let mut fields = vec![FieldSpec {
        name: "tag".into(),
        ty: FieldType::Char {
            array_len: rng.random_range(1..=9),
        },
    }];
    let mut dim_names = Vec::new();
    for d in 0..dims {
        let ty = match rng.random_range(0..4) {
            0 => FieldType::Int64,
            1 => FieldType::Uint32,
            2 => FieldType::Epoch,
            _ => FieldType::Float32,
        };
        let name = format!("f{d}");
        fields.push(FieldSpec {
            name: name.clone(),
            ty,
        });
        dim_names.push(name);
    }
    Arc::new(RecordDescriptor::new(Uuid::new_v4(), fields, &dim_names).unwrap())
}

fn random_records(desc: &RecordDescriptor, count: usize, rng: &mut impl Rng) -> Vec<u8> {
    let r = desc.record_size();
    let mut out = vec![0u8; count * r];
    for i in 0..count {
        let rec = &mut out[i * r..(i + 1) * r];
        rng.fill(rec);
        // Keep float indexing dimensions NaN-free.
        for d in desc.dims() {
            if d.kind == mdstore::DimKind::Float32 {
                loop {
                    let v = f32::from_le_bytes(rec[d.offset..d.offset + 4].try_into().unwrap());
                    if !v.is_nan() {
                        break;
                    }
                    let fresh: f32 = rng.random_range(-1.0e6..1.0e6);
                    rec[d.offset..d.offset + 4].copy_from_slice(&fresh.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Byte ranges whose corruption deserialization is guaranteed to reject.
/// Excluded by design: the segment uuid (any value is a valid id), the
/// initial_dimension low bytes (another in-range dimension can coincide on
/// tiny trees), and the raw record payload (free-form; the format carries no
/// checksum).
fn mutation_ranges(seg: &DataSegment) -> Vec<std::ops::Range<usize>> {
    let d = seg.dim_fields().len();
    let n = seg.nodes().len();
    let dims_end = HEADER_LEN + 8 + 4 + 20 * d;
    let kd_len_end = dims_end + 8;
    let init_dim_end = kd_len_end + 4;
    let nodes_end = init_dim_end + 4 + 16 * n;
    vec![
        16..dims_end,              // total_length, type uuid, dims section
        dims_end..kd_len_end,      // kd section_length
        init_dim_end..nodes_end,   // node count + node array
        nodes_end..nodes_end + 8,  // records section_length
    ]
}

/// Criterion 2: serialization is a byte-level fixpoint on 1,000 randomized
/// segments (1–5,000 records, 2–9 dims), and 1,000 corrupted buffers are all
/// rejected with a structured error.
#[test]
fn c02_serialization_fixpoint_and_rejection() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(777);
    let mut total_records = 0usize;
    for i in 0..1_000 {
        let desc = random_descriptor(&mut rng);
        let count = rng.random_range(1..=5_000usize);
        total_records += count;
        let bytes = random_records(&desc, count, &mut rng);
        let chunk = mdstore::Chunk::from_vec(bytes, Arc::clone(&desc)).unwrap();
        let pool = mdstore::kdtree::NodePool::new(count, 1).unwrap();
        let group = PlannedGroup {
            records: (0..count as u32).collect(),
            initial_dim: 0,
            subtree: None,
            bounds: None,
        };
        let seg = assemble(&chunk, &group, &pool, &mut rng).unwrap();
        let wire = seg.serialize();
        let registry = DescriptorRegistry::with(Arc::clone(&desc));
        let back = DataSegment::deserialize(&wire, &registry).unwrap();
        assert_eq!(back.serialize(), wire, "fixpoint violated at segment {i}");

        // One corruption per segment: a byte flip in the validated regions,
        // with every fifth buffer truncated instead.
        let mut corrupt = wire.clone();
        if i % 5 == 4 {
            let cut = rng.random_range(0..corrupt.len());
            corrupt.truncate(cut);
        } else {
            let ranges = mutation_ranges(&seg);
            let total: usize = ranges.iter().map(|r| r.len()).sum();
            let mut at = rng.random_range(0..total);
            let mut offset = 0;
            for r in &ranges {
                if at < r.len() {
                    offset = r.start + at;
                    break;
                }
                at -= r.len();
            }
            let old = corrupt[offset];
            let mut new = rng.random::<u8>();
            while new == old {
                new = rng.random::<u8>();
            }
            corrupt[offset] = new;
        }
        assert!(
            DataSegment::deserialize(&corrupt, &registry).is_err(),
            "corruption accepted at segment {i}"
        );
    }
    pass(
        "C2 serialization-fixpoint",
        t0,
        format!("1000 segments ({total_records} records) + 1000 rejections"),
    );
}

/// Criterion 3: on >= 50 selective queries (< 1% match rate), the kd
/// iterator visits at most 0.7x the records the sequential iterator does,
/// on average.
#[test]
fn c03_iterator_pruning() {
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let data = generate_records(5, 100_000, GenMode::Uniform, 555);
    let dir = TempDir::new().unwrap();
    let store = Store::open(
        Arc::clone(&desc),
        base_config(Scheme::Random, 64 << 10, 10_000),
        dir.path(),
    )
    .unwrap();
    store.feed(FeedInput::Binary(data.into()), 1).unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let mut kd_visited = 0u64;
    let mut seq_visited = 0u64;
    let mut qualifying = 0usize;
    while qualifying < 50 {
        // A small box on every dimension keeps selectivity far below 1%.
        let mut q = RangeQuery::unbounded(&desc, Aggregate::CountAll);
        for d in 0..5 {
            let lo = rng.random_range(0.0f32..0.75);
            q.set_bound(
                d,
                Some(Bound {
                    value: DimValue::Float32(lo),
                    inclusive: true,
                }),
                Some(Bound {
                    value: DimValue::Float32(lo + 0.25),
                    inclusive: true,
                }),
            );
        }
        let kd = store.execute(&q, IteratorKind::KdTree).unwrap();
        let seq = store.execute(&q, IteratorKind::Sequential).unwrap();
        assert_eq!(kd.value, seq.value);
        if kd.stats.matched as f64 >= 0.01 * 100_000.0 {
            continue; // not selective enough to qualify
        }
        qualifying += 1;
        kd_visited += kd.stats.records_visited;
        seq_visited += seq.stats.records_visited;
    }
    let ratio = kd_visited as f64 / seq_visited as f64;
    assert!(
        ratio <= 0.7,
        "kd visited {kd_visited}, seq visited {seq_visited}: ratio {ratio:.3} > 0.7"
    );
    store.close().unwrap();
    pass(
        "C3 iterator-pruning",
        t0,
        format!("{qualifying} selective queries, visit ratio {ratio:.3}"),
    );
}

/// Criterion 4: on clustered data (10 Gaussian clusters, 100K records,
/// chunk 10K, segment 256KB) kd partitioning yields strictly lower mean
/// pairwise overlap than random assignment on at least 4 of 5 seeds, with
/// the overpacking factor tuned so segment counts stay within +-20%.
#[test]
fn c04_overlap_reduction() {
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let mut kd_wins = 0;
    let mut detail = String::new();
    for seed in 0..5u64 {
        let data: Arc<[u8]> = generate_records(
            5,
            100_000,
            GenMode::Clustered {
                clusters: 10,
                stddev: 0.02,
            },
            9_000 + seed,
        )
        .into();
        let mut means = Vec::new();
        let mut counts = Vec::new();
        for scheme in [Scheme::Random, Scheme::KdTree] {
            let dir = TempDir::new().unwrap();
            let mut cfg = base_config(scheme, 256 << 10, 10_000);
            // Tuned so both schemes produce comparable segment counts at
            // this record size (28B): ceil(256KB/28) ~ 9.4K records per
            // segment, against 10K-record chunks.
            cfg.segmentation.overpacking = 1;
            cfg.seed = seed;
            let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();
            store
                .feed(FeedInput::Binary(Arc::clone(&data)), 1)
                .unwrap();
            let rects = store.segment_rects();
            counts.push(rects.len() as f64);
            means.push(mdstore::stats::overlap_stats(&rects).mean);
            store.close().unwrap();
        }
        let count_ratio = counts[1] / counts[0];
        assert!(
            (0.8..=1.2).contains(&count_ratio),
            "segment counts diverged: random {} vs kd {}",
            counts[0],
            counts[1]
        );
        if means[1] < means[0] {
            kd_wins += 1;
        }
        detail.push_str(&format!(
            "[seed {seed}: random {:.1} vs kd {:.1}] ",
            means[0], means[1]
        ));
    }
    assert!(kd_wins >= 4, "kd won only {kd_wins}/5 seeds: {detail}");
    pass(
        "C4 overlap-reduction",
        t0,
        format!("kd lower on {kd_wins}/5 seeds {detail}"),
    );
}

fn throughput_of(desc: &Arc<RecordDescriptor>, cfg: &StoreConfig, data: &Arc<[u8]>, feeders: usize) -> f64 {
    let dir = TempDir::new().unwrap();
    let store = Store::open(Arc::clone(desc), cfg.clone(), dir.path()).unwrap();
    let rep = store.feed(FeedInput::Binary(Arc::clone(data)), feeders).unwrap();
    assert_eq!(rep.first_error(), None);
    let tps = rep.records_per_sec;
    store.close().unwrap();
    tps
}

/// Criterion 5: kd-scheme single-feeder throughput does not improve when the
/// chunk grows from 10K records to 1M (mean of 3 runs each).
#[test]
fn c05_chunk_size_trend() {
    let _gate = perf_gate();
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let data: Arc<[u8]> = generate_records(5, 2_000_000, GenMode::Uniform, 62).into();
    let mut means = Vec::new();
    for chunk in [10_000usize, 1_000_000] {
        let mut cfg = base_config(Scheme::KdTree, 1 << 20, chunk);
        cfg.ingestor_threads = 1;
        let mut total = 0.0;
        for run in 0..3 {
            cfg.seed = run;
            total += throughput_of(&desc, &cfg, &data, 1);
        }
        means.push(total / 3.0);
    }
    assert!(
        means[0] >= means[1],
        "throughput at 10K chunks ({:.0}/s) fell below 1M chunks ({:.0}/s)",
        means[0],
        means[1]
    );
    pass(
        "C5 chunk-size-trend",
        t0,
        format!("10K: {:.0} rec/s >= 1M: {:.0} rec/s", means[0], means[1]),
    );
}

/// Criterion 6: 4-feeder binary ingest reaches at least 2x the 1-feeder
/// throughput (random scheme, median of 3) — asserted on machines with at
/// least 4 cores, reported otherwise.
#[test]
fn c06_thread_scaling_trend() {
    let _gate = perf_gate();
    let t0 = Instant::now();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let desc = synthetic_descriptor(5);
    let data: Arc<[u8]> = generate_records(5, 1_000_000, GenMode::Uniform, 63).into();
    let cfg = base_config(Scheme::Random, 1 << 20, 10_000);
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let one = median((0..3).map(|_| throughput_of(&desc, &cfg, &data, 1)).collect());
    let four = median((0..3).map(|_| throughput_of(&desc, &cfg, &data, 4)).collect());
    let speedup = four / one;
    if cores >= 4 {
        assert!(
            speedup >= 2.0,
            "4-feeder speedup {speedup:.2}x below 2.0x on a {cores}-core machine"
        );
        pass(
            "C6 thread-scaling",
            t0,
            format!("{speedup:.2}x with 4 feeders on {cores} cores"),
        );
    } else {
        // The criterion presumes >= 4 cores; report the measurement instead
        // of asserting a bound this hardware cannot express.
        println!(
            "ACCEPTANCE C6 thread-scaling: SKIPPED-ASSERT ({:.2?}) only {cores} cores; measured {speedup:.2}x (1 feeder {one:.0} rec/s, 4 feeders {four:.0} rec/s)",
            t0.elapsed()
        );
    }
}

/// Criterion 7: binary-path ingest throughput is at least 2x the CSV path at
/// 10K-record chunks.
#[test]
fn c07_binary_vs_csv_gap() {
    let _gate = perf_gate();
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let binary = generate_records(5, 200_000, GenMode::Uniform, 64);
    let rec_size = desc.record_size();
    let mut csv_text = String::with_capacity(binary.len() * 2);
    for rec in binary.chunks_exact(rec_size) {
        let seq = i64::from_le_bytes(rec[0..8].try_into().unwrap());
        csv_text.push_str(&seq.to_string());
        for d in 0..5 {
            csv_text.push(',');
            let v = f32::from_le_bytes(rec[8 + 4 * d..12 + 4 * d].try_into().unwrap());
            csv_text.push_str(&v.to_string());
        }
        csv_text.push('\n');
    }

    let cfg = base_config(Scheme::Random, 1 << 20, 10_000);
    let data: Arc<[u8]> = binary.into();
    let bin_tps = throughput_of(&desc, &cfg, &data, 1);

    let dir = TempDir::new().unwrap();
    let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();
    let rep = store.feed(FeedInput::Csv(&csv_text), 1).unwrap();
    assert_eq!(rep.first_error(), None);
    assert_eq!(rep.records, 200_000);
    let csv_tps = rep.records_per_sec;
    store.close().unwrap();

    let ratio = bin_tps / csv_tps;
    assert!(
        ratio >= 2.0,
        "binary path only {ratio:.2}x the CSV path ({bin_tps:.0} vs {csv_tps:.0} rec/s)"
    );
    pass(
        "C7 binary-vs-csv",
        t0,
        format!("{ratio:.2}x (binary {bin_tps:.0} vs csv {csv_tps:.0} rec/s)"),
    );
}

/// Criterion 8: with a 10 s writer period, a chunk is queryable immediately
/// after ingest while no segment file exists; after one writer tick the
/// files exist and results are unchanged.
#[test]
fn c08_availability_before_persistence() {
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let dir = TempDir::new().unwrap();
    let mut cfg = base_config(Scheme::Random, 1 << 20, 10_000);
    cfg.writer_period = Duration::from_secs(10);
    let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();

    let data: Arc<[u8]> = generate_records(5, 10_000, GenMode::Uniform, 65).into();
    let chunk = store.chunk_from_bytes(data, 0, 10_000).unwrap();
    let uuids = store.ingest_chunk(chunk).unwrap();

    let count_files = |dir: &std::path::Path| {
        std::fs::read_dir(dir)
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().and_then(|s| s.to_str()) == Some("mdseg")
            })
            .count()
    };
    let q = RangeQuery::unbounded(&desc, Aggregate::None);
    let (rows_before, _) = store.scan_raw(&q, IteratorKind::KdTree).unwrap();
    assert_eq!(rows_before.len(), 10_000);
    assert_eq!(count_files(dir.path()), 0, "no file may exist yet");

    assert_eq!(store.writer_tick(), uuids.len());
    assert_eq!(count_files(dir.path()), uuids.len());
    let (rows_after, _) = store.scan_raw(&q, IteratorKind::Sequential).unwrap();
    assert_eq!(sorted(rows_before), sorted(rows_after));
    store.close().unwrap();
    pass(
        "C8 availability-before-persistence",
        t0,
        format!("{} segments visible pre-write", uuids.len()),
    );
}

/// Criterion 9: 4 feeders and 4 query loops run concurrently for 30 s; the
/// crate forbids unsafe code (no data races or use-after-free are
/// expressible outside the checked std/parking_lot primitives), queries stay
/// internally consistent throughout, and at quiescence every ingested record
/// is queryable exactly once.
#[test]
fn c09_concurrency_safety() {
    let _gate = perf_gate();
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let dir = TempDir::new().unwrap();
    let mut cfg = base_config(Scheme::KdTree, 128 << 10, 5_000);
    cfg.writer_period = Duration::from_millis(25);
    cfg.writer_threads = 2;
    cfg.cache_capacity = 1 << 22; // small enough to force eviction traffic
    let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();

    let deadline = Instant::now() + Duration::from_secs(30);
    let ingested = AtomicU64::new(0);
    let queries_run = AtomicU64::new(0);
    let stop = AtomicBool::new(false);

    std::thread::scope(|s| {
        for f in 0..4usize {
            let store = &store;
            let ingested = &ingested;
            s.spawn(move || {
                let mut round = 0u64;
                while Instant::now() < deadline {
                    let data: Arc<[u8]> = generate_records(
                        5,
                        5_000,
                        GenMode::Uniform,
                        (f as u64) << 32 | round,
                    )
                    .into();
                    let chunk = store.chunk_from_bytes(data, 0, 5_000).unwrap();
                    store.ingest_chunk(chunk).unwrap();
                    ingested.fetch_add(5_000, Ordering::Relaxed);
                    round += 1;
                }
            });
        }
        for qthread in 0..4usize {
            let store = &store;
            let stop = &stop;
            let queries_run = &queries_run;
            let desc = Arc::clone(&desc);
            s.spawn(move || {
                let mut rng = ChaCha12Rng::seed_from_u64(qthread as u64);
                let mut i = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    // Fully bounded small boxes keep queries fast, so the
                    // loop exercises many acquire/load/evict interleavings.
                    let mut q = random_box_query(&desc, &mut rng, 1.0, 0.2);
                    q.aggregate = Aggregate::CountAll;
                    let kind = if i.is_multiple_of(2) {
                        IteratorKind::KdTree
                    } else {
                        IteratorKind::Sequential
                    };
                    let got = store.execute(&q, kind).unwrap();
                    let QueryValue::Count(_) = got.value else {
                        panic!("unexpected value")
                    };
                    i += 1;
                    queries_run.fetch_add(1, Ordering::Relaxed);
                }
            });
        }
        // Feeders finish at the deadline; then stop the query loops.
        while Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(100));
        }
        stop.store(true, Ordering::Relaxed);
    });

    // Quiescence: conservation. Every ingested record is queryable once.
    let total = ingested.load(Ordering::Relaxed);
    let q = RangeQuery::unbounded(&desc, Aggregate::CountAll);
    for kind in [IteratorKind::KdTree, IteratorKind::Sequential] {
        let got = store.execute(&q, kind).unwrap();
        assert_eq!(got.value, QueryValue::Count(total), "conservation via {kind}");
    }
    assert_eq!(store.records_ingested(), total);
    store.validate_index().unwrap();
    store.close().unwrap();
    pass(
        "C9 concurrency-safety",
        t0,
        format!(
            "{total} records through 4 feeders, {} queries through 4 loops",
            queries_run.load(Ordering::Relaxed)
        ),
    );
}

/// Criterion 10: query results are identical with cache capacity 0, one
/// segment, and unbounded; a repeated query pass yields at least as many
/// hits once the capacity exceeds the working set.
#[test]
fn c10_cache_transparency() {
    let t0 = Instant::now();
    let desc = synthetic_descriptor(5);
    let dir = TempDir::new().unwrap();
    let seg_size: u64 = 64 << 10;
    {
        let store = Store::open(
            Arc::clone(&desc),
            base_config(Scheme::Random, seg_size, 10_000),
            dir.path(),
        )
        .unwrap();
        let data = generate_records(5, 50_000, GenMode::Uniform, 66);
        store.feed(FeedInput::Binary(data.into()), 1).unwrap();
        store.close().unwrap(); // drain: everything persisted
    }

    let queries: Vec<RangeQuery> = {
        let mut rng = ChaCha12Rng::seed_from_u64(4242);
        (0..60)
            .map(|_| {
                let mut q = random_box_query(&desc, &mut rng, 0.5, 0.4);
                q.aggregate = Aggregate::CountAll;
                q
            })
            .collect()
    };

    let mut all_answers: Vec<Vec<QueryValue>> = Vec::new();
    for capacity in [0u64, 3 * seg_size, u64::MAX] {
        let mut cfg = base_config(Scheme::Random, seg_size, 10_000);
        cfg.cache_capacity = capacity;
        let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();
        let mut answers = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            let kind = if i % 2 == 0 {
                IteratorKind::KdTree
            } else {
                IteratorKind::Sequential
            };
            answers.push(store.execute(q, kind).unwrap().value);
        }
        if capacity == u64::MAX {
            // Repeat pass: with capacity above the working set the second
            // pass must hit at least as often as the first.
            let first = store.cache_stats();
            for (i, q) in queries.iter().enumerate() {
                let kind = if i % 2 == 0 {
                    IteratorKind::KdTree
                } else {
                    IteratorKind::Sequential
                };
                assert_eq!(store.execute(q, kind).unwrap().value, answers[i]);
            }
            let second = store.cache_stats();
            let first_pass_hits = first.hits;
            let second_pass_hits = second.hits - first.hits;
            assert!(
                second_pass_hits >= first_pass_hits,
                "second pass hits {second_pass_hits} < first pass {first_pass_hits}"
            );
            assert_eq!(second.misses, first.misses, "warm pass must not miss");
        }
        all_answers.push(answers);
        store.close().unwrap();
    }
    assert_eq!(all_answers[0], all_answers[1], "capacity 0 vs one-segment");
    assert_eq!(all_answers[0], all_answers[2], "capacity 0 vs unbounded");
    pass(
        "C10 cache-transparency",
        t0,
        format!("{} queries identical across 3 capacities", queries.len()),
    );
}
