//! End-to-end ingestion pipeline behavior: availability before persistence,
//! restart recovery, writer interleavings, retry idempotence, and
//! conservation across feeder configurations.

use std::sync::Arc;
use std::time::Duration;

use mdstore::query::Aggregate;
use mdstore::store::FeedInput;
use mdstore::synth::{generate_records, synthetic_descriptor, GenMode};
use mdstore::{
    Chunk, Error, IteratorKind, QueryValue, RangeQuery, Scheme, SegmentationConfig, Store,
    StoreConfig,
};
use tempfile::TempDir;

fn test_config(scheme: Scheme, segment_size: u64) -> StoreConfig {
    StoreConfig {
        scheme,
        segmentation: SegmentationConfig {
            max_segment_size: segment_size,
            overpacking: 4,
            median_samples: 3,
        },
        max_chunk_records: 2_000,
        ingestor_threads: 2,
        writer_threads: 1,
        writer_period: Duration::from_millis(20),
        writer_batch_max: 64,
        high_water_mark: 10_000,
        cache_capacity: 1 << 26,
        seed: 11,
    }
}

fn count_all(store: &Store) -> u64 {
    let q = RangeQuery::unbounded(store.desc(), Aggregate::CountAll);
    match store.execute(&q, IteratorKind::KdTree).unwrap().value {
        QueryValue::Count(n) => n,
        other => panic!("unexpected value {other:?}"),
    }
}

fn mdseg_files(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("mdseg"))
        .collect()
}

#[test]
fn ingest_and_query_both_schemes() {
    let desc = synthetic_descriptor(5);
    let data: Arc<[u8]> = generate_records(5, 20_000, GenMode::Uniform, 42).into();
    for scheme in [Scheme::Random, Scheme::KdTree] {
        let dir = TempDir::new().unwrap();
        let store = Store::open(
            Arc::clone(&desc),
            test_config(scheme, 16 << 10),
            dir.path(),
        )
        .unwrap();
        let report = store.feed(FeedInput::Binary(Arc::clone(&data)), 1).unwrap();
        assert_eq!(report.first_error(), None);
        assert_eq!(report.records, 20_000);
        assert!(report.segments > 1, "scheme {scheme} made one segment");
        assert_eq!(count_all(&store), 20_000, "conservation under {scheme}");
        store.close().unwrap();
    }
}

#[test]
fn availability_before_persistence() {
    let desc = synthetic_descriptor(3);
    let dir = TempDir::new().unwrap();
    let mut cfg = test_config(Scheme::Random, 1 << 20);
    cfg.writer_period = Duration::from_secs(10);
    let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();

    let data: Arc<[u8]> = generate_records(3, 1_000, GenMode::Uniform, 7).into();
    let chunk = store.chunk_from_bytes(Arc::clone(&data), 0, 1_000).unwrap();
    let uuids = store.ingest_chunk(chunk).unwrap();
    assert!(!uuids.is_empty());

    // Queryable from memory while nothing has been written yet.
    assert_eq!(mdseg_files(dir.path()).len(), 0);
    assert_eq!(count_all(&store), 1_000);

    // One manual writer pass persists everything; results are unchanged.
    let wrote = store.writer_tick();
    assert_eq!(wrote, uuids.len());
    assert_eq!(mdseg_files(dir.path()).len(), uuids.len());
    assert_eq!(count_all(&store), 1_000);
    store.close().unwrap();
}

#[test]
fn restart_recovery_rebuilds_index() {
    let desc = synthetic_descriptor(4);
    let dir = TempDir::new().unwrap();
    let data: Arc<[u8]> = generate_records(4, 5_000, GenMode::Uniform, 3).into();

    let store = Store::open(
        Arc::clone(&desc),
        test_config(Scheme::KdTree, 8 << 10),
        dir.path(),
    )
    .unwrap();
    store.feed(FeedInput::Binary(Arc::clone(&data)), 1).unwrap();
    let segs = store.segment_count();
    let (mut before, _) = store
        .scan_raw(
            &RangeQuery::unbounded(&desc, Aggregate::None),
            IteratorKind::Sequential,
        )
        .unwrap();
    store.close().unwrap();
    drop(store);

    let store = Store::open(
        Arc::clone(&desc),
        test_config(Scheme::KdTree, 8 << 10),
        dir.path(),
    )
    .unwrap();
    assert_eq!(store.segment_count(), segs);
    assert_eq!(count_all(&store), 5_000);
    let (mut after, _) = store
        .scan_raw(
            &RangeQuery::unbounded(&desc, Aggregate::None),
            IteratorKind::KdTree,
        )
        .unwrap();
    before.sort();
    after.sort();
    assert_eq!(before, after);
}

#[test]
fn chunk_validation_errors() {
    let desc = synthetic_descriptor(3);
    let dir = TempDir::new().unwrap();
    let store = Store::open(Arc::clone(&desc), test_config(Scheme::Random, 1 << 20), dir.path())
        .unwrap();

    // Wrong descriptor uuid.
    let other = synthetic_descriptor(4);
    let bytes: Arc<[u8]> = generate_records(4, 10, GenMode::Uniform, 1).into();
    let chunk = Chunk::new(Arc::clone(&bytes), 0, 10, Arc::clone(&other)).unwrap();
    assert!(matches!(
        store.ingest_chunk(chunk),
        Err(Error::DescriptorMismatch { .. })
    ));
    assert_eq!(store.segment_count(), 0, "failed ingest must not index");

    // Oversize chunk.
    let big: Arc<[u8]> = generate_records(3, 2_001, GenMode::Uniform, 1).into();
    let chunk = Chunk::new(big, 0, 2_001, Arc::clone(&desc)).unwrap();
    assert!(matches!(
        store.ingest_chunk(chunk),
        Err(Error::OversizeChunk { got: 2001, max: 2000 })
    ));

    // NaN in an indexing dimension.
    let mut bytes = generate_records(3, 4, GenMode::Uniform, 1);
    let rec_size = desc.record_size();
    bytes[2 * rec_size + 8..2 * rec_size + 12].copy_from_slice(&f32::NAN.to_le_bytes());
    let chunk = Chunk::from_vec(bytes, Arc::clone(&desc)).unwrap();
    match store.ingest_chunk(chunk) {
        Err(Error::BadRecord { index: 2, .. }) => {}
        other => panic!("expected BadRecord at index 2, got {other:?}"),
    }
    assert_eq!(store.segment_count(), 0);
}

#[test]
fn persisted_segment_stays_resident_while_held() {
    let desc = synthetic_descriptor(3);
    let dir = TempDir::new().unwrap();
    let mut cfg = test_config(Scheme::Random, 1 << 20);
    cfg.writer_period = Duration::from_secs(10);
    let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();

    let data: Arc<[u8]> = generate_records(3, 500, GenMode::Uniform, 5).into();
    let chunk = store.chunk_from_bytes(data, 0, 500).unwrap();
    let uuids = store.ingest_chunk(chunk).unwrap();
    assert_eq!(uuids.len(), 1);
    let reference = store.segment_reference(&uuids[0]).unwrap();

    // A query holds the segment while the writer persists it.
    let q = RangeQuery::unbounded(&desc, Aggregate::None);
    let cursor = store.open_cursor(&q).unwrap();
    assert_eq!(reference.usage(), 1);

    std::thread::scope(|s| {
        let t = s.spawn(|| store.writer_tick());
        // Persisted but still resident: the unload waits on the cursor.
        std::thread::sleep(Duration::from_millis(50));
        assert!(reference.is_persisted());
        assert!(reference.resident_handle().is_some());
        assert!(!t.is_finished(), "writer must wait for the usage count");
        drop(cursor);
        assert_eq!(t.join().unwrap(), 1);
    });
    assert!(reference.resident_handle().is_none());
    assert_eq!(
        mdseg_files(dir.path()).len(),
        1,
        "segment persisted exactly once"
    );
    store.close().unwrap();
}

#[test]
fn write_failure_retries_once_per_segment() {
    let desc = synthetic_descriptor(3);
    let dir = TempDir::new().unwrap();
    let mut cfg = test_config(Scheme::Random, 1 << 20);
    cfg.writer_period = Duration::from_secs(10);
    let store = Store::open(Arc::clone(&desc), cfg, dir.path()).unwrap();

    let data: Arc<[u8]> = generate_records(3, 100, GenMode::Uniform, 5).into();
    let chunk = store.chunk_from_bytes(data, 0, 100).unwrap();
    let uuids = store.ingest_chunk(chunk).unwrap();
    assert_eq!(uuids.len(), 1);

    // Obstruct the target path so the atomic rename fails.
    let final_path = dir.path().join(format!("{}.mdseg", uuids[0]));
    std::fs::create_dir(&final_path).unwrap();
    assert_eq!(store.writer_tick(), 0);
    assert!(store.write_failures() >= 1);
    assert_eq!(store.persistence_backlog(), 1, "failed write stays queued");
    assert_eq!(count_all(&store), 100, "segment still answers from memory");

    // Clear the obstruction; the close-time drain retries and succeeds.
    std::fs::remove_dir(&final_path).unwrap();
    store.close().unwrap();
    let files = mdseg_files(dir.path());
    assert_eq!(files, vec![final_path], "exactly one file per segment");
}

#[test]
fn feeder_count_does_not_change_stored_data() {
    let desc = synthetic_descriptor(4);
    let data: Arc<[u8]> = generate_records(4, 12_000, GenMode::Uniform, 9).into();
    let mut multisets = Vec::new();
    for feeders in [1usize, 2] {
        let dir = TempDir::new().unwrap();
        let store = Store::open(
            Arc::clone(&desc),
            test_config(Scheme::Random, 16 << 10),
            dir.path(),
        )
        .unwrap();
        let rep = store
            .feed(FeedInput::Binary(Arc::clone(&data)), feeders)
            .unwrap();
        assert_eq!(rep.first_error(), None);
        assert_eq!(rep.records, 12_000);
        assert_eq!(rep.per_feeder.len(), feeders);
        let (mut rows, _) = store
            .scan_raw(
                &RangeQuery::unbounded(&desc, Aggregate::None),
                IteratorKind::Sequential,
            )
            .unwrap();
        rows.sort();
        multisets.push(rows);
        store.close().unwrap();
    }
    assert_eq!(multisets[0], multisets[1]);
}

#[test]
fn csv_and_binary_ingest_store_identical_records() {
    let desc = synthetic_descriptor(3);
    let binary = generate_records(3, 3_000, GenMode::Uniform, 13);
    let rec_size = desc.record_size();

    // Render the same records as CSV (float Display round-trips exactly).
    let mut csv_text = String::new();
    for i in 0..3_000 {
        let rec = &binary[i * rec_size..(i + 1) * rec_size];
        let seq = i64::from_le_bytes(rec[0..8].try_into().unwrap());
        csv_text.push_str(&seq.to_string());
        for d in 0..3 {
            let v = f32::from_le_bytes(rec[8 + 4 * d..12 + 4 * d].try_into().unwrap());
            csv_text.push(',');
            csv_text.push_str(&v.to_string());
        }
        csv_text.push('\n');
    }

    let mut stored = Vec::new();
    for input_is_csv in [false, true] {
        let dir = TempDir::new().unwrap();
        let store = Store::open(
            Arc::clone(&desc),
            test_config(Scheme::KdTree, 8 << 10),
            dir.path(),
        )
        .unwrap();
        let rep = match input_is_csv {
            true => store.feed(FeedInput::Csv(&csv_text), 2).unwrap(),
            false => store
                .feed(FeedInput::Binary(binary.clone().into()), 2)
                .unwrap(),
        };
        assert_eq!(rep.first_error(), None);
        assert_eq!(rep.records, 3_000);
        let (mut rows, _) = store
            .scan_raw(
                &RangeQuery::unbounded(&desc, Aggregate::None),
                IteratorKind::Sequential,
            )
            .unwrap();
        rows.sort();
        stored.push(rows);
        store.close().unwrap();
    }
    assert_eq!(stored[0], stored[1], "CSV and binary paths must agree");
}

#[test]
fn csv_decode_error_aborts_owning_feeder_with_partial_report() {
    let desc = synthetic_descriptor(3);
    let dir = TempDir::new().unwrap();
    let store = Store::open(Arc::clone(&desc), test_config(Scheme::Random, 1 << 20), dir.path())
        .unwrap();
    let csv_text = "1,0.5,0.5,0.5\n2,0.6,0.6,0.6\n3,oops,0.7,0.7\n4,0.8,0.8,0.8\n";
    let rep = store.feed(FeedInput::Csv(csv_text), 1).unwrap();
    assert!(rep.first_error().is_some());
    assert_eq!(rep.records, 2, "rows before the bad cell were ingested");
}
