//! The embeddable store: ingestion pipeline, asynchronous persistence, and
//! query execution over the two-level index.
//!
//! `ingest_chunk` drives the write path end to end: segmentation, segment
//! assembly, insertion into the global index (segments are queryable from
//! memory before any byte hits disk), and hand-off to writer threads through
//! a bounded FIFO queue. Queries search the index, pin the overlapping
//! segments, and iterate them with either record iterator.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TryRecvError};
use parking_lot::{Condvar, Mutex};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::index::{GlobalIndex, SegmentReference};
use crate::kdtree::NodePool;
use crate::query::{
    iterate_segment, Aggregator, IteratorKind, QueryResult, QueryStats, RangeQuery,
};
use crate::record::{DescriptorRegistry, RecordDescriptor};
use crate::segment::{assemble, DataSegment};
use crate::segmentation::{segment_kdtree, segment_random, Chunk, Scheme, SegmentationConfig};
use crate::storage::{CacheStats, SegmentAccess, SegmentCache, SegmentStore};

/// Store configuration. All counts must be at least 1.
#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub scheme: Scheme,
    pub segmentation: SegmentationConfig,
    /// Maximum chunk size, as a record count.
    pub max_chunk_records: usize,
    /// Maximum number of tasks concurrently inside `ingest_chunk`; sizes the
    /// kd-node pool.
    pub ingestor_threads: usize,
    pub writer_threads: usize,
    /// Writer activation period.
    pub writer_period: Duration,
    /// Maximum segments a writer persists per wakeup.
    pub writer_batch_max: usize,
    /// Ingestion blocks while this many segments await persistence.
    pub high_water_mark: usize,
    pub cache_capacity: u64,
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            scheme: Scheme::Random,
            segmentation: SegmentationConfig::default(),
            max_chunk_records: 10_000,
            ingestor_threads: 1,
            writer_threads: 1,
            writer_period: Duration::from_millis(500),
            writer_batch_max: 64,
            high_water_mark: 10_000,
            cache_capacity: 1 << 30,
            seed: 0,
        }
    }
}

impl StoreConfig {
    fn validate(&self, desc: &RecordDescriptor) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.max_chunk_records < 1
            || self.ingestor_threads < 1
            || self.writer_threads < 1
            || self.writer_batch_max < 1
            || self.high_water_mark < 1
        {
            return bad("counts must be >= 1");
        }
        if self.writer_period.is_zero() {
            return bad("writer_period must be > 0");
        }
        if self.segmentation.overpacking < 1 {
            return bad("overpacking must be >= 1");
        }
        if self.segmentation.median_samples < 1 || self.segmentation.median_samples.is_multiple_of(2) {
            return bad("median_samples must be odd and >= 1");
        }
        if self.segmentation.max_segment_size < desc.record_size() as u64 {
            return bad("max_segment_size must hold at least one record");
        }
        Ok(())
    }
}

struct WriteEntry {
    reference: Arc<SegmentReference>,
    attempts: u32,
    due: Instant,
}

struct Shared {
    desc: Arc<RecordDescriptor>,
    cfg: StoreConfig,
    pool: Arc<NodePool>,
    index: GlobalIndex,
    access: SegmentAccess,
    queue_tx: Sender<WriteEntry>,
    queue_rx: Receiver<WriteEntry>,
    retry: Mutex<VecDeque<WriteEntry>>,
    shutdown: AtomicBool,
    wake: Mutex<()>,
    wake_cv: Condvar,
    chunk_seq: AtomicU64,
    records_ingested: AtomicU64,
    chunks_ingested: AtomicU64,
    segments_created: AtomicU64,
    write_failures: AtomicU64,
}

/// A single-node multidimensional data store bound to one record descriptor
/// and one data directory.
pub struct Store {
    shared: Arc<Shared>,
    writers: Mutex<Vec<std::thread::JoinHandle<()>>>,
    closed: AtomicBool,
}

impl Store {
    /// Open (or create) a store. Existing segment files are scanned to
    /// rebuild the in-memory index.
    pub fn open(
        desc: Arc<RecordDescriptor>,
        cfg: StoreConfig,
        data_dir: impl Into<PathBuf>,
    ) -> Result<Store> {
        cfg.validate(&desc)?;
        let files = SegmentStore::open(data_dir)?;
        let registry = DescriptorRegistry::with(Arc::clone(&desc));
        let cache = SegmentCache::new(cfg.cache_capacity);
        let access = SegmentAccess::new(files, cache, registry);
        let pool = NodePool::new(cfg.max_chunk_records, cfg.ingestor_threads)?;
        let index = GlobalIndex::new();

        // Restart recovery: every persisted segment re-enters the index in
        // the unloaded state.
        for uuid in access.files.list()? {
            let seg = access.files.read(uuid, access.registry())?;
            index.insert(SegmentReference::new_unloaded(uuid, seg.bounds().clone()));
        }

        let (queue_tx, queue_rx) = bounded(cfg.high_water_mark);
        let shared = Arc::new(Shared {
            desc,
            cfg,
            pool,
            index,
            access,
            queue_tx,
            queue_rx,
            retry: Mutex::new(VecDeque::new()),
            shutdown: AtomicBool::new(false),
            wake: Mutex::new(()),
            wake_cv: Condvar::new(),
            chunk_seq: AtomicU64::new(0),
            records_ingested: AtomicU64::new(0),
            chunks_ingested: AtomicU64::new(0),
            segments_created: AtomicU64::new(0),
            write_failures: AtomicU64::new(0),
        });

        let mut writers = Vec::new();
        for i in 0..shared.cfg.writer_threads {
            let sh = Arc::clone(&shared);
            writers.push(
                std::thread::Builder::new()
                    .name(format!("seg-writer-{i}"))
                    .spawn(move || writer_loop(&sh))
                    .expect("spawn writer thread"),
            );
        }

        Ok(Store {
            shared,
            writers: Mutex::new(writers),
            closed: AtomicBool::new(false),
        })
    }

    pub fn desc(&self) -> &Arc<RecordDescriptor> {
        &self.shared.desc
    }

    pub fn config(&self) -> &StoreConfig {
        &self.shared.cfg
    }

    pub fn data_dir(&self) -> &Path {
        self.shared.access.files.dir()
    }

    pub fn segment_count(&self) -> usize {
        self.shared.index.len()
    }

    pub fn records_ingested(&self) -> u64 {
        self.shared.records_ingested.load(Ordering::Relaxed)
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.shared.access.cache.stats()
    }

    pub fn storage_reads(&self) -> u64 {
        self.shared.access.files.read_count()
    }

    pub fn write_failures(&self) -> u64 {
        self.shared.write_failures.load(Ordering::Relaxed)
    }

    /// Pending persistence work (queued plus awaiting retry).
    pub fn persistence_backlog(&self) -> usize {
        self.shared.queue_rx.len() + self.shared.retry.lock().len()
    }

    /// Bounding rectangles of every indexed segment.
    pub fn segment_rects(&self) -> Vec<(Uuid, crate::geom::Hyperrectangle)> {
        self.shared
            .index
            .all()
            .into_iter()
            .map(|r| (r.uuid(), r.rect().clone()))
            .collect()
    }

    pub fn segment_reference(&self, uuid: &Uuid) -> Option<Arc<SegmentReference>> {
        self.shared.index.get(uuid)
    }

    /// Verify the global index shape invariants; test support.
    pub fn validate_index(&self) -> std::result::Result<usize, String> {
        self.shared.index.check_invariants()
    }

    /// Build a chunk over caller-provided binary records.
    pub fn chunk_from_bytes(&self, data: Arc<[u8]>, offset: usize, count: usize) -> Result<Chunk> {
        Ok(Chunk::new(data, offset, count, Arc::clone(&self.shared.desc))?)
    }

    /// Ingest one chunk end to end. On return every produced segment is
    /// searchable through the index (availability before persistence) and
    /// queued for asynchronous writing. Returns the new segment ids.
    pub fn ingest_chunk(&self, chunk: Chunk) -> Result<Vec<Uuid>> {
        let seq = self.shared.chunk_seq.fetch_add(1, Ordering::Relaxed);
        let seed = mix_seed(self.shared.cfg.seed, 0x0C, seq);
        self.ingest_chunk_seeded(chunk, seed)
    }

    fn ingest_chunk_seeded(&self, chunk: Chunk, seed: u64) -> Result<Vec<Uuid>> {
        let sh = &self.shared;
        if sh.shutdown.load(Ordering::Acquire) {
            return Err(Error::ShutDown);
        }
        if chunk.desc().type_uuid() != sh.desc.type_uuid() {
            return Err(Error::DescriptorMismatch {
                got: chunk.desc().type_uuid(),
                expected: sh.desc.type_uuid(),
            });
        }
        if chunk.count() > sh.cfg.max_chunk_records {
            return Err(Error::OversizeChunk {
                got: chunk.count(),
                max: sh.cfg.max_chunk_records,
            });
        }
        // NaN would corrupt every tree order downstream; reject it here.
        if sh.desc.dims().iter().any(|d| d.kind == crate::record::DimKind::Float32) {
            for i in 0..chunk.count() as u32 {
                sh.desc
                    .check_dims_finite(chunk.record(i))
                    .map_err(|source| Error::BadRecord {
                        index: i as u64,
                        source,
                    })?;
            }
        }

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let plan = match sh.cfg.scheme {
            Scheme::Random => segment_random(&chunk, &sh.cfg.segmentation, &mut rng),
            Scheme::KdTree => segment_kdtree(&chunk, &sh.cfg.segmentation, &sh.pool, &mut rng)?,
        };

        let mut uuids = Vec::with_capacity(plan.groups.len());
        for group in plan.groups.iter().filter(|g| !g.records.is_empty()) {
            let seg = Arc::new(assemble(&chunk, group, &sh.pool, &mut rng)?);
            let uuid = seg.segment_uuid();
            let reference = SegmentReference::new_resident(seg);
            sh.index.insert(Arc::clone(&reference));
            // Blocking send applies back-pressure at the high-water mark.
            sh.queue_tx
                .send(WriteEntry {
                    reference,
                    attempts: 0,
                    due: Instant::now(),
                })
                .map_err(|_| Error::ShutDown)?;
            uuids.push(uuid);
        }
        sh.records_ingested
            .fetch_add(chunk.count() as u64, Ordering::Relaxed);
        sh.chunks_ingested.fetch_add(1, Ordering::Relaxed);
        sh.segments_created
            .fetch_add(uuids.len() as u64, Ordering::Relaxed);
        Ok(uuids)
    }

    /// Run one writer pass on the caller's thread: dequeue up to
    /// `writer_batch_max` segments, persist them, and unload the ones the
    /// cache does not hold. Returns how many segments were written.
    pub fn writer_tick(&self) -> usize {
        writer_tick(&self.shared, false)
    }

    /// Feed a whole input across `feeders` concurrent feeder threads, each
    /// submitting chunks of at most `max_chunk_records` records.
    pub fn feed(&self, input: FeedInput<'_>, feeders: usize) -> Result<FeedReport> {
        if feeders < 1 || feeders > self.shared.cfg.ingestor_threads {
            return Err(Error::Config(format!(
                "feeders must be in 1..={} (ingestor_threads)",
                self.shared.cfg.ingestor_threads
            )));
        }
        let segments_before = self.shared.segments_created.load(Ordering::Relaxed);
        let start = Instant::now();
        let per_feeder = match input {
            FeedInput::Binary(data) => self.feed_binary(data, feeders)?,
            FeedInput::Csv(text) => self.feed_csv(text, feeders),
        };
        let elapsed = start.elapsed();
        let records: u64 = per_feeder.iter().map(|f| f.records).sum();
        let chunks: u64 = per_feeder.iter().map(|f| f.chunks).sum();
        let segments = self.shared.segments_created.load(Ordering::Relaxed) - segments_before;
        Ok(FeedReport {
            records,
            chunks,
            segments,
            elapsed,
            records_per_sec: records as f64 / elapsed.as_secs_f64().max(1e-9),
            per_feeder,
        })
    }

    fn feed_binary(&self, data: Arc<[u8]>, feeders: usize) -> Result<Vec<FeederReport>> {
        let r = self.shared.desc.record_size();
        if !data.len().is_multiple_of(r) {
            return Err(Error::Chunk(crate::segmentation::ChunkError::Misaligned {
                len: data.len(),
                record_size: r,
            }));
        }
        let total = data.len() / r;
        let ranges = even_ranges(total, feeders);
        let max_chunk = self.shared.cfg.max_chunk_records;
        let reports: Vec<FeederReport> = std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .into_iter()
                .enumerate()
                .map(|(fi, range)| {
                    let data = Arc::clone(&data);
                    s.spawn(move || {
                        let t0 = Instant::now();
                        let mut rep = FeederReport::new(fi);
                        let mut at = range.start;
                        let mut chunk_idx = 0u64;
                        while at < range.end {
                            let count = max_chunk.min(range.end - at);
                            let chunk = match self.chunk_from_bytes(Arc::clone(&data), at * r, count)
                            {
                                Ok(c) => c,
                                Err(e) => {
                                    rep.error = Some(e.to_string());
                                    break;
                                }
                            };
                            let seed =
                                mix_seed(self.shared.cfg.seed, fi as u64 + 1, chunk_idx);
                            if let Err(e) = self.ingest_chunk_seeded(chunk, seed) {
                                rep.error = Some(e.to_string());
                                break;
                            }
                            rep.records += count as u64;
                            rep.chunks += 1;
                            chunk_idx += 1;
                            at += count;
                        }
                        rep.elapsed = t0.elapsed();
                        rep
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        Ok(reports)
    }

    fn feed_csv(&self, text: &str, feeders: usize) -> Vec<FeederReport> {
        // Split on line boundaries into roughly even byte slices.
        let mut cuts = vec![0usize];
        let step = (text.len() / feeders).max(1);
        for i in 1..feeders {
            let mut at = (i * step).min(text.len());
            while at < text.len() && text.as_bytes()[at] != b'\n' {
                at += 1;
            }
            at = (at + 1).min(text.len());
            cuts.push(at);
        }
        cuts.push(text.len());
        cuts.dedup();
        while cuts.len() < feeders + 1 {
            cuts.push(text.len());
        }

        let max_chunk = self.shared.cfg.max_chunk_records;
        let r = self.shared.desc.record_size();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..feeders)
                .map(|fi| {
                    let slice = &text[cuts[fi]..cuts[fi + 1]];
                    s.spawn(move || {
                        let t0 = Instant::now();
                        let mut rep = FeederReport::new(fi);
                        let mut reader = csv::ReaderBuilder::new()
                            .has_headers(false)
                            .flexible(true)
                            .from_reader(slice.as_bytes());
                        let mut buf: Vec<u8> = Vec::with_capacity(max_chunk * r);
                        let mut pending = 0usize;
                        let mut chunk_idx = 0u64;
                        let flush = |buf: &mut Vec<u8>,
                                         pending: &mut usize,
                                         chunk_idx: &mut u64|
                         -> Result<()> {
                            if *pending == 0 {
                                return Ok(());
                            }
                            let chunk = Chunk::from_vec(
                                std::mem::take(buf),
                                Arc::clone(&self.shared.desc),
                            )?;
                            let seed =
                                mix_seed(self.shared.cfg.seed, 0x100 + fi as u64, *chunk_idx);
                            self.ingest_chunk_seeded(chunk, seed)?;
                            *chunk_idx += 1;
                            *pending = 0;
                            Ok(())
                        };
                        for row in reader.records() {
                            let encoded = row
                                .map_err(|e| Error::Config(format!("csv: {e}")))
                                .and_then(|rec| {
                                    let cells: Vec<&str> = rec.iter().collect();
                                    crate::record::encode_csv_row(&cells, &self.shared.desc)
                                        .map_err(|source| Error::BadRecord {
                                            index: rep.records,
                                            source,
                                        })
                                });
                            match encoded {
                                Ok(bytes) => {
                                    buf.extend_from_slice(&bytes);
                                    pending += 1;
                                    rep.records += 1;
                                    if pending == max_chunk {
                                        rep.chunks += 1;
                                        if let Err(e) = flush(&mut buf, &mut pending, &mut chunk_idx)
                                        {
                                            rep.error = Some(e.to_string());
                                            break;
                                        }
                                    }
                                }
                                Err(e) => {
                                    rep.error = Some(e.to_string());
                                    break;
                                }
                            }
                        }
                        if rep.error.is_none() && pending > 0 {
                            rep.chunks += 1;
                            if let Err(e) = flush(&mut buf, &mut pending, &mut chunk_idx) {
                                rep.error = Some(e.to_string());
                            }
                        }
                        rep.elapsed = t0.elapsed();
                        rep
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    /// Open a cursor: search the index for overlapping segments and pin them
    /// all. The segment list is a snapshot; segments ingested afterwards are
    /// not visible to this cursor.
    pub fn open_cursor(&self, q: &RangeQuery) -> Result<Cursor> {
        let (lo, hi) = q.closed_hull();
        let mut refs = self.shared.index.search(&lo, &hi);
        // Acquire in one global order so that cursors waiting out an unload
        // can never form a cycle with writers waiting on pinned segments.
        refs.sort_by_key(|r| r.uuid());
        let mut cursor = Cursor {
            shared: Arc::clone(&self.shared),
            refs: Vec::with_capacity(refs.len()),
            handles: Vec::with_capacity(refs.len()),
        };
        for r in refs {
            let handle = self.shared.access.acquire(&r)?;
            cursor.refs.push(r);
            cursor.handles.push(handle);
        }
        Ok(cursor)
    }

    /// Execute a query and aggregate the results.
    pub fn execute(&self, q: &RangeQuery, kind: IteratorKind) -> Result<QueryResult> {
        let cursor = self.open_cursor(q)?;
        let mut agg = Aggregator::new(q, &self.shared.desc);
        let mut visited = 0u64;
        for seg in cursor.segments() {
            visited += iterate_segment(seg, q, kind, |rec| agg.update(rec)).map_err(|source| {
                Error::CorruptSegment {
                    uuid: seg.segment_uuid(),
                    source,
                }
            })?;
        }
        let stats = QueryStats {
            segments_inspected: cursor.segments().len(),
            records_visited: visited,
            matched: agg.matched(),
        };
        Ok(QueryResult {
            value: agg.finish(),
            stats,
        })
    }

    /// Execute a query and return raw matching records (testing and export).
    pub fn scan_raw(&self, q: &RangeQuery, kind: IteratorKind) -> Result<(Vec<Vec<u8>>, QueryStats)> {
        let cursor = self.open_cursor(q)?;
        let mut out = Vec::new();
        let mut visited = 0u64;
        for seg in cursor.segments() {
            visited += iterate_segment(seg, q, kind, |rec| out.push(rec.to_vec())).map_err(
                |source| Error::CorruptSegment {
                    uuid: seg.segment_uuid(),
                    source,
                },
            )?;
        }
        let stats = QueryStats {
            segments_inspected: cursor.segments().len(),
            records_visited: visited,
            matched: out.len() as u64,
        };
        Ok((out, stats))
    }

    /// Stop writers and drain all pending persistence work. The store stays
    /// queryable afterwards but rejects new ingestion.
    pub fn close(&self) -> Result<()> {
        if self.closed.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        self.shared.shutdown.store(true, Ordering::Release);
        self.shared.wake_cv.notify_all();
        for h in self.writers.lock().drain(..) {
            let _ = h.join();
        }
        // Final drain; retries run immediately rather than on their period.
        let mut stall = 0;
        while self.persistence_backlog() > 0 {
            if writer_tick(&self.shared, true) == 0 {
                stall += 1;
                if stall > 3 {
                    return Err(Error::Config(format!(
                        "{} segments could not be persisted on close",
                        self.persistence_backlog()
                    )));
                }
            } else {
                stall = 0;
            }
        }
        Ok(())
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

/// Pinned view over the segments a query inspects. Every pinned reference is
/// released exactly once on drop.
pub struct Cursor {
    shared: Arc<Shared>,
    refs: Vec<Arc<SegmentReference>>,
    handles: Vec<Arc<DataSegment>>,
}

impl Cursor {
    pub fn segments(&self) -> &[Arc<DataSegment>] {
        &self.handles
    }

    pub fn references(&self) -> &[Arc<SegmentReference>] {
        &self.refs
    }
}

impl Drop for Cursor {
    fn drop(&mut self) {
        self.handles.clear();
        for r in &self.refs {
            self.shared.access.release(r);
        }
    }
}

/// Input for [`Store::feed`].
pub enum FeedInput<'a> {
    Binary(Arc<[u8]>),
    Csv(&'a str),
}

#[derive(Debug, Clone)]
pub struct FeederReport {
    pub feeder: usize,
    pub records: u64,
    pub chunks: u64,
    pub elapsed: Duration,
    pub error: Option<String>,
}

impl FeederReport {
    fn new(feeder: usize) -> Self {
        FeederReport {
            feeder,
            records: 0,
            chunks: 0,
            elapsed: Duration::ZERO,
            error: None,
        }
    }

    pub fn records_per_sec(&self) -> f64 {
        self.records as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

#[derive(Debug, Clone)]
pub struct FeedReport {
    pub records: u64,
    pub chunks: u64,
    pub segments: u64,
    pub elapsed: Duration,
    pub records_per_sec: f64,
    pub per_feeder: Vec<FeederReport>,
}

impl FeedReport {
    pub fn first_error(&self) -> Option<&str> {
        self.per_feeder.iter().find_map(|f| f.error.as_deref())
    }
}

fn even_ranges(total: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = total / parts;
    let rem = total % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for i in 0..parts {
        let len = base + usize::from(i < rem);
        out.push(at..at + len);
        at += len;
    }
    out
}

fn mix_seed(seed: u64, stream: u64, idx: u64) -> u64 {
    // splitmix-style mixing so per-chunk streams are independent.
    let mut x = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(idx.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn writer_loop(sh: &Shared) {
    loop {
        // Sleep one activation period, then work. Shutdown skips the wait.
        let deadline = Instant::now() + sh.cfg.writer_period;
        {
            let mut g = sh.wake.lock();
            while !sh.shutdown.load(Ordering::Acquire) {
                if sh.wake_cv.wait_until(&mut g, deadline).timed_out() {
                    break;
                }
            }
        }
        if sh.shutdown.load(Ordering::Acquire) {
            return;
        }
        writer_tick(sh, false);
    }
}

/// One writer pass: retry due failures, then dequeue fresh segments up to the
/// batch limit. Persisted segments not held by the cache are unloaded once
/// idle. Failed writes go back on the retry queue with exponential backoff
/// capped at ten periods.
fn writer_tick(sh: &Shared, force_due: bool) -> usize {
    let now = Instant::now();
    let batch = sh.cfg.writer_batch_max;
    let mut work: Vec<WriteEntry> = Vec::new();
    {
        let mut retry = sh.retry.lock();
        let mut i = 0;
        while i < retry.len() && work.len() < batch {
            if force_due || retry[i].due <= now {
                work.push(retry.remove(i).unwrap());
            } else {
                i += 1;
            }
        }
    }
    while work.len() < batch {
        match sh.queue_rx.try_recv() {
            Ok(e) => work.push(e),
            Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
        }
    }

    let mut wrote = 0;
    for mut entry in work {
        match sh.access.persist(&entry.reference) {
            Ok(()) => {
                wrote += 1;
                if !sh.access.cache.contains(entry.reference.uuid()) {
                    // Not cached: writer owns the unload. Blocks until any
                    // in-flight queries release the segment.
                    entry.reference.unload_blocking();
                }
            }
            Err(_e) => {
                sh.write_failures.fetch_add(1, Ordering::Relaxed);
                entry.attempts += 1;
                let backoff = sh
                    .cfg
                    .writer_period
                    .saturating_mul(1u32 << entry.attempts.min(4))
                    .min(sh.cfg.writer_period.saturating_mul(10));
                entry.due = now + backoff;
                sh.retry.lock().push_back(entry);
            }
        }
    }
    wrote
}
