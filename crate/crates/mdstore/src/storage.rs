//! Segment persistence: one file per segment in a flat directory, plus the
//! in-memory segment cache with generalized-CLOCK replacement.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::Mutex;
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::index::SegmentReference;
use crate::record::DescriptorRegistry;
use crate::segment::{DataSegment, SEGMENT_EXT};

/// Reader/writer for segment files. Files are named `<uuid>.mdseg`; writes go
/// to a temp name in the same directory and rename into place, so a crash
/// never leaves a partial `.mdseg` visible.
pub struct SegmentStore {
    dir: PathBuf,
    reads: AtomicU64,
    writes: AtomicU64,
}

impl SegmentStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SegmentStore {
            dir,
            reads: AtomicU64::new(0),
            writes: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, uuid: Uuid) -> PathBuf {
        self.dir.join(format!("{uuid}.{SEGMENT_EXT}"))
    }

    pub fn write(&self, seg: &DataSegment) -> Result<()> {
        let bytes = seg.serialize();
        let final_path = self.path_for(seg.segment_uuid());
        let tmp_path = self.dir.join(format!(".{}.tmp", seg.segment_uuid()));
        let mut f = fs::File::create(&tmp_path).map_err(|e| Error::io(&tmp_path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp_path, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp_path, e))?;
        drop(f);
        fs::rename(&tmp_path, &final_path).map_err(|e| Error::io(&final_path, e))?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn read(&self, uuid: Uuid, registry: &DescriptorRegistry) -> Result<DataSegment> {
        let path = self.path_for(uuid);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingSegment(uuid)
            } else {
                Error::io(&path, e)
            }
        })?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        DataSegment::deserialize(&bytes, registry)
            .map_err(|source| Error::CorruptSegment { uuid, source })
    }

    pub fn delete(&self, uuid: Uuid) -> Result<()> {
        let path = self.path_for(uuid);
        fs::remove_file(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingSegment(uuid)
            } else {
                Error::io(&path, e)
            }
        })
    }

    /// UUIDs of every `.mdseg` file in the store directory.
    pub fn list(&self) -> Result<Vec<Uuid>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|s| s.to_str()) != Some(SEGMENT_EXT) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if let Ok(uuid) = Uuid::parse_str(stem) {
                    out.push(uuid);
                }
            }
        }
        Ok(out)
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn write_count(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }
}

const CLOCK_MAX: u8 = 3;

struct CacheEntry {
    seg: Arc<DataSegment>,
    reference: Arc<SegmentReference>,
    counter: AtomicU8,
    size: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub used_bytes: u64,
    pub entries: usize,
}

/// Whole-segment cache with generalized CLOCK replacement: a 2-bit saturating
/// counter per entry, incremented on hit; the sweep hand decrements and
/// evicts the first zero-counter entry whose segment is idle. Hits touch
/// only the entry map and an atomic counter, so they never wait on an
/// eviction sweep in progress.
pub struct SegmentCache {
    capacity: u64,
    used: AtomicU64,
    map: DashMap<Uuid, CacheEntry>,
    ring: Mutex<VecDeque<Uuid>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl SegmentCache {
    pub fn new(capacity: u64) -> Self {
        SegmentCache {
            capacity,
            used: AtomicU64::new(0),
            map: DashMap::new(),
            ring: Mutex::new(VecDeque::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn contains(&self, uuid: Uuid) -> bool {
        self.map.contains_key(&uuid)
    }

    /// Record a hit: bump the CLOCK counter and return the cached segment.
    pub fn touch(&self, uuid: Uuid) -> Option<Arc<DataSegment>> {
        let entry = self.map.get(&uuid)?;
        let _ = entry
            .counter
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| {
                (c < CLOCK_MAX).then_some(c + 1)
            });
        self.hits.fetch_add(1, Ordering::Relaxed);
        Some(Arc::clone(&entry.seg))
    }

    pub fn note_miss(&self) {
        self.misses.fetch_add(1, Ordering::Relaxed);
    }

    /// Insert a freshly loaded segment; returns false when the cache declines
    /// it (zero capacity). Evicts per CLOCK until back within capacity.
    pub fn admit(&self, seg: &Arc<DataSegment>, reference: &Arc<SegmentReference>) -> bool {
        if self.capacity == 0 {
            return false;
        }
        let uuid = seg.segment_uuid();
        let size = seg.total_length();
        let prev = self.map.insert(
            uuid,
            CacheEntry {
                seg: Arc::clone(seg),
                reference: Arc::clone(reference),
                counter: AtomicU8::new(1),
                size,
            },
        );
        debug_assert!(prev.is_none(), "single-flight loads admit once");
        self.used.fetch_add(size, Ordering::AcqRel);
        self.ring.lock().push_back(uuid);
        self.evict_to_capacity();
        true
    }

    /// Sweep the CLOCK hand until usage fits capacity. Entries pinned by
    /// queries (nonzero usage) are skipped; if a full sweep makes no
    /// progress the cache stays over capacity until entries quiesce.
    fn evict_to_capacity(&self) {
        let mut ring = self.ring.lock();
        let mut since_progress = 0usize;
        while self.used.load(Ordering::Acquire) > self.capacity {
            if since_progress > 2 * ring.len() || ring.is_empty() {
                break;
            }
            let Some(uuid) = ring.pop_front() else { break };
            let Some(entry) = self.map.get(&uuid) else {
                continue; // already gone
            };
            let counter = entry.counter.load(Ordering::Acquire);
            if counter > 0 {
                entry.counter.store(counter - 1, Ordering::Release);
                drop(entry);
                ring.push_back(uuid);
                since_progress += 1;
                continue;
            }
            drop(entry);
            // Zero counter: evictable if the segment is idle. The unload
            // runs under the map's shard lock so a concurrent hit either
            // sees the entry whole or not at all.
            let removed = self
                .map
                .remove_if(&uuid, |_, e| e.reference.unload_if_idle());
            match removed {
                Some((_, e)) => {
                    self.used.fetch_sub(e.size, Ordering::AcqRel);
                    self.evictions.fetch_add(1, Ordering::Relaxed);
                    since_progress = 0;
                }
                None => {
                    ring.push_back(uuid);
                    since_progress += 1;
                }
            }
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            used_bytes: self.used.load(Ordering::Relaxed),
            entries: self.map.len(),
        }
    }
}

/// Files, cache, and descriptor registry bundled into the segment access
/// path shared by queries and writers.
pub struct SegmentAccess {
    pub files: SegmentStore,
    pub cache: SegmentCache,
    registry: DescriptorRegistry,
}

impl SegmentAccess {
    pub fn new(files: SegmentStore, cache: SegmentCache, registry: DescriptorRegistry) -> Self {
        SegmentAccess {
            files,
            cache,
            registry,
        }
    }

    pub fn registry(&self) -> &DescriptorRegistry {
        &self.registry
    }

    /// Pin and fetch a segment. Residency fast path costs one lock; misses
    /// read from storage (single-flight per segment) and admit the segment
    /// to the cache.
    pub fn acquire(&self, reference: &Arc<SegmentReference>) -> Result<Arc<DataSegment>> {
        let mut missed = false;
        let seg = reference.acquire(|| {
            missed = true;
            self.cache.note_miss();
            let seg = Arc::new(self.files.read(reference.uuid(), &self.registry)?);
            self.cache.admit(&seg, reference);
            Ok::<_, Error>(seg)
        })?;
        if !missed {
            self.cache.touch(reference.uuid());
        }
        Ok(seg)
    }

    /// Release a pin. When the last pin drops and the segment is persisted
    /// but not cached (cache bypass or zero capacity), its memory is freed
    /// here — the query side owns unloading for segments it brought in.
    pub fn release(&self, reference: &SegmentReference) {
        if reference.release() == 0
            && reference.is_persisted()
            && !self.cache.contains(reference.uuid())
        {
            reference.unload_if_idle();
        }
    }

    /// Writer path: persist a resident segment and mark its reference.
    pub fn persist(&self, reference: &SegmentReference) -> Result<()> {
        let seg = reference
            .resident_handle()
            .expect("segment must be resident until persisted");
        self.files.write(&seg)?;
        reference.mark_persisted();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kdtree::NodePool;
    use crate::segment::assemble;
    use crate::segmentation::tests::{int2_chunk, int2_desc};
    use crate::segmentation::PlannedGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use tempfile::TempDir;

    fn make_segment(points: &[(i64, i64)]) -> DataSegment {
        let chunk = int2_chunk(points);
        let pool = NodePool::new(points.len(), 1).unwrap();
        assemble(
            &chunk,
            &PlannedGroup {
                records: (0..points.len() as u32).collect(),
                initial_dim: 0,
                subtree: None,
                bounds: None,
            },
            &pool,
            &mut ChaCha12Rng::seed_from_u64(9),
        )
        .unwrap()
    }

    fn registry() -> DescriptorRegistry {
        DescriptorRegistry::with(int2_desc())
    }

    #[test]
    fn write_read_round_trip() {
        let dir = TempDir::new().unwrap();
        let store = SegmentStore::open(dir.path()).unwrap();
        let seg = make_segment(&[(1, 2), (3, 4), (5, 6)]);
        store.write(&seg).unwrap();
        let back = store.read(seg.segment_uuid(), &registry()).unwrap();
        assert_eq!(back, seg);
        assert_eq!(store.list().unwrap(), vec![seg.segment_uuid()]);
    }

    #[test]
    fn read_unknown_uuid_is_missing() {
        let dir = TempDir::new().unwrap();
        let store = SegmentStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.read(Uuid::new_v4(), &registry()),
            Err(Error::MissingSegment(_))
        ));
        assert!(matches!(
            store.delete(Uuid::new_v4()),
            Err(Error::MissingSegment(_))
        ));
    }

    #[test]
    fn interrupted_write_leaves_no_visible_segment() {
        let dir = TempDir::new().unwrap();
        let store = SegmentStore::open(dir.path()).unwrap();
        let seg = make_segment(&[(1, 2)]);
        // Simulate a crash between temp write and rename.
        let tmp = dir.path().join(format!(".{}.tmp", seg.segment_uuid()));
        fs::write(&tmp, seg.serialize()).unwrap();
        assert!(store.list().unwrap().is_empty());
        assert!(matches!(
            store.read(seg.segment_uuid(), &registry()),
            Err(Error::MissingSegment(_))
        ));
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let dir = TempDir::new().unwrap();
        let store = SegmentStore::open(dir.path()).unwrap();
        let seg = make_segment(&[(1, 2), (3, 4)]);
        store.write(&seg).unwrap();
        let path = store.path_for(seg.segment_uuid());
        let mut bytes = fs::read(&path).unwrap();
        bytes[40] ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            store.read(seg.segment_uuid(), &registry()),
            Err(Error::CorruptSegment { .. })
        ));
    }

    fn access_with(dir: &TempDir, capacity: u64) -> SegmentAccess {
        SegmentAccess::new(
            SegmentStore::open(dir.path()).unwrap(),
            SegmentCache::new(capacity),
            registry(),
        )
    }

    fn stored_ref(access: &SegmentAccess, points: &[(i64, i64)]) -> Arc<SegmentReference> {
        let seg = make_segment(points);
        access.files.write(&seg).unwrap();
        SegmentReference::new_unloaded(seg.segment_uuid(), seg.bounds().clone())
    }

    #[test]
    fn second_get_hits_cache() {
        let dir = TempDir::new().unwrap();
        let access = access_with(&dir, 1 << 20);
        let r = stored_ref(&access, &[(1, 2), (3, 4)]);
        let h1 = access.acquire(&r).unwrap();
        assert_eq!(access.files.read_count(), 1);
        drop(h1);
        access.release(&r);
        let h2 = access.acquire(&r).unwrap();
        assert_eq!(access.files.read_count(), 1, "second get must be a hit");
        drop(h2);
        access.release(&r);
        let stats = access.cache.stats();
        assert_eq!(stats.misses, 1);
        assert!(stats.hits >= 1);
    }

    #[test]
    fn capacity_one_segment_evicts_lru_like() {
        let dir = TempDir::new().unwrap();
        let a_seg = make_segment(&[(1, 1), (2, 2)]);
        let size = a_seg.total_length();
        let access = access_with(&dir, size); // room for exactly one
        access.files.write(&a_seg).unwrap();
        let a = SegmentReference::new_unloaded(a_seg.segment_uuid(), a_seg.bounds().clone());
        let b = stored_ref(&access, &[(5, 5), (6, 6)]);

        let ha = access.acquire(&a).unwrap();
        drop(ha);
        access.release(&a);
        assert!(access.cache.contains(a.uuid()));

        let hb = access.acquire(&b).unwrap();
        drop(hb);
        access.release(&b);
        // A had counter 1; the sweep decrements it, then evicts it on the
        // second pass. Either way B must be resident and total within cap.
        assert!(access.cache.contains(b.uuid()));
        assert!(!access.cache.contains(a.uuid()));
        assert!(access.cache.stats().used_bytes <= size);
    }

    #[test]
    fn pinned_entries_are_not_evicted() {
        let dir = TempDir::new().unwrap();
        let a_seg = make_segment(&[(1, 1), (2, 2)]);
        let size = a_seg.total_length();
        let access = access_with(&dir, size);
        access.files.write(&a_seg).unwrap();
        let a = SegmentReference::new_unloaded(a_seg.segment_uuid(), a_seg.bounds().clone());
        let b = stored_ref(&access, &[(5, 5), (6, 6)]);

        let _ha = access.acquire(&a).unwrap(); // keep A pinned
        let hb = access.acquire(&b).unwrap();
        drop(hb);
        access.release(&b);
        // A is pinned: must survive even though the cache is over capacity.
        assert!(access.cache.contains(a.uuid()));
        assert_eq!(a.usage(), 1);
        access.release(&a);
    }

    #[test]
    fn zero_capacity_cache_reads_from_store_every_time() {
        let dir = TempDir::new().unwrap();
        let access = access_with(&dir, 0);
        let r = stored_ref(&access, &[(1, 2), (3, 4)]);
        for i in 1..=3u64 {
            let h = access.acquire(&r).unwrap();
            assert_eq!(access.files.read_count(), i);
            drop(h);
            access.release(&r);
            // Release-side unload frees the bypass copy.
            assert!(r.resident_handle().is_none());
        }
        assert_eq!(access.cache.stats().hits, 0);
    }
}
