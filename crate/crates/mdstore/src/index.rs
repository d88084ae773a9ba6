//! First-level index: an in-memory R*-tree over segment bounding
//! hyperrectangles, plus the reference objects that track each segment's
//! residency, persistence, and usage.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::{Condvar, Mutex};
use uuid::Uuid;

use crate::geom::Hyperrectangle;
use crate::record::DimValue;
use crate::rtree::{RStarTree, Rect};
use crate::segment::DataSegment;

/// Memory residency of a segment. Legal transitions cycle
/// `InMemory -> BeingUnloaded -> NotInMemory -> InMemory` (reload).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    InMemory,
    BeingUnloaded,
    NotInMemory,
}

struct RefInner {
    residency: Residency,
    usage: u32,
    handle: Option<Arc<DataSegment>>,
}

/// In-memory representative of a segment: the handle stored in the global
/// index. Lets queries find segments whether or not they are resident.
pub struct SegmentReference {
    uuid: Uuid,
    rect: Hyperrectangle,
    persisted: AtomicBool,
    inner: Mutex<RefInner>,
    cond: Condvar,
    /// Serializes loads so concurrent misses for one segment coalesce.
    load_lock: Mutex<()>,
}

impl SegmentReference {
    /// Reference for a freshly assembled, still unpersisted segment.
    pub fn new_resident(seg: Arc<DataSegment>) -> Arc<Self> {
        Arc::new(SegmentReference {
            uuid: seg.segment_uuid(),
            rect: seg.bounds().clone(),
            persisted: AtomicBool::new(false),
            inner: Mutex::new(RefInner {
                residency: Residency::InMemory,
                usage: 0,
                handle: Some(seg),
            }),
            cond: Condvar::new(),
            load_lock: Mutex::new(()),
        })
    }

    /// Reference recovered from storage at startup.
    pub fn new_unloaded(uuid: Uuid, rect: Hyperrectangle) -> Arc<Self> {
        Arc::new(SegmentReference {
            uuid,
            rect,
            persisted: AtomicBool::new(true),
            inner: Mutex::new(RefInner {
                residency: Residency::NotInMemory,
                usage: 0,
                handle: None,
            }),
            cond: Condvar::new(),
            load_lock: Mutex::new(()),
        })
    }

    pub fn uuid(&self) -> Uuid {
        self.uuid
    }

    pub fn rect(&self) -> &Hyperrectangle {
        &self.rect
    }

    pub fn is_persisted(&self) -> bool {
        self.persisted.load(Ordering::Acquire)
    }

    pub fn mark_persisted(&self) {
        self.persisted.store(true, Ordering::Release);
    }

    pub fn residency(&self) -> Residency {
        self.inner.lock().residency
    }

    pub fn usage(&self) -> u32 {
        self.inner.lock().usage
    }

    /// Pin the segment for use, loading it first if it is not resident.
    /// An acquire that runs into an unload in progress waits for the
    /// transition to complete and then reloads. Every successful acquire
    /// must be paired with exactly one release.
    pub fn acquire<E>(
        &self,
        mut loader: impl FnMut() -> Result<Arc<DataSegment>, E>,
    ) -> Result<Arc<DataSegment>, E> {
        loop {
            let mut g = self.inner.lock();
            match g.residency {
                Residency::InMemory => {
                    g.usage += 1;
                    return Ok(g.handle.clone().expect("resident segment has a handle"));
                }
                Residency::BeingUnloaded => {
                    self.cond.wait(&mut g);
                }
                Residency::NotInMemory => {
                    drop(g);
                    let _flight = self.load_lock.lock();
                    let mut g = self.inner.lock();
                    match g.residency {
                        Residency::InMemory => {
                            g.usage += 1;
                            return Ok(g.handle.clone().expect("resident segment has a handle"));
                        }
                        Residency::BeingUnloaded => continue,
                        Residency::NotInMemory => {
                            drop(g);
                            // Storage I/O happens outside the state lock; the
                            // load lock keeps concurrent misses single-flight.
                            let seg = loader()?;
                            let mut g = self.inner.lock();
                            g.handle = Some(Arc::clone(&seg));
                            g.residency = Residency::InMemory;
                            g.usage += 1;
                            self.cond.notify_all();
                            return Ok(seg);
                        }
                    }
                }
            }
        }
    }

    /// Drop one usage pin. Returns the remaining usage count.
    pub fn release(&self) -> u32 {
        let mut g = self.inner.lock();
        assert!(g.usage > 0, "release without matching acquire");
        g.usage -= 1;
        let left = g.usage;
        drop(g);
        self.cond.notify_all();
        left
    }

    /// Resident handle without pinning, if any (writer path).
    pub fn resident_handle(&self) -> Option<Arc<DataSegment>> {
        self.inner.lock().handle.clone()
    }

    /// Unload the in-memory copy, blocking until the usage count drains.
    /// Only legal once the segment is persisted.
    pub fn unload_blocking(&self) {
        debug_assert!(self.is_persisted());
        let mut g = self.inner.lock();
        loop {
            match g.residency {
                Residency::NotInMemory => return,
                Residency::BeingUnloaded => self.cond.wait(&mut g),
                Residency::InMemory => {
                    g.residency = Residency::BeingUnloaded;
                    while g.usage > 0 {
                        self.cond.wait(&mut g);
                    }
                    g.handle = None;
                    g.residency = Residency::NotInMemory;
                    drop(g);
                    self.cond.notify_all();
                    return;
                }
            }
        }
    }

    /// Unload only if idle right now: persisted, resident, and unused.
    /// Returns whether the memory was released.
    pub fn unload_if_idle(&self) -> bool {
        if !self.is_persisted() {
            return false;
        }
        let mut g = self.inner.lock();
        if g.residency == Residency::InMemory && g.usage == 0 {
            g.residency = Residency::BeingUnloaded;
            g.handle = None;
            g.residency = Residency::NotInMemory;
            drop(g);
            self.cond.notify_all();
            true
        } else {
            false
        }
    }
}

impl std::fmt::Debug for SegmentReference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let g = self.inner.lock();
        f.debug_struct("SegmentReference")
            .field("uuid", &self.uuid)
            .field("residency", &g.residency)
            .field("usage", &g.usage)
            .field("persisted", &self.is_persisted())
            .finish()
    }
}

fn rect_to_f64(rect: &Hyperrectangle) -> Rect {
    Rect::new(
        rect.lo().iter().map(DimValue::to_f64_lossy).collect(),
        rect.hi().iter().map(DimValue::to_f64_lossy).collect(),
    )
}

/// The shared first-level index. One mutual-exclusion region guards the
/// R*-tree for both ingestion inserts and query searches; reference state
/// lives outside it.
pub struct GlobalIndex {
    tree: Mutex<RStarTree<Arc<SegmentReference>>>,
    refs: DashMap<Uuid, Arc<SegmentReference>>,
}

impl GlobalIndex {
    pub fn new() -> Self {
        GlobalIndex {
            tree: Mutex::new(RStarTree::new()),
            refs: DashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn insert(&self, reference: Arc<SegmentReference>) {
        let rect = rect_to_f64(reference.rect());
        self.refs.insert(reference.uuid(), Arc::clone(&reference));
        self.tree.lock().insert(rect, reference);
    }

    pub fn get(&self, uuid: &Uuid) -> Option<Arc<SegmentReference>> {
        self.refs.get(uuid).map(|r| Arc::clone(&r))
    }

    pub fn all(&self) -> Vec<Arc<SegmentReference>> {
        self.refs.iter().map(|r| Arc::clone(&r)).collect()
    }

    /// Exactly the references whose rectangles intersect the query box on
    /// every dimension; unbounded dimensions match everything. The f64 tree
    /// pre-filters conservatively (its coordinate map is monotone, so it
    /// never loses a true match) and candidates are re-checked exactly.
    pub fn search(&self, lo: &[Option<DimValue>], hi: &[Option<DimValue>]) -> Vec<Arc<SegmentReference>> {
        let qlo: Vec<f64> = lo
            .iter()
            .map(|b| b.as_ref().map_or(f64::NEG_INFINITY, DimValue::to_f64_lossy))
            .collect();
        let qhi: Vec<f64> = hi
            .iter()
            .map(|b| b.as_ref().map_or(f64::INFINITY, DimValue::to_f64_lossy))
            .collect();
        let mut out = Vec::new();
        let tree = self.tree.lock();
        tree.search(&qlo, &qhi, |r| {
            if r.rect().intersects_query(lo, hi) {
                out.push(Arc::clone(r));
            }
        });
        out
    }

    /// Remove a segment from the index (test teardown support).
    pub fn remove(&self, uuid: &Uuid) {
        if self.refs.remove(uuid).is_some() {
            self.tree.lock().retain(|r| r.uuid() != *uuid);
        }
    }

    /// Shape check for tests.
    pub fn check_invariants(&self) -> Result<usize, String> {
        self.tree.lock().check_invariants()
    }
}

impl Default for GlobalIndex {
    fn default() -> Self {
        Self::new()
    }
}
