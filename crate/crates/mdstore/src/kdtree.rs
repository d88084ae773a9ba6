//! In-memory kd-tree used during chunk segmentation.
//!
//! Trees are built over record handles (indices into a chunk) with a
//! quickselect-style bulkload: at each branching level a pivot record is
//! chosen as the median of M sampled records and the handle slice is
//! partitioned around its value. Branching dimensions rotate round-robin.
//! Nodes live in arenas drawn from a shared [`NodePool`] so ingestion never
//! hits the allocator per node.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_queue::SegQueue;
use rand::Rng;
use thiserror::Error;

use crate::record::DimValue;

/// Sentinel child link.
pub const NIL: u32 = u32::MAX;

/// Tree node: a record handle, child links, and the node count of the subtree
/// rooted here (itself included).
#[derive(Debug, Clone, Copy)]
pub struct KdNode {
    pub rec: u32,
    pub left: u32,
    pub right: u32,
    pub count: u32,
}

/// Anything that can produce per-dimension values for a record handle.
pub trait DimSource {
    fn dim_count(&self) -> usize;
    fn dim_value(&self, rec: u32, dim: usize) -> DimValue;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("node pool sizing counts must be >= 1")]
    BadSizing,
    #[error("node pool exhausted: requested {requested}, free {free}")]
    Exhausted { requested: usize, free: usize },
}

/// Pre-allocated pool of kd-tree node storage, shared by all ingestion tasks.
///
/// Arenas (one per tree) are reserved against a global capacity and their
/// backing buffers recycled through a lock-free queue, so releasing never
/// waits on acquiring tasks.
pub struct NodePool {
    capacity: usize,
    free: AtomicUsize,
    recycled: SegQueue<Vec<KdNode>>,
}

impl std::fmt::Debug for NodePool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodePool")
            .field("capacity", &self.capacity)
            .field("free", &self.free_nodes())
            .finish()
    }
}

impl NodePool {
    /// Capacity is `max_chunk_records * max_ingestor_threads` nodes.
    pub fn new(max_chunk_records: usize, max_ingestor_threads: usize) -> Result<Arc<Self>, PoolError> {
        if max_chunk_records < 1 || max_ingestor_threads < 1 {
            return Err(PoolError::BadSizing);
        }
        let capacity = max_chunk_records
            .checked_mul(max_ingestor_threads)
            .ok_or(PoolError::BadSizing)?;
        Ok(Arc::new(NodePool {
            capacity,
            free: AtomicUsize::new(capacity),
            recycled: SegQueue::new(),
        }))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_nodes(&self) -> usize {
        self.free.load(Ordering::Acquire)
    }

    fn acquire(&self, n: usize) -> Result<Vec<KdNode>, PoolError> {
        let res = self
            .free
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |f| f.checked_sub(n));
        match res {
            Ok(_) => {
                let mut buf = self.recycled.pop().unwrap_or_default();
                buf.clear();
                buf.reserve(n);
                Ok(buf)
            }
            Err(free) => Err(PoolError::Exhausted { requested: n, free }),
        }
    }

    fn release(&self, mut buf: Vec<KdNode>, reserved: usize) {
        buf.clear();
        self.recycled.push(buf);
        self.free.fetch_add(reserved, Ordering::AcqRel);
    }
}

/// How deep pivot sampling goes during bulkload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Sampled median pivot at every branching level.
    FullRecursive,
    /// Sampled median pivot at the root level only; deeper levels take the
    /// middle element of the current slice without re-sampling.
    RootLevelOnly,
}

/// A kd-tree over record handles. Confined to one ingestion task at a time;
/// drops its arena back to the pool.
pub struct KdTree {
    pool: Arc<NodePool>,
    nodes: Vec<KdNode>,
    reserved: usize,
    root: u32,
    root_dim: u32,
    dims: u32,
}

impl Drop for KdTree {
    fn drop(&mut self) {
        let buf = std::mem::take(&mut self.nodes);
        self.pool.release(buf, self.reserved);
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetachError {
    #[error("node {0} is not reachable from the tree root")]
    NotInTree(u32),
}

impl KdTree {
    pub fn root(&self) -> Option<u32> {
        (self.root != NIL).then_some(self.root)
    }

    pub fn root_dim(&self) -> u32 {
        self.root_dim
    }

    pub fn dims(&self) -> u32 {
        self.dims
    }

    pub fn node(&self, id: u32) -> &KdNode {
        &self.nodes[id as usize]
    }

    /// Nodes currently linked under the root.
    pub fn len(&self) -> usize {
        self.root().map_or(0, |r| self.node(r).count as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Root-to-node path, or None if unreachable.
    pub fn find_path(&self, target: u32) -> Option<Vec<u32>> {
        let root = self.root()?;
        let mut stack = vec![(root, 0usize)];
        let mut path: Vec<u32> = Vec::new();
        while let Some((n, depth)) = stack.pop() {
            path.truncate(depth);
            path.push(n);
            if n == target {
                return Some(path);
            }
            let node = &self.nodes[n as usize];
            if node.right != NIL {
                stack.push((node.right, depth + 1));
            }
            if node.left != NIL {
                stack.push((node.left, depth + 1));
            }
        }
        None
    }

    /// Detach the subtree rooted at `node`: the parent's link becomes nil and
    /// every ancestor's subtree count drops by the detached count. The
    /// detached nodes stay in the arena (readable via [`Self::node`]) until
    /// the tree is dropped.
    pub fn detach_subtree(&mut self, node: u32) -> Result<u32, DetachError> {
        let path = self.find_path(node).ok_or(DetachError::NotInTree(node))?;
        Ok(self.detach_along_path(&path))
    }

    /// Detach using a known root-to-target path (last element is the target).
    /// The path must be valid; [`Self::detach_subtree`] is the checked form.
    pub fn detach_along_path(&mut self, path: &[u32]) -> u32 {
        let target = *path.last().expect("empty detach path");
        let removed = self.nodes[target as usize].count;
        if path.len() == 1 {
            debug_assert_eq!(self.root, target);
            self.root = NIL;
        } else {
            let parent = path[path.len() - 2] as usize;
            if self.nodes[parent].left == target {
                self.nodes[parent].left = NIL;
            } else {
                debug_assert_eq!(self.nodes[parent].right, target);
                self.nodes[parent].right = NIL;
            }
            for &a in &path[..path.len() - 1] {
                self.nodes[a as usize].count -= removed;
            }
        }
        target
    }

    /// Pre-order frozen copy of the subtree rooted at `node`. `root_level_dim`
    /// is the branching dimension at that node, which traversals of the copy
    /// resume round-robin from.
    pub fn freeze(&self, node: u32, root_level_dim: u32) -> Subtree {
        let total = self.node(node).count as usize;
        let mut out = vec![
            SubtreeNode {
                rec: 0,
                left: -1,
                right: -1
            };
            total
        ];
        let mut stack = vec![(node, 0usize)];
        while let Some((id, at)) = stack.pop() {
            let n = self.node(id);
            let left_count = if n.left != NIL {
                self.node(n.left).count as usize
            } else {
                0
            };
            // Pre-order layout: left block right after the node, right block
            // after the whole left block.
            let left_at = at + 1;
            let right_at = at + 1 + left_count;
            out[at] = SubtreeNode {
                rec: n.rec,
                left: if n.left != NIL { left_at as i32 } else { -1 },
                right: if n.right != NIL { right_at as i32 } else { -1 },
            };
            if n.left != NIL {
                stack.push((n.left, left_at));
            }
            if n.right != NIL {
                stack.push((n.right, right_at));
            }
        }
        Subtree {
            root_dim: root_level_dim,
            nodes: out,
        }
    }

    /// Recount subtree sizes and verify the kd ordering invariant at every
    /// node. Test support; returns a description of the first violation.
    pub fn validate<S: DimSource>(&self, src: &S) -> Result<(), String> {
        let Some(root) = self.root() else {
            return Ok(());
        };
        self.validate_at(src, root, self.root_dim)?;
        Ok(())
    }

    fn validate_at<S: DimSource>(&self, src: &S, id: u32, dim: u32) -> Result<u32, String> {
        let n = self.node(id);
        let pivot = src.dim_value(n.rec, dim as usize);
        let next = (dim + 1) % self.dims;
        let mut count = 1;
        if n.left != NIL {
            self.each_rec(n.left, &mut |rec| {
                if src.dim_value(rec, dim as usize).cmp_same_kind(&pivot).is_gt() {
                    return Err(format!("left subtree of node {id} violates <= on dim {dim}"));
                }
                Ok(())
            })?;
            count += self.validate_at(src, n.left, next)?;
        }
        if n.right != NIL {
            self.each_rec(n.right, &mut |rec| {
                if !src.dim_value(rec, dim as usize).cmp_same_kind(&pivot).is_gt() {
                    return Err(format!("right subtree of node {id} violates > on dim {dim}"));
                }
                Ok(())
            })?;
            count += self.validate_at(src, n.right, next)?;
        }
        if count != n.count {
            return Err(format!(
                "node {id} count {} but recount {count}",
                n.count
            ));
        }
        Ok(count)
    }

    fn each_rec(
        &self,
        id: u32,
        f: &mut impl FnMut(u32) -> Result<(), String>,
    ) -> Result<(), String> {
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node(n);
            f(node.rec)?;
            if node.left != NIL {
                stack.push(node.left);
            }
            if node.right != NIL {
                stack.push(node.right);
            }
        }
        Ok(())
    }

    /// In-order record handles (test support).
    pub fn in_order(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.len());
        let Some(root) = self.root() else {
            return out;
        };
        let mut stack: Vec<(u32, bool)> = vec![(root, false)];
        while let Some((id, expanded)) = stack.pop() {
            let n = self.node(id);
            if expanded {
                out.push(n.rec);
                if n.right != NIL {
                    stack.push((n.right, false));
                }
            } else {
                stack.push((id, true));
                if n.left != NIL {
                    stack.push((n.left, false));
                }
            }
        }
        out
    }
}

/// Frozen pre-order copy of a (sub)tree, detached from any arena. `nodes[0]`
/// is the root; child links are array positions, -1 for nil.
#[derive(Debug, Clone)]
pub struct Subtree {
    root_dim: u32,
    nodes: Vec<SubtreeNode>,
}

#[derive(Debug, Clone, Copy)]
pub struct SubtreeNode {
    pub rec: u32,
    pub left: i32,
    pub right: i32,
}

impl Subtree {
    pub fn root_dim(&self) -> u32 {
        self.root_dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SubtreeNode] {
        &self.nodes
    }

    /// Record handles in pre-order (the order records land in a segment).
    pub fn records(&self) -> impl Iterator<Item = u32> + '_ {
        self.nodes.iter().map(|n| n.rec)
    }
}

/// Pick a pivot position in `handles` for branching dimension `dim`: the
/// median of `m` records sampled uniformly at random (with replacement). When
/// the slice has at most `m` records the median of all of them is used.
pub fn select_pivot<S: DimSource>(
    src: &S,
    handles: &[u32],
    dim: usize,
    m: usize,
    rng: &mut impl Rng,
) -> usize {
    debug_assert!(!handles.is_empty());
    debug_assert!(m >= 1 && m % 2 == 1);
    let n = handles.len();
    let mut sample: Vec<usize> = if n <= m {
        (0..n).collect()
    } else {
        (0..m).map(|_| rng.random_range(0..n)).collect()
    };
    sample.sort_by(|&a, &b| {
        src.dim_value(handles[a], dim)
            .cmp_same_kind(&src.dim_value(handles[b], dim))
    });
    sample[(sample.len() - 1) / 2]
}

/// Partition `handles` around the value of the record at `pivot_index`:
/// positions `[0, split)` hold values <= the pivot value, `split` holds the
/// pivot record, and `(split, end)` hold values > it. Only handles move.
pub fn partition_level<S: DimSource>(
    src: &S,
    handles: &mut [u32],
    dim: usize,
    pivot_index: usize,
) -> usize {
    let n = handles.len();
    debug_assert!(pivot_index < n);
    handles.swap(pivot_index, n - 1);
    let pivot = src.dim_value(handles[n - 1], dim);
    let mut store = 0;
    for i in 0..n - 1 {
        if src.dim_value(handles[i], dim).cmp_same_kind(&pivot).is_le() {
            handles.swap(i, store);
            store += 1;
        }
    }
    handles.swap(store, n - 1);
    store
}

/// Build a kd-tree over `handles`, which is reordered in place. Branching
/// dimensions rotate round-robin starting from `root_dim`.
pub fn bulkload<S: DimSource>(
    src: &S,
    handles: &mut [u32],
    root_dim: u32,
    mode: BuildMode,
    pool: &Arc<NodePool>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<KdTree, PoolError> {
    let dims = src.dim_count() as u32;
    debug_assert!(root_dim < dims);
    let n = handles.len();
    let mut nodes = pool.acquire(n)?;
    let mut root = NIL;

    // Frames: (range, level dim, parent slot). Explicit stack keeps degenerate
    // partitions (all-equal dimension values) from overflowing the call stack.
    let mut stack: Vec<(usize, usize, u32, u32, bool)> = Vec::new();
    if n > 0 {
        stack.push((0, n, root_dim, NIL, false));
    }
    while let Some((lo, hi, dim, parent, is_left)) = stack.pop() {
        let sub = &mut handles[lo..hi];
        let pivot_index = match mode {
            BuildMode::FullRecursive => select_pivot(src, sub, dim as usize, m, rng),
            BuildMode::RootLevelOnly if parent == NIL => {
                select_pivot(src, sub, dim as usize, m, rng)
            }
            BuildMode::RootLevelOnly => sub.len() / 2,
        };
        let split = partition_level(src, sub, dim as usize, pivot_index);
        let id = nodes.len() as u32;
        nodes.push(KdNode {
            rec: sub[split],
            left: NIL,
            right: NIL,
            count: 1,
        });
        if parent == NIL {
            root = id;
        } else if is_left {
            nodes[parent as usize].left = id;
        } else {
            nodes[parent as usize].right = id;
        }
        let next = (dim + 1) % dims;
        if split > 0 {
            stack.push((lo, lo + split, next, id, true));
        }
        if lo + split + 1 < hi {
            stack.push((lo + split + 1, hi, next, id, false));
        }
    }

    // Children always allocate after their parent, so one reverse pass fixes
    // up subtree counts.
    for i in (0..nodes.len()).rev() {
        let (l, r) = (nodes[i].left, nodes[i].right);
        let mut c = 1;
        if l != NIL {
            c += nodes[l as usize].count;
        }
        if r != NIL {
            c += nodes[r as usize].count;
        }
        nodes[i].count = c;
    }

    Ok(KdTree {
        pool: Arc::clone(pool),
        nodes,
        reserved: n,
        root,
        root_dim,
        dims,
    })
}
