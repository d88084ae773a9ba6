//! Chunk segmentation: dividing a micro-batch of records into the groups that
//! become data segments.
//!
//! Two schemes are provided. The random scheme assigns every record to one of
//! `ceil(c*r/S)` groups chosen uniformly at random. The kd-tree scheme
//! bulkloads the chunk into a kd-tree and carves off subtrees of at most
//! `rps_max` nodes, which groups nearby records together and shrinks the
//! overlap between segment bounding boxes.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::geom::Hyperrectangle;
use crate::kdtree::{bulkload, BuildMode, DimSource, NodePool, PoolError, Subtree, NIL};
use crate::record::{DimValue, RecordDescriptor};

/// A micro-batch of contiguous records, the unit of ingestion.
#[derive(Clone)]
pub struct Chunk {
    data: Arc<[u8]>,
    offset: usize,
    count: usize,
    desc: Arc<RecordDescriptor>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("chunk must hold at least one record")]
    Empty,
    #[error("chunk range [{offset}, {offset}+{count}*{record_size}) exceeds buffer of {len} bytes")]
    OutOfBounds {
        offset: usize,
        count: usize,
        record_size: usize,
        len: usize,
    },
    #[error("buffer length {len} is not a multiple of record size {record_size}")]
    Misaligned { len: usize, record_size: usize },
}

impl Chunk {
    pub fn new(
        data: Arc<[u8]>,
        offset: usize,
        count: usize,
        desc: Arc<RecordDescriptor>,
    ) -> Result<Self, ChunkError> {
        if count == 0 {
            return Err(ChunkError::Empty);
        }
        let r = desc.record_size();
        let end = offset.saturating_add(count.saturating_mul(r));
        if end > data.len() {
            return Err(ChunkError::OutOfBounds {
                offset,
                count,
                record_size: r,
                len: data.len(),
            });
        }
        Ok(Chunk {
            data,
            offset,
            count,
            desc,
        })
    }

    pub fn from_vec(bytes: Vec<u8>, desc: Arc<RecordDescriptor>) -> Result<Self, ChunkError> {
        let r = desc.record_size();
        if !bytes.len().is_multiple_of(r) {
            return Err(ChunkError::Misaligned {
                len: bytes.len(),
                record_size: r,
            });
        }
        let count = bytes.len() / r;
        Chunk::new(Arc::from(bytes), 0, count, desc)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn desc(&self) -> &Arc<RecordDescriptor> {
        &self.desc
    }

    #[inline]
    pub fn record(&self, i: u32) -> &[u8] {
        let r = self.desc.record_size();
        let at = self.offset + i as usize * r;
        &self.data[at..at + r]
    }

    /// Dimension values of record `i`, in descriptor dimension order.
    pub fn dim_values(&self, i: u32) -> Vec<DimValue> {
        (0..self.desc.dim_count())
            .map(|d| self.desc.extract_dim_unchecked(self.record(i), d))
            .collect()
    }
}

impl DimSource for Chunk {
    fn dim_count(&self) -> usize {
        self.desc.dim_count()
    }

    #[inline]
    fn dim_value(&self, rec: u32, dim: usize) -> DimValue {
        self.desc.extract_dim_unchecked(self.record(rec), dim)
    }
}

/// Chunk segmentation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Random,
    KdTree,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Random => write!(f, "random"),
            Scheme::KdTree => write!(f, "kdtree"),
        }
    }
}

/// Segmentation tuning knobs.
#[derive(Debug, Clone, Copy)]
pub struct SegmentationConfig {
    /// Target maximum segment size in bytes (S).
    pub max_segment_size: u64,
    /// Overpacking factor for the kd scheme; compensates for partially filled
    /// segments. Must be >= 1.
    pub overpacking: u32,
    /// Sample count M for median-of-M pivot selection; odd, default 3
    /// (larger values showed no benefit).
    pub median_samples: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            max_segment_size: 1 << 20,
            overpacking: 4,
            median_samples: 3,
        }
    }
}

/// Number of groups the random scheme creates up front: `ceil(c*r/S)`.
pub fn group_count(count: usize, record_size: usize, max_segment_size: u64) -> usize {
    let bytes = count as u64 * record_size as u64;
    (bytes.div_ceil(max_segment_size)).max(1) as usize
}

/// Per-segment record cap for kd partitioning: `ceil(S/r) * overpacking`.
pub fn rps_max(cfg: &SegmentationConfig, record_size: usize) -> u64 {
    cfg.max_segment_size.div_ceil(record_size as u64) * cfg.overpacking as u64
}

/// One planned segment: its records (in the order they will be laid out),
/// the branching dimension of its packed tree root, an optional frozen
/// subtree carried over from kd partitioning, and the bounding box
/// accumulated during assignment.
pub struct PlannedGroup {
    pub records: Vec<u32>,
    pub initial_dim: u32,
    pub subtree: Option<Subtree>,
    pub bounds: Option<Hyperrectangle>,
}

/// How one chunk's records split into segment groups. Groups partition the
/// chunk: pairwise disjoint, union equal to the whole chunk. The random
/// scheme may leave empty groups in the plan; assembly drops them.
pub struct SegmentPlan {
    pub scheme: Scheme,
    pub groups: Vec<PlannedGroup>,
}

impl SegmentPlan {
    pub fn assigned_records(&self) -> usize {
        self.groups.iter().map(|g| g.records.len()).sum()
    }
}

/// Uniformly-random segmentation: every record lands in one of
/// `ceil(c*r/S)` groups chosen independently at random.
pub fn segment_random(chunk: &Chunk, cfg: &SegmentationConfig, rng: &mut impl Rng) -> SegmentPlan {
    let k = group_count(chunk.count(), chunk.desc().record_size(), cfg.max_segment_size);
    let mut groups: Vec<PlannedGroup> = (0..k)
        .map(|_| PlannedGroup {
            records: Vec::new(),
            initial_dim: 0,
            subtree: None,
            bounds: None,
        })
        .collect();
    for i in 0..chunk.count() as u32 {
        let g = &mut groups[rng.random_range(0..k)];
        g.records.push(i);
        let vals = chunk.dim_values(i);
        match g.bounds.as_mut() {
            Some(b) => b.include(&vals),
            None => g.bounds = Some(Hyperrectangle::point(vals)),
        }
    }
    SegmentPlan {
        scheme: Scheme::Random,
        groups,
    }
}

/// Kd-tree-partitioning segmentation.
///
/// Bulkloads the chunk (pivot sampling at the root level only, root dimension
/// 0), then repeatedly descends from the root toward the child with the
/// higher node count (ties to the left) until reaching a subtree of at most
/// `rps_max` nodes; that subtree becomes one group and is detached, updating
/// ancestor counts. All pool nodes are released before return.
pub fn segment_kdtree(
    chunk: &Chunk,
    cfg: &SegmentationConfig,
    pool: &Arc<NodePool>,
    rng: &mut impl Rng,
) -> Result<SegmentPlan, PoolError> {
    let cap = rps_max(cfg, chunk.desc().record_size());
    let mut handles: Vec<u32> = (0..chunk.count() as u32).collect();
    let mut tree = bulkload(
        chunk,
        &mut handles,
        0,
        BuildMode::RootLevelOnly,
        pool,
        cfg.median_samples,
        rng,
    )?;

    let dims = tree.dims();
    let mut groups = Vec::new();
    while let Some(root) = tree.root() {
        let mut path = vec![root];
        let mut dim = tree.root_dim();
        loop {
            let id = *path.last().unwrap();
            let node = tree.node(id);
            if node.count as u64 <= cap {
                break;
            }
            let left_count = if node.left != NIL { tree.node(node.left).count } else { 0 };
            let right_count = if node.right != NIL { tree.node(node.right).count } else { 0 };
            // Higher node count first; ties go left.
            let next = if right_count > left_count { node.right } else { node.left };
            debug_assert_ne!(next, NIL);
            path.push(next);
            dim = (dim + 1) % dims;
        }
        let target = *path.last().unwrap();
        let sub = tree.freeze(target, dim);
        let mut records = Vec::with_capacity(sub.len());
        let mut bounds: Option<Hyperrectangle> = None;
        for rec in sub.records() {
            records.push(rec);
            let vals = chunk.dim_values(rec);
            match bounds.as_mut() {
                Some(b) => b.include(&vals),
                None => bounds = Some(Hyperrectangle::point(vals)),
            }
        }
        groups.push(PlannedGroup {
            records,
            initial_dim: dim,
            subtree: Some(sub),
            bounds,
        });
        tree.detach_along_path(&path);
    }
    drop(tree);

    Ok(SegmentPlan {
        scheme: Scheme::KdTree,
        groups,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::record::{FieldSpec, FieldType};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use uuid::Uuid;

    pub(crate) fn int2_desc() -> Arc<RecordDescriptor> {
        Arc::new(
            RecordDescriptor::new(
                Uuid::from_u128(0x11112222333344445555666677778888),
                vec![
                    FieldSpec {
                        name: "x".into(),
                        ty: FieldType::Int64,
                    },
                    FieldSpec {
                        name: "y".into(),
                        ty: FieldType::Int64,
                    },
                ],
                &["x".into(), "y".into()],
            )
            .unwrap(),
        )
    }

    pub(crate) fn int2_chunk(points: &[(i64, i64)]) -> Chunk {
        let desc = int2_desc();
        let mut bytes = Vec::with_capacity(points.len() * 16);
        for (x, y) in points {
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        Chunk::from_vec(bytes, desc).unwrap()
    }

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(11)
    }

    #[test]
    fn group_count_examples() {
        assert_eq!(group_count(10, 100, 500), 2);
        assert_eq!(group_count(10_000, 132, 1 << 20), 2);
        assert_eq!(group_count(1, 16, 1 << 20), 1);
    }

    #[test]
    fn rps_max_examples() {
        let cfg = |s, w| SegmentationConfig {
            max_segment_size: s,
            overpacking: w,
            median_samples: 3,
        };
        assert_eq!(rps_max(&cfg(1 << 20, 4), 256), 16_384);
        assert_eq!(rps_max(&cfg(256, 1), 256), 1);
        assert_eq!(rps_max(&cfg(1 << 20, 4), 132), 31_776);
    }

    fn assert_partitions(plan: &SegmentPlan, count: usize) {
        let mut seen = vec![false; count];
        for g in &plan.groups {
            for &r in &g.records {
                assert!(!seen[r as usize], "record {r} assigned twice");
                seen[r as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "some record was never assigned");
    }

    #[test]
    fn random_scheme_partitions() {
        let points: Vec<(i64, i64)> = (0..100).map(|i| (i, -i)).collect();
        let chunk = int2_chunk(&points);
        // r = 16, c = 100 -> 1600 bytes; S = 500 -> 4 groups.
        let cfg = SegmentationConfig {
            max_segment_size: 500,
            overpacking: 4,
            median_samples: 3,
        };
        let plan = segment_random(&chunk, &cfg, &mut rng());
        assert_eq!(plan.groups.len(), 4);
        assert_partitions(&plan, 100);
        for g in &plan.groups {
            assert!(g.records.len() <= 100);
            assert_eq!(g.initial_dim, 0);
            // Bounds match an independent scan.
            if !g.records.is_empty() {
                let rect = g.bounds.as_ref().unwrap();
                let oracle = Hyperrectangle::of_records(
                    chunk.desc(),
                    g.records.iter().map(|&r| chunk.record(r)),
                )
                .unwrap();
                assert_eq!(rect, &oracle);
            }
        }
    }

    #[test]
    fn random_scheme_single_record() {
        let chunk = int2_chunk(&[(3, 4)]);
        let plan = segment_random(&chunk, &SegmentationConfig::default(), &mut rng());
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].records, vec![0]);
    }

    #[test]
    fn random_scheme_reproducible() {
        let points: Vec<(i64, i64)> = (0..500).map(|i| (i * 7 % 101, i)).collect();
        let chunk = int2_chunk(&points);
        let cfg = SegmentationConfig {
            max_segment_size: 512,
            overpacking: 4,
            median_samples: 3,
        };
        let a = segment_random(&chunk, &cfg, &mut ChaCha12Rng::seed_from_u64(99));
        let b = segment_random(&chunk, &cfg, &mut ChaCha12Rng::seed_from_u64(99));
        assert_eq!(a.groups.len(), b.groups.len());
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            assert_eq!(ga.records, gb.records);
        }
    }

    #[test]
    fn kdtree_whole_chunk_fits() {
        let points: Vec<(i64, i64)> = (0..7).map(|i| (i, 10 - i)).collect();
        let chunk = int2_chunk(&points);
        // r = 16; rps_max = ceil(112/16)*1 = 7.
        let cfg = SegmentationConfig {
            max_segment_size: 112,
            overpacking: 1,
            median_samples: 3,
        };
        let pool = NodePool::new(16, 1).unwrap();
        let plan = segment_kdtree(&chunk, &cfg, &pool, &mut rng()).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].initial_dim, 0);
        assert_eq!(plan.groups[0].records.len(), 7);
        assert_eq!(pool.free_nodes(), pool.capacity());
    }

    #[test]
    fn kdtree_singleton_groups_carry_level_dims() {
        // Values 1, 5, 9 on x build root 5 with leaves 1 and 9 at level 1.
        let chunk = int2_chunk(&[(1, 0), (5, 0), (9, 0)]);
        let cfg = SegmentationConfig {
            max_segment_size: 16,
            overpacking: 1,
            median_samples: 3,
        };
        let pool = NodePool::new(16, 1).unwrap();
        let plan = segment_kdtree(&chunk, &cfg, &pool, &mut rng()).unwrap();
        assert_eq!(plan.groups.len(), 3);
        let xs: Vec<i64> = plan
            .groups
            .iter()
            .map(|g| {
                assert_eq!(g.records.len(), 1);
                i64::from_le_bytes(chunk.record(g.records[0])[..8].try_into().unwrap())
            })
            .collect();
        // Left leaf first (tie broken left), then right leaf, then the root.
        assert_eq!(xs, vec![1, 9, 5]);
        assert_eq!(
            plan.groups.iter().map(|g| g.initial_dim).collect::<Vec<_>>(),
            vec![1, 1, 0]
        );
    }

    #[test]
    fn kdtree_partitions_and_caps_groups() {
        let mut r = rng();
        for _ in 0..10 {
            let n = r.random_range(1..400usize);
            let points: Vec<(i64, i64)> = (0..n)
                .map(|_| (r.random_range(-100..100), r.random_range(-100..100)))
                .collect();
            let chunk = int2_chunk(&points);
            let cfg = SegmentationConfig {
                max_segment_size: 16 * 20,
                overpacking: 2,
                median_samples: 3,
            };
            let pool = NodePool::new(1024, 1).unwrap();
            let plan = segment_kdtree(&chunk, &cfg, &pool, &mut r).unwrap();
            assert_partitions(&plan, n);
            let cap = rps_max(&cfg, 16);
            for g in &plan.groups {
                assert!(!g.records.is_empty());
                assert!(g.records.len() as u64 <= cap);
                let rect = g.bounds.as_ref().unwrap();
                let oracle = Hyperrectangle::of_records(
                    chunk.desc(),
                    g.records.iter().map(|&rec| chunk.record(rec)),
                )
                .unwrap();
                assert_eq!(rect, &oracle);
            }
            assert_eq!(pool.free_nodes(), pool.capacity());
        }
    }
}
