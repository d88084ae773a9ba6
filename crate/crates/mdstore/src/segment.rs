//! Data segments: the immutable unit of storage.
//!
//! A segment serializes as header | indexing-dimensions section | packed
//! kd-tree section | records section, all integers little-endian:
//!
//! ```text
//! header           16B segment uuid, 8B total_length, 16B record-type uuid
//! dims section     8B section_length, 4B dim count,
//!                  per dim: 4B field ordinal, 8B min, 8B max (raw, zero-extended)
//! kd-tree section  8B section_length, 4B initial_dimension, 4B node count,
//!                  per node: 8B record_pos, 4B left, 4B right (i32, -1 = nil)
//! records section  8B section_length, raw fixed-width records
//! ```
//!
//! `section_length` counts the bytes that follow it within its section.
//! Deserialization validates everything it can: section arithmetic, child
//! topology, record positions, bound exactness and the kd ordering invariant,
//! so a segment that decodes is safe to query.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;
use uuid::Uuid;

use crate::geom::Hyperrectangle;
use crate::kdtree::{bulkload, BuildMode, NodePool, PoolError, Subtree};
use crate::record::{DescriptorRegistry, DimValue, RecordDescriptor};
use crate::segmentation::{Chunk, PlannedGroup};

pub const HEADER_LEN: usize = 40;
/// On-disk file extension for segments.
pub const SEGMENT_EXT: &str = "mdseg";

/// Serialized kd-tree node: byte offset of its record in the records section
/// plus array positions of its children (-1 for nil).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedKdNode {
    pub record_pos: u64,
    pub left: i32,
    pub right: i32,
}

/// An assembled data segment.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSegment {
    segment_uuid: Uuid,
    record_type_uuid: Uuid,
    dim_fields: Vec<u32>,
    bounds: Hyperrectangle,
    initial_dimension: u32,
    nodes: Vec<PackedKdNode>,
    records: Vec<u8>,
    desc: Arc<RecordDescriptor>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("buffer truncated: need {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },
    #[error("declared total_length {declared} does not match buffer length {got}")]
    TotalLengthMismatch { declared: u64, got: usize },
    #[error("record type {0} unknown to the descriptor registry")]
    UnknownRecordType(Uuid),
    #[error("{section} section_length {declared} inconsistent with content ({expected})")]
    SectionLength {
        section: &'static str,
        declared: u64,
        expected: u64,
    },
    #[error("segment has {got} indexing dimensions, descriptor has {expected}")]
    DimCountMismatch { got: u32, expected: usize },
    #[error("dimension {dim} backed by field {got}, descriptor says {expected}")]
    DimFieldMismatch { dim: u32, got: u32, expected: u32 },
    #[error("dimension {dim} bound has a malformed raw encoding")]
    BadDimValue { dim: u32 },
    #[error("dimension {dim} bounds are not the exact min/max of the records")]
    InexactBounds { dim: u32 },
    #[error("record {rec} has NaN in indexing dimension {dim}")]
    NanDim { rec: u32, dim: u32 },
    #[error("initial_dimension {got} out of range for {dims} dimensions")]
    BadInitialDimension { got: u32, dims: u32 },
    #[error("segment must hold at least one record")]
    Empty,
    #[error("node {node} record_pos {pos} is not a valid record offset")]
    BadRecordPos { node: u32, pos: u64 },
    #[error("node {node} record_pos {pos} referenced more than once")]
    DuplicateRecordPos { node: u32, pos: u64 },
    #[error("node {node} child index {child} out of range")]
    BadChildIndex { node: u32, child: i32 },
    #[error("packed kd-tree is not a single tree rooted at node 0")]
    NotATree,
    #[error("packed kd-tree violates the ordering invariant at node {node}")]
    OrderViolation { node: u32 },
}

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("cannot assemble an empty group")]
    EmptyGroup,
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Map a frozen subtree to its packed form. Records are laid out in the same
/// pre-order as the nodes, so node `i`'s record sits at byte `i * record_size`.
pub fn pack_tree(subtree: &Subtree, record_size: usize) -> Vec<PackedKdNode> {
    subtree
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| PackedKdNode {
            record_pos: (i * record_size) as u64,
            left: n.left,
            right: n.right,
        })
        .collect()
}

/// Assemble a planned group into a data segment.
///
/// If the group carries a subtree from kd partitioning it is packed directly;
/// otherwise (random scheme) a fresh kd-tree is bulkloaded over the group
/// with root dimension 0, drawing nodes from `pool`. Records are copied in
/// tree pre-order; this is the only time record bytes move.
pub fn assemble(
    chunk: &Chunk,
    group: &PlannedGroup,
    pool: &Arc<NodePool>,
    rng: &mut impl Rng,
) -> Result<DataSegment, AssembleError> {
    if group.records.is_empty() {
        return Err(AssembleError::EmptyGroup);
    }
    let desc = chunk.desc();
    let r = desc.record_size();

    let built;
    let subtree = match &group.subtree {
        Some(sub) => {
            debug_assert_eq!(sub.len(), group.records.len());
            sub
        }
        None => {
            let mut handles = group.records.clone();
            let tree = bulkload(
                chunk,
                &mut handles,
                group.initial_dim,
                BuildMode::FullRecursive,
                pool,
                3,
                rng,
            )?;
            built = tree.freeze(tree.root().expect("nonempty group"), group.initial_dim);
            &built
        }
    };

    let nodes = pack_tree(subtree, r);
    let mut records = Vec::with_capacity(subtree.len() * r);
    for rec in subtree.records() {
        records.extend_from_slice(chunk.record(rec));
    }
    let bounds = match &group.bounds {
        Some(b) => b.clone(),
        None => Hyperrectangle::of_records(desc, subtree.records().map(|rec| chunk.record(rec)))
            .expect("nonempty group"),
    };
    debug_assert!(bounds.is_valid());

    Ok(DataSegment {
        segment_uuid: Uuid::new_v4(),
        record_type_uuid: desc.type_uuid(),
        dim_fields: desc.dims().iter().map(|d| d.field as u32).collect(),
        bounds,
        initial_dimension: subtree.root_dim(),
        nodes,
        records,
        desc: Arc::clone(desc),
    })
}

impl DataSegment {
    pub fn segment_uuid(&self) -> Uuid {
        self.segment_uuid
    }

    pub fn record_type_uuid(&self) -> Uuid {
        self.record_type_uuid
    }

    pub fn bounds(&self) -> &Hyperrectangle {
        &self.bounds
    }

    pub fn initial_dimension(&self) -> u32 {
        self.initial_dimension
    }

    pub fn nodes(&self) -> &[PackedKdNode] {
        &self.nodes
    }

    pub fn dim_fields(&self) -> &[u32] {
        &self.dim_fields
    }

    pub fn desc(&self) -> &Arc<RecordDescriptor> {
        &self.desc
    }

    pub fn record_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn record(&self, i: usize) -> &[u8] {
        let r = self.desc.record_size();
        &self.records[i * r..(i + 1) * r]
    }

    pub fn record_at_pos(&self, pos: u64) -> &[u8] {
        let r = self.desc.record_size();
        &self.records[pos as usize..pos as usize + r]
    }

    pub fn records_raw(&self) -> &[u8] {
        &self.records
    }

    /// Total serialized length in bytes.
    pub fn total_length(&self) -> u64 {
        let dims_payload = 4 + 20 * self.dim_fields.len() as u64;
        let kd_payload = 8 + 16 * self.nodes.len() as u64;
        let rec_payload = self.records.len() as u64;
        HEADER_LEN as u64 + 8 + dims_payload + 8 + kd_payload + 8 + rec_payload
    }

    /// Serialize to the on-disk layout. Deterministic: equal segments produce
    /// equal bytes.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_length() as usize);
        out.extend_from_slice(self.segment_uuid.as_bytes());
        out.extend_from_slice(&self.total_length().to_le_bytes());
        out.extend_from_slice(self.record_type_uuid.as_bytes());

        let dims_payload = 4 + 20 * self.dim_fields.len() as u64;
        out.extend_from_slice(&dims_payload.to_le_bytes());
        out.extend_from_slice(&(self.dim_fields.len() as u32).to_le_bytes());
        for (i, &field) in self.dim_fields.iter().enumerate() {
            out.extend_from_slice(&field.to_le_bytes());
            out.extend_from_slice(&self.bounds.lo()[i].to_raw8());
            out.extend_from_slice(&self.bounds.hi()[i].to_raw8());
        }

        let kd_payload = 8 + 16 * self.nodes.len() as u64;
        out.extend_from_slice(&kd_payload.to_le_bytes());
        out.extend_from_slice(&self.initial_dimension.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&n.record_pos.to_le_bytes());
            out.extend_from_slice(&n.left.to_le_bytes());
            out.extend_from_slice(&n.right.to_le_bytes());
        }

        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.records);
        debug_assert_eq!(out.len() as u64, self.total_length());
        out
    }

    /// Decode and validate a serialized segment. The record type must be
    /// known to `registry`; all structural and geometric invariants are
    /// checked so that a segment that decodes is safe to query.
    pub fn deserialize(bytes: &[u8], registry: &DescriptorRegistry) -> Result<Self, SegmentError> {
        let mut rd = Reader { buf: bytes, at: 0 };
        let segment_uuid = Uuid::from_bytes(rd.take::<16>()?);
        let total = rd.u64()?;
        if total != bytes.len() as u64 {
            if (bytes.len() as u64) < total {
                return Err(SegmentError::Truncated {
                    need: total as usize,
                    got: bytes.len(),
                });
            }
            return Err(SegmentError::TotalLengthMismatch {
                declared: total,
                got: bytes.len(),
            });
        }
        let record_type_uuid = Uuid::from_bytes(rd.take::<16>()?);
        let desc = registry
            .get(&record_type_uuid)
            .ok_or(SegmentError::UnknownRecordType(record_type_uuid))?
            .clone();

        // Dims section.
        let dims_len = rd.u64()?;
        let dim_count = rd.u32()?;
        let expected = 4 + 20 * dim_count as u64;
        if dims_len != expected {
            return Err(SegmentError::SectionLength {
                section: "dims",
                declared: dims_len,
                expected,
            });
        }
        if dim_count as usize != desc.dim_count() {
            return Err(SegmentError::DimCountMismatch {
                got: dim_count,
                expected: desc.dim_count(),
            });
        }
        let mut dim_fields = Vec::with_capacity(dim_count as usize);
        let mut lo = Vec::with_capacity(dim_count as usize);
        let mut hi = Vec::with_capacity(dim_count as usize);
        for d in 0..dim_count {
            let field = rd.u32()?;
            let spec = &desc.dims()[d as usize];
            if field as usize != spec.field {
                return Err(SegmentError::DimFieldMismatch {
                    dim: d,
                    got: field,
                    expected: spec.field as u32,
                });
            }
            let lo_raw = rd.take::<8>()?;
            let hi_raw = rd.take::<8>()?;
            let l = DimValue::from_raw8(spec.kind, &lo_raw)
                .ok_or(SegmentError::BadDimValue { dim: d })?;
            let h = DimValue::from_raw8(spec.kind, &hi_raw)
                .ok_or(SegmentError::BadDimValue { dim: d })?;
            if l.is_nan() || h.is_nan() || l.cmp_same_kind(&h).is_gt() {
                return Err(SegmentError::BadDimValue { dim: d });
            }
            dim_fields.push(field);
            lo.push(l);
            hi.push(h);
        }
        let bounds = Hyperrectangle::from_bounds(lo, hi);

        // Packed kd-tree section.
        let kd_len = rd.u64()?;
        let initial_dimension = rd.u32()?;
        let node_count = rd.u32()?;
        let expected = 8 + 16 * node_count as u64;
        if kd_len != expected {
            return Err(SegmentError::SectionLength {
                section: "kdtree",
                declared: kd_len,
                expected,
            });
        }
        if node_count == 0 {
            return Err(SegmentError::Empty);
        }
        if initial_dimension >= dim_count {
            return Err(SegmentError::BadInitialDimension {
                got: initial_dimension,
                dims: dim_count,
            });
        }
        let mut nodes = Vec::with_capacity(node_count as usize);
        for _ in 0..node_count {
            nodes.push(PackedKdNode {
                record_pos: rd.u64()?,
                left: rd.i32()?,
                right: rd.i32()?,
            });
        }

        // Records section.
        let rec_len = rd.u64()?;
        let r = desc.record_size() as u64;
        let expected = node_count as u64 * r;
        if rec_len != expected {
            return Err(SegmentError::SectionLength {
                section: "records",
                declared: rec_len,
                expected,
            });
        }
        let records = rd.bytes(rec_len as usize)?.to_vec();
        debug_assert_eq!(rd.at, bytes.len());

        let seg = DataSegment {
            segment_uuid,
            record_type_uuid,
            dim_fields,
            bounds,
            initial_dimension,
            nodes,
            records,
            desc,
        };
        seg.validate_topology()?;
        seg.validate_geometry()?;
        Ok(seg)
    }

    /// Record positions are distinct in-range multiples of the record size
    /// and child links form one tree rooted at node 0.
    fn validate_topology(&self) -> Result<(), SegmentError> {
        let n = self.nodes.len();
        let r = self.desc.record_size() as u64;
        let mut pos_seen = vec![false; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.record_pos % r != 0 || node.record_pos >= n as u64 * r {
                return Err(SegmentError::BadRecordPos {
                    node: i as u32,
                    pos: node.record_pos,
                });
            }
            let slot = (node.record_pos / r) as usize;
            if pos_seen[slot] {
                return Err(SegmentError::DuplicateRecordPos {
                    node: i as u32,
                    pos: node.record_pos,
                });
            }
            pos_seen[slot] = true;
            for child in [node.left, node.right] {
                if child != -1 && (child < 0 || child as usize >= n) {
                    return Err(SegmentError::BadChildIndex {
                        node: i as u32,
                        child,
                    });
                }
            }
        }
        let mut visited = vec![false; n];
        let mut stack = vec![0usize];
        let mut seen = 0usize;
        while let Some(i) = stack.pop() {
            if visited[i] {
                return Err(SegmentError::NotATree);
            }
            visited[i] = true;
            seen += 1;
            let node = &self.nodes[i];
            if node.left != -1 {
                stack.push(node.left as usize);
            }
            if node.right != -1 {
                stack.push(node.right as usize);
            }
        }
        if seen != n {
            return Err(SegmentError::NotATree);
        }
        Ok(())
    }

    /// Bounds must be the exact (canonical-bytes) min/max of the records, no
    /// indexing dimension may be NaN, and the packed tree must satisfy the
    /// per-level ordering invariant with dimensions rotating round-robin from
    /// `initial_dimension`.
    fn validate_geometry(&self) -> Result<(), SegmentError> {
        let dims = self.dim_fields.len();
        // NaN scan + exact bounds recompute.
        let mut rect: Option<Hyperrectangle> = None;
        let mut vals = Vec::with_capacity(dims);
        for i in 0..self.record_count() {
            let rec = self.record(i);
            vals.clear();
            for d in 0..dims {
                let v = self.desc.extract_dim_unchecked(rec, d);
                if v.is_nan() {
                    return Err(SegmentError::NanDim {
                        rec: i as u32,
                        dim: d as u32,
                    });
                }
                vals.push(v);
            }
            match rect.as_mut() {
                Some(rc) => rc.include(&vals),
                None => rect = Some(Hyperrectangle::point(vals.clone())),
            }
        }
        let rect = rect.expect("validated nonempty");
        for d in 0..dims {
            if rect.lo()[d].to_raw8() != self.bounds.lo()[d].to_raw8()
                || rect.hi()[d].to_raw8() != self.bounds.hi()[d].to_raw8()
            {
                return Err(SegmentError::InexactBounds { dim: d as u32 });
            }
        }

        // Ordering invariant, iteratively with an undo stack so hostile
        // spine-shaped trees cannot overflow the call stack.
        enum Frame {
            Enter { node: u32, dim: u32 },
            Set { dim: u32, upper: bool, value: DimValue },
            Restore { dim: u32, upper: bool, prev: Option<DimValue> },
        }
        let mut lows: Vec<Option<DimValue>> = vec![None; dims]; // exclusive
        let mut highs: Vec<Option<DimValue>> = vec![None; dims]; // inclusive
        let mut stack = vec![Frame::Enter { node: 0, dim: self.initial_dimension }];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Set { dim, upper, value } => {
                    if upper {
                        highs[dim as usize] = Some(value);
                    } else {
                        lows[dim as usize] = Some(value);
                    }
                }
                Frame::Restore { dim, upper, prev } => {
                    if upper {
                        highs[dim as usize] = prev;
                    } else {
                        lows[dim as usize] = prev;
                    }
                }
                Frame::Enter { node, dim } => {
                    let pk = &self.nodes[node as usize];
                    let rec = self.record_at_pos(pk.record_pos);
                    for d in 0..dims {
                        let v = self.desc.extract_dim_unchecked(rec, d);
                        if let Some(lo) = &lows[d] {
                            if v.cmp_same_kind(lo).is_le() {
                                return Err(SegmentError::OrderViolation { node });
                            }
                        }
                        if let Some(hi) = &highs[d] {
                            if v.cmp_same_kind(hi).is_gt() {
                                return Err(SegmentError::OrderViolation { node });
                            }
                        }
                    }
                    let split = self.desc.extract_dim_unchecked(rec, dim as usize);
                    let next = (dim + 1) % dims as u32;
                    if pk.right != -1 {
                        stack.push(Frame::Restore {
                            dim,
                            upper: false,
                            prev: lows[dim as usize],
                        });
                        stack.push(Frame::Enter {
                            node: pk.right as u32,
                            dim: next,
                        });
                        stack.push(Frame::Set {
                            dim,
                            upper: false,
                            value: split,
                        });
                    }
                    if pk.left != -1 {
                        stack.push(Frame::Restore {
                            dim,
                            upper: true,
                            prev: highs[dim as usize],
                        });
                        stack.push(Frame::Enter {
                            node: pk.left as u32,
                            dim: next,
                        });
                        stack.push(Frame::Set {
                            dim,
                            upper: true,
                            value: split,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], SegmentError> {
        if self.at + n > self.buf.len() {
            return Err(SegmentError::Truncated {
                need: self.at + n,
                got: self.buf.len(),
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], SegmentError> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64, SegmentError> {
        Ok(u64::from_le_bytes(self.take::<8>()?))
    }

    fn u32(&mut self) -> Result<u32, SegmentError> {
        Ok(u32::from_le_bytes(self.take::<4>()?))
    }

    fn i32(&mut self) -> Result<i32, SegmentError> {
        Ok(i32::from_le_bytes(self.take::<4>()?))
    }
}
