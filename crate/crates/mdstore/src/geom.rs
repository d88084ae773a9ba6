//! Bounding hyperrectangles: the geometry the global index works over.

use crate::record::{DimValue, RecordDescriptor};

/// Per-dimension `[min, max]` bounds enclosing a set of records. Intervals are
/// closed on both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperrectangle {
    lo: Vec<DimValue>,
    hi: Vec<DimValue>,
}

impl Hyperrectangle {
    /// Degenerate rectangle covering a single point.
    pub fn point(values: Vec<DimValue>) -> Self {
        let values: Vec<DimValue> = values.iter().map(DimValue::canonical).collect();
        Hyperrectangle {
            hi: values.clone(),
            lo: values,
        }
    }

    pub fn from_bounds(lo: Vec<DimValue>, hi: Vec<DimValue>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        Hyperrectangle { lo, hi }
    }

    /// Grow to cover `values`.
    pub fn include(&mut self, values: &[DimValue]) {
        debug_assert_eq!(values.len(), self.lo.len());
        for (i, v) in values.iter().enumerate() {
            if v.cmp_same_kind(&self.lo[i]).is_lt() {
                self.lo[i] = v.canonical();
            }
            if v.cmp_same_kind(&self.hi[i]).is_gt() {
                self.hi[i] = v.canonical();
            }
        }
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[DimValue] {
        &self.lo
    }

    pub fn hi(&self) -> &[DimValue] {
        &self.hi
    }

    pub fn is_valid(&self) -> bool {
        self.lo.len() == self.hi.len()
            && self
                .lo
                .iter()
                .zip(&self.hi)
                .all(|(l, h)| l.kind() == h.kind() && l.cmp_same_kind(h).is_le())
    }

    pub fn contains(&self, values: &[DimValue]) -> bool {
        values.len() == self.lo.len()
            && values.iter().enumerate().all(|(i, v)| {
                self.lo[i].cmp_same_kind(v).is_le() && v.cmp_same_kind(&self.hi[i]).is_le()
            })
    }

    /// Closed-interval intersection test on every dimension.
    pub fn intersects(&self, other: &Hyperrectangle) -> bool {
        debug_assert_eq!(self.dims(), other.dims());
        self.lo.iter().enumerate().all(|(i, lo)| {
            lo.cmp_same_kind(&other.hi[i]).is_le() && other.lo[i].cmp_same_kind(&self.hi[i]).is_le()
        })
    }

    /// Intersection against a query box whose bounds may be absent
    /// (unbounded dimensions match everything).
    pub fn intersects_query(&self, lo: &[Option<DimValue>], hi: &[Option<DimValue>]) -> bool {
        debug_assert_eq!(self.dims(), lo.len());
        (0..self.dims()).all(|i| {
            let above_lo = match &lo[i] {
                Some(l) => l.cmp_same_kind(&self.hi[i]).is_le(),
                None => true,
            };
            let below_hi = match &hi[i] {
                Some(h) => self.lo[i].cmp_same_kind(h).is_le(),
                None => true,
            };
            above_lo && below_hi
        })
    }

    /// Exact per-dimension min/max over a set of records; `None` on an empty
    /// iterator.
    pub fn of_records<'a>(
        desc: &RecordDescriptor,
        records: impl Iterator<Item = &'a [u8]>,
    ) -> Option<Self> {
        let mut rect: Option<Hyperrectangle> = None;
        let mut vals = Vec::with_capacity(desc.dim_count());
        for rec in records {
            vals.clear();
            for d in 0..desc.dim_count() {
                vals.push(desc.extract_dim_unchecked(rec, d));
            }
            match rect.as_mut() {
                Some(r) => r.include(&vals),
                None => rect = Some(Hyperrectangle::point(vals.clone())),
            }
        }
        rect
    }
}
