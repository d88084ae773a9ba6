//! Structured range queries: the text DSL, per-segment record iterators, and
//! the aggregates the range workloads use.
//!
//! The DSL covers conjunctive range predicates over indexing dimensions plus
//! one aggregate or projection:
//!
//! ```text
//! count(*) where element_id = 1465135408
//! avg(passenger_count) where pickup_latitude in [40.76, 40.78] and pickup_longitude >= -73.89
//! max(element_value)/10.0 where latitude >= 34.31 and latitude <= 38.11
//! distinct station_id, elevation where element_id = 1465135159 order by elevation desc limit 3
//! ```
//!
//! Comparison sugar (`=`, `>=`, `<=`, `>`, `<`) maps onto inclusive or
//! exclusive bounds; `in [lo, hi]` is inclusive on both ends. Bounds may only
//! name indexing dimensions; any field can appear in aggregates and
//! projections.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::record::{DimValue, FieldType, FieldValue, RecordDescriptor};
use crate::segment::{DataSegment, SegmentError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub value: DimValue,
    pub inclusive: bool,
}

/// Optional lower/upper bound for one indexing dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DimBounds {
    pub low: Option<Bound>,
    pub high: Option<Bound>,
}

impl DimBounds {
    pub fn is_unbounded(&self) -> bool {
        self.low.is_none() && self.high.is_none()
    }

    fn admits(&self, v: &DimValue) -> bool {
        if let Some(b) = &self.low {
            let ord = v.cmp_same_kind(&b.value);
            if ord.is_lt() || (!b.inclusive && ord.is_eq()) {
                return false;
            }
        }
        if let Some(b) = &self.high {
            let ord = v.cmp_same_kind(&b.value);
            if ord.is_gt() || (!b.inclusive && ord.is_eq()) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    /// Plain row selection (projection path).
    None,
    CountAll,
    /// Field ordinal of a numeric field.
    Avg(usize),
    Min(usize),
    Max(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortDir {
    Asc,
    Desc,
}

/// A parsed range query: per-dimension bounds plus the aggregate/projection
/// spec.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeQuery {
    pub bounds: Vec<DimBounds>,
    pub aggregate: Aggregate,
    /// Divisor applied to the aggregate value last.
    pub scale: Option<f64>,
    /// Projected field ordinals; `None` projects every field.
    pub projection: Option<Vec<usize>>,
    pub distinct: bool,
    pub order_by: Option<(usize, SortDir)>,
    pub limit: Option<usize>,
}

impl RangeQuery {
    /// Query matching everything, with the given aggregate.
    pub fn unbounded(desc: &RecordDescriptor, aggregate: Aggregate) -> Self {
        RangeQuery {
            bounds: vec![DimBounds::default(); desc.dim_count()],
            aggregate,
            scale: None,
            projection: None,
            distinct: false,
            order_by: None,
            limit: None,
        }
    }

    pub fn set_bound(&mut self, dim: usize, low: Option<Bound>, high: Option<Bound>) {
        self.bounds[dim] = DimBounds { low, high };
    }

    /// Exact record-level predicate across all bounded dimensions.
    pub fn matches(&self, desc: &RecordDescriptor, record: &[u8]) -> bool {
        self.bounds.iter().enumerate().all(|(d, b)| {
            b.is_unbounded() || b.admits(&desc.extract_dim_unchecked(record, d))
        })
    }

    /// Closed hull of the query box for the index-level overlap test: a safe
    /// superset of the exact predicate (inclusivity is enforced per record).
    pub fn closed_hull(&self) -> (Vec<Option<DimValue>>, Vec<Option<DimValue>>) {
        let lo = self.bounds.iter().map(|b| b.low.map(|x| x.value)).collect();
        let hi = self.bounds.iter().map(|b| b.high.map(|x| x.value)).collect();
        (lo, hi)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("query parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("order by field must be part of a distinct projection")]
    OrderByOutsideProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IteratorKind {
    KdTree,
    Sequential,
}

impl std::fmt::Display for IteratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IteratorKind::KdTree => write!(f, "kd"),
            IteratorKind::Sequential => write!(f, "seq"),
        }
    }
}

/// Walk a segment's packed kd-tree, pruning by the query bounds, and emit
/// every record in range. Returns the number of nodes visited. Dimensions
/// rotate round-robin starting from the segment's `initial_dimension`: at a
/// node branching on dimension `d`, the left subtree is entered only if the
/// query's low bound on `d` is at most the node's value, and the right only
/// if the high bound exceeds it (the tree splits `<=` left, `>` right).
pub fn kd_iterate(
    seg: &DataSegment,
    q: &RangeQuery,
    mut emit: impl FnMut(&[u8]),
) -> Result<u64, SegmentError> {
    let desc = seg.desc();
    let dims = desc.dim_count() as u32;
    let nodes = seg.nodes();
    let mut visited = 0u64;
    let mut stack: Vec<(i32, u32)> = vec![(0, seg.initial_dimension())];
    while let Some((idx, dim)) = stack.pop() {
        visited += 1;
        if visited > nodes.len() as u64 {
            return Err(SegmentError::NotATree);
        }
        let node = &nodes[idx as usize];
        let record = seg.record_at_pos(node.record_pos);
        let value = desc.extract_dim_unchecked(record, dim as usize);
        let b = &q.bounds[dim as usize];
        let next = (dim + 1) % dims;
        let descend_left = match &b.low {
            Some(low) => low.value.cmp_same_kind(&value).is_le(),
            None => true,
        };
        let descend_right = match &b.high {
            Some(high) => high.value.cmp_same_kind(&value).is_gt(),
            None => true,
        };
        if descend_left && node.left != -1 {
            stack.push((node.left, next));
        }
        if descend_right && node.right != -1 {
            stack.push((node.right, next));
        }
        if q.matches(desc, record) {
            emit(record);
        }
    }
    Ok(visited)
}

/// Scan a segment's records in section order, ignoring the packed tree.
/// Returns the number of records visited (always the record count).
pub fn seq_iterate(seg: &DataSegment, q: &RangeQuery, mut emit: impl FnMut(&[u8])) -> u64 {
    let desc = seg.desc();
    for i in 0..seg.record_count() {
        let record = seg.record(i);
        if q.matches(desc, record) {
            emit(record);
        }
    }
    seg.record_count() as u64
}

/// Iterate one segment with the chosen iterator kind.
pub fn iterate_segment(
    seg: &DataSegment,
    q: &RangeQuery,
    kind: IteratorKind,
    emit: impl FnMut(&[u8]),
) -> Result<u64, SegmentError> {
    match kind {
        IteratorKind::KdTree => kd_iterate(seg, q, emit),
        IteratorKind::Sequential => Ok(seq_iterate(seg, q, emit)),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    /// Segments whose bounding rectangles overlapped the query.
    pub segments_inspected: usize,
    /// Records (sequential) or tree nodes (kd) examined across segments.
    pub records_visited: u64,
    pub matched: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryValue {
    Count(u64),
    /// `None` over an empty match set.
    Avg(Option<f64>),
    Min(Option<FieldValue>),
    Max(Option<FieldValue>),
    Rows(Vec<Vec<FieldValue>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub value: QueryValue,
    pub stats: QueryStats,
}

// ---------------------------------------------------------------------------
// Aggregation

/// Bit pattern of an f32 remapped so unsigned comparison matches numeric
/// order (with -0.0 < +0.0; total and deterministic).
fn f32_order_key(v: f32) -> u32 {
    let b = v.to_bits();
    if b & 0x8000_0000 != 0 {
        !b
    } else {
        b | 0x8000_0000
    }
}

/// Canonical, hashable image of a projected cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum CellKey {
    Str(Vec<u8>),
    I64(i64),
    U32(u32),
    F32(u32),
}

fn cell_key(desc: &RecordDescriptor, record: &[u8], ordinal: usize) -> CellKey {
    match desc.decode_field(record, ordinal) {
        FieldValue::Str(s) => CellKey::Str(s.into_bytes()),
        FieldValue::I64(v) => CellKey::I64(v),
        FieldValue::U32(v) => CellKey::U32(v),
        FieldValue::F32(v) => CellKey::F32(f32_order_key(v)),
        FieldValue::F64(_) => unreachable!("projection never yields f64"),
    }
}

fn numeric_as_f64(v: &FieldValue) -> f64 {
    match v {
        FieldValue::I64(x) => *x as f64,
        FieldValue::U32(x) => *x as f64,
        FieldValue::F32(x) => *x as f64,
        FieldValue::F64(x) => *x,
        FieldValue::Str(_) => unreachable!("aggregate fields are numeric"),
    }
}

fn cmp_numeric(a: &FieldValue, b: &FieldValue) -> std::cmp::Ordering {
    match (a, b) {
        (FieldValue::I64(x), FieldValue::I64(y)) => x.cmp(y),
        (FieldValue::U32(x), FieldValue::U32(y)) => x.cmp(y),
        (FieldValue::F32(x), FieldValue::F32(y)) => x.total_cmp(y),
        _ => unreachable!("min/max compares one field with itself"),
    }
}

enum AggState {
    Count(u64),
    /// Integer-kind average: exact i128 sum.
    AvgInt { field: usize, sum: i128, n: u64 },
    /// Float-kind average: values are collected and sorted before summation
    /// so the result does not depend on segment visit order.
    AvgFloat { field: usize, vals: Vec<f64> },
    MinMax {
        field: usize,
        want_max: bool,
        best: Option<FieldValue>,
    },
    Rows {
        projection: Vec<usize>,
        distinct: bool,
        seen: BTreeMap<Vec<CellKey>, Vec<FieldValue>>,
        rows: Vec<(Vec<CellKey>, Vec<FieldValue>)>,
    },
}

/// Streaming aggregator over matched records.
pub struct Aggregator {
    state: AggState,
    scale: Option<f64>,
    order_by: Option<(usize, SortDir)>,
    limit: Option<usize>,
    desc: Arc<RecordDescriptor>,
    matched: u64,
}

impl Aggregator {
    pub fn new(q: &RangeQuery, desc: &Arc<RecordDescriptor>) -> Self {
        let state = match q.aggregate {
            Aggregate::CountAll => AggState::Count(0),
            Aggregate::Avg(field) => match desc.fields()[field].ty {
                FieldType::Float32 => AggState::AvgFloat {
                    field,
                    vals: Vec::new(),
                },
                _ => AggState::AvgInt { field, sum: 0, n: 0 },
            },
            Aggregate::Min(field) => AggState::MinMax {
                field,
                want_max: false,
                best: None,
            },
            Aggregate::Max(field) => AggState::MinMax {
                field,
                want_max: true,
                best: None,
            },
            Aggregate::None => AggState::Rows {
                projection: q
                    .projection
                    .clone()
                    .unwrap_or_else(|| (0..desc.fields().len()).collect()),
                distinct: q.distinct,
                seen: BTreeMap::new(),
                rows: Vec::new(),
            },
        };
        Aggregator {
            state,
            scale: q.scale,
            order_by: q.order_by,
            limit: q.limit,
            desc: Arc::clone(desc),
            matched: 0,
        }
    }

    pub fn update(&mut self, record: &[u8]) {
        self.matched += 1;
        match &mut self.state {
            AggState::Count(n) => *n += 1,
            AggState::AvgInt { field, sum, n } => {
                *sum += match self.desc.decode_field(record, *field) {
                    FieldValue::I64(v) => v as i128,
                    FieldValue::U32(v) => v as i128,
                    other => unreachable!("integer avg over {other:?}"),
                };
                *n += 1;
            }
            AggState::AvgFloat { field, vals } => {
                vals.push(numeric_as_f64(&self.desc.decode_field(record, *field)));
            }
            AggState::MinMax {
                field,
                want_max,
                best,
            } => {
                let v = self.desc.decode_field(record, *field);
                let better = match best.as_ref() {
                    None => true,
                    Some(b) => {
                        let ord = cmp_numeric(&v, b);
                        if *want_max {
                            ord.is_gt()
                        } else {
                            ord.is_lt()
                        }
                    }
                };
                if better {
                    *best = Some(v);
                }
            }
            AggState::Rows {
                projection,
                distinct,
                seen,
                rows,
            } => {
                let key: Vec<CellKey> = projection
                    .iter()
                    .map(|&f| cell_key(&self.desc, record, f))
                    .collect();
                if *distinct {
                    seen.entry(key).or_insert_with(|| {
                        projection
                            .iter()
                            .map(|&f| self.desc.decode_field(record, f))
                            .collect()
                    });
                } else {
                    let display = projection
                        .iter()
                        .map(|&f| self.desc.decode_field(record, f))
                        .collect();
                    rows.push((key, display));
                }
            }
        }
    }

    pub fn matched(&self) -> u64 {
        self.matched
    }

    pub fn finish(self) -> QueryValue {
        let apply_scale = |v: f64, scale: Option<f64>| match scale {
            Some(s) => v / s,
            None => v,
        };
        match self.state {
            AggState::Count(n) => QueryValue::Count(n),
            AggState::AvgInt { sum, n, .. } => QueryValue::Avg((n > 0).then(|| {
                apply_scale(sum as f64 / n as f64, self.scale)
            })),
            AggState::AvgFloat { mut vals, .. } => QueryValue::Avg((!vals.is_empty()).then(|| {
                // Canonical order plus compensated summation: the value is a
                // function of the matched multiset only.
                vals.sort_by(f64::total_cmp);
                let sum = neumaier_sum(&vals);
                apply_scale(sum / vals.len() as f64, self.scale)
            })),
            AggState::MinMax { best, want_max, .. } => {
                let scaled = best.map(|v| match self.scale {
                    Some(s) => FieldValue::F64(numeric_as_f64(&v) / s),
                    None => v,
                });
                if want_max {
                    QueryValue::Max(scaled)
                } else {
                    QueryValue::Min(scaled)
                }
            }
            AggState::Rows {
                projection,
                distinct,
                seen,
                rows,
            } => {
                let mut all: Vec<(Vec<CellKey>, Vec<FieldValue>)> = if distinct {
                    seen.into_iter().collect()
                } else {
                    rows
                };
                match self.order_by {
                    Some((field, dir)) => {
                        let pos = projection
                            .iter()
                            .position(|&f| f == field)
                            .expect("order_by field validated to be projected");
                        all.sort_by(|a, b| {
                            let ord = a.0[pos].cmp(&b.0[pos]);
                            let ord = match dir {
                                SortDir::Asc => ord,
                                SortDir::Desc => ord.reverse(),
                            };
                            ord.then_with(|| a.0.cmp(&b.0))
                        });
                    }
                    // Canonical tuple order keeps output independent of the
                    // iterator kind and segment visit order.
                    None => all.sort_by(|a, b| a.0.cmp(&b.0)),
                }
                if let Some(limit) = self.limit {
                    all.truncate(limit);
                }
                QueryValue::Rows(all.into_iter().map(|(_, d)| d).collect())
            }
        }
    }

}

/// Neumaier (improved Kahan) compensated summation.
pub fn neumaier_sum(vals: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in vals {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

// ---------------------------------------------------------------------------
// DSL parsing

struct Lexer<'a> {
    text: &'a str,
    at: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Sym(char), // ( ) [ ] , / *
    Op(&'static str),
    Eof,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer { text, at: 0 }
    }

    fn err<T>(&self, pos: usize, msg: impl Into<String>) -> Result<T, QueryError> {
        Err(QueryError::Parse {
            pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.text[self.at..].starts_with(|c: char| c.is_whitespace()) {
            self.at += 1;
        }
    }

    fn next(&mut self) -> Result<(usize, Tok), QueryError> {
        self.skip_ws();
        let pos = self.at;
        let rest = &self.text[self.at..];
        let Some(c) = rest.chars().next() else {
            return Ok((pos, Tok::Eof));
        };
        let tok = match c {
            '(' | ')' | '[' | ']' | ',' | '/' | '*' => {
                self.at += 1;
                Tok::Sym(c)
            }
            '>' | '<' => {
                if rest[1..].starts_with('=') {
                    self.at += 2;
                    Tok::Op(if c == '>' { ">=" } else { "<=" })
                } else {
                    self.at += 1;
                    Tok::Op(if c == '>' { ">" } else { "<" })
                }
            }
            '=' => {
                self.at += 1;
                Tok::Op("=")
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let end = rest
                    .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                    .unwrap_or(rest.len());
                self.at += end;
                Tok::Ident(rest[..end].to_string())
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let mut end = 1;
                let bytes = rest.as_bytes();
                while end < bytes.len()
                    && (bytes[end].is_ascii_digit()
                        || matches!(bytes[end], b'.' | b'e' | b'E')
                        || (matches!(bytes[end], b'+' | b'-')
                            && matches!(bytes[end - 1], b'e' | b'E')))
                {
                    end += 1;
                }
                self.at += end;
                Tok::Number(rest[..end].to_string())
            }
            other => return self.err(pos, format!("unexpected character `{other}`")),
        };
        Ok((pos, tok))
    }

    fn peek(&mut self) -> Result<(usize, Tok), QueryError> {
        let save = self.at;
        let t = self.next()?;
        self.at = save;
        Ok(t)
    }
}

fn keyword(t: &Tok) -> Option<String> {
    match t {
        Tok::Ident(s) => Some(s.to_ascii_lowercase()),
        _ => None,
    }
}

struct Parser<'a> {
    lx: Lexer<'a>,
    desc: &'a RecordDescriptor,
}

impl<'a> Parser<'a> {
    fn expect_sym(&mut self, c: char) -> Result<(), QueryError> {
        let (pos, t) = self.lx.next()?;
        if t != Tok::Sym(c) {
            return self.lx.err(pos, format!("expected `{c}`"));
        }
        Ok(())
    }

    fn expect_ident(&mut self) -> Result<(usize, String), QueryError> {
        let (pos, t) = self.lx.next()?;
        match t {
            Tok::Ident(s) => Ok((pos, s)),
            _ => self.lx.err(pos, "expected an identifier"),
        }
    }

    fn field_ordinal(&mut self, pos: usize, name: &str) -> Result<usize, QueryError> {
        self.desc
            .field_ordinal(name)
            .ok_or(QueryError::Parse {
                pos,
                msg: format!("unknown field `{name}`"),
            })
    }

    fn numeric_field(&mut self) -> Result<usize, QueryError> {
        let (pos, name) = self.expect_ident()?;
        let ord = self.field_ordinal(pos, &name)?;
        if self.desc.fields()[ord].ty.dim_kind().is_none() {
            return self.lx.err(pos, format!("field `{name}` is not numeric"));
        }
        Ok(ord)
    }

    fn number_literal(&mut self) -> Result<(usize, String), QueryError> {
        let (pos, t) = self.lx.next()?;
        match t {
            Tok::Number(s) => Ok((pos, s)),
            _ => self.lx.err(pos, "expected a number"),
        }
    }

    fn dim_value(&mut self, dim: usize, pos: usize, raw: &str) -> Result<DimValue, QueryError> {
        let kind = self.desc.dims()[dim].kind;
        let bad = |what: &str| QueryError::Parse {
            pos,
            msg: format!("`{raw}` is not a valid {what} for this dimension"),
        };
        Ok(match kind {
            crate::record::DimKind::Int64 => DimValue::Int64(raw.parse().map_err(|_| bad("int64"))?),
            crate::record::DimKind::Epoch => DimValue::Epoch(raw.parse().map_err(|_| bad("epoch"))?),
            crate::record::DimKind::Uint32 => {
                DimValue::Uint32(raw.parse().map_err(|_| bad("uint32"))?)
            }
            crate::record::DimKind::Float32 => {
                let v: f32 = raw.parse().map_err(|_| bad("float32"))?;
                if v.is_nan() {
                    return Err(bad("float32"));
                }
                DimValue::Float32(v)
            }
        })
    }

    fn scale_suffix(&mut self) -> Result<Option<f64>, QueryError> {
        if self.lx.peek()?.1 == Tok::Sym('/') {
            self.lx.next()?;
            let (pos, raw) = self.number_literal()?;
            let v: f64 = raw
                .parse()
                .map_err(|_| QueryError::Parse {
                    pos,
                    msg: format!("`{raw}` is not a valid divisor"),
                })?;
            if v == 0.0 || !v.is_finite() {
                return self.lx.err(pos, "divisor must be finite and nonzero");
            }
            Ok(Some(v))
        } else {
            Ok(None)
        }
    }

    fn parse(&mut self) -> Result<RangeQuery, QueryError> {
        let mut q = RangeQuery {
            bounds: vec![DimBounds::default(); self.desc.dim_count()],
            aggregate: Aggregate::None,
            scale: None,
            projection: None,
            distinct: false,
            order_by: None,
            limit: None,
        };

        // Select clause.
        let (pos, t) = self.lx.next()?;
        let kw = keyword(&t);
        match kw.as_deref() {
            Some("count") => {
                self.expect_sym('(')?;
                let (pos, t) = self.lx.next()?;
                if t != Tok::Sym('*') {
                    return self.lx.err(pos, "count takes `*`");
                }
                self.expect_sym(')')?;
                q.aggregate = Aggregate::CountAll;
            }
            Some(op @ ("avg" | "min" | "max")) => {
                self.expect_sym('(')?;
                let field = self.numeric_field()?;
                self.expect_sym(')')?;
                q.aggregate = match op {
                    "avg" => Aggregate::Avg(field),
                    "min" => Aggregate::Min(field),
                    _ => Aggregate::Max(field),
                };
                q.scale = self.scale_suffix()?;
            }
            Some(_) => {
                // Projection list, optionally prefixed by `distinct`.
                let mut fields = Vec::new();
                let first = match kw.as_deref() {
                    Some("distinct") => {
                        q.distinct = true;
                        None
                    }
                    _ => match &t {
                        Tok::Ident(name) => Some((pos, name.clone())),
                        _ => return self.lx.err(pos, "expected a field name"),
                    },
                };
                if let Some((pos, name)) = first {
                    fields.push(self.field_ordinal(pos, &name)?);
                } else {
                    let (pos, name) = self.expect_ident()?;
                    fields.push(self.field_ordinal(pos, &name)?);
                }
                while self.lx.peek()?.1 == Tok::Sym(',') {
                    self.lx.next()?;
                    let (pos, name) = self.expect_ident()?;
                    fields.push(self.field_ordinal(pos, &name)?);
                }
                q.projection = Some(fields);
            }
            None => return self.lx.err(pos, "expected an aggregate or projection"),
        }

        // Where clause.
        let (_, t) = self.lx.peek()?;
        if keyword(&t).as_deref() == Some("where") {
            self.lx.next()?;
            loop {
                self.conjunct(&mut q)?;
                let (_, t) = self.lx.peek()?;
                if keyword(&t).as_deref() == Some("and") {
                    self.lx.next()?;
                } else {
                    break;
                }
            }
        }

        // Tail: order by / limit, only for the projection path.
        loop {
            let (pos, t) = self.lx.peek()?;
            match keyword(&t).as_deref() {
                Some("order") => {
                    if q.aggregate != Aggregate::None {
                        return self.lx.err(pos, "order by requires a projection query");
                    }
                    self.lx.next()?;
                    let (pos2, t2) = self.lx.next()?;
                    if keyword(&t2).as_deref() != Some("by") {
                        return self.lx.err(pos2, "expected `by`");
                    }
                    let (fpos, name) = self.expect_ident()?;
                    let field = self.field_ordinal(fpos, &name)?;
                    let dir = match keyword(&self.lx.peek()?.1).as_deref() {
                        Some("asc") => {
                            self.lx.next()?;
                            SortDir::Asc
                        }
                        Some("desc") => {
                            self.lx.next()?;
                            SortDir::Desc
                        }
                        _ => SortDir::Asc,
                    };
                    q.order_by = Some((field, dir));
                }
                Some("limit") => {
                    if q.aggregate != Aggregate::None {
                        return self.lx.err(pos, "limit requires a projection query");
                    }
                    self.lx.next()?;
                    let (lpos, raw) = self.number_literal()?;
                    let n: usize = raw.parse().map_err(|_| QueryError::Parse {
                        pos: lpos,
                        msg: format!("`{raw}` is not a valid limit"),
                    })?;
                    q.limit = Some(n);
                }
                _ => break,
            }
        }

        let (pos, t) = self.lx.next()?;
        if t != Tok::Eof {
            return self.lx.err(pos, "trailing input after query");
        }

        // Order-by field must be computable after projection/dedup.
        if let (Some((field, _)), Some(proj)) = (&q.order_by, &q.projection) {
            if !proj.contains(field) {
                return Err(QueryError::OrderByOutsideProjection);
            }
        }
        // Validate bound pairs.
        for (d, b) in q.bounds.iter().enumerate() {
            if let (Some(lo), Some(hi)) = (&b.low, &b.high) {
                if lo.value.cmp_same_kind(&hi.value).is_gt() {
                    return Err(QueryError::Parse {
                        pos: 0,
                        msg: format!("dimension {d}: lower bound exceeds upper bound"),
                    });
                }
            }
        }
        Ok(q)
    }

    fn conjunct(&mut self, q: &mut RangeQuery) -> Result<(), QueryError> {
        let (fpos, name) = self.expect_ident()?;
        let ord = self.field_ordinal(fpos, &name)?;
        let Some(dim) = self.desc.dims().iter().position(|d| d.field == ord) else {
            return self.lx.err(
                fpos,
                format!("field `{name}` is not an indexing dimension; bounds may only constrain indexing dimensions"),
            );
        };

        let (opos, t) = self.lx.next()?;
        match (&t, keyword(&t).as_deref()) {
            (_, Some("in")) => {
                self.expect_sym('[')?;
                let (p1, raw1) = self.number_literal()?;
                let lo = self.dim_value(dim, p1, &raw1)?;
                self.expect_sym(',')?;
                let (p2, raw2) = self.number_literal()?;
                let hi = self.dim_value(dim, p2, &raw2)?;
                self.expect_sym(']')?;
                self.merge_low(q, dim, Bound { value: lo, inclusive: true });
                self.merge_high(q, dim, Bound { value: hi, inclusive: true });
            }
            (Tok::Op(op), _) => {
                let (p, raw) = self.number_literal()?;
                let v = self.dim_value(dim, p, &raw)?;
                match *op {
                    "=" => {
                        self.merge_low(q, dim, Bound { value: v, inclusive: true });
                        self.merge_high(q, dim, Bound { value: v, inclusive: true });
                    }
                    ">=" => self.merge_low(q, dim, Bound { value: v, inclusive: true }),
                    ">" => self.merge_low(q, dim, Bound { value: v, inclusive: false }),
                    "<=" => self.merge_high(q, dim, Bound { value: v, inclusive: true }),
                    "<" => self.merge_high(q, dim, Bound { value: v, inclusive: false }),
                    _ => unreachable!(),
                }
            }
            _ => return self.lx.err(opos, "expected a comparison or `in [lo, hi]`"),
        }
        Ok(())
    }

    /// Conjunction keeps the tighter of two lower bounds.
    fn merge_low(&mut self, q: &mut RangeQuery, dim: usize, b: Bound) {
        let slot = &mut q.bounds[dim].low;
        *slot = Some(match slot.take() {
            None => b,
            Some(old) => match old.value.cmp_same_kind(&b.value) {
                std::cmp::Ordering::Less => b,
                std::cmp::Ordering::Greater => old,
                std::cmp::Ordering::Equal => Bound {
                    value: old.value,
                    inclusive: old.inclusive && b.inclusive,
                },
            },
        });
    }

    /// Conjunction keeps the tighter of two upper bounds.
    fn merge_high(&mut self, q: &mut RangeQuery, dim: usize, b: Bound) {
        let slot = &mut q.bounds[dim].high;
        *slot = Some(match slot.take() {
            None => b,
            Some(old) => match old.value.cmp_same_kind(&b.value) {
                std::cmp::Ordering::Greater => b,
                std::cmp::Ordering::Less => old,
                std::cmp::Ordering::Equal => Bound {
                    value: old.value,
                    inclusive: old.inclusive && b.inclusive,
                },
            },
        });
    }
}

/// Parse a query in the text DSL against a descriptor.
pub fn parse_query(text: &str, desc: &RecordDescriptor) -> Result<RangeQuery, QueryError> {
    Parser {
        lx: Lexer::new(text),
        desc,
    }
    .parse()
}
