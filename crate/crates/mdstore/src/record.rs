//! Record descriptors and the fixed-width binary record layout.
//!
//! A record descriptor names the ordered fields of a record, their types, and
//! the subset of numerical fields used as indexing dimensions. Descriptors are
//! supplied as XML files; see [`parse_descriptor`]. Records themselves are
//! fixed-width little-endian byte strings with no per-record framing.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;
use uuid::Uuid;

mod xml;

/// Type of a record field. Byte widths are fixed per type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldType {
    /// Fixed-length character array, zero-padded.
    Char { array_len: u32 },
    Int64,
    Uint32,
    Float32,
    /// Seconds since the Unix epoch, stored as a signed 64-bit integer.
    Epoch,
}

impl FieldType {
    pub fn width(&self) -> usize {
        match self {
            FieldType::Char { array_len } => *array_len as usize,
            FieldType::Int64 | FieldType::Epoch => 8,
            FieldType::Uint32 | FieldType::Float32 => 4,
        }
    }

    pub fn dim_kind(&self) -> Option<DimKind> {
        match self {
            FieldType::Char { .. } => None,
            FieldType::Int64 => Some(DimKind::Int64),
            FieldType::Uint32 => Some(DimKind::Uint32),
            FieldType::Float32 => Some(DimKind::Float32),
            FieldType::Epoch => Some(DimKind::Epoch),
        }
    }

    fn parse(name: &str) -> Option<(Self, bool)> {
        // Returns (type, wants_array_len).
        match name {
            "char" => Some((FieldType::Char { array_len: 0 }, true)),
            "int64_t" => Some((FieldType::Int64, false)),
            "uint32_t" => Some((FieldType::Uint32, false)),
            "float" => Some((FieldType::Float32, false)),
            "epoch_t" => Some((FieldType::Epoch, false)),
            _ => None,
        }
    }
}

/// One field of a record: name plus type (the type carries the byte width).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub ty: FieldType,
}

/// Kind tag for an indexing-dimension value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DimKind {
    Int64,
    Uint32,
    Float32,
    Epoch,
}

/// A decoded indexing-dimension value. Comparison is defined only between
/// values of the same kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimValue {
    Int64(i64),
    Uint32(u32),
    Float32(f32),
    Epoch(i64),
}

impl DimValue {
    pub fn kind(&self) -> DimKind {
        match self {
            DimValue::Int64(_) => DimKind::Int64,
            DimValue::Uint32(_) => DimKind::Uint32,
            DimValue::Float32(_) => DimKind::Float32,
            DimValue::Epoch(_) => DimKind::Epoch,
        }
    }

    /// Total order within a kind. Callers must guarantee matching kinds; use
    /// [`compare_dim`] for the checked form. Floats order numerically with
    /// -0.0 == 0.0; NaN (rejected at ingest, but reachable on corrupt input)
    /// orders above every number so the order stays total.
    pub fn cmp_same_kind(&self, other: &DimValue) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        match (self, other) {
            (DimValue::Int64(a), DimValue::Int64(b)) => a.cmp(b),
            (DimValue::Uint32(a), DimValue::Uint32(b)) => a.cmp(b),
            (DimValue::Epoch(a), DimValue::Epoch(b)) => a.cmp(b),
            (DimValue::Float32(a), DimValue::Float32(b)) => match a.partial_cmp(b) {
                Some(ord) => ord,
                None => a.is_nan().cmp(&b.is_nan()),
            },
            _ => {
                debug_assert!(false, "kind mismatch in cmp_same_kind");
                Ordering::Equal
            }
        }
    }

    /// Monotone (order-preserving) map to f64. Exact for uint32, float32 and
    /// realistic epoch values; int64 beyond 2^53 rounds, which is fine for the
    /// conservative index-level geometry this feeds.
    pub fn to_f64_lossy(&self) -> f64 {
        match self {
            DimValue::Int64(v) | DimValue::Epoch(v) => *v as f64,
            DimValue::Uint32(v) => *v as f64,
            DimValue::Float32(v) => *v as f64,
        }
    }

    /// Raw little-endian encoding zero-extended to 8 bytes, as stored in the
    /// segment dims section.
    pub fn to_raw8(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        match self {
            DimValue::Int64(v) | DimValue::Epoch(v) => out.copy_from_slice(&v.to_le_bytes()),
            DimValue::Uint32(v) => out[..4].copy_from_slice(&v.to_le_bytes()),
            DimValue::Float32(v) => out[..4].copy_from_slice(&v.to_le_bytes()),
        }
        out
    }

    /// Inverse of [`DimValue::to_raw8`]. Fails if the zero-extension padding
    /// of a 4-byte kind is non-zero.
    pub fn from_raw8(kind: DimKind, raw: &[u8; 8]) -> Option<DimValue> {
        let pad_zero = raw[4..] == [0u8; 4];
        match kind {
            DimKind::Int64 => Some(DimValue::Int64(i64::from_le_bytes(*raw))),
            DimKind::Epoch => Some(DimValue::Epoch(i64::from_le_bytes(*raw))),
            DimKind::Uint32 => pad_zero
                .then(|| DimValue::Uint32(u32::from_le_bytes(raw[..4].try_into().unwrap()))),
            DimKind::Float32 => pad_zero
                .then(|| DimValue::Float32(f32::from_le_bytes(raw[..4].try_into().unwrap()))),
        }
    }

    pub fn is_nan(&self) -> bool {
        matches!(self, DimValue::Float32(v) if v.is_nan())
    }

    /// Canonical representative for storage in bounds: -0.0 folds to +0.0 so
    /// that equal bounds always share one byte encoding.
    pub fn canonical(&self) -> DimValue {
        match self {
            DimValue::Float32(v) if *v == 0.0 => DimValue::Float32(0.0),
            other => *other,
        }
    }
}

/// Compare two dimension values, erroring on kind mismatch.
pub fn compare_dim(a: &DimValue, b: &DimValue) -> Result<std::cmp::Ordering, DimError> {
    if a.kind() != b.kind() {
        return Err(DimError::KindMismatch {
            left: a.kind(),
            right: b.kind(),
        });
    }
    Ok(a.cmp_same_kind(b))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DimError {
    #[error("dimension kind mismatch: {left:?} vs {right:?}")]
    KindMismatch { left: DimKind, right: DimKind },
    #[error("dimension index {index} out of range (descriptor has {dims} indexing dimensions)")]
    OutOfRange { index: usize, dims: usize },
    #[error("record length {got} does not match record size {expected}")]
    BadRecordLength { got: usize, expected: usize },
}

/// A resolved indexing dimension: which field it reads and where.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimSpec {
    /// Ordinal of the backing field in the descriptor's field list.
    pub field: usize,
    pub kind: DimKind,
    /// Byte offset of the field within a record.
    pub offset: usize,
}

/// Parsed record descriptor: ordered fields plus ordered indexing dimensions.
/// Immutable after parse; share via `Arc` across threads freely.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordDescriptor {
    type_uuid: Uuid,
    fields: Vec<FieldSpec>,
    offsets: Vec<usize>,
    record_size: usize,
    dims: Vec<DimSpec>,
}

impl RecordDescriptor {
    /// Build a descriptor directly (the XML path goes through
    /// [`parse_descriptor`]). `indexing_dims` are field names in order.
    pub fn new(
        type_uuid: Uuid,
        fields: Vec<FieldSpec>,
        indexing_dims: &[String],
    ) -> Result<Self, DescriptorError> {
        if fields.len() < 2 {
            return Err(DescriptorError::TooFewFields(fields.len()));
        }
        let mut seen = HashMap::new();
        for (i, f) in fields.iter().enumerate() {
            if let FieldType::Char { array_len } = f.ty {
                if array_len < 1 {
                    return Err(DescriptorError::BadArrayLen(f.name.clone()));
                }
            }
            if seen.insert(f.name.clone(), i).is_some() {
                return Err(DescriptorError::DuplicateField(f.name.clone()));
            }
        }
        if indexing_dims.len() < 2 {
            return Err(DescriptorError::TooFewDims(indexing_dims.len()));
        }
        let mut offsets = Vec::with_capacity(fields.len());
        let mut off = 0usize;
        for f in &fields {
            offsets.push(off);
            off += f.ty.width();
        }
        let mut dims = Vec::with_capacity(indexing_dims.len());
        let mut dim_seen = HashMap::new();
        for name in indexing_dims {
            let &ord = seen
                .get(name)
                .ok_or_else(|| DescriptorError::UnknownDim(name.clone()))?;
            let kind = fields[ord]
                .ty
                .dim_kind()
                .ok_or_else(|| DescriptorError::NonNumericDim(name.clone()))?;
            if dim_seen.insert(ord, ()).is_some() {
                return Err(DescriptorError::DuplicateDim(name.clone()));
            }
            dims.push(DimSpec {
                field: ord,
                kind,
                offset: offsets[ord],
            });
        }
        Ok(RecordDescriptor {
            type_uuid,
            fields,
            offsets,
            record_size: off,
            dims,
        })
    }

    pub fn type_uuid(&self) -> Uuid {
        self.type_uuid
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    /// Byte offset of field `ordinal` within a record.
    pub fn field_offset(&self, ordinal: usize) -> usize {
        self.offsets[ordinal]
    }

    pub fn field_ordinal(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn record_size(&self) -> usize {
        self.record_size
    }

    pub fn dims(&self) -> &[DimSpec] {
        &self.dims
    }

    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    /// Whether field `ordinal` backs one of the indexing dimensions.
    pub fn is_dim_field(&self, ordinal: usize) -> bool {
        self.dims.iter().any(|d| d.field == ordinal)
    }

    /// Decode indexing dimension `dim_index` from a full record.
    pub fn extract_dim(&self, record: &[u8], dim_index: usize) -> Result<DimValue, DimError> {
        if dim_index >= self.dims.len() {
            return Err(DimError::OutOfRange {
                index: dim_index,
                dims: self.dims.len(),
            });
        }
        if record.len() != self.record_size {
            return Err(DimError::BadRecordLength {
                got: record.len(),
                expected: self.record_size,
            });
        }
        Ok(self.extract_dim_unchecked(record, dim_index))
    }

    /// Like [`Self::extract_dim`] without the bounds checks; record length and
    /// dim index must be valid.
    #[inline]
    pub fn extract_dim_unchecked(&self, record: &[u8], dim_index: usize) -> DimValue {
        let d = &self.dims[dim_index];
        let at = &record[d.offset..];
        match d.kind {
            DimKind::Int64 => DimValue::Int64(i64::from_le_bytes(at[..8].try_into().unwrap())),
            DimKind::Epoch => DimValue::Epoch(i64::from_le_bytes(at[..8].try_into().unwrap())),
            DimKind::Uint32 => DimValue::Uint32(u32::from_le_bytes(at[..4].try_into().unwrap())),
            DimKind::Float32 => {
                DimValue::Float32(f32::from_le_bytes(at[..4].try_into().unwrap()))
            }
        }
    }

    /// Decode field `ordinal` of a record into a display value.
    pub fn decode_field(&self, record: &[u8], ordinal: usize) -> FieldValue {
        let f = &self.fields[ordinal];
        let at = &record[self.offsets[ordinal]..];
        match f.ty {
            FieldType::Char { array_len } => {
                let bytes = &at[..array_len as usize];
                let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
                FieldValue::Str(String::from_utf8_lossy(&bytes[..end]).into_owned())
            }
            FieldType::Int64 => FieldValue::I64(i64::from_le_bytes(at[..8].try_into().unwrap())),
            FieldType::Epoch => FieldValue::I64(i64::from_le_bytes(at[..8].try_into().unwrap())),
            FieldType::Uint32 => FieldValue::U32(u32::from_le_bytes(at[..4].try_into().unwrap())),
            FieldType::Float32 => {
                FieldValue::F32(f32::from_le_bytes(at[..4].try_into().unwrap()))
            }
        }
    }

    /// Reject records whose float32 indexing dimensions hold NaN. NaN would
    /// break the total order every tree in the store relies on.
    pub fn check_dims_finite(&self, record: &[u8]) -> Result<(), EncodeError> {
        for (i, d) in self.dims.iter().enumerate() {
            if d.kind == DimKind::Float32 {
                let v = f32::from_le_bytes(record[d.offset..d.offset + 4].try_into().unwrap());
                if v.is_nan() {
                    return Err(EncodeError::NanDim { dim: i });
                }
            }
        }
        Ok(())
    }
}

/// A decoded field value, for projections and display.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Str(String),
    I64(i64),
    U32(u32),
    F32(f32),
    /// Produced only by scaled aggregates.
    F64(f64),
}

impl std::fmt::Display for FieldValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FieldValue::Str(s) => write!(f, "{s}"),
            FieldValue::I64(v) => write!(f, "{v}"),
            FieldValue::U32(v) => write!(f, "{v}"),
            FieldValue::F32(v) => write!(f, "{v}"),
            FieldValue::F64(v) => write!(f, "{v}"),
        }
    }
}

/// Maps record-type UUIDs to descriptors, for segment decoding.
#[derive(Debug, Default, Clone)]
pub struct DescriptorRegistry {
    map: HashMap<Uuid, Arc<RecordDescriptor>>,
}

impl DescriptorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(desc: Arc<RecordDescriptor>) -> Self {
        let mut r = Self::new();
        r.register(desc);
        r
    }

    pub fn register(&mut self, desc: Arc<RecordDescriptor>) {
        self.map.insert(desc.type_uuid(), desc);
    }

    pub fn get(&self, uuid: &Uuid) -> Option<&Arc<RecordDescriptor>> {
        self.map.get(uuid)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DescriptorError {
    #[error("xml error at byte {pos}: {msg}")]
    Xml { pos: usize, msg: String },
    #[error("missing required element <{0}>")]
    MissingElement(&'static str),
    #[error("missing attribute `{attr}` on <{element}>")]
    MissingAttr {
        element: &'static str,
        attr: &'static str,
    },
    #[error("unexpected element <{0}>")]
    UnexpectedElement(String),
    #[error("unknown field type `{0}`")]
    UnknownFieldType(String),
    #[error("field `{0}`: array_len is only valid for char fields")]
    ArrayLenOnNonChar(String),
    #[error("field `{0}`: invalid array_len")]
    BadArrayLen(String),
    #[error("invalid typeid: {0}")]
    BadTypeId(String),
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("descriptor has {0} fields; at least 2 required")]
    TooFewFields(usize),
    #[error("descriptor has {0} indexing dimensions; at least 2 required")]
    TooFewDims(usize),
    #[error("indexing dimension `{0}` names no field")]
    UnknownDim(String),
    #[error("indexing dimension `{0}` is not a numerical field")]
    NonNumericDim(String),
    #[error("duplicate indexing dimension `{0}`")]
    DuplicateDim(String),
}

/// Parse a record descriptor XML document.
///
/// The accepted document shape is `<description typeid="...">` containing a
/// `<struct>` of `<field name type [array_len]>` elements and an
/// `<indexing-dimensions>` list of `<field name>` elements. Attribute values
/// may be quoted or bare (`array_len=33`), matching descriptor files in the
/// wild.
pub fn parse_descriptor(xml_text: &str) -> Result<RecordDescriptor, DescriptorError> {
    let doc = xml::parse(xml_text).map_err(|e| DescriptorError::Xml {
        pos: e.pos,
        msg: e.msg,
    })?;
    if doc.name != "description" {
        return Err(DescriptorError::MissingElement("description"));
    }
    let typeid = doc
        .attr("typeid")
        .ok_or(DescriptorError::MissingAttr {
            element: "description",
            attr: "typeid",
        })?;
    let type_uuid =
        Uuid::parse_str(typeid).map_err(|_| DescriptorError::BadTypeId(typeid.to_string()))?;

    let mut fields = Vec::new();
    let mut dims: Vec<String> = Vec::new();
    let mut saw_struct = false;
    let mut saw_dims = false;
    for child in &doc.children {
        match child.name.as_str() {
            "struct" => {
                saw_struct = true;
                for fe in &child.children {
                    if fe.name != "field" {
                        return Err(DescriptorError::UnexpectedElement(fe.name.clone()));
                    }
                    let name = fe
                        .attr("name")
                        .ok_or(DescriptorError::MissingAttr {
                            element: "field",
                            attr: "name",
                        })?
                        .to_string();
                    let ty_name = fe.attr("type").ok_or(DescriptorError::MissingAttr {
                        element: "field",
                        attr: "type",
                    })?;
                    let (mut ty, wants_len) = FieldType::parse(ty_name)
                        .ok_or_else(|| DescriptorError::UnknownFieldType(ty_name.to_string()))?;
                    match (fe.attr("array_len"), wants_len) {
                        (Some(len), true) => {
                            let n: u32 = len
                                .parse()
                                .ok()
                                .filter(|&n| n >= 1)
                                .ok_or_else(|| DescriptorError::BadArrayLen(name.clone()))?;
                            ty = FieldType::Char { array_len: n };
                        }
                        (None, true) => return Err(DescriptorError::BadArrayLen(name.clone())),
                        (Some(_), false) => {
                            return Err(DescriptorError::ArrayLenOnNonChar(name.clone()))
                        }
                        (None, false) => {}
                    }
                    fields.push(FieldSpec { name, ty });
                }
            }
            "indexing-dimensions" => {
                saw_dims = true;
                for fe in &child.children {
                    if fe.name != "field" {
                        return Err(DescriptorError::UnexpectedElement(fe.name.clone()));
                    }
                    let name = fe.attr("name").ok_or(DescriptorError::MissingAttr {
                        element: "field",
                        attr: "name",
                    })?;
                    dims.push(name.to_string());
                }
            }
            other => return Err(DescriptorError::UnexpectedElement(other.to_string())),
        }
    }
    if !saw_struct {
        return Err(DescriptorError::MissingElement("struct"));
    }
    if !saw_dims {
        return Err(DescriptorError::MissingElement("indexing-dimensions"));
    }
    RecordDescriptor::new(type_uuid, fields, &dims)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("row has {got} cells, descriptor has {expected} fields")]
    Arity { got: usize, expected: usize },
    #[error("field `{field}`: cannot parse `{cell}` as {kind}")]
    BadCell {
        field: String,
        cell: String,
        kind: &'static str,
    },
    #[error("indexing dimension {dim} is NaN")]
    NanDim { dim: usize },
}

/// Encode one CSV row into a fixed-width binary record.
///
/// Char cells are copied raw and zero-padded; cells longer than the declared
/// array length are truncated. Numeric cells parse after trimming whitespace.
/// NaN in a float field that backs an indexing dimension is rejected.
pub fn encode_csv_row(row: &[&str], desc: &RecordDescriptor) -> Result<Vec<u8>, EncodeError> {
    if row.len() != desc.fields.len() {
        return Err(EncodeError::Arity {
            got: row.len(),
            expected: desc.fields.len(),
        });
    }
    let mut out = vec![0u8; desc.record_size];
    for (ord, (cell, f)) in row.iter().zip(&desc.fields).enumerate() {
        let dst = &mut out[desc.offsets[ord]..desc.offsets[ord] + f.ty.width()];
        let bad = |kind: &'static str| EncodeError::BadCell {
            field: f.name.clone(),
            cell: cell.to_string(),
            kind,
        };
        match f.ty {
            FieldType::Char { .. } => {
                let bytes = cell.as_bytes();
                let n = bytes.len().min(dst.len());
                dst[..n].copy_from_slice(&bytes[..n]);
            }
            FieldType::Int64 | FieldType::Epoch => {
                let v: i64 = cell.trim().parse().map_err(|_| bad("int64"))?;
                dst.copy_from_slice(&v.to_le_bytes());
            }
            FieldType::Uint32 => {
                let v: u32 = cell.trim().parse().map_err(|_| bad("uint32"))?;
                dst.copy_from_slice(&v.to_le_bytes());
            }
            FieldType::Float32 => {
                let v: f32 = cell.trim().parse().map_err(|_| bad("float32"))?;
                if v.is_nan() && desc.is_dim_field(ord) {
                    let dim = desc.dims.iter().position(|d| d.field == ord).unwrap();
                    return Err(EncodeError::NanDim { dim });
                }
                dst.copy_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}
