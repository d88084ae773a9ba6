//! Embeddable single-node multidimensional data store for high-velocity,
//! fixed-schema sensor records.
//!
//! Ingestion takes micro-batches (chunks) of fixed-width binary records,
//! divides each chunk into data segments, indexes every segment's bounding
//! hyperrectangle in an in-memory R*-tree, and persists segments
//! asynchronously — segments answer queries from memory before they are ever
//! written. Each segment embeds a packed kd-tree so range queries can prune
//! within a segment as well as across segments.

#![forbid(unsafe_code)]

pub mod error;
pub mod geom;
pub mod index;
pub mod kdtree;
pub mod query;
pub mod record;
pub mod rtree;
pub mod segment;
pub mod segmentation;
pub mod stats;
pub mod storage;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use query::{parse_query, IteratorKind, QueryResult, QueryValue, RangeQuery};
pub use record::{
    compare_dim, encode_csv_row, parse_descriptor, DescriptorRegistry, DimKind, DimValue,
    FieldSpec, FieldType, FieldValue, RecordDescriptor,
};
pub use segmentation::{Chunk, Scheme, SegmentationConfig};
pub use store::{FeedInput, FeedReport, Store, StoreConfig};
