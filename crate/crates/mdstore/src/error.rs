//! Store-level error type.

use std::path::PathBuf;

use thiserror::Error;
use uuid::Uuid;

use crate::kdtree::PoolError;
use crate::query::QueryError;
use crate::record::{DescriptorError, EncodeError};
use crate::segment::{AssembleError, SegmentError};
use crate::segmentation::ChunkError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("segment {0} missing from store")]
    MissingSegment(Uuid),
    #[error("segment {uuid} is corrupt: {source}")]
    CorruptSegment {
        uuid: Uuid,
        #[source]
        source: SegmentError,
    },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error("record type {got} does not match the store's descriptor {expected}")]
    DescriptorMismatch { got: Uuid, expected: Uuid },
    #[error("chunk of {got} records exceeds max_chunk_records {max}")]
    OversizeChunk { got: usize, max: usize },
    #[error("record {index}: {source}")]
    BadRecord {
        index: u64,
        #[source]
        source: EncodeError,
    },
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("store is shut down")]
    ShutDown,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
