//! Shared fixtures for the fuzz targets: one fixed mixed-kind descriptor so
//! segment and query fuzzing exercise every dimension kind plus char fields.

use std::sync::Arc;

use mdstore::record::{FieldSpec, FieldType};
use mdstore::{DescriptorRegistry, RecordDescriptor};
use uuid::Uuid;

pub fn fuzz_descriptor() -> Arc<RecordDescriptor> {
    Arc::new(
        RecordDescriptor::new(
            Uuid::from_u128(0xF022_0000_0000_4000_8000_0000_0000_0001),
            vec![
                FieldSpec {
                    name: "tag".into(),
                    ty: FieldType::Char { array_len: 6 },
                },
                FieldSpec {
                    name: "a".into(),
                    ty: FieldType::Int64,
                },
                FieldSpec {
                    name: "b".into(),
                    ty: FieldType::Uint32,
                },
                FieldSpec {
                    name: "c".into(),
                    ty: FieldType::Float32,
                },
                FieldSpec {
                    name: "t".into(),
                    ty: FieldType::Epoch,
                },
            ],
            &["a".into(), "b".into(), "c".into(), "t".into()],
        )
        .expect("static descriptor is valid"),
    )
}

pub fn fuzz_registry() -> DescriptorRegistry {
    DescriptorRegistry::with(fuzz_descriptor())
}
