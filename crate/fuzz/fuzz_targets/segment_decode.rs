//! Segment decoding on arbitrary bytes: no panics, and everything that
//! decodes must re-serialize to the identical buffer (byte fixpoint).

#![no_main]

use libfuzzer_sys::fuzz_target;
use mdstore::segment::DataSegment;
use mdstore_fuzz::fuzz_registry;

fuzz_target!(|data: &[u8]| {
    let registry = fuzz_registry();
    if let Ok(seg) = DataSegment::deserialize(data, &registry) {
        assert_eq!(seg.serialize(), data, "decode/encode fixpoint violated");
    }
});
