//! Record descriptor XML parsing must never panic and must reject anything
//! that is not a well-formed descriptor.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = mdstore::parse_descriptor(text);
    }
});
