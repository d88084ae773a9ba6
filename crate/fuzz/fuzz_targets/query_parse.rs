//! Query DSL parsing must never panic; parsed queries must satisfy their own
//! bound invariants.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mdstore_fuzz::fuzz_descriptor;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let desc = fuzz_descriptor();
    if let Ok(q) = mdstore::parse_query(text, &desc) {
        for b in &q.bounds {
            if let (Some(lo), Some(hi)) = (&b.low, &b.high) {
                assert!(
                    lo.value.cmp_same_kind(&hi.value).is_le(),
                    "parser accepted an inverted range"
                );
            }
        }
    }
});
