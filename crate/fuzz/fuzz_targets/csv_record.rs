//! CSV row decoding and record encoding on arbitrary text: no panics, and
//! every encoded record has exactly the descriptor's fixed width.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mdstore_fuzz::fuzz_descriptor;

fuzz_target!(|data: &[u8]| {
    let desc = fuzz_descriptor();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(data);
    for row in reader.records().take(16) {
        let Ok(row) = row else { return };
        let cells: Vec<&str> = row.iter().collect();
        if let Ok(rec) = mdstore::encode_csv_row(&cells, &desc) {
            assert_eq!(rec.len(), desc.record_size());
            // Encoded records must decode on every dimension.
            for d in 0..desc.dim_count() {
                let _ = desc.extract_dim(&rec, d).unwrap();
            }
        }
    }
});
