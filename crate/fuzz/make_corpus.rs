//! Writes deterministic seed inputs for every fuzz target into `corpus/`.
//! Run from the fuzz directory: `cargo run --bin make_corpus`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use mdstore::kdtree::NodePool;
use mdstore::segment::assemble;
use mdstore::segmentation::{Chunk, PlannedGroup};
use mdstore_fuzz::fuzz_descriptor;

fn write(dir: &str, name: &str, bytes: &[u8]) {
    let d = Path::new("corpus").join(dir);
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join(name), bytes).unwrap();
}

fn main() {
    // Descriptor XML seeds: quoted and bare attribute forms plus a stub that
    // exercises the error path.
    write(
        "descriptor_parse",
        "taxi.xml",
        br#"<?xml version="1.0"?>
<description typeid="f1b2a3c4-d5e6-4788-99aa-bbccddeeff00"> <!-- UUID -->
<struct>
 <field name="medallion" type="char" array_len=33/>
 <field name="rate_code" type="int64_t"/>
 <field name="pickup_datetime" type="epoch_t"/>
 <field name="passenger_count" type="int64_t"/>
 <field name="trip_distance" type="float"/>
 <field name="pickup_longitude" type="float"/>
 <field name="pickup_latitude" type="float"/>
</struct>
<indexing-dimensions>
 <field name="pickup_latitude"/>
 <field name="pickup_longitude"/>
 <field name="pickup_datetime"/>
</indexing-dimensions>
</description>"#,
    );
    write(
        "descriptor_parse",
        "weather.xml",
        br#"<?xml version="1.0"?>
<description typeid="0a1b2c3d-4e5f-4071-8293-a4b5c6d7e8f9">
<struct>
 <field name="time" type="epoch_t"/>
 <field name="station" type="char" array_len="12"/>
 <field name="longitude" type="float"/>
 <field name="latitude" type="float"/>
 <field name="element_id" type="uint32_t"/>
</struct>
<indexing-dimensions>
 <field name="latitude"/>
 <field name="longitude"/>
</indexing-dimensions>
</description>"#,
    );
    write("descriptor_parse", "truncated.xml", b"<description typeid=\"x\"><struct>");

    // Query DSL seeds covering every clause.
    write(
        "query_parse",
        "avg_box.txt",
        b"avg(c) where a in [-10, 10] and b >= 3 and t < 1390000000",
    );
    write("query_parse", "count_eq.txt", b"count(*) where b = 1465135408");
    write("query_parse", "max_scaled.txt", b"max(b)/10.0 where c > -5.5 and c < 5.5");
    write(
        "query_parse",
        "distinct_tail.txt",
        b"distinct tag, c where b = 7 order by c desc limit 3",
    );
    write("query_parse", "bare_count.txt", b"count(*)");

    // CSV rows for the fixed descriptor (tag, a, b, c, t).
    write("csv_record", "rows.csv", b"abc,42,7,0.5,1357318152\nxy,-1,3,2.25,0\n");
    write("csv_record", "bad_cell.csv", b"tag,notanint,7,0.5,0\n");

    // Serialized segments: one single-record, one larger, one truncated.
    let desc = fuzz_descriptor();
    let make_segment = |rows: &[(&str, i64, u32, f32, i64)]| {
        let mut bytes = Vec::new();
        for (tag, a, b, c, t) in rows {
            let cells = [
                tag.to_string(),
                a.to_string(),
                b.to_string(),
                c.to_string(),
                t.to_string(),
            ];
            let refs: Vec<&str> = cells.iter().map(|s| s.as_str()).collect();
            bytes.extend_from_slice(&mdstore::encode_csv_row(&refs, &desc).unwrap());
        }
        let count = rows.len();
        let chunk = Chunk::from_vec(bytes, Arc::clone(&desc)).unwrap();
        let pool = NodePool::new(count, 1).unwrap();
        let group = PlannedGroup {
            records: (0..count as u32).collect(),
            initial_dim: 0,
            subtree: None,
            bounds: None,
        };
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        assemble(&chunk, &group, &pool, &mut rng).unwrap().serialize()
    };
    let one = make_segment(&[("a", 1, 2, 0.5, 100)]);
    write("segment_decode", "one_record.mdseg", &one);
    let many = make_segment(&[
        ("aa", 5, 1, -1.5, 10),
        ("bb", -3, 9, 2.25, 20),
        ("cc", 8, 4, 0.0, 30),
        ("dd", 0, 2, 7.5, 40),
        ("ee", 2, 2, -0.25, 50),
    ]);
    write("segment_decode", "five_records.mdseg", &many);
    write("segment_decode", "truncated.bin", &one[..one.len() / 2]);

    println!("corpus seeds written under fuzz/corpus/");
}
