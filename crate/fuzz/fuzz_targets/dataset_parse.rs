//! Parsing an untrusted dataset file must never panic; it may only return an
//! error. Round-trips of anything that parses must be stable.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = rmoe::data::parse_dataset(text) {
            let reserialized = rmoe::data::dataset_to_jsonl(&ds);
            let again = rmoe::data::parse_dataset(&reserialized).expect("round-trip must parse");
            assert_eq!(again.split.train, ds.split.train);
            assert_eq!(again.split.test, ds.split.test);
        }
    }
});
