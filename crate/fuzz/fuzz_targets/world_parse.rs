#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(world) = rmoe::data::SyntheticWorld::parse_json(text) {
            // anything that validates must be usable by the oracle
            let y = vec![0u8; world.n_events];
            let p = rmoe::data::oracle_predict(&world, 0, &y);
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }
});
