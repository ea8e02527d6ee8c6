#![no_main]

use libfuzzer_sys::fuzz_target;
use simdomain::data::Schema;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schema) = Schema::parse(text) {
        assert_eq!(Schema::parse(&schema.to_toml()).unwrap(), schema);
    }
});
