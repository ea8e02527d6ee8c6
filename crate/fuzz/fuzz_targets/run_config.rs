#![no_main]

use libfuzzer_sys::fuzz_target;
use simdomain::experiment::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::parse(text) {
        let _ = config.batch_quotas();
        let _ = config.hash();
        let _ = config.to_toml().map(|t| RunConfig::parse(&t));
    }
});
