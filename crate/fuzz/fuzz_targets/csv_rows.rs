#![no_main]

use libfuzzer_sys::fuzz_target;
use simdomain::data::{read_csv, FieldSpec, Schema};

fuzz_target!(|data: &[u8]| {
    let schema = Schema::new(
        3,
        vec![
            FieldSpec { name: "f0".into(), vocab: 10 },
            FieldSpec { name: "f1".into(), vocab: 4 },
        ],
    )
    .unwrap();
    if let Ok(load) = read_csv(data, &schema) {
        for s in load.dataset.domains.iter().flatten() {
            assert!(s.domain < 3 && s.label <= 1);
            assert!(s.features[0] < 10 && s.features[1] < 4);
        }
    }
});
