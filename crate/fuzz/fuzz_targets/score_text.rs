#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::msta::parse_score;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Some(y) = parse_score(&text) {
        assert!((0.0..=1.0).contains(&y));
    }
});
