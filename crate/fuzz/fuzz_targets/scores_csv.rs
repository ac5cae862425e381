#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::io::{format_scores, parse_scores};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_scores(text) {
        let out = format_scores(&rows);
        let again = parse_scores(&out).expect("own output parses");
        assert_eq!(format_scores(&again), out);
    }
});
