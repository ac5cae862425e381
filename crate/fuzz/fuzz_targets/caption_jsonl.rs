#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::io::{format_jsonl, parse_jsonl};
use mvad_core::msta::CaptionSample;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(items) = parse_jsonl::<CaptionSample>(text) {
        let out = format_jsonl(&items);
        let again: Vec<CaptionSample> = parse_jsonl(&out).expect("own output parses");
        assert_eq!(format_jsonl(&again), out);
    }
});
