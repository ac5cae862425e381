#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::io::{format_frame_labels, parse_frame_labels};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(labels) = parse_frame_labels(text) {
        assert_eq!(
            parse_frame_labels(&format_frame_labels(&labels)).unwrap(),
            labels
        );
    }
});
