#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::msta::{FileEmbedder, TextEmbedder};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(e) = FileEmbedder::parse(text) {
        assert!(e.dim() > 0);
    }
});
