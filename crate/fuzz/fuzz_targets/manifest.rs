#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use mvad_core::io::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = Manifest::parse(text, Path::new("root")) {
        let again = Manifest::parse(&m.to_json(), Path::new("root")).expect("own output parses");
        assert_eq!(again, m);
    }
});
