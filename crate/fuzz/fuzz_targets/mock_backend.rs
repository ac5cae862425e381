#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::msta::{LlmBackend, MockBackend};

fuzz_target!(|data: &[u8]| {
    let prompt = String::from_utf8_lossy(data);
    let mock = MockBackend::new(7);
    assert_eq!(
        mock.complete(&prompt).unwrap(),
        mock.complete(&prompt).unwrap()
    );
});
