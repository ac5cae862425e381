#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::io::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let again = Checkpoint::decode(&bytes).expect("own output decodes");
        assert_eq!(again.encode(), bytes);
    }
});
