#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::io::FeatureFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = FeatureFile::decode(data) {
        assert_eq!(file.encode(), data);
        assert_eq!(file.data.len(), file.rows as usize * file.cols as usize);
    }
});
