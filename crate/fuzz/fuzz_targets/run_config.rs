#![no_main]

use libfuzzer_sys::fuzz_target;
use mvad_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse_ini(text) {
        let again = RunConfig::parse_ini(&cfg.to_ini()).expect("own output parses");
        assert_eq!(again.to_ini(), cfg.to_ini());
    }
});
