#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = dpmp::config::RunConfig::from_toml_str(text) {
            // Accepted configs round-trip through the canonical dump.
            let dumped = cfg.canonical_dump();
            let again = dpmp::config::RunConfig::from_toml_str(&dumped).unwrap();
            assert_eq!(cfg, again);
        }
    }
});
