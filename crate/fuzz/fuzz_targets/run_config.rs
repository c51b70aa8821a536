#![no_main]

use flowrec::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.to_toml()).expect("serialized config parses");
        assert_eq!(again.hash(), cfg.hash());
    }
});
