#![no_main]

use flowrec::dataset::{parse_interactions, InputFormat};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for format in [InputFormat::Tsv, InputFormat::Csv, InputFormat::MovielensDat] {
        for strict in [false, true] {
            if let Ok(out) = parse_interactions(text, format, strict) {
                assert!(out.interactions.len() <= text.lines().count());
            }
        }
    }
});
