#![no_main]

use flowrec::sampler::trace_import;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = trace_import(data);
});
