#![no_main]

use flowrec::dataset::snapshot::{parse_snapshot_with_config, write_snapshot};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((ds, run)) = parse_snapshot_with_config(text) {
        // Anything accepted must survive a write/read cycle.
        let mut buf = Vec::new();
        write_snapshot(&ds, run.as_ref(), &mut buf).unwrap();
        let again = parse_snapshot_with_config(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(again.0.sequences, ds.sequences);
    }
});
