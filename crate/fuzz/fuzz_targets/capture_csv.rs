#![no_main]

use libfuzzer_sys::fuzz_target;
use tracewave_core::capture::{format_record, parse_capture_str};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_capture_str(text) {
        // Whatever parsed must format to lines the parser accepts again.
        let mut again = String::new();
        for r in &records {
            again.push_str(&format_record(r));
            again.push('\n');
        }
        let reparsed = parse_capture_str(&again).expect("formatted capture reparses");
        assert_eq!(reparsed.len(), records.len());
    }
});
