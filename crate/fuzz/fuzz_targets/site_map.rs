#![no_main]

use libfuzzer_sys::fuzz_target;
use tracewave_core::simulate::parse_site_map;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_site_map(text);
    }
});
