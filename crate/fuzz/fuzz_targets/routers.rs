#![no_main]

use libfuzzer_sys::fuzz_target;
use tracewave_core::simulate::{format_routers, parse_routers};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(routers) = parse_routers(text, None) {
        let again = parse_routers(&format_routers(&routers), None).expect("formatted routers reparse");
        assert_eq!(again.len(), routers.len());
    }
});
