#![no_main]

use libfuzzer_sys::fuzz_target;
use tracewave_core::tracing::{format_traces, parse_traces};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(traces) = parse_traces(text) {
        let again = parse_traces(&format_traces(&traces)).expect("formatted traces reparse");
        assert_eq!(again.len(), traces.len());
    }
});
