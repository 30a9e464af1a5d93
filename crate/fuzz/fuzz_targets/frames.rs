#![no_main]

use libfuzzer_sys::fuzz_target;
use tracewave_core::features::{export_frames, parse_frames};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((layout, frames)) = parse_frames(text) {
        let (l2, f2) = parse_frames(&export_frames(&frames, &layout)).expect("exported frames reparse");
        assert_eq!(l2.len(), layout.len());
        assert_eq!(f2.len(), frames.len());
    }
});
