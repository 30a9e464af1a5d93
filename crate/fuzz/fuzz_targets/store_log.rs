#![no_main]

use libfuzzer_sys::fuzz_target;
use tracewave::store::{BlobHeader, Store, HEADER_LEN};

const KEY: [u8; 32] = [0x5a; 32];

// Opening an arbitrary log must either fail cleanly or yield blobs that
// all read back (or report erased/auth errors) without panicking.
fuzz_target!(|data: &[u8]| {
    if data.len() >= HEADER_LEN {
        let _ = BlobHeader::decode(&data[..HEADER_LEN]);
    }
    let path = std::env::temp_dir().join(format!("tracewave-fuzz-{}.log", std::process::id()));
    std::fs::write(&path, data).expect("write temp log");
    if let Ok(store) = Store::open(&path, &KEY) {
        let refs: Vec<_> = store.live().cloned().collect();
        for r in &refs {
            let _ = store.read(r);
        }
    }
    let _ = std::fs::remove_file(&path);
});
