#![no_main]

use libfuzzer_sys::fuzz_target;
use lmrc::rcp::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(ck) = Checkpoint::from_json(s) {
            let _ = ck.encoder.hashing_encoder();
        }
    }
});
