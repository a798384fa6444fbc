#![no_main]

use libfuzzer_sys::fuzz_target;
use lmrc::pipeline::{parse_responses, write_responses};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_responses(s) {
        let again = parse_responses(&write_responses(&file)).expect("written file reparses");
        assert_eq!(again, file);
    }
});
