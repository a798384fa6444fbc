#![no_main]

use libfuzzer_sys::fuzz_target;
use lmrc::rcp::{parse_proposals, write_proposals};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_proposals(s) {
        let again = parse_proposals(&write_proposals(file.na_threshold, &file.pairs)).expect("written file reparses");
        assert_eq!(again.pairs.len(), file.pairs.len());
    }
});
