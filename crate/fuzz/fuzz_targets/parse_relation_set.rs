#![no_main]

use libfuzzer_sys::fuzz_target;
use lmrc::corpus::parse_relation_set;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(rels) = parse_relation_set(s) {
            for (id, name) in rels.iter() {
                assert_eq!(rels.name(id), Some(name));
            }
        }
    }
});
