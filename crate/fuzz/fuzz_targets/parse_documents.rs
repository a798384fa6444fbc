#![no_main]

use libfuzzer_sys::fuzz_target;
use lmrc::corpus::{dump_documents, parse_documents};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let rels = lmrc::synthetic::relations();
    if let Ok(docs) = parse_documents(s, &rels) {
        // Anything accepted must survive a dump and reparse unchanged.
        let again = parse_documents(&dump_documents(&docs), &rels).expect("dump reparses");
        assert_eq!(again, docs);
    }
});
