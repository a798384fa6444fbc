#![no_main]

use libfuzzer_sys::fuzz_target;
use lmrc::align::parse_response;
use lmrc::prompting::PromptMode;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    for mode in [PromptMode::BaselineDocre, PromptMode::RelationClassification] {
        let (triples, rejected) = parse_response(s, "doc", 0, mode);
        assert!(triples.len() + rejected.len() <= s.lines().count());
    }
});
