#![no_main]

use libfuzzer_sys::fuzz_target;
use lmrc::backend::parse_ledger;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok((entries, intact)) = parse_ledger(s) {
        assert!(intact <= s.len() && s.is_char_boundary(intact));
        let (again, _) = parse_ledger(&s[..intact]).expect("intact prefix reparses");
        assert_eq!(again.len(), entries.len());
    }
});
