#![no_main]

use libfuzzer_sys::fuzz_target;
use sentvae::corpus::{generate_corpus, GrammarSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = GrammarSpec::from_json_str(text) {
        // Anything that validates must generate and survive a round trip.
        let again = GrammarSpec::from_json_str(&spec.to_json_string()).expect("re-parse");
        assert_eq!(again, spec);
        let _ = generate_corpus(&spec, 4, 0, 64);
    }
});
