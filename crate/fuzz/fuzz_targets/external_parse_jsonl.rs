#![no_main]

use libfuzzer_sys::fuzz_target;
use sentvae::evaldis::{diff_external, read_external_couples};

fuzz_target!(|data: &[u8]| {
    if let Ok(couples) = read_external_couples(data) {
        assert_eq!(diff_external(&couples).len(), couples.len());
    }
});
