#![no_main]

use libfuzzer_sys::fuzz_target;
use sentvae::corpus::{detokenize, read_plain_text, tokenize, Vocab};

fuzz_target!(|data: &[u8]| {
    if let Ok(lines) = read_plain_text(data) {
        let vocab = Vocab::build(lines.iter());
        for words in &lines {
            assert!(!words.is_empty());
            let seq = tokenize(words, &vocab);
            assert_eq!(detokenize(&seq, &vocab).len(), words.len());
        }
    }
});
