#![no_main]

use libfuzzer_sys::fuzz_target;
use sentvae::corpus::{read_corpus_jsonl, write_corpus_jsonl};

fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = read_corpus_jsonl(data) {
        let mut buf = Vec::new();
        write_corpus_jsonl(&mut buf, &corpus).unwrap();
        assert_eq!(read_corpus_jsonl(&buf[..]).unwrap(), corpus);
    }
});
